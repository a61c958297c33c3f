#pragma once

// Post-norm Transformer encoder-decoder with sinusoidal positions, templated
// on the scalar type so the same code runs in float for training and in
// double for gradient verification.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "g2p/autograd.hpp"
#include "g2p/data.hpp"

namespace g2p {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t num_layers = 6;
  std::size_t hidden_size = 512;
  std::size_t embed_size = 512;
  std::size_t ff_size = 2048;
  std::size_t num_heads = 8;
  double dropout = 0.1;
  std::size_t max_positions = 128;
  double label_smoothing = 0.0;

  // 2 layers, hidden 64, 2 heads, ff 256: the desk-scale configuration.
  static ModelConfig micro() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_size = 64;
    c.embed_size = 64;
    c.ff_size = 256;
    c.num_heads = 2;
    return c;
  }

  void validate() const {
    if (num_layers == 0 || hidden_size == 0 || embed_size == 0 || ff_size == 0 ||
        num_heads == 0 || max_positions == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (embed_size != hidden_size) throw ConfigError("embed_size must equal hidden_size");
    if (hidden_size % num_heads != 0) {
      throw ConfigError("hidden_size " + std::to_string(hidden_size) +
                        " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw ConfigError("label_smoothing must be in [0, 1)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// Right-padded id matrix, row-major [batch, length].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  static TokenBatch from(std::span<const std::vector<std::int32_t>> seqs) {
    TokenBatch b;
    b.batch = seqs.size();
    for (const auto& s : seqs) b.length = std::max(b.length, s.size());
    if (b.batch == 0 || b.length == 0) throw nn::TensorError("empty token batch");
    b.ids.assign(b.batch * b.length, Vocabulary::kPad);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.length));
    }
    return b;
  }

  std::int32_t at(std::size_t row, std::size_t col) const { return ids[row * length + col]; }
  bool is_pad(std::size_t row, std::size_t col) const { return at(row, col) == Vocabulary::kPad; }

  std::size_t row_length(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < length; ++j) {
      if (!is_pad(row, j)) n = j + 1;
    }
    return n;
  }
};

template <class Rng = std::mt19937_64>
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;
};

template <std::floating_point T>
class TransformerModel {
 public:
  using Tensor = nn::Tensor<T>;
  using Graph = nn::Graph<T>;
  using Var = nn::Var;

  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    Tensor gamma, beta;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Attention self_attn;
    Norm norm1;
    FeedForward ff;
    Norm norm2;
  };
  struct DecoderLayer {
    Attention self_attn;
    Norm norm1;
    Attention cross_attn;
    Norm norm2;
    FeedForward ff;
    Norm norm3;
  };

  // Allocates correctly shaped parameters: weights zero, norm gains one.
  TransformerModel(const ModelConfig& config, std::size_t source_vocab_size,
                   std::size_t target_vocab_size)
      : config_(config), source_vocab_size_(source_vocab_size), target_vocab_size_(target_vocab_size) {
    config_.validate();
    if (source_vocab_size == 0 || target_vocab_size == 0) throw ConfigError("empty vocabulary");
    const std::size_t h = config_.hidden_size, f = config_.ff_size;
    source_embed_ = Tensor({source_vocab_size, h});
    target_embed_ = Tensor({target_vocab_size, h});
    encoder_.resize(config_.num_layers);
    decoder_.resize(config_.num_layers);
    for (auto& l : encoder_) {
      l.self_attn = make_attention(h);
      l.norm1 = make_norm(h);
      l.ff = make_ff(h, f);
      l.norm2 = make_norm(h);
    }
    for (auto& l : decoder_) {
      l.self_attn = make_attention(h);
      l.norm1 = make_norm(h);
      l.cross_attn = make_attention(h);
      l.norm2 = make_norm(h);
      l.ff = make_ff(h, f);
      l.norm3 = make_norm(h);
    }
    output_w_ = Tensor({h, target_vocab_size});
    output_b_ = Tensor({target_vocab_size});
    positions_ = sinusoidal_table(config_.max_positions, h);
  }

  // Gain on the output projection's Xavier bound. Post-norm features have unit
  // variance, so plain Xavier gives logits of variance ~2H/(H+V) and an
  // untrained loss well above ln V; 0.1 keeps it within a few hundredths.
  static constexpr double kOutputGain = 0.1;

  // Xavier-uniform weights and embeddings, zero biases, unit norm gains.
  static TransformerModel init(const ModelConfig& config, std::size_t source_vocab_size,
                               std::size_t target_vocab_size, std::uint64_t seed) {
    TransformerModel m(config, source_vocab_size, target_vocab_size);
    std::mt19937_64 rng(seed);
    m.visit([&](const std::string& name, Tensor& t) {
      if (t.rank() != 2) return;
      const double gain = name == "output.w" ? kOutputGain : 1.0;
      const double limit = gain * std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    });
    return m;
  }

  const ModelConfig& config() const { return config_; }
  std::size_t source_vocab_size() const { return source_vocab_size_; }
  std::size_t target_vocab_size() const { return target_vocab_size_; }

  // Visits every parameter tensor in a fixed order (the serialization order).
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  template <std::floating_point U>
  TransformerModel<U> cast() const {
    TransformerModel<U> out(config_, source_vocab_size_, target_vocab_size_);
    auto dst = out.parameters();
    std::size_t i = 0;
    visit([&](const std::string&, const Tensor& t) { *dst[i++] = t.template cast<U>(); });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  // Source ids [B,S] (language tag first, no BOS/EOS) -> memory [B,S,H].
  template <class Rng>
  Var encode(Graph& g, const TokenBatch& src, ForwardMode<Rng> mode) {
    check_length(src);
    const Var mask = g.constant(attention_mask(src, src.length, false));
    Var x = embed(g, source_embed_, src, mode);
    for (auto& layer : encoder_) {
      Var a = attention(g, layer.self_attn, x, x, mask, src.batch, src.length, src.length, mode);
      x = g.layer_norm(g.add(x, dropout(g, a, mode)), g.parameter(layer.norm1.gamma),
                       g.parameter(layer.norm1.beta));
      Var f = feed_forward(g, layer.ff, x, mode);
      x = g.layer_norm(g.add(x, dropout(g, f, mode)), g.parameter(layer.norm2.gamma),
                       g.parameter(layer.norm2.beta));
    }
    return x;
  }

  // Teacher-forced decoder: target input ids [B,T] (BOS-first) -> logits [B,T,V].
  template <class Rng>
  Var decode(Graph& g, Var memory, const TokenBatch& src, const TokenBatch& tgt_in,
             ForwardMode<Rng> mode) {
    check_length(tgt_in);
    if (tgt_in.batch != src.batch) throw nn::TensorError("source/target batch size mismatch");
    const Var self_mask = g.constant(attention_mask(tgt_in, tgt_in.length, true));
    const Var cross_mask = g.constant(attention_mask(src, tgt_in.length, false));
    Var x = embed(g, target_embed_, tgt_in, mode);
    for (auto& layer : decoder_) {
      Var a = attention(g, layer.self_attn, x, x, self_mask, tgt_in.batch, tgt_in.length,
                        tgt_in.length, mode);
      x = g.layer_norm(g.add(x, dropout(g, a, mode)), g.parameter(layer.norm1.gamma),
                       g.parameter(layer.norm1.beta));
      Var c = attention(g, layer.cross_attn, x, memory, cross_mask, tgt_in.batch, tgt_in.length,
                        src.length, mode);
      x = g.layer_norm(g.add(x, dropout(g, c, mode)), g.parameter(layer.norm2.gamma),
                       g.parameter(layer.norm2.beta));
      Var f = feed_forward(g, layer.ff, x, mode);
      x = g.layer_norm(g.add(x, dropout(g, f, mode)), g.parameter(layer.norm3.gamma),
                       g.parameter(layer.norm3.beta));
    }
    return g.add(g.matmul(x, g.parameter(output_w_)), g.parameter(output_b_));
  }

  // Teacher-forced mean cross-entropy. Targets are raw phoneme ids; BOS is
  // prepended for the decoder input and EOS appended for the output.
  template <class Rng>
  Var forward_loss(Graph& g, const TokenBatch& src, std::span<const std::vector<std::int32_t>> targets,
                   ForwardMode<Rng> mode) {
    if (targets.empty()) throw nn::TensorError("empty batch");
    std::vector<std::vector<std::int32_t>> in, out;
    for (const auto& t : targets) {
      std::vector<std::int32_t> i{Vocabulary::kBos};
      i.insert(i.end(), t.begin(), t.end());
      std::vector<std::int32_t> o(t.begin(), t.end());
      o.push_back(Vocabulary::kEos);
      in.push_back(std::move(i));
      out.push_back(std::move(o));
    }
    const TokenBatch tgt_in = TokenBatch::from(in);
    const TokenBatch tgt_out = TokenBatch::from(out);
    Var memory = encode(g, src, mode);
    Var logits = decode(g, memory, src, tgt_in, mode);
    return g.cross_entropy(logits, tgt_out.ids, Vocabulary::kPad, static_cast<T>(config_.label_smoothing));
  }

  // Inference-only encoder pass.
  Tensor encode_memory(const TokenBatch& src) const {
    Graph g(false);
    ForwardMode<std::mt19937_64> eval;
    return g.value(const_cast<TransformerModel*>(this)->encode(g, src, eval));
  }

  // Next-token distributions [B,V] for each prefix (BOS-first, right-padded)
  // given encoder memory [B,S,H] of the matching source rows.
  Tensor decode_step(const Tensor& memory, const TokenBatch& src, const TokenBatch& prefixes) const {
    Tensor probs = decode_distributions(memory, src, prefixes);
    const std::size_t v = target_vocab_size_, t = prefixes.length;
    Tensor out({prefixes.batch, v});
    for (std::size_t b = 0; b < prefixes.batch; ++b) {
      const std::size_t last = prefixes.row_length(b) - 1;
      std::copy_n(probs.data().data() + (b * t + last) * v, v, out.data().data() + b * v);
    }
    return out;
  }

  // Distributions at every prefix position, [B,T,V].
  Tensor decode_distributions(const Tensor& memory, const TokenBatch& src,
                              const TokenBatch& prefixes) const {
    for (std::size_t b = 0; b < prefixes.batch; ++b) {
      if (prefixes.row_length(b) == 0) throw nn::TensorError("empty decoder prefix");
      if (prefixes.at(b, 0) != Vocabulary::kBos) throw nn::TensorError("decoder prefix must start with BOS");
    }
    Graph g(false);
    ForwardMode<std::mt19937_64> eval;
    auto* self = const_cast<TransformerModel*>(this);
    Var mem = g.constant(memory);
    Var logits = self->decode(g, mem, src, prefixes, eval);
    return nn::softmax(g.value(logits), 2);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto attn = [&](const std::string& p, auto& a) {
      f(p + ".wq", a.wq); f(p + ".bq", a.bq);
      f(p + ".wk", a.wk); f(p + ".bk", a.bk);
      f(p + ".wv", a.wv); f(p + ".bv", a.bv);
      f(p + ".wo", a.wo); f(p + ".bo", a.bo);
    };
    auto norm = [&](const std::string& p, auto& n) {
      f(p + ".gamma", n.gamma);
      f(p + ".beta", n.beta);
    };
    auto ff = [&](const std::string& p, auto& m) {
      f(p + ".w1", m.w1); f(p + ".b1", m.b1);
      f(p + ".w2", m.w2); f(p + ".b2", m.b2);
    };
    f(std::string("source_embed"), self.source_embed_);
    f(std::string("target_embed"), self.target_embed_);
    for (std::size_t i = 0; i < self.encoder_.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i);
      attn(p + ".self_attn", self.encoder_[i].self_attn);
      norm(p + ".norm1", self.encoder_[i].norm1);
      ff(p + ".ff", self.encoder_[i].ff);
      norm(p + ".norm2", self.encoder_[i].norm2);
    }
    for (std::size_t i = 0; i < self.decoder_.size(); ++i) {
      const std::string p = "decoder." + std::to_string(i);
      attn(p + ".self_attn", self.decoder_[i].self_attn);
      norm(p + ".norm1", self.decoder_[i].norm1);
      attn(p + ".cross_attn", self.decoder_[i].cross_attn);
      norm(p + ".norm2", self.decoder_[i].norm2);
      ff(p + ".ff", self.decoder_[i].ff);
      norm(p + ".norm3", self.decoder_[i].norm3);
    }
    f(std::string("output.w"), self.output_w_);
    f(std::string("output.b"), self.output_b_);
  }

  static Attention make_attention(std::size_t h) {
    return {Tensor({h, h}), Tensor({h}), Tensor({h, h}), Tensor({h}),
            Tensor({h, h}), Tensor({h}), Tensor({h, h}), Tensor({h})};
  }
  static Norm make_norm(std::size_t h) { return {Tensor({h}, T{1}), Tensor({h})}; }
  static FeedForward make_ff(std::size_t h, std::size_t f) {
    return {Tensor({h, f}), Tensor({f}), Tensor({f, h}), Tensor({h})};
  }

  static Tensor sinusoidal_table(std::size_t positions, std::size_t h) {
    Tensor t({positions, h});
    for (std::size_t pos = 0; pos < positions; ++pos) {
      for (std::size_t i = 0; i < h; i += 2) {
        const double angle =
            static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(h));
        t[pos * h + i] = static_cast<T>(std::sin(angle));
        if (i + 1 < h) t[pos * h + i + 1] = static_cast<T>(std::cos(angle));
      }
    }
    return t;
  }

  void check_length(const TokenBatch& b) const {
    if (b.length > config_.max_positions) {
      throw nn::TensorError("sequence length " + std::to_string(b.length) + " exceeds max_positions " +
                            std::to_string(config_.max_positions));
    }
  }

  // Additive mask [B*heads, Lq, Lk]: padded keys (and future keys when causal)
  // receive a large negative bias.
  Tensor attention_mask(const TokenBatch& keys, std::size_t query_len, bool causal) const {
    const std::size_t heads = config_.num_heads, lk = keys.length;
    Tensor mask({keys.batch * heads, query_len, lk});
    constexpr T kBlocked = T(-1e9);
    for (std::size_t b = 0; b < keys.batch; ++b) {
      for (std::size_t q = 0; q < query_len; ++q) {
        for (std::size_t k = 0; k < lk; ++k) {
          const bool blocked = keys.is_pad(b, k) || (causal && k > q);
          if (!blocked) continue;
          for (std::size_t hd = 0; hd < heads; ++hd) mask[((b * heads + hd) * query_len + q) * lk + k] = kBlocked;
        }
      }
    }
    return mask;
  }

  template <class Rng>
  Var dropout(Graph& g, Var x, ForwardMode<Rng> mode) {
    if (!mode.train || config_.dropout <= 0.0) return x;
    return g.dropout(x, static_cast<T>(config_.dropout), *mode.rng, true);
  }

  template <class Rng>
  Var embed(Graph& g, Tensor& table, const TokenBatch& ids, ForwardMode<Rng> mode) {
    const std::size_t h = config_.hidden_size;
    Var e = g.embedding(g.parameter(table), ids.ids);
    e = g.scale(e, static_cast<T>(std::sqrt(static_cast<double>(h))));
    Tensor pos({ids.length, h});
    std::copy_n(positions_.data().data(), ids.length * h, pos.data().data());
    e = g.reshape(e, {ids.batch, ids.length, h});
    e = g.add(e, g.constant(std::move(pos)));
    return dropout(g, e, mode);
  }

  Var linear(Graph& g, Var x, Tensor& w, Tensor& b) {
    return g.add(g.matmul(x, g.parameter(w)), g.parameter(b));
  }

  // [B,L,H] -> [B*heads, L, H/heads]
  Var split_heads(Graph& g, Var x, std::size_t batch, std::size_t len) {
    const std::size_t heads = config_.num_heads, d = config_.hidden_size / heads;
    x = g.reshape(x, {batch, len, heads, d});
    x = g.permute(x, {0, 2, 1, 3});
    return g.reshape(x, {batch * heads, len, d});
  }

  Var merge_heads(Graph& g, Var x, std::size_t batch, std::size_t len) {
    const std::size_t heads = config_.num_heads, d = config_.hidden_size / heads;
    x = g.reshape(x, {batch, heads, len, d});
    x = g.permute(x, {0, 2, 1, 3});
    return g.reshape(x, {batch, len, heads * d});
  }

  template <class Rng>
  Var attention(Graph& g, Attention& p, Var query, Var kv, Var mask, std::size_t batch,
                std::size_t lq, std::size_t lk, ForwardMode<Rng> mode) {
    const std::size_t d = config_.hidden_size / config_.num_heads;
    Var q = split_heads(g, linear(g, query, p.wq, p.bq), batch, lq);
    Var k = split_heads(g, linear(g, kv, p.wk, p.bk), batch, lk);
    Var v = split_heads(g, linear(g, kv, p.wv, p.bv), batch, lk);
    Var scores = g.scale(g.bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    Var probs = g.softmax(g.add(scores, mask), 2);
    probs = dropout(g, probs, mode);
    Var ctx = merge_heads(g, g.bmm(probs, v), batch, lq);
    return linear(g, ctx, p.wo, p.bo);
  }

  template <class Rng>
  Var feed_forward(Graph& g, FeedForward& p, Var x, ForwardMode<Rng> mode) {
    Var h = g.relu(linear(g, x, p.w1, p.b1));
    h = dropout(g, h, mode);
    return linear(g, h, p.w2, p.b2);
  }

  ModelConfig config_;
  std::size_t source_vocab_size_;
  std::size_t target_vocab_size_;
  Tensor source_embed_, target_embed_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor output_w_, output_b_;
  Tensor positions_;

  template <std::floating_point>
  friend class TransformerModel;
};

}  // namespace g2p

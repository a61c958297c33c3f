#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "g2p/data.hpp"
#include "g2p/hash.hpp"
#include "g2p/model.hpp"

namespace g2p {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FingerprintError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct TrainConfig {
  std::size_t total_steps = 200'000;
  std::vector<double> checkpoint_fractions = {0.25, 0.5, 0.75, 1.0};
  std::size_t batch_tokens = 2048;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t warmup_steps = 4000;
  double lr_scale = 1.0;

  void validate() const {
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
    if (checkpoint_fractions.empty()) throw ConfigError("no checkpoint fractions");
    double prev = 0.0;
    for (double f : checkpoint_fractions) {
      if (!(f > prev && f <= 1.0)) throw ConfigError("checkpoint fractions must increase within (0, 1]");
      const double at = f * static_cast<double>(total_steps);
      if (std::abs(at - std::round(at)) > 1e-9) {
        throw ConfigError("total_steps " + std::to_string(total_steps) +
                          " is not divisible into the configured checkpoint fractions");
      }
      prev = f;
    }
    if (checkpoint_fractions.back() != 1.0) throw ConfigError("last checkpoint fraction must be 1");
  }

  std::vector<std::size_t> checkpoint_steps() const {
    std::vector<std::size_t> steps;
    for (double f : checkpoint_fractions) {
      steps.push_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(total_steps))));
    }
    return steps;
  }

  bool operator==(const TrainConfig&) const = default;
};

// Inverse-square-root schedule with linear warmup:
// scale * hidden^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t hidden_size,
                          double scale = 1.0) {
  if (step == 0) throw ConfigError("lr_schedule: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return scale * std::pow(static_cast<double>(hidden_size), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

// Adam with bias correction.
template <std::floating_point T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<nn::Tensor<T>*>& params, double lr) {
    if (first_.empty()) {
      for (auto* p : params) {
        first_.emplace_back(p->size(), T{0});
        second_.emplace_back(p->size(), T{0});
      }
    }
    if (first_.size() != params.size()) throw TrainingError("optimizer parameter set changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto data = params[k]->data();
      auto grad = params[k]->grad();
      if (grad.empty()) continue;
      T* m = first_[k].data();
      T* v = second_[k].data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T{1} - b1) * g;
        v[i] = b2 * v[i] + (T{1} - b2) * g * g;
        data[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> first_, second_;
};

struct EncodedExample {
  std::vector<std::int32_t> source;  // language tag + graphemes
  std::vector<std::int32_t> target;  // phonemes, no BOS/EOS
};

inline EncodedExample encode_example(const PronunciationEntry& e, const Vocabularies& v) {
  return {encode(prepend_language_tag(e, v.source), v.source, false), encode(e.target, v.target, false)};
}

inline std::vector<EncodedExample> encode_examples(std::span<const PronunciationEntry> entries,
                                                   const Vocabularies& v) {
  std::vector<EncodedExample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(encode_example(e, v));
  return out;
}

// Groups example indices into batches whose padded target size (including
// EOS) stays within the token budget. Indices are shuffled, sorted by target
// length inside buckets so batches are homogeneous, then batch order is
// shuffled again.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const EncodedExample> data,
                                                          std::size_t batch_tokens,
                                                          std::mt19937_64& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  constexpr std::size_t kBucket = 1024;
  for (std::size_t start = 0; start < order.size(); start += kBucket) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + kBucket));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return data[a].target.size() < data[b].target.size();
    });
  }
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (std::size_t idx : order) {
    const std::size_t len = data[idx].target.size() + 1;
    const std::size_t new_longest = std::max(longest, len);
    if (!current.empty() && new_longest * (current.size() + 1) > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      longest = 0;
    }
    current.push_back(idx);
    longest = std::max(longest, len);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

struct Checkpoint {
  ModelConfig config;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t source_fingerprint = 0;
  std::uint64_t target_fingerprint = 0;
  std::size_t source_vocab_size = 0;
  std::size_t target_vocab_size = 0;
  std::vector<nn::Tensor<float>> parameters;

  static Checkpoint capture(const TransformerModel<float>& model, std::size_t step, std::uint64_t seed,
                            const Vocabularies& vocabs) {
    Checkpoint c;
    c.config = model.config();
    c.step = step;
    c.seed = seed;
    c.source_fingerprint = vocabs.source.fingerprint();
    c.target_fingerprint = vocabs.target.fingerprint();
    c.source_vocab_size = model.source_vocab_size();
    c.target_vocab_size = model.target_vocab_size();
    model.visit([&](const std::string&, const nn::Tensor<float>& t) {
      nn::Tensor<float> copy(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
      c.parameters.push_back(std::move(copy));
    });
    return c;
  }

  TransformerModel<float> to_model() const {
    TransformerModel<float> m(config, source_vocab_size, target_vocab_size);
    auto params = m.parameters();
    if (params.size() != parameters.size()) throw CheckpointError("checkpoint tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->shape() != parameters[i].shape()) {
        throw CheckpointError("checkpoint tensor " + std::to_string(i) + " has shape " +
                              nn::shape_string(parameters[i].shape()) + ", expected " +
                              nn::shape_string(params[i]->shape()));
      }
      *params[i] = parameters[i];
    }
    return m;
  }

  void check_vocabularies(const Vocabularies& v) const {
    if (source_fingerprint != v.source.fingerprint() || target_fingerprint != v.target.fingerprint()) {
      throw FingerprintError("checkpoint was trained with different vocabularies");
    }
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace checkpoint_format {

inline constexpr std::string_view kMagic{"G2PCKPT\0", 8};
inline constexpr std::uint32_t kVersion = 1;

struct Expected {
  std::uint64_t source_fingerprint;
  std::uint64_t target_fingerprint;
};

inline std::string serialize(const Checkpoint& c) {
  std::string manifest;
  for (std::uint64_t v : {c.config.num_layers, c.config.hidden_size, c.config.embed_size, c.config.ff_size,
                          c.config.num_heads, c.config.max_positions}) {
    nn::wire::put_u64(manifest, v);
  }
  nn::wire::put_f64(manifest, c.config.dropout);
  nn::wire::put_f64(manifest, c.config.label_smoothing);
  nn::wire::put_u64(manifest, c.step);
  nn::wire::put_u64(manifest, c.seed);
  nn::wire::put_u64(manifest, c.source_fingerprint);
  nn::wire::put_u64(manifest, c.target_fingerprint);
  nn::wire::put_u64(manifest, c.source_vocab_size);
  nn::wire::put_u64(manifest, c.target_vocab_size);
  nn::wire::put_u64(manifest, c.parameters.size());

  std::string out(kMagic);
  nn::wire::put_u32(out, kVersion);
  nn::wire::put_u64(out, manifest.size());
  out += manifest;
  for (const auto& t : c.parameters) nn::serialize(t, out);
  nn::wire::put_u64(out, fnv1a64(out));
  return out;
}

inline Checkpoint parse(std::string_view bytes, std::optional<Expected> expected = std::nullopt) {
  Checkpoint c;
  nn::wire::Reader in(bytes);
  std::size_t tensor_count = 0;
  try {
    if (in.take(kMagic.size()) != kMagic) throw CheckpointError("not a checkpoint file (bad magic)");
    const std::uint32_t version = in.u32();
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t manifest_size = in.u64();
    nn::wire::Reader m(in.take(manifest_size));
    c.config.num_layers = m.u64();
    c.config.hidden_size = m.u64();
    c.config.embed_size = m.u64();
    c.config.ff_size = m.u64();
    c.config.num_heads = m.u64();
    c.config.max_positions = m.u64();
    c.config.dropout = m.f64();
    c.config.label_smoothing = m.f64();
    c.step = m.u64();
    c.seed = m.u64();
    c.source_fingerprint = m.u64();
    c.target_fingerprint = m.u64();
    c.source_vocab_size = m.u64();
    c.target_vocab_size = m.u64();
    tensor_count = m.u64();
  } catch (const nn::TensorError& e) {
    throw CheckpointError(std::string("truncated checkpoint header: ") + e.what());
  }
  try {
    c.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid config in checkpoint: ") + e.what());
  }
  if (expected && (expected->source_fingerprint != c.source_fingerprint ||
                   expected->target_fingerprint != c.target_fingerprint)) {
    throw FingerprintError("checkpoint vocabulary fingerprints do not match the current vocabularies");
  }
  if (bytes.size() < in.position() + 8) throw CheckpointError("truncated checkpoint");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  nn::wire::Reader trailer(bytes.substr(bytes.size() - 8));
  if (fnv1a64(body) != trailer.u64()) throw ChecksumError("checkpoint checksum mismatch (corrupted or truncated)");
  nn::wire::Reader payload(body.substr(in.position()));
  try {
    for (std::size_t i = 0; i < tensor_count; ++i) c.parameters.push_back(nn::deserialize(payload));
  } catch (const nn::TensorError& e) {
    throw CheckpointError(std::string("bad checkpoint payload: ") + e.what());
  }
  if (payload.remaining() != 0) throw CheckpointError("trailing bytes in checkpoint payload");
  (void)c.to_model();  // shape validation
  return c;
}

}  // namespace checkpoint_format

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file(path, checkpoint_format::serialize(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<checkpoint_format::Expected> expected = std::nullopt) {
  return checkpoint_format::parse(read_file(path), expected);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabularies& vocabs) {
  return load_checkpoint(path, checkpoint_format::Expected{vocabs.source.fingerprint(), vocabs.target.fingerprint()});
}

struct TrainProgress {
  std::uint64_t seed;
  std::size_t step;
  std::size_t total_steps;
  double loss;
  double lr;
};

using ProgressFn = std::function<void(const TrainProgress&)>;

// Runs exactly config.total_steps Adam updates over length-bucketed batches,
// reshuffled every epoch from the run seed, and snapshots the model at each
// configured fraction of the run.
inline std::vector<Checkpoint> train(TransformerModel<float>& model, std::span<const PronunciationEntry> entries,
                                     const Vocabularies& vocabs, const TrainConfig& config, std::uint64_t seed,
                                     const ProgressFn& progress = {}, std::size_t report_every = 100) {
  config.validate();
  if (entries.empty()) throw TrainingError("empty training set");
  if (model.source_vocab_size() != vocabs.source.size() || model.target_vocab_size() != vocabs.target.size()) {
    throw TrainingError("model and vocabulary sizes disagree");
  }
  const auto data = encode_examples(entries, vocabs);
  std::size_t longest = 0;
  for (const auto& ex : data) {
    longest = std::max({longest, ex.source.size(), ex.target.size() + 1});
  }
  if (longest > model.config().max_positions) {
    throw TrainingError("training sequence of length " + std::to_string(longest) + " exceeds max_positions");
  }
  if (config.batch_tokens <= longest) {
    throw ConfigError("batch_tokens " + std::to_string(config.batch_tokens) +
                      " must exceed the longest sequence (" + std::to_string(longest) + ")");
  }

  std::mt19937_64 shuffle_rng(seed);
  std::mt19937_64 dropout_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<float> adam(config.adam_beta1, config.adam_beta2, config.adam_eps);
  auto params = model.parameters();
  const auto milestones = config.checkpoint_steps();
  std::vector<Checkpoint> checkpoints;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t cursor = 0;
  std::size_t next_milestone = 0;

  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    if (cursor == batches.size()) {
      batches = make_batches(data, config.batch_tokens, shuffle_rng);
      cursor = 0;
    }
    const auto& batch = batches[cursor++];
    std::vector<std::vector<std::int32_t>> sources, targets;
    for (std::size_t idx : batch) {
      sources.push_back(data[idx].source);
      targets.push_back(data[idx].target);
    }
    const TokenBatch src = TokenBatch::from(sources);

    model.zero_grad();
    double loss = 0.0;
    {
      nn::Graph<float> g(true);
      ForwardMode<std::mt19937_64> mode{true, &dropout_rng};
      nn::Var out = model.forward_loss(g, src, targets, mode);
      loss = g.value(out)[0];
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (seed " << seed << "), batch entries:";
        for (std::size_t idx : batch) msg << ' ' << idx;
        throw TrainingError(msg.str());
      }
      g.backward(out);
    }
    const double lr = lr_schedule(step, config.warmup_steps, model.config().hidden_size, config.lr_scale);
    adam.step(params, lr);

    if (progress && (step % report_every == 0 || step == config.total_steps)) {
      progress({seed, step, config.total_steps, loss, lr});
    }
    if (next_milestone < milestones.size() && step == milestones[next_milestone]) {
      checkpoints.push_back(Checkpoint::capture(model, step, seed, vocabs));
      ++next_milestone;
    }
  }
  return checkpoints;
}

struct SeedRun {
  std::uint64_t seed;
  std::vector<Checkpoint> checkpoints;
};

// One independent run per seed (model initialized from the same seed).
// Runs execute sequentially unless `parallel` is set; each run owns its own
// model, so results are identical either way.
inline std::vector<SeedRun> train_seeds(const ModelConfig& model_config, std::span<const PronunciationEntry> entries,
                                        const Vocabularies& vocabs, const TrainConfig& config,
                                        bool parallel = false, const ProgressFn& progress = {}) {
  config.validate();
  std::vector<SeedRun> runs(config.seeds.size());
  auto run_one = [&](std::size_t i) {
    const std::uint64_t seed = config.seeds[i];
    auto model = TransformerModel<float>::init(model_config, vocabs.source.size(), vocabs.target.size(), seed);
    runs[i] = {seed, train(model, entries, vocabs, config, seed, progress)};
  };
  if (!parallel || runs.size() == 1) {
    for (std::size_t i = 0; i < runs.size(); ++i) run_one(i);
    return runs;
  }
  std::vector<std::exception_ptr> errors(runs.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    workers.emplace_back([&, i] {
      try {
        run_one(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return runs;
}

}  // namespace g2p

#pragma once

// Command-line driver: train, evaluate, predict and selftrain subcommands.
// Each command writes a manifest.json next to its outputs.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "g2p/data.hpp"
#include "g2p/decoding.hpp"
#include "g2p/eval.hpp"
#include "g2p/hash.hpp"
#include "g2p/model.hpp"
#include "g2p/selftrain.hpp"
#include "g2p/training.hpp"
#include "json.hpp"

namespace g2p::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "lang=path"
struct LangPath {
  LanguageCode lang;
  fs::path path;
};

inline LangPath parse_lang_path(std::string_view spec) {
  const auto eq = spec.find('=');
  if (eq == std::string_view::npos) {
    throw CliError("expected LANG=PATH, got '" + std::string(spec) + "'");
  }
  return {LanguageCode(spec.substr(0, eq)), fs::path(std::string(spec.substr(eq + 1)))};
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},     {"hidden_size", c.hidden_size},
          {"embed_size", c.embed_size},     {"ff_size", c.ff_size},
          {"num_heads", c.num_heads},       {"dropout", c.dropout},
          {"max_positions", c.max_positions}, {"label_smoothing", c.label_smoothing}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers");
  c.hidden_size = j.at("hidden_size");
  c.embed_size = j.at("embed_size");
  c.ff_size = j.at("ff_size");
  c.num_heads = j.at("num_heads");
  c.dropout = j.at("dropout");
  c.max_positions = j.at("max_positions");
  c.label_smoothing = j.at("label_smoothing");
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},   {"checkpoint_fractions", c.checkpoint_fractions},
          {"batch_tokens", c.batch_tokens}, {"seeds", c.seeds},
          {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},         {"warmup_steps", c.warmup_steps},
          {"lr_scale", c.lr_scale}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.total_steps = j.at("total_steps");
  c.checkpoint_fractions = j.at("checkpoint_fractions").get<std::vector<double>>();
  c.batch_tokens = j.at("batch_tokens");
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.warmup_steps = j.at("warmup_steps");
  c.lr_scale = j.at("lr_scale");
  c.validate();
  return c;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::vector<std::pair<std::string, std::string>> inputs;  // path, FNV-1a digest
  std::string version{kToolVersion};
  std::string started = utc_now();
  std::string finished;
  std::vector<std::string> outputs;
  json details = json::object();

  void add_input(const fs::path& p) { inputs.emplace_back(p.string(), hex64(fnv1a64(read_file(p)))); }
  void add_output(const fs::path& p) { outputs.push_back(p.string()); }

  json to_json() const {
    json in = json::array();
    for (const auto& [p, d] : inputs) in.push_back({{"path", p}, {"fnv1a64", d}});
    return {{"command", command}, {"argv", argv},       {"config", config},     {"inputs", in},
            {"version", version}, {"started", started}, {"finished", finished}, {"outputs", outputs},
            {"details", details}};
  }

  void save(const fs::path& path) {
    finished = utc_now();
    write_file(path, to_json().dump(2) + "\n");
  }
};

// Model directory layout:
//   source.vocab, target.vocab, train_config.json, seed<N>/step<M>.ckpt
inline std::vector<fs::path> save_model_dir(const fs::path& dir, const Vocabularies& vocabs,
                                            std::span<const SeedRun> runs, const ModelConfig& model_config,
                                            const TrainConfig& train_config) {
  std::vector<fs::path> written;
  write_file(dir / "source.vocab", vocabs.source.serialize());
  write_file(dir / "target.vocab", vocabs.target.serialize());
  write_file(dir / "train_config.json",
             json{{"model", to_json(model_config)}, {"train", to_json(train_config)}}.dump(2) + "\n");
  written.insert(written.end(), {dir / "source.vocab", dir / "target.vocab", dir / "train_config.json"});
  for (const auto& run : runs) {
    for (const auto& c : run.checkpoints) {
      const auto p = dir / ("seed" + std::to_string(run.seed)) / ("step" + std::to_string(c.step) + ".ckpt");
      save_checkpoint(c, p);
      written.push_back(p);
    }
  }
  return written;
}

struct ModelDir {
  Vocabularies vocabs;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::string> labels;  // "seed1/step500"
  std::optional<json> train_config;
};

inline ModelDir load_model_dir(const fs::path& dir, bool last_only = false) {
  if (!fs::is_directory(dir)) throw CliError("model directory not found: " + dir.string());
  ModelDir m;
  m.vocabs.source = Vocabulary::deserialize(read_file(dir / "source.vocab"));
  m.vocabs.target = Vocabulary::deserialize(read_file(dir / "target.vocab"));
  if (fs::exists(dir / "train_config.json")) m.train_config = json::parse(read_file(dir / "train_config.json"));

  static const std::regex seed_re("seed([0-9]+)"), step_re("step([0-9]+)\\.ckpt");
  struct Found {
    std::uint64_t seed;
    std::size_t step;
    fs::path path;
  };
  std::vector<Found> found;
  for (const auto& sd : fs::directory_iterator(dir)) {
    std::smatch ms;
    const std::string name = sd.path().filename().string();
    if (!sd.is_directory() || !std::regex_match(name, ms, seed_re)) continue;
    const auto seed = std::stoull(ms[1]);
    for (const auto& f : fs::directory_iterator(sd.path())) {
      std::smatch mf;
      const std::string fname = f.path().filename().string();
      if (std::regex_match(fname, mf, step_re)) found.push_back({seed, std::stoul(mf[1]), f.path()});
    }
  }
  if (found.empty()) throw CliError("no checkpoints under " + dir.string());
  std::sort(found.begin(), found.end(),
            [](const Found& a, const Found& b) { return std::tie(a.seed, a.step) < std::tie(b.seed, b.step); });
  if (last_only) {
    std::vector<Found> last;
    for (const auto& f : found) {
      if (!last.empty() && last.back().seed == f.seed) {
        last.back() = f;
      } else {
        last.push_back(f);
      }
    }
    found = std::move(last);
  }
  for (const auto& f : found) {
    m.checkpoints.push_back(load_checkpoint(f.path, m.vocabs));
    m.labels.push_back("seed" + std::to_string(f.seed) + "/step" + std::to_string(f.step));
  }
  return m;
}

inline std::vector<PronunciationEntry> load_tsv(const LangPath& lp) {
  try {
    return parse_wikipron_tsv(read_file(lp.path), lp.lang);
  } catch (const ParseError& e) {
    throw CliError(lp.path.string() + ": " + e.what());
  }
}

// Flags that override a base configuration only when given.
struct ConfigFlags {
  bool micro = false;
  bool full_scale = false;
  std::optional<std::size_t> layers, hidden, ff, heads, max_positions;
  std::optional<double> dropout, label_smoothing;
  std::optional<std::size_t> steps, batch_tokens, warmup;
  std::optional<double> lr_scale;
  std::vector<std::uint64_t> seeds;
  int config_version = kConfigVersion;

  void add_to(CLI::App& app) {
    auto* m = app.add_flag("--micro", micro, "Desk-scale model: 2 layers, hidden 64, 2 heads, ff 256");
    app.add_flag("--full-scale", full_scale, "Full-scale model and 200K steps (the defaults)")->excludes(m);
    app.add_option("--layers", layers, "Encoder and decoder layers");
    app.add_option("--hidden", hidden, "Hidden and embedding size");
    app.add_option("--ff", ff, "Feed-forward size");
    app.add_option("--heads", heads, "Attention heads");
    app.add_option("--max-positions", max_positions, "Longest supported sequence");
    app.add_option("--dropout", dropout, "Dropout probability");
    app.add_option("--label-smoothing", label_smoothing, "Label smoothing (default 0)");
    app.add_option("--steps", steps, "Total optimizer steps");
    app.add_option("--batch-tokens", batch_tokens, "Padded target tokens per batch");
    app.add_option("--warmup", warmup, "Warmup steps");
    app.add_option("--lr-scale", lr_scale, "Multiplier on the learning-rate schedule");
    app.add_option("--seeds,--seed", seeds, "Training seeds")->delimiter(',');
    app.add_option("--config-version,--config_version", config_version, "Config file format version");
  }

  void check_version() const {
    if (config_version != kConfigVersion) {
      throw CliError("unsupported config_version " + std::to_string(config_version));
    }
  }

  // Base: stored configuration if any, else the micro or full-scale preset.
  std::pair<ModelConfig, TrainConfig> resolve(std::optional<std::pair<ModelConfig, TrainConfig>> stored = {}) const {
    check_version();
    ModelConfig mc;
    TrainConfig tc;
    if (stored && !micro && !full_scale) {
      std::tie(mc, tc) = *stored;
    } else if (micro) {
      mc = ModelConfig::micro();
    }
    if (layers) mc.num_layers = *layers;
    if (hidden) mc.hidden_size = mc.embed_size = *hidden;
    if (ff) mc.ff_size = *ff;
    if (heads) mc.num_heads = *heads;
    if (max_positions) mc.max_positions = *max_positions;
    if (dropout) mc.dropout = *dropout;
    if (label_smoothing) mc.label_smoothing = *label_smoothing;
    if (steps) tc.total_steps = *steps;
    if (batch_tokens) tc.batch_tokens = *batch_tokens;
    if (warmup) tc.warmup_steps = *warmup;
    if (lr_scale) tc.lr_scale = *lr_scale;
    if (!seeds.empty()) tc.seeds = seeds;
    mc.validate();
    tc.validate();
    return {mc, tc};
  }
};

struct DecodeFlags {
  std::size_t beam = 5;
  std::size_t max_len = 0;
  std::size_t jobs = 1;
  bool last_only = false;

  void add_to(CLI::App& app) {
    app.add_option("--beam", beam, "Beam width")->check(CLI::PositiveNumber);
    app.add_option("--max-len", max_len, "Maximum output length including EOS (0 = 2*|source|+8)");
    app.add_option("--jobs", jobs, "Decoding worker threads")->check(CLI::PositiveNumber);
    app.add_flag("--last-only", last_only, "Ensemble only the final checkpoint of each seed");
  }

  BeamOptions options() const { return {beam, max_len, false}; }
};

inline std::vector<std::string> argv_vector(int argc, const char* const* argv) {
  return std::vector<std::string>(argv, argv + argc);
}

// The config file belongs to the root app; accept it after the subcommand too
// by moving "--config FILE" / "--config=FILE" to the front.
inline std::vector<std::string> hoist_config(std::vector<std::string> args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      const std::vector<std::string> moved{args[i], args[i + 1]};
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      args.insert(args.begin() + 1, moved.begin(), moved.end());
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      const std::string moved = args[i];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      args.insert(args.begin() + 1, moved);
      break;
    }
  }
  return args;
}

inline ProgressFn progress_printer(std::ostream& err, const std::string& prefix = {}) {
  return [&err, prefix](const TrainProgress& p) {
    err << prefix << "seed " << p.seed << " step " << p.step << "/" << p.total_steps << " loss " << std::fixed
        << std::setprecision(4) << p.loss << " lr " << std::scientific << std::setprecision(3) << p.lr
        << std::defaultfloat << '\n';
  };
}

inline std::vector<PronunciationEntry> load_all(std::span<const std::string> specs, RunManifest& manifest) {
  std::vector<PronunciationEntry> all;
  for (const auto& s : specs) {
    const auto lp = parse_lang_path(s);
    auto entries = load_tsv(lp);
    manifest.add_input(lp.path);
    all.insert(all.end(), entries.begin(), entries.end());
  }
  return all;
}

inline std::map<LanguageCode, std::vector<PronunciationEntry>> by_language(std::span<const PronunciationEntry> es) {
  std::map<LanguageCode, std::vector<PronunciationEntry>> out;
  for (const auto& e : es) out[e.lang].push_back(e);
  return out;
}

inline void train_and_save(const fs::path& dir, std::span<const PronunciationEntry> entries, const ModelConfig& mc,
                           const TrainConfig& tc, bool parallel, std::ostream& err, const std::string& prefix,
                           RunManifest& manifest) {
  Dataset d{{entries.begin(), entries.end()}, Split::train};
  const auto vocabs = build_vocabulary(std::span<const Dataset>(&d, 1));
  const auto runs = train_seeds(mc, entries, vocabs, tc, parallel, progress_printer(err, prefix));
  for (const auto& p : save_model_dir(dir, vocabs, runs, mc, tc)) manifest.add_output(p);
}

struct TrainArgs {
  std::vector<std::string> train;
  std::string out_dir;
  bool monolingual = false;
  bool parallel_seeds = false;
  ConfigFlags config;
};

inline void cmd_train(const TrainArgs& a, RunManifest& manifest, std::ostream& out, std::ostream& err) {
  const auto [mc, tc] = a.config.resolve();
  manifest.config = {{"model", to_json(mc)}, {"train", to_json(tc)}, {"monolingual", a.monolingual}};
  const auto entries = load_all(a.train, manifest);
  if (entries.empty()) throw CliError("training files contain no entries");
  const fs::path dir(a.out_dir);
  if (a.monolingual) {
    for (const auto& [lang, es] : by_language(entries)) {
      train_and_save(dir / lang.str(), es, mc, tc, a.parallel_seeds, err, lang.str() + " ", manifest);
    }
  } else {
    train_and_save(dir, entries, mc, tc, a.parallel_seeds, err, {}, manifest);
  }
  manifest.details["gold_count"] = entries.size();
  out << "trained " << tc.seeds.size() << " seed(s) x " << tc.checkpoint_fractions.size() << " checkpoint(s) into "
      << dir.string() << '\n';
}

struct EvaluateArgs {
  std::string model;
  std::vector<std::string> gold;
  std::vector<std::string> predictions;
  std::string out_dir;
  bool ablate = false;
  bool monolingual = false;
  DecodeFlags decode;
};

// Scores prediction TSVs against gold, matching rows by word.
inline EvalReport score_prediction_files(std::span<const PronunciationEntry> gold,
                                         const std::map<LanguageCode, std::vector<PredictionRow>>& predictions) {
  std::vector<ScoredItem> items;
  std::map<LanguageCode, std::map<std::string, const PredictionRow*>> index;
  for (const auto& [lang, rows] : predictions) {
    for (const auto& r : rows) index[lang].emplace(r.word, &r);
  }
  for (const auto& e : gold) {
    ScoredItem it{e.lang, e.target, {}, true};
    const auto li = index.find(e.lang);
    if (li != index.end()) {
      const auto ri = li->second.find(e.word());
      if (ri != li->second.end()) {
        it.predicted = ri->second->segments;
        it.failed = !ri->second->confidence;
      }
    }
    items.push_back(std::move(it));
  }
  return score(items);
}

inline void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r, RunManifest& manifest) {
  write_file(dir / (stem + ".tsv"), r.to_tsv());
  write_file(dir / (stem + ".json"), r.to_json().dump(2) + "\n");
  manifest.add_output(dir / (stem + ".tsv"));
  manifest.add_output(dir / (stem + ".json"));
}

inline void cmd_evaluate(const EvaluateArgs& a, RunManifest& manifest, std::ostream& out, std::ostream&) {
  manifest.config = {{"beam", a.decode.beam},     {"max_len", a.decode.max_len},
                     {"last_only", a.decode.last_only}, {"ablate_checkpoints", a.ablate},
                     {"monolingual", a.monolingual},    {"model", a.model}};
  const auto gold = load_all(a.gold, manifest);
  if (gold.empty()) throw CliError("gold files contain no entries");
  const fs::path dir(a.out_dir);

  if (!a.predictions.empty()) {
    std::map<LanguageCode, std::vector<PredictionRow>> preds;
    for (const auto& s : a.predictions) {
      const auto lp = parse_lang_path(s);
      auto rows = parse_prediction_tsv(read_file(lp.path));
      manifest.add_input(lp.path);
      auto& dst = preds[lp.lang];
      dst.insert(dst.end(), rows.begin(), rows.end());
    }
    const auto report = score_prediction_files(gold, preds);
    write_report(dir, "report", report, manifest);
    out << report.to_tsv();
    return;
  }
  if (a.model.empty()) throw CliError("evaluate needs --model or --predictions");

  const BeamOptions opts = a.decode.options();
  if (a.monolingual) {
    std::vector<ScoredItem> items;
    for (const auto& [lang, es] : by_language(gold)) {
      const auto md = load_model_dir(fs::path(a.model) / lang.str(), a.decode.last_only);
      const auto spec = EnsembleSpec::from_checkpoints(md.checkpoints, md.vocabs);
      // Scored jointly below so the macro average spans every language.
      std::vector<ScoredItem> part(es.size());
      parallel_for(es.size(), a.decode.jobs, [&](std::size_t i) {
        part[i] = {es[i].lang, es[i].target, {}, false};
        try {
          part[i].predicted = predict(spec, es[i].lang, es[i].source, opts).predicted;
        } catch (const std::exception&) {
          part[i].failed = true;
        }
      });
      items.insert(items.end(), part.begin(), part.end());
    }
    const auto report = score(items);
    write_report(dir, "report", report, manifest);
    out << report.to_tsv();
    return;
  }

  const auto md = load_model_dir(a.model, a.decode.last_only);
  const auto spec = EnsembleSpec::from_checkpoints(md.checkpoints, md.vocabs);
  const Dataset ds{gold, Split::dev};
  manifest.details["members"] = md.labels;
  if (a.ablate) {
    const auto rows = ablate_members(spec, md.labels, ds, opts, a.decode.jobs);
    write_file(dir / "ablation.tsv", ablation_tsv(rows));
    manifest.add_output(dir / "ablation.tsv");
    write_report(dir, "report", rows.back().report, manifest);
    out << ablation_tsv(rows);
    return;
  }
  const auto report = evaluate(spec, ds, opts, a.decode.jobs);
  write_report(dir, "report", report, manifest);
  out << report.to_tsv();
}

struct PredictArgs {
  std::string model;
  std::string lang;
  std::string input;
  std::string output;
  DecodeFlags decode;
};

inline void cmd_predict(const PredictArgs& a, RunManifest& manifest, std::ostream& out, std::ostream& err) {
  manifest.config = {{"beam", a.decode.beam},
                     {"max_len", a.decode.max_len},
                     {"last_only", a.decode.last_only},
                     {"lang", a.lang},
                     {"model", a.model}};
  const LanguageCode lang(a.lang);
  const auto words = parse_word_list(read_file(a.input));
  manifest.add_input(a.input);
  const auto md = load_model_dir(a.model, a.decode.last_only);
  const auto spec = EnsembleSpec::from_checkpoints(md.checkpoints, md.vocabs);
  const auto outcomes = predict_file(spec, words, lang, a.decode.options(), a.decode.jobs);
  std::size_t failures = 0;
  for (const auto& o : outcomes) {
    if (!o.ok()) {
      ++failures;
      err << "warning: '" << o.word << "': " << o.error << '\n';
    }
  }
  manifest.details["failures"] = failures;
  const std::string tsv = write_prediction_tsv(to_prediction_rows(outcomes));
  if (a.output.empty() || a.output == "-") {
    out << tsv;
  } else {
    write_file(a.output, tsv);
    manifest.add_output(a.output);
  }
}

struct SelftrainArgs {
  std::string model;
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> corpus;
  std::string out_dir;
  double threshold = 0.2;
  std::size_t cap = 1'000'000;
  bool lowercase = false;
  bool parallel_seeds = false;
  ConfigFlags config;
  DecodeFlags decode;
};

inline void cmd_selftrain(const SelftrainArgs& a, RunManifest& manifest, std::ostream& out, std::ostream& err) {
  SelfTrainConfig st{a.threshold, a.cap, {}, a.lowercase};
  st.validate();
  const auto stage = [](const std::string& name, auto&& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      throw CliError("selftrain [" + name + "]: " + e.what());
    }
  };

  const auto md = stage("load", [&] { return load_model_dir(a.model, a.decode.last_only); });
  std::optional<std::pair<ModelConfig, TrainConfig>> stored;
  if (md.train_config) {
    stored = std::make_pair(model_config_from_json(md.train_config->at("model")),
                            train_config_from_json(md.train_config->at("train")));
  }
  const auto [mc, tc] = a.config.resolve(stored);
  manifest.config = {{"model", to_json(mc)},       {"train", to_json(tc)},      {"threshold", st.threshold},
                     {"cap", st.word_cap},         {"lowercase", st.lowercase}, {"beam", a.decode.beam},
                     {"base_model", a.model}};

  const auto gold = stage("load", [&] { return load_all(a.train, manifest); });
  const auto dev = stage("load", [&] { return load_all(a.dev, manifest); });
  if (dev.empty()) throw CliError("selftrain needs a dev set (--dev)");
  const auto spec = EnsembleSpec::from_checkpoints(md.checkpoints, md.vocabs);
  const BeamOptions opts = a.decode.options();
  const fs::path dir(a.out_dir);

  std::map<LanguageCode, fs::path> corpora;
  for (const auto& s : a.corpus) {
    const auto lp = parse_lang_path(s);
    corpora[lp.lang] = lp.path;
  }
  std::set<LanguageCode> gold_langs;
  for (const auto& e : gold) gold_langs.insert(e.lang);

  const double dev_conf = stage("label", [&] {
    return dev_mean_confidence(spec, Dataset{dev, Split::dev}, opts, a.decode.jobs);
  });
  manifest.details["dev_mean_confidence"] = dev_conf;
  err << "dev mean confidence " << dev_conf << '\n';

  SilverSet silver(st.threshold, "corpora");
  std::vector<SelectionStat> stats;
  std::vector<std::string> skipped;
  std::set<LanguageCode> augmented;
  json per_lang = json::object();
  for (const auto& lang : gold_langs) {
    const auto it = corpora.find(lang);
    if (it == corpora.end()) {
      skipped.push_back(lang.str());
      continue;
    }
    if (!md.vocabs.source.has_language(lang)) {
      skipped.push_back(lang.str());
      continue;
    }
    const std::string raw = stage("extract", [&] { return read_file(it->second); });
    manifest.add_input(it->second);
    auto words = stage("extract", [&] { return extract_words(raw); });
    if (st.lowercase) {
      for (auto& w : words) w = unicode::lowercase(w);
    }
    const auto unique = dedupe_and_cap(words, st.word_cap);
    const auto labels = stage("label", [&] { return pseudo_label(spec, unique, lang, opts, a.decode.jobs); });
    const auto chosen = select(labels.candidates, st.threshold, it->second.string());
    double mean = 0.0;
    for (const auto& c : labels.candidates) mean += c.confidence;
    if (!labels.candidates.empty()) mean /= static_cast<double>(labels.candidates.size());
    per_lang[lang.str()] = {{"extracted", words.size()},
                            {"translated", unique.size()},
                            {"selected", chosen.size()},
                            {"failures", labels.failures.size()},
                            {"mean_confidence", mean}};
    stats.push_back({lang, unique.size(), chosen.size()});
    write_file(dir / "silver" / (lang.str() + ".tsv"), silver_tsv(chosen));
    manifest.add_output(dir / "silver" / (lang.str() + ".tsv"));
    silver.append(chosen);
    augmented.insert(lang);
    err << lang.str() << ": translated " << unique.size() << ", selected " << chosen.size() << '\n';
  }
  manifest.details["skipped_languages"] = skipped;
  manifest.details["per_language"] = per_lang;
  write_file(dir / "selection.tsv", selection_stats_tsv(stats));
  manifest.add_output(dir / "selection.tsv");

  const auto result = stage("retrain", [&] {
    return augment_and_retrain(gold, silver, mc, tc, Dataset{dev, Split::dev}, opts, a.decode.jobs,
                               a.parallel_seeds, progress_printer(err));
  });
  for (const auto& p : save_model_dir(dir / "model", result.vocabs, result.runs, mc, tc)) manifest.add_output(p);
  manifest.details["gold_count"] = result.gold_count;
  manifest.details["silver_count"] = result.silver_count;
  manifest.details["silver_discarded"] = result.silver_discarded;
  write_report(dir, "report_all", result.report, manifest);
  const auto restricted = augmented.empty() ? result.report : restrict_languages(result.report, augmented);
  write_report(dir, "report", restricted, manifest);
  out << selection_stats_tsv(stats) << restricted.to_tsv();
}

// Returns the process exit code. Exit 0 only when every requested output was
// written.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multilingual grapheme-to-phoneme toolkit", "g2p"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  app.set_config("--config", "", "INI/TOML file with one [command] section per subcommand; flags win");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train seed x checkpoint ensembles");
  train->add_option("--train", ta.train, "Training file as LANG=PATH (repeatable)")->required();
  train->add_option("--out-dir", ta.out_dir, "Model output directory")->required();
  train->add_flag("--monolingual", ta.monolingual, "One model per language");
  train->add_flag("--parallel-seeds", ta.parallel_seeds, "Train seeds concurrently");
  ta.config.add_to(*train);

  EvaluateArgs ea;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score an ensemble (or prediction files) against gold");
  evaluate_cmd->add_option("--model", ea.model, "Model directory");
  evaluate_cmd->add_option("--gold", ea.gold, "Gold file as LANG=PATH (repeatable)")->required();
  evaluate_cmd->add_option("--predictions", ea.predictions, "Prediction TSV as LANG=PATH instead of decoding");
  evaluate_cmd->add_option("--out-dir", ea.out_dir, "Report directory")->required();
  evaluate_cmd->add_flag("--ablate-checkpoints", ea.ablate, "Each checkpoint alone, then the ensemble");
  evaluate_cmd->add_flag("--monolingual", ea.monolingual, "Model directory holds one model per language");
  ea.decode.add_to(*evaluate_cmd);
  int eval_config_version = kConfigVersion;
  evaluate_cmd->add_option("--config-version,--config_version", eval_config_version, "Config file format version");

  PredictArgs pa;
  auto* predict_cmd = app.add_subcommand("predict", "Transcribe a word list");
  predict_cmd->add_option("--model", pa.model, "Model directory")->required();
  predict_cmd->add_option("--lang", pa.lang, "Language code")->required();
  predict_cmd->add_option("--input", pa.input, "Word list, one word per line")->required();
  predict_cmd->add_option("--output", pa.output, "Prediction TSV (default: stdout)");
  pa.decode.add_to(*predict_cmd);
  int predict_config_version = kConfigVersion;
  predict_cmd->add_option("--config-version,--config_version", predict_config_version, "Config file format version");

  SelftrainArgs sa;
  auto* selftrain_cmd = app.add_subcommand("selftrain", "Pseudo-label corpora, select, retrain and evaluate");
  selftrain_cmd->add_option("--model", sa.model, "Base ensemble directory")->required();
  selftrain_cmd->add_option("--train", sa.train, "Gold training file as LANG=PATH")->required();
  selftrain_cmd->add_option("--dev", sa.dev, "Dev file as LANG=PATH")->required();
  selftrain_cmd->add_option("--corpus", sa.corpus, "Raw text corpus as LANG=PATH");
  selftrain_cmd->add_option("--out-dir", sa.out_dir, "Output directory")->required();
  selftrain_cmd->add_option("--threshold", sa.threshold, "Selection threshold on confidence");
  selftrain_cmd->add_option("--cap", sa.cap, "Words taken per corpus before deduplication");
  selftrain_cmd->add_flag("--lowercase", sa.lowercase, "Lowercase corpus words before labeling");
  selftrain_cmd->add_flag("--parallel-seeds", sa.parallel_seeds, "Retrain seeds concurrently");
  sa.config.add_to(*selftrain_cmd);
  sa.decode.add_to(*selftrain_cmd);

  try {
    const auto args = hoist_config(argv_vector(argc, argv));
    std::vector<const char*> ptrs;
    for (const auto& a : args) ptrs.push_back(a.c_str());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  RunManifest manifest;
  manifest.argv = argv_vector(argc, argv);
  try {
    fs::path manifest_path;
    if (*train) {
      manifest.command = "train";
      cmd_train(ta, manifest, out, err);
      manifest_path = fs::path(ta.out_dir) / "manifest.json";
    } else if (*evaluate_cmd) {
      if (eval_config_version != kConfigVersion) throw CliError("unsupported config_version");
      manifest.command = "evaluate";
      cmd_evaluate(ea, manifest, out, err);
      manifest_path = fs::path(ea.out_dir) / "manifest.json";
    } else if (*predict_cmd) {
      if (predict_config_version != kConfigVersion) throw CliError("unsupported config_version");
      manifest.command = "predict";
      cmd_predict(pa, manifest, out, err);
      if (!pa.output.empty() && pa.output != "-") manifest_path = fs::path(pa.output + ".manifest.json");
    } else if (*selftrain_cmd) {
      manifest.command = "selftrain";
      cmd_selftrain(sa, manifest, out, err);
      manifest_path = fs::path(sa.out_dir) / "manifest.json";
    }
    if (!manifest_path.empty()) manifest.save(manifest_path);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace g2p::cli

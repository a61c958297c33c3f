#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "g2p/cli.hpp"
#include "g2p/synthetic.hpp"

using namespace g2p;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "g2p");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

// Two small synthetic languages on disk plus a trained 2-seed micro model.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "g2p_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    for (const std::string lang : {"sya", "syb"}) {
      const auto split = synthetic::make_split(lang, 40, 6, lang == "sya" ? 1 : 2);
      write_file(root_ / (lang + "_train.tsv"), write_tsv(split.train));
      write_file(root_ / (lang + "_dev.tsv"), write_tsv(split.dev));
      std::string words;
      for (const auto& e : split.dev) words += e.word() + "\n";
      write_file(root_ / (lang + "_words.txt"), words);
    }
    write_file(root_ / "sya_corpus.txt", synthetic::make_corpus(300, 4));
    const auto r = run_cli(train_args(root_ / "model"));
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static std::vector<std::string> train_args(const fs::path& out) {
    return {"train",     "--train",   "sya=" + (root_ / "sya_train.tsv").string(),
            "--train",   "syb=" + (root_ / "syb_train.tsv").string(),
            "--out-dir", out.string(), "--micro",
            "--steps",   "8",           "--batch-tokens",
            "256",       "--warmup",    "4",
            "--seeds",   "1,2"};
  }

  static std::string gold(const std::string& lang) { return lang + "=" + (root_ / (lang + "_dev.tsv")).string(); }
  static fs::path path(const std::string& name) { return root_ / name; }
  static fs::path model() { return root_ / "model"; }

  static fs::path root_;
};

fs::path CliTest::root_;

}  // namespace

TEST_F(CliTest, TrainWritesQuarterCheckpointsAndManifest) {
  for (int seed : {1, 2}) {
    for (int step : {2, 4, 6, 8}) {
      EXPECT_TRUE(fs::exists(model() / ("seed" + std::to_string(seed)) / ("step" + std::to_string(step) + ".ckpt")));
    }
  }
  const auto md = cli::load_model_dir(model());
  EXPECT_EQ(md.checkpoints.size(), 8u);
  EXPECT_EQ(md.labels.front(), "seed1/step2");
  EXPECT_EQ(md.labels.back(), "seed2/step8");
  EXPECT_EQ(cli::load_model_dir(model(), true).checkpoints.size(), 2u);

  const auto m = read_json(model() / "manifest.json");
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["version"], std::string(cli::kToolVersion));
  EXPECT_EQ(m["config"]["train"]["total_steps"], 8);
  EXPECT_EQ(m["config"]["model"]["hidden_size"], 64);
  ASSERT_EQ(m["inputs"].size(), 2u);
  EXPECT_EQ(m["inputs"][0]["fnv1a64"], cli::hex64(fnv1a64(read_file(path("sya_train.tsv")))));
  EXPECT_FALSE(m["finished"].get<std::string>().empty());
  EXPECT_EQ(m["outputs"].size(), 3u + 8u);
}

TEST_F(CliTest, TrainingIsReproducibleFromTheCommandLine) {
  const auto again = root_ / "model_again";
  ASSERT_EQ(run_cli(train_args(again)).code, 0);
  for (const auto& rel : {"seed1/step8.ckpt", "seed2/step4.ckpt", "source.vocab", "target.vocab"}) {
    EXPECT_EQ(read_file(model() / rel), read_file(again / rel)) << rel;
  }
}

TEST_F(CliTest, EvaluateWritesPerLanguageAndAverageRows) {
  const auto out = root_ / "eval";
  const auto r = run_cli({"evaluate", "--model", model().string(), "--gold", gold("sya"), "--gold", gold("syb"),
                          "--out-dir", out.string(), "--beam", "2", "--jobs", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto tsv = read_file(out / "report.tsv");
  EXPECT_EQ(tsv, r.out);
  EXPECT_EQ(tsv.rfind("lang\tWER\tPER\n", 0), 0u);
  EXPECT_EQ(count_lines(tsv), 4u);
  const auto j = read_json(out / "report.json");
  EXPECT_EQ(j["rows"].size(), 2u);
  const auto m = read_json(out / "manifest.json");
  EXPECT_EQ(m["command"], "evaluate");
  EXPECT_EQ(m["details"]["members"].size(), 8u);
}

TEST_F(CliTest, AblationHasFourCheckpointsPlusEnsemble) {
  const auto one_seed = root_ / "model_one_seed";
  auto args = train_args(one_seed);
  args.back() = "1";
  ASSERT_EQ(run_cli(args).code, 0);
  const auto out = root_ / "ablation";
  const auto r = run_cli({"evaluate", "--model", one_seed.string(), "--gold", gold("sya"), "--out-dir", out.string(),
                          "--ablate-checkpoints", "--beam", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto tsv = read_file(out / "ablation.tsv");
  EXPECT_EQ(count_lines(tsv), 1u + 5u);
  EXPECT_NE(tsv.find("seed1/step2\t"), std::string::npos);
  EXPECT_NE(tsv.find("\nEnsemble\t"), std::string::npos);
}

TEST_F(CliTest, GoldEchoedAsPredictionsScoresZero) {
  std::vector<std::string> args{"evaluate", "--out-dir", (root_ / "echo").string()};
  for (const std::string lang : {"sya", "syb"}) {
    const auto entries = parse_wikipron_tsv(read_file(path(lang + "_dev.tsv")), LanguageCode(lang));
    std::vector<PredictionRow> rows;
    for (const auto& e : entries) rows.push_back({e.word(), e.target, 1.0});
    write_file(path(lang + "_echo.tsv"), write_prediction_tsv(rows));
    args.insert(args.end(), {"--gold", gold(lang), "--predictions", lang + "=" + path(lang + "_echo.tsv").string()});
  }
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "lang\tWER\tPER\nsya\t0.00\t0.00\nsyb\t0.00\t0.00\navg\t0.00\t0.00\n");
}

TEST_F(CliTest, PredictOneRowPerWord) {
  const auto r = run_cli({"predict", "--model", model().string(), "--lang", "sya", "--input",
                          path("sya_words.txt").string(), "--beam", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_prediction_tsv(r.out);
  const auto words = parse_word_list(read_file(path("sya_words.txt")));
  ASSERT_EQ(rows.size(), words.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].word, words[i]);
    EXPECT_TRUE(rows[i].confidence.has_value());
  }

  const auto file = path("pred.tsv");
  ASSERT_EQ(run_cli({"predict", "--model", model().string(), "--lang", "sya", "--input",
                     path("sya_words.txt").string(), "--output", file.string(), "--beam", "1"})
                .code,
            0);
  EXPECT_EQ(parse_prediction_tsv(read_file(file)).size(), words.size());
  const auto m = read_json(fs::path(file.string() + ".manifest.json"));
  EXPECT_EQ(m["command"], "predict");
  EXPECT_EQ(m["config"]["beam"], 1);
}

TEST_F(CliTest, PredictBeamOneIsGreedy) {
  const auto md = cli::load_model_dir(model());
  const auto spec = EnsembleSpec::from_checkpoints(md.checkpoints, md.vocabs);
  const auto r = run_cli({"predict", "--model", model().string(), "--lang", "sya", "--input",
                          path("sya_words.txt").string(), "--beam", "1"});
  ASSERT_EQ(r.code, 0);
  const auto rows = parse_prediction_tsv(r.out);
  for (const auto& row : rows) {
    const auto ids = encode(prepend_language_tag({LanguageCode("sya"), tokenize_graphemes(row.word), {}, {}},
                                                 md.vocabs.source),
                            md.vocabs.source, false);
    EnsembleScorer scorer(spec, ids);
    // Repeated argmax over the averaged distribution, lowest id on ties.
    std::vector<std::int32_t> prefix{Vocabulary::kBos};
    std::vector<std::string> greedy;
    for (std::size_t step = 0; step < default_max_len(ids.size() - 1); ++step) {
      const auto d = scorer.next_distributions({prefix})[0];
      std::size_t arg = Vocabulary::kEos;
      for (std::size_t t = Vocabulary::kEos; t < d.size(); ++t) {
        if (d[t] > d[arg]) arg = t;
      }
      if (static_cast<std::int32_t>(arg) == Vocabulary::kEos) break;
      prefix.push_back(static_cast<std::int32_t>(arg));
      greedy.push_back(md.vocabs.target.token(static_cast<std::int32_t>(arg)));
    }
    EXPECT_EQ(row.segments, greedy) << row.word;
  }
}

TEST_F(CliTest, PredictEmptyInputGivesEmptyOutput) {
  write_file(path("empty.txt"), "");
  const auto r = run_cli({"predict", "--model", model().string(), "--lang", "sya", "--input", path("empty.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "");
}

TEST_F(CliTest, MonolingualTrainAndEvaluate) {
  const auto out = root_ / "mono";
  auto args = train_args(out);
  args.back() = "1";
  args.push_back("--monolingual");
  ASSERT_EQ(run_cli(args).code, 0);
  EXPECT_TRUE(fs::exists(out / "sya" / "seed1" / "step8.ckpt"));
  EXPECT_TRUE(fs::exists(out / "syb" / "seed1" / "step8.ckpt"));
  const auto vocab = Vocabulary::deserialize(read_file(out / "sya" / "source.vocab"));
  EXPECT_FALSE(vocab.has_language(LanguageCode("syb")));
  const auto r = run_cli({"evaluate", "--model", out.string(), "--monolingual", "--gold", gold("sya"), "--gold",
                          gold("syb"), "--out-dir", (root_ / "mono_eval").string(), "--beam", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(r.out), 4u);
}

TEST_F(CliTest, SelftrainNearOneThresholdEqualsBaselineRetrain) {
  const auto out = root_ / "selftrain";
  const auto r = run_cli({"selftrain", "--model", model().string(), "--train", "sya=" + path("sya_train.tsv").string(),
                          "--train", "syb=" + path("syb_train.tsv").string(), "--dev", gold("sya"), "--dev",
                          gold("syb"), "--corpus", "sya=" + path("sya_corpus.txt").string(), "--out-dir",
                          out.string(), "--threshold", "0.999999", "--beam", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stats = read_file(out / "selection.tsv");
  EXPECT_EQ(stats.rfind("Language\tTranslated\tSelected\nsya\t", 0), 0u);
  EXPECT_NE(stats.find("\t0\nTotal\t"), std::string::npos);
  EXPECT_EQ(read_file(out / "silver" / "sya.tsv"), "");

  const auto m = read_json(out / "manifest.json");
  EXPECT_EQ(m["details"]["skipped_languages"], nlohmann::json::array({"syb"}));
  EXPECT_EQ(m["details"]["silver_count"], 0);
  EXPECT_TRUE(m["details"].contains("dev_mean_confidence"));
  // Stored config is reused, so the retrain repeats the base run exactly.
  for (const auto& rel : {"seed1/step8.ckpt", "seed2/step8.ckpt", "source.vocab"}) {
    EXPECT_EQ(read_file(out / "model" / rel), read_file(model() / rel)) << rel;
  }
  // Report restricted to the augmented language.
  EXPECT_EQ(count_lines(read_file(out / "report.tsv")), 3u);
  EXPECT_EQ(count_lines(read_file(out / "report_all.tsv")), 4u);
}

TEST_F(CliTest, ConfigFileWithFlagsWinning) {
  write_file(path("train.ini"), "[train]\nmicro=true\nsteps=40\nbatch-tokens=256\nwarmup=4\nseeds=3\n");
  const auto out = root_ / "from_config";
  const auto r = run_cli({"train", "--config", path("train.ini").string(), "--train",
                          "sya=" + path("sya_train.tsv").string(), "--out-dir", out.string(), "--steps", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "seed3" / "step4.ckpt"));
  EXPECT_FALSE(fs::exists(out / "seed3" / "step40.ckpt"));
  EXPECT_EQ(read_json(out / "manifest.json")["config"]["model"]["hidden_size"], 64);

  write_file(path("future.ini"), "[train]\nconfig_version=2\n");
  const auto v = run_cli({"--config", path("future.ini").string(), "train", "--train",
                          "sya=" + path("sya_train.tsv").string(), "--out-dir", out.string(), "--micro"});
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.err.find("config_version"), std::string::npos);
}

TEST_F(CliTest, ErrorsExitNonZero) {
  EXPECT_NE(run_cli({}).code, 0);
  EXPECT_NE(run_cli({"train", "--out-dir", (root_ / "x").string()}).code, 0);

  const auto missing = run_cli({"train", "--train", "sya=" + (root_ / "nope.tsv").string(), "--out-dir",
                                (root_ / "x").string(), "--micro", "--steps", "4"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("nope.tsv"), std::string::npos);

  auto bad_version = train_args(root_ / "x");
  bad_version.insert(bad_version.end(), {"--config_version", "2"});
  const auto v = run_cli(bad_version);
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.err.find("config_version"), std::string::npos);
  EXPECT_FALSE(fs::exists(root_ / "x" / "manifest.json"));

  auto indivisible = train_args(root_ / "x");
  indivisible[indivisible.size() - 7] = "7";  // --steps value
  EXPECT_EQ(run_cli(indivisible).code, 1);

  EXPECT_EQ(run_cli({"evaluate", "--gold", gold("sya"), "--out-dir", (root_ / "y").string()}).code, 1);
  EXPECT_EQ(run_cli({"predict", "--model", (root_ / "nowhere").string(), "--lang", "sya", "--input",
                     path("sya_words.txt").string()})
                .code,
            1);
  EXPECT_EQ(run_cli({"train", "--train", "no-equals-sign", "--out-dir", (root_ / "x").string()}).code, 1);

  // Ensemble from a vocabulary it was not trained with.
  const auto other = root_ / "mismatch";
  fs::create_directories(other / "seed1");
  fs::copy_file(model() / "seed1" / "step8.ckpt", other / "seed1" / "step8.ckpt");
  const std::vector<Dataset> sya_only{
      {parse_wikipron_tsv(read_file(path("sya_train.tsv")), LanguageCode("sya")), Split::train}};
  write_file(other / "source.vocab", build_vocabulary(sya_only).source.serialize());
  write_file(other / "target.vocab", read_file(model() / "target.vocab"));
  const auto mm = run_cli({"evaluate", "--model", other.string(), "--gold", gold("sya"), "--out-dir",
                           (root_ / "z").string()});
  EXPECT_EQ(mm.code, 1);
}

TEST(CliBinary, RunsAsAProcess) {
  const std::string bin = G2P_CLI_PATH;
  EXPECT_EQ(std::system((bin + " --version > /dev/null").c_str()), 0);
  EXPECT_NE(std::system((bin + " evaluate > /dev/null 2>&1").c_str()), 0);
}

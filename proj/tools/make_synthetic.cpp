// Writes a small synthetic multilingual dataset for trying the toolkit:
//   <out>/<lang>_train.tsv, <lang>_dev.tsv, <lang>_words.txt, <lang>_corpus.txt

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "g2p/data.hpp"
#include "g2p/synthetic.hpp"
#include "g2p/training.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate synthetic G2P data", "make_synthetic"};
  std::string out_dir;
  std::size_t n_train = 400, n_dev = 100, n_corpus = 10000;
  std::uint64_t seed = 7;
  app.add_option("--out-dir", out_dir, "Output directory")->required();
  app.add_option("--train", n_train, "Training pairs per language");
  app.add_option("--dev", n_dev, "Dev pairs per language");
  app.add_option("--corpus-tokens", n_corpus, "Raw corpus tokens per language");
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);

  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::uint64_t s = seed;
  for (const auto& lang : g2p::synthetic::language_codes()) {
    const auto split = g2p::synthetic::make_split(lang, n_train, n_dev, s++);
    g2p::write_file(dir / (lang + "_train.tsv"), g2p::write_tsv(split.train));
    g2p::write_file(dir / (lang + "_dev.tsv"), g2p::write_tsv(split.dev));
    std::string words;
    for (const auto& e : split.dev) words += e.word() + "\n";
    g2p::write_file(dir / (lang + "_words.txt"), words);
    g2p::write_file(dir / (lang + "_corpus.txt"), g2p::synthetic::make_corpus(n_corpus, s++ * 1000));
  }
  std::cout << "wrote " << g2p::synthetic::language_codes().size() << " languages to " << dir.string() << '\n';
  return 0;
}

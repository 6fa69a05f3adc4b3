#include <cstdio>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "recallprobe/recallprobe.hpp"

namespace {

using namespace rp;

const std::vector<std::string> kFirsts = {"mira",  "tomas", "ines",  "ravi",  "lena",
                                          "oskar", "priya", "milan", "dora",  "felix"};
const std::vector<std::string> kLasts = {"stone", "vega",  "marsh", "abel",  "rhodes",
                                         "kline", "ferro", "nash",  "wilde", "cross"};
const std::vector<std::string> kGlue = {"works", "lives", "plays", "studied", "painter",
                                        "was",   "born",  "at",    "in",      "for",
                                        "the",   "near",  "old",   "grand"};
const std::vector<std::string> kPlaces = {"city",   "tower",  "harbor", "museum", "college",
                                          "club",   "band",   "school", "north",  "south",
                                          "east",   "west",   "red",    "blue",   "green",
                                          "bridge", "garden", "market", "valley", "station"};

std::string fill_template(int which, const std::string& subject) {
  switch (which % 5) {
    case 0: return subject + " works at";
    case 1: return subject + " lives in";
    case 2: return subject + " plays for";
    case 3: return subject + " studied at";
    default: return "the painter " + subject + " was born in";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate a small word-level model with matching queries and paragraphs"};
  std::string out_dir;
  std::uint64_t seed = 7;
  int layers = 4, heads = 2, d_model = 16, d_inner = 32, n_queries = 10;
  std::string layout = "serial";
  app.add_option("--out", out_dir, "directory for the generated bundle")->required();
  app.add_option("--seed", seed, "weight initialisation seed");
  app.add_option("--layers", layers)->check(CLI::PositiveNumber);
  app.add_option("--heads", heads)->check(CLI::PositiveNumber);
  app.add_option("--d-model", d_model)->check(CLI::PositiveNumber);
  app.add_option("--d-inner", d_inner)->check(CLI::PositiveNumber);
  app.add_option("--queries", n_queries)->check(CLI::PositiveNumber);
  app.add_option("--layout", layout)->check(CLI::IsMember({"serial", "parallel"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    std::vector<std::string> words;
    for (const auto& pool : {kFirsts, kLasts, kGlue, kPlaces})
      for (const auto& w : pool) words.push_back(w);

    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_model = d_model;
    cfg.d_inner = d_inner;
    cfg.vocab_size = static_cast<int>(words.size());
    cfg.max_positions = 16;
    cfg.layout = layout == "serial" ? Layout::serial : Layout::parallel;
    const auto weights = make_random_weights<float>(cfg, seed);

    ensure_dir(out_dir);
    write_weights(out_dir + "/model.rpwt", cfg, weights);

    nlohmann::json vocab = nlohmann::json::object();
    std::unordered_map<std::string, int> vmap;
    for (int i = 0; i < cfg.vocab_size; ++i) {
      vocab[words[static_cast<std::size_t>(i)]] = i;
      vmap[words[static_cast<std::size_t>(i)]] = i;
    }
    atomic_write_file(out_dir + "/vocab.json", vocab.dump(1));

    const WhitespaceTokenizer tok(vmap);
    std::string dataset, corpus;
    int doc_no = 0;
    for (int i = 0; i < n_queries; ++i) {
      const std::string subject = kFirsts[static_cast<std::size_t>(i) % kFirsts.size()] +
                                  " " +
                                  kLasts[static_cast<std::size_t>(i * 3 + 1) % kLasts.size()];
      const std::string query = fill_template(i, subject);
      const auto ids = tok.encode(query).ids;
      const auto trace = forward(cfg, weights, std::span<const int>(ids));
      const int pred = argmax_index(std::span<const float>(trace.final_probs));
      const std::string& attribute = words[static_cast<std::size_t>(pred)];
      dataset += nlohmann::json{{"query", query},
                                {"subject", subject},
                                {"attribute", attribute},
                                {"relation_id", "t" + std::to_string(i % 5)}}
                     .dump() +
                 "\n";

      const auto& pa = kPlaces[static_cast<std::size_t>(i * 7 + 2) % kPlaces.size()];
      const auto& pb = kPlaces[static_cast<std::size_t>(i * 5 + 4) % kPlaces.size()];
      corpus += nlohmann::json{{"doc_id", "p" + std::to_string(doc_no++)},
                               {"title", subject},
                               {"text", subject + " works near the " + pa + " " + attribute}}
                    .dump() +
                "\n";
      corpus += nlohmann::json{{"doc_id", "p" + std::to_string(doc_no++)},
                               {"text", "the old " + pb + " near " + subject +
                                            " was the grand " + pa}}
                    .dump() +
                "\n";
    }
    for (int i = 0; i < 3; ++i) {
      const auto& pa = kPlaces[static_cast<std::size_t>(i * 11 + 3) % kPlaces.size()];
      const auto& pb = kPlaces[static_cast<std::size_t>(i * 13 + 6) % kPlaces.size()];
      corpus += nlohmann::json{{"doc_id", "p" + std::to_string(doc_no++)},
                               {"text", "the " + pa + " near the old " + pb}}
                    .dump() +
                "\n";
    }
    atomic_write_file(out_dir + "/dataset.jsonl", dataset);
    atomic_write_file(out_dir + "/corpus.jsonl", corpus);
    atomic_write_file(out_dir + "/stopwords.txt", "the\nwas\nnear\nold\ngrand\n");

    std::printf("wrote model.rpwt, vocab.json, dataset.jsonl, corpus.jsonl, stopwords.txt\n");
    std::printf("%d layers, %d heads, d_model %d, vocab %d, %d queries into %s\n",
                cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab_size, n_queries,
                out_dir.c_str());
    return 0;
  } catch (const rp::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == rp::errc::io ? 3 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

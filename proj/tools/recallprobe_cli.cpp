#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "recallprobe/recallprobe.hpp"

namespace {

using namespace rp;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case errc::io:
    case errc::truncated:
    case errc::bad_magic:
    case errc::bad_version:
      return 3;
    default:
      return 2;
  }
}

void add_common_options(CLI::App* cmd, ExperimentOptions& opt, bool corpus_kind) {
  cmd->add_option("--weights", opt.weights_path, "model weights container")
      ->required();
  cmd->add_option("--vocab", opt.vocab_path, "tokenizer vocabulary JSON")->required();
  cmd->add_option("--merges", opt.merges_path,
                  "byte pair merges file; omit to read the vocabulary as whole words");
  cmd->add_option("--dataset", opt.dataset_path, "query records, one JSON object per line")
      ->required();
  cmd->add_option("--out", opt.out_dir, "directory for report.json and plot CSVs")
      ->required();
  auto* corpus =
      cmd->add_option("--corpus", opt.corpus_path, "retrieval paragraphs, JSONL");
  auto* stop = cmd->add_option("--stopwords", opt.stopwords_path,
                               "stopword list, one word per line");
  if (corpus_kind) {
    corpus->required();
    stop->required();
  }
  cmd->add_option("--window-k", opt.window_k, "knockout window width, odd")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--top-k", opt.top_k, "projection depth (-1 for the per-command default)");
  cmd->add_option("--reference-layer", opt.reference_layer,
                  "layer whose residual gets scored (-1 for min(40, depth))");
  cmd->add_option("--seed", opt.seed, "random seed echoed into the report");
  cmd->add_option("--workers", opt.workers, "worker threads across queries")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--limit", opt.limit, "keep only the first N usable queries");
  cmd->add_option("--candidate-top-n", opt.candidate_top_n,
                  "paragraphs retrieved per subject")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--permissive", opt.permissive, "skip malformed records with a warning");
}

int run_kind(ExperimentKind kind, const ExperimentOptions& opt) {
  const nlohmann::json report = run_experiment(kind, opt);
  for (const auto& w : report.at("warnings"))
    std::fprintf(stderr, "warning: %s\n", w.get<std::string>().c_str());
  const auto& counts = report.at("counts");
  std::printf("%s: %d records, %d used, report in %s\n", to_string(kind).c_str(),
              counts.at("records").get<int>(), counts.at("used").get<int>(),
              opt.out_dir.c_str());
  return 0;
}

int run_validate(const ExperimentOptions& opt, bool with_dataset) {
  const auto [cfg, w] = load_weights(opt.weights_path);
  std::printf("weights: %d layers, %d heads, d_model %d, d_inner %d, vocab %d\n",
              cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_inner, cfg.vocab_size);
  std::printf("layout %s, activation %s, positions up to %d\n",
              cfg.layout == Layout::serial ? "serial" : "parallel",
              cfg.activation == Activation::gelu ? "gelu" : "relu", cfg.max_positions);

  // a short self check: reconstruction, attention rows, determinism
  std::vector<int> probe;
  for (int i = 0; i < std::min(4, cfg.max_positions); ++i)
    probe.push_back(i % cfg.vocab_size);
  const auto t1 = forward(cfg, w, std::span<const int>(probe));
  const auto t2 = forward(cfg, w, std::span<const int>(probe));
  const int n = static_cast<int>(probe.size());
  for (int l = 1; l <= cfg.n_layers; ++l) {
    for (std::size_t p = 0; p < static_cast<std::size_t>(n); ++p) {
      for (int h = 0; h < cfg.n_heads; ++h) {
        double sum = 0;
        for (std::size_t k = 0; k <= p; ++k) sum += t1.head_weight(l, h)(p, k);
        if (std::abs(sum - 1.0) > 1e-4)
          fail(errc::validation, "attention rows of layer " + std::to_string(l) +
                                     " do not sum to one");
      }
      for (std::size_t d = 0; d < static_cast<std::size_t>(cfg.d_model); ++d) {
        const float want = t1.residual(l - 1)(p, d) + t1.attn_update(l)(p, d) +
                           t1.mlp_update(l)(p, d);
        if (std::abs(want - t1.residual(l)(p, d)) > 1e-3f)
          fail(errc::validation,
               "residual of layer " + std::to_string(l) + " does not reconstruct");
        if (t1.residual(l)(p, d) != t2.residual(l)(p, d))
          fail(errc::validation, "repeat run diverged at layer " + std::to_string(l));
      }
    }
  }
  std::printf("self check: residual reconstruction, attention rows, repeatability ok\n");

  if (!opt.vocab_path.empty()) {
    const auto tok = load_tokenizer(opt.vocab_path, opt.merges_path);
    if (tok->vocab_size() != cfg.vocab_size)
      fail(errc::validation, "tokenizer has " + std::to_string(tok->vocab_size()) +
                                 " entries but the model expects " +
                                 std::to_string(cfg.vocab_size));
    std::printf("tokenizer: %s, %d entries\n", tok->name().c_str(), tok->vocab_size());
  }

  if (with_dataset) {
    const auto loaded = load_dataset(opt.dataset_path, opt.permissive);
    for (const auto& warn : loaded.warnings)
      std::fprintf(stderr, "warning: %s\n", warn.c_str());
    std::printf("dataset: %zu records\n", loaded.records.size());
  }
  std::printf("all checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trace and dissect factual recall in small transformer checkpoints"};
  app.require_subcommand(1);

  ExperimentOptions opt;
  std::vector<std::pair<ExperimentKind, CLI::App*>> commands;

  auto add_kind = [&](ExperimentKind kind, const char* help) {
    CLI::App* cmd = app.add_subcommand(rp::to_string(kind), help);
    add_common_options(cmd, opt, rp::experiment_needs_corpus(kind));
    commands.emplace_back(kind, cmd);
    return cmd;
  };

  auto* info_flow = add_kind(rp::ExperimentKind::info_flow,
                             "knock out attention windows and track the answer probability");
  info_flow->add_option("--flow-variant", opt.flow_variant,
                        "standard, order_split, no_first or subject_pos");
  add_kind(rp::ExperimentKind::attr_rate,
           "project residuals to the vocabulary and score candidate attributes");
  add_kind(rp::ExperimentKind::sublayer_knockout,
           "zero attention or feed-forward updates from a start layer upward");
  add_kind(rp::ExperimentKind::extraction,
           "find the layers whose updates promote the predicted attribute");
  auto* patching = add_kind(rp::ExperimentKind::patching,
                            "freeze chosen positions at an early layer's values");
  patching->add_option("--patch-sources", opt.patch_sources,
                       "source layers to freeze from")
      ->delimiter(',');
  add_kind(rp::ExperimentKind::heads, "rank attention heads by their vocabulary mappings");
  add_kind(rp::ExperimentKind::saliency,
           "gradient times activation scores for every position");
  auto* sweep = add_kind(rp::ExperimentKind::window_sweep,
                         "repeat the knockout scan over several window widths");
  sweep->add_option("--sweep-widths", opt.sweep_widths, "window widths to try")
      ->delimiter(',');

  CLI::App* validate = app.add_subcommand(
      "validate", "load a container, self check it and report its shape");
  validate->add_option("--weights", opt.weights_path, "model weights container")
      ->required();
  validate->add_option("--vocab", opt.vocab_path, "tokenizer vocabulary JSON");
  validate->add_option("--merges", opt.merges_path, "byte pair merges file");
  validate->add_option("--dataset", opt.dataset_path, "query records JSONL");
  validate->add_flag("--permissive", opt.permissive,
                     "skip malformed records with a warning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints the message, 0 for --help
    return rc == 0 ? 0 : 2;
  }

  try {
    if (validate->parsed()) return run_validate(opt, !opt.dataset_path.empty());
    for (const auto& [kind, cmd] : commands)
      if (cmd->parsed()) return run_kind(kind, opt);
    return 2;
  } catch (const rp::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

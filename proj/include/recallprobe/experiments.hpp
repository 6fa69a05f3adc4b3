#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "recallprobe/attribution.hpp"
#include "recallprobe/candidates.hpp"
#include "recallprobe/container.hpp"
#include "recallprobe/dataset.hpp"
#include "recallprobe/lens.hpp"
#include "recallprobe/metrics.hpp"
#include "recallprobe/report.hpp"

namespace rp {

enum class ExperimentKind {
  info_flow,
  attr_rate,
  sublayer_knockout,
  extraction,
  patching,
  heads,
  saliency,
  window_sweep
};

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::info_flow: return "info-flow";
    case ExperimentKind::attr_rate: return "attr-rate";
    case ExperimentKind::sublayer_knockout: return "sublayer-knockout";
    case ExperimentKind::extraction: return "extraction";
    case ExperimentKind::patching: return "patching";
    case ExperimentKind::heads: return "heads";
    case ExperimentKind::saliency: return "saliency";
    case ExperimentKind::window_sweep: return "window-sweep";
  }
  return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (ExperimentKind k :
       {ExperimentKind::info_flow, ExperimentKind::attr_rate, ExperimentKind::sublayer_knockout,
        ExperimentKind::extraction, ExperimentKind::patching, ExperimentKind::heads,
        ExperimentKind::saliency, ExperimentKind::window_sweep})
    if (to_string(k) == s) return k;
  fail(errc::validation, "unknown experiment kind '" + s + "'");
}

struct ExperimentOptions {
  std::string weights_path;
  std::string vocab_path;
  std::string merges_path;  // empty selects the word-level tokenizer
  std::string dataset_path;
  std::string corpus_path;
  std::string stopwords_path;
  std::string out_dir;
  int window_k = 9;
  int top_k = -1;           // -1 picks the per-experiment default
  int reference_layer = -1; // -1 means min(40, n_layers)
  std::uint64_t seed = 0;
  int workers = 1;
  int limit = -1;  // keep only the first N filtered queries
  int candidate_top_n = 100;
  bool permissive = false;
  // info-flow variants: standard, order_split, no_first, subject_pos
  std::string flow_variant = "standard";
  std::vector<int> sweep_widths = {1, 5, 9, 13, 17, 21};
  std::vector<int> patch_sources = {0, 1, 5, 10, 20};
};

inline void to_json(nlohmann::json& j, const ExperimentOptions& o) {
  j = nlohmann::json{{"weights", o.weights_path},
                     {"vocab", o.vocab_path},
                     {"merges", o.merges_path},
                     {"dataset", o.dataset_path},
                     {"corpus", o.corpus_path},
                     {"stopwords", o.stopwords_path},
                     {"out", o.out_dir},
                     {"window_k", o.window_k},
                     {"top_k", o.top_k},
                     {"reference_layer", o.reference_layer},
                     {"seed", o.seed},
                     {"workers", o.workers},
                     {"limit", o.limit},
                     {"candidate_top_n", o.candidate_top_n},
                     {"permissive", o.permissive},
                     {"flow_variant", o.flow_variant},
                     {"sweep_widths", o.sweep_widths},
                     {"patch_sources", o.patch_sources}};
}

struct ExperimentContext {
  ModelConfig cfg;
  WeightStore<float> weights;
  std::unique_ptr<Tokenizer> tokenizer;
  std::vector<FilteredQuery> queries;
  std::optional<Corpus> corpus;
  StopwordSet stopwords;
  int total_records = 0;
  int filtered_count = 0;
  std::vector<std::string> warnings;
  nlohmann::json inputs = nlohmann::json::object();
};

inline bool experiment_needs_corpus(ExperimentKind k) {
  return k == ExperimentKind::attr_rate || k == ExperimentKind::sublayer_knockout;
}

inline ExperimentContext load_context(const ExperimentOptions& opt, ExperimentKind kind) {
  ExperimentContext ctx;
  auto stamp = [&](const char* key, const std::string& path) {
    ctx.inputs[key] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
  };

  if (opt.weights_path.empty()) fail(errc::validation, "a weights container is required");
  std::tie(ctx.cfg, ctx.weights) = load_weights(opt.weights_path);
  stamp("weights", opt.weights_path);

  if (opt.vocab_path.empty()) fail(errc::validation, "a tokenizer vocabulary is required");
  ctx.tokenizer = load_tokenizer(opt.vocab_path, opt.merges_path);
  stamp("vocab", opt.vocab_path);
  if (!opt.merges_path.empty()) stamp("merges", opt.merges_path);
  if (ctx.tokenizer->vocab_size() != ctx.cfg.vocab_size)
    fail(errc::validation,
         "tokenizer has " + std::to_string(ctx.tokenizer->vocab_size()) +
             " entries but the model expects " + std::to_string(ctx.cfg.vocab_size));

  if (opt.dataset_path.empty()) fail(errc::validation, "a query dataset is required");
  auto loaded = load_dataset(opt.dataset_path, opt.permissive);
  stamp("dataset", opt.dataset_path);
  ctx.total_records = static_cast<int>(loaded.records.size());
  ctx.warnings = std::move(loaded.warnings);
  ctx.queries = filter_correct(std::span<const QueryRecord>(loaded.records), ctx.cfg,
                               ctx.weights, *ctx.tokenizer, &ctx.warnings);
  ctx.filtered_count = static_cast<int>(ctx.queries.size());
  if (opt.limit >= 0 && static_cast<int>(ctx.queries.size()) > opt.limit)
    ctx.queries.resize(static_cast<std::size_t>(opt.limit));
  if (ctx.queries.empty())
    fail(errc::validation, "no queries survive the correctness filter");

  if (experiment_needs_corpus(kind)) {
    if (opt.corpus_path.empty())
      fail(errc::validation, to_string(kind) + " needs a retrieval corpus (--corpus)");
    if (opt.stopwords_path.empty())
      fail(errc::validation, to_string(kind) + " needs a stopword list (--stopwords)");
  }
  if (!opt.corpus_path.empty()) {
    ctx.corpus = Corpus::from_jsonl(opt.corpus_path);
    stamp("corpus", opt.corpus_path);
  }
  if (!opt.stopwords_path.empty()) {
    ctx.stopwords = load_stopwords(opt.stopwords_path);
    stamp("stopwords", opt.stopwords_path);
  }
  return ctx;
}

namespace detail {

template <class F>
void parallel_for(int n, int workers, F&& f) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

struct MeanAcc {
  double sum = 0;
  long n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
};

inline nlohmann::json report_envelope(ExperimentKind kind, const ExperimentOptions& opt,
                                      const ExperimentContext& ctx) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["kind"] = to_string(kind);
  j["options"] = opt;
  j["model"] = ctx.cfg;
  j["inputs"] = ctx.inputs;
  j["counts"] = {{"records", ctx.total_records},
                 {"filtered", ctx.filtered_count},
                 {"used", ctx.queries.size()}};
  j["warnings"] = ctx.warnings;
  return j;
}

inline std::vector<int> all_positions_except(int n, const std::set<int>& drop) {
  std::vector<int> out;
  for (int p = 0; p < n; ++p)
    if (!drop.count(p)) out.push_back(p);
  return out;
}

// Key-position sets whose incoming edges from the last position get blocked,
// one per study condition. Empty sets mean the condition does not apply to
// this query's shape.
inline std::vector<std::pair<std::string, std::vector<int>>> blocked_sets(
    const TokenizedQuery& q) {
  const int n = q.length();
  const int last = n - 1;
  const int sl = q.last_subject_position();
  const std::set<int> subj(q.subject_positions.begin(), q.subject_positions.end());

  std::vector<int> non_subj = all_positions_except(n, subj);
  std::vector<int> non_subj_but_last;
  for (int p : non_subj)
    if (p != last) non_subj_but_last.push_back(p);
  std::vector<int> all_but_last = all_positions_except(n, {last});
  std::vector<int> all_but_first = all_positions_except(n, {0});
  std::vector<int> all_but_sl = all_positions_except(n, {sl});
  std::vector<int> all_but_sl_last = all_positions_except(n, {sl, last});

  return {{"none", {}},
          {"subj", q.subject_positions},
          {"non_subj", non_subj},
          {"subj_last", {sl}},
          {"last", {last}},
          {"subj_last+last", {sl, last}},
          {"non_subj_but_last", non_subj_but_last},
          {"all_but_last", all_but_last},
          {"all_but_first", all_but_first},
          {"all_but_subj_last", all_but_sl},
          {"all_but_subj_last+last", all_but_sl_last}};
}

inline InterventionPlan block_everywhere(const std::vector<int>& keys, int target, int n_layers) {
  InterventionPlan plan;
  for (int l = 1; l <= n_layers; ++l)
    for (int k : keys) plan.attention_blocks.push_back({l, target, k});
  return plan;
}

// Argmax reading of one sublayer update at the last position.
template <class T>
int update_argmax_token(const ModelConfig& cfg, const WeightStore<T>& w,
                        const ForwardTrace<T>& trace, int layer, SublayerKind kind,
                        ProjectionMode mode) {
  const auto last = static_cast<std::size_t>(trace.n_positions - 1);
  const Mat<T>& upd =
      kind == SublayerKind::mhsa ? trace.attn_update(layer) : trace.mlp_update(layer);
  const Vec<T> scores = vocab_scores(cfg, w, upd.row(last), mode);
  return argmax_index(std::span<const T>(scores));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// info-flow (and the window sweep, which is the same study over many widths)

namespace detail {

struct FlowCell {
  int width = 0;
  int center = 0;
  int cond = 0;
  int split = 0;
  double value = 0;
};

inline nlohmann::json run_info_flow_like(ExperimentKind kind, const ExperimentOptions& opt,
                                         ExperimentContext& ctx,
                                         const std::vector<int>& widths) {
  const int L = ctx.cfg.n_layers;
  const bool subject_pos = opt.flow_variant == "subject_pos";
  const bool order_split = opt.flow_variant == "order_split";
  const bool no_first = opt.flow_variant == "no_first";
  if (!subject_pos && !order_split && !no_first && opt.flow_variant != "standard")
    fail(errc::validation, "unknown info-flow variant '" + opt.flow_variant + "'");

  const std::vector<std::string> conditions =
      subject_pos ? std::vector<std::string>{"keep_first", "keep_last", "keep_before_last"}
                  : std::vector<std::string>{"subject", "relation", "last"};
  const std::vector<std::string> splits =
      order_split ? std::vector<std::string>{"subject_first", "subject_later"}
                  : std::vector<std::string>{"all"};

  const int nq = static_cast<int>(ctx.queries.size());
  std::vector<std::vector<FlowCell>> cells(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    const int last = q.last_position();
    const int split =
        order_split ? (q.first_subject_position() == 0 ? 0 : 1) : 0;

    std::vector<std::vector<int>> sets;
    if (subject_pos) {
      auto drop_one = [&](int keep) {
        std::vector<int> out;
        for (int p : q.subject_positions)
          if (p != keep) out.push_back(p);
        return out;
      };
      sets.push_back(drop_one(q.first_subject_position()));
      sets.push_back(drop_one(q.last_subject_position()));
      const int before_last = q.last_subject_position() - 1;
      sets.push_back(before_last >= q.first_subject_position() ? drop_one(before_last)
                                                               : std::vector<int>{});
    } else {
      sets.push_back(q.subject_positions);
      sets.push_back(q.relation_positions);
      sets.push_back({last});
      if (no_first)
        for (auto& s : sets)
          std::erase(s, 0);
    }

    auto& mine = cells[static_cast<std::size_t>(qi)];
    for (int width : widths) {
      for (int center = 1; center <= L; ++center) {
        for (std::size_t c = 0; c < sets.size(); ++c) {
          if (sets[c].empty()) continue;
          KnockoutWindow win;
          win.center_layer = center;
          win.width = width;
          win.source_positions = sets[c];
          win.target_position = last;
          const InterventionPlan plan = knockout_window(win, L);
          TraceGauges light;
          light.head_weights = false;
          const auto trace = forward(ctx.cfg, ctx.weights,
                                     std::span<const int>(q.token_ids), plan, light);
          const double p =
              trace.final_probs[static_cast<std::size_t>(q.attribute_token)];
          mine.push_back({width, center, static_cast<int>(c), split,
                          relative_prob_change(fq.base_prob, p)});
        }
      }
    }
  });

  std::map<std::tuple<int, int, int, int>, detail::MeanAcc> acc;
  for (const auto& qcells : cells)
    for (const auto& cell : qcells)
      acc[{cell.width, cell.center, cell.cond, cell.split}].add(cell.value);

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [key, a] : acc) {
    const auto [width, center, cond, split] = key;
    rows.push_back({{"window_k", width},
                    {"center_layer", center},
                    {"condition", conditions[static_cast<std::size_t>(cond)]},
                    {"split", splits[static_cast<std::size_t>(split)]},
                    {"mean_rel_change", a.mean()},
                    {"count", a.n}});
  }

  nlohmann::json report = detail::report_envelope(kind, opt, ctx);
  report["aggregates"][kind == ExperimentKind::window_sweep ? "window_sweep" : "info_flow"] =
      rows;
  nlohmann::json per_query = nlohmann::json::array();
  for (int qi = 0; qi < nq; ++qi) {
    const auto& fq = ctx.queries[static_cast<std::size_t>(qi)];
    per_query.push_back({{"index", qi},
                         {"subject", fq.record.subject},
                         {"prediction", fq.predicted_text},
                         {"base_prob", fq.base_prob}});
  }
  report["per_query"] = per_query;
  return report;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// attributes rate across layers, plus the embedding-level reading

namespace detail {

inline const CandidateAttributeSet& candidate_set_for(
    const std::string& subject, const ExperimentOptions& opt, ExperimentContext& ctx,
    std::map<std::string, CandidateAttributeSet>& cache, std::mutex& mu) {
  {
    std::lock_guard<std::mutex> lk(mu);
    auto it = cache.find(subject);
    if (it != cache.end()) return it->second;
  }
  CandidateAttributeSet built =
      build_candidate_set(subject, *ctx.corpus, *ctx.tokenizer, ctx.stopwords,
                          static_cast<std::size_t>(opt.candidate_top_n));
  std::lock_guard<std::mutex> lk(mu);
  return cache.emplace(subject, std::move(built)).first->second;
}

inline nlohmann::json candidate_sets_json(
    const std::map<std::string, CandidateAttributeSet>& cache) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [subject, set] : cache)
    j[subject] = {{"tokens", set.tokens}, {"retained_paragraphs", set.retained_paragraphs}};
  return j;
}

inline nlohmann::json run_attr_rate(const ExperimentOptions& opt, ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int top_k = opt.top_k > 0 ? opt.top_k : 50;
  const int nq = static_cast<int>(ctx.queries.size());

  std::map<std::string, CandidateAttributeSet> cache;
  std::mutex cache_mu;
  // cells per query: (layer, role, rate); role order below
  const std::vector<std::string> roles = {"first_subject", "last_subject", "after_subject",
                                          "last"};
  struct QueryOut {
    bool missing = false;
    int retained = 0;
    std::vector<std::tuple<int, int, double>> rates;
    std::optional<double> emb_max, emb_mean;
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    const CandidateAttributeSet& cand =
        candidate_set_for(fq.record.subject, opt, ctx, cache, cache_mu);
    mine.retained = cand.retained_paragraphs;
    if (cand.missing()) {
      mine.missing = true;
      return;
    }
    TraceGauges light;
    light.head_weights = false;
    const auto trace =
        forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), {}, light);
    const int positions[4] = {q.first_subject_position(), q.last_subject_position(),
                              q.last_subject_position() + 1, q.last_position()};
    for (int l = 1; l <= L; ++l) {
      for (int r = 0; r < 4; ++r) {
        const auto state = trace.residual(l).row(static_cast<std::size_t>(positions[r]));
        const auto proj = project_to_vocab(ctx.cfg, ctx.weights, state, top_k,
                                           ProjectionMode::final_head);
        std::vector<int> ids;
        for (const auto& [t, s] : proj.top) ids.push_back(t);
        const auto rate = attributes_rate(std::span<const int>(ids), cand);
        mine.rates.emplace_back(l, r, *rate);
      }
    }
    std::vector<int> subject_ids;
    for (int p : q.subject_positions)
      subject_ids.push_back(q.token_ids[static_cast<std::size_t>(p)]);
    const auto emb = embedding_attribute_rate(ctx.cfg, ctx.weights,
                                              std::span<const int>(subject_ids), cand, top_k);
    mine.emb_max = emb.per_token_max;
    mine.emb_mean = emb.mean_vector;
  });

  std::map<std::pair<int, int>, detail::MeanAcc> acc;
  detail::MeanAcc emb_max_acc, emb_mean_acc, retained_acc, pool_acc;
  int missing = 0;
  for (const auto& out : outs) {
    if (out.missing) ++missing;
    for (const auto& [l, r, v] : out.rates) acc[{l, r}].add(v);
    if (out.emb_max) emb_max_acc.add(*out.emb_max);
    if (out.emb_mean) emb_mean_acc.add(*out.emb_mean);
  }
  for (const auto& [subject, set] : cache) {
    retained_acc.add(set.retained_paragraphs);
    pool_acc.add(static_cast<double>(set.tokens.size()));
  }

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [key, a] : acc)
    rows.push_back({{"layer", key.first},
                    {"position", roles[static_cast<std::size_t>(key.second)]},
                    {"mean_rate", a.mean()},
                    {"count", a.n}});
  nlohmann::json emb_rows = nlohmann::json::array();
  if (emb_max_acc.n)
    emb_rows.push_back(
        {{"metric", "per_token_max"}, {"mean", emb_max_acc.mean()}, {"count", emb_max_acc.n}});
  if (emb_mean_acc.n)
    emb_rows.push_back(
        {{"metric", "mean_vector"}, {"mean", emb_mean_acc.mean()}, {"count", emb_mean_acc.n}});

  nlohmann::json report = detail::report_envelope(ExperimentKind::attr_rate, opt, ctx);
  report["aggregates"]["attr_rate"] = rows;
  report["aggregates"]["embedding_rate"] = emb_rows;
  report["aggregates"]["candidates"] = {
      {"subjects", cache.size()},
      {"queries_missing_candidates", missing},
      {"mean_retained_paragraphs", retained_acc.n ? retained_acc.mean() : 0.0},
      {"mean_candidate_tokens", pool_acc.n ? pool_acc.mean() : 0.0}};
  report["candidate_sets"] = candidate_sets_json(cache);
  return report;
}

// attributes rate at the subject's last position and a reference layer while
// sublayer updates are knocked out from successive starting layers
inline nlohmann::json run_sublayer_knockout(const ExperimentOptions& opt,
                                            ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int top_k = opt.top_k > 0 ? opt.top_k : 50;
  int ref = opt.reference_layer;
  if (ref < 0) ref = std::min(40, L);
  if (ref < 1 || ref > L)
    fail(errc::validation, "reference layer " + std::to_string(ref) + " outside [1, " +
                               std::to_string(L) + "]");

  std::map<std::string, CandidateAttributeSet> cache;
  std::mutex cache_mu;
  const int nq = static_cast<int>(ctx.queries.size());
  // per query: baseline rate, then (kind, start_layer, rate)
  struct QueryOut {
    bool missing = false;
    double baseline = 0;
    std::vector<std::tuple<int, int, double>> rates;
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    const CandidateAttributeSet& cand =
        candidate_set_for(fq.record.subject, opt, ctx, cache, cache_mu);
    if (cand.missing()) {
      mine.missing = true;
      return;
    }
    const int pos = q.last_subject_position();
    TraceGauges light;
    light.head_weights = false;

    auto measure = [&](const InterventionPlan& plan) {
      const auto trace =
          forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), plan, light);
      const auto state = trace.residual(ref).row(static_cast<std::size_t>(pos));
      const auto proj =
          project_to_vocab(ctx.cfg, ctx.weights, state, top_k, ProjectionMode::final_head);
      std::vector<int> ids;
      for (const auto& [t, s] : proj.top) ids.push_back(t);
      return *attributes_rate(std::span<const int>(ids), cand);
    };

    mine.baseline = measure({});
    for (int kind = 0; kind < 2; ++kind) {
      const SublayerKind sk = kind == 0 ? SublayerKind::mhsa : SublayerKind::mlp;
      for (int start = 1; start <= L; ++start)
        mine.rates.emplace_back(kind, start, measure(sublayer_knockout(sk, start, pos, L)));
    }
  });

  detail::MeanAcc base_acc;
  std::map<std::pair<int, int>, detail::MeanAcc> acc;
  int missing = 0;
  for (const auto& out : outs) {
    if (out.missing) {
      ++missing;
      continue;
    }
    base_acc.add(out.baseline);
    for (const auto& [kind, start, v] : out.rates) acc[{kind, start}].add(v);
  }
  if (base_acc.n == 0)
    fail(errc::validation, "every query is missing a candidate set; nothing to measure");

  nlohmann::json rows = nlohmann::json::array();
  rows.push_back({{"condition", "baseline"},
                  {"start_layer", -1},
                  {"mean_rate", base_acc.mean()},
                  {"count", base_acc.n}});
  for (const auto& [key, a] : acc)
    rows.push_back({{"condition", key.first == 0 ? "mhsa" : "mlp"},
                    {"start_layer", key.second},
                    {"mean_rate", a.mean()},
                    {"count", a.n}});

  nlohmann::json report =
      detail::report_envelope(ExperimentKind::sublayer_knockout, opt, ctx);
  report["aggregates"]["sublayer_knockout"] = rows;
  report["aggregates"]["reference_layer"] = ref;
  report["aggregates"]["queries_missing_candidates"] = missing;
  report["candidate_sets"] = candidate_sets_json(cache);
  return report;
}

// extraction events per layer plus the attention-blocking condition table
inline nlohmann::json run_extraction(const ExperimentOptions& opt, ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int nq = static_cast<int>(ctx.queries.size());
  const auto condition_names = [] {
    std::vector<std::string> names;
    TokenizedQuery dummy;  // names only depend on the fixed list
    dummy.token_ids = {0, 0, 0};
    dummy.subject_positions = {0};
    dummy.relation_positions = {1};
    for (const auto& [name, s] : detail::blocked_sets(dummy)) names.push_back(name);
    return names;
  }();

  struct QueryOut {
    std::vector<char> base_mhsa, base_mlp;
    // per condition index: valid flag + mhsa grid under that blocking
    std::vector<char> cond_valid;
    std::vector<std::vector<char>> cond_mhsa;
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    TraceGauges light;
    light.head_weights = false;
    const int attr = fq.query.attribute_token;
    const auto sets = detail::blocked_sets(q);
    mine.cond_valid.assign(sets.size(), 0);
    mine.cond_mhsa.resize(sets.size());

    for (std::size_t ci = 0; ci < sets.size(); ++ci) {
      const auto& keys = sets[ci].second;
      const bool baseline = sets[ci].first == "none";
      if (!baseline && keys.empty()) continue;
      InterventionPlan plan =
          baseline ? InterventionPlan{}
                   : detail::block_everywhere(keys, q.last_position(), L);
      const auto trace =
          forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), plan, light);
      mine.cond_valid[ci] = 1;
      auto& grid = mine.cond_mhsa[ci];
      grid.assign(static_cast<std::size_t>(L), 0);
      for (int l = 1; l <= L; ++l)
        grid[static_cast<std::size_t>(l - 1)] =
            detail::update_argmax_token(ctx.cfg, ctx.weights, trace, l, SublayerKind::mhsa,
                                        ProjectionMode::raw_embedding) == attr;
      if (baseline) {
        mine.base_mhsa = grid;
        mine.base_mlp.assign(static_cast<std::size_t>(L), 0);
        for (int l = 1; l <= L; ++l)
          mine.base_mlp[static_cast<std::size_t>(l - 1)] =
              detail::update_argmax_token(ctx.cfg, ctx.weights, trace, l, SublayerKind::mlp,
                                          ProjectionMode::raw_embedding) == attr;
      }
    }
  });

  // per-layer rates from the baseline grids
  std::vector<std::vector<char>> mhsa_grids, mlp_grids;
  for (const auto& out : outs) {
    mhsa_grids.push_back(out.base_mhsa);
    mlp_grids.push_back(out.base_mlp);
  }
  const ExtractionStats mhsa_stats = aggregate_extraction_stats(mhsa_grids);
  const ExtractionStats mlp_stats = aggregate_extraction_stats(mlp_grids);

  nlohmann::json layer_rows = nlohmann::json::array();
  for (int l = 1; l <= L; ++l) {
    layer_rows.push_back({{"layer", l},
                          {"sublayer", "mhsa"},
                          {"rate", mhsa_stats.per_layer_rates[static_cast<std::size_t>(l - 1)]},
                          {"count", nq}});
    layer_rows.push_back({{"layer", l},
                          {"sublayer", "mlp"},
                          {"rate", mlp_stats.per_layer_rates[static_cast<std::size_t>(l - 1)]},
                          {"count", nq}});
  }

  nlohmann::json cond_rows = nlohmann::json::array();
  for (std::size_t ci = 0; ci < condition_names.size(); ++ci) {
    std::vector<std::vector<char>> grids;
    for (const auto& out : outs)
      if (out.cond_valid[ci]) grids.push_back(out.cond_mhsa[ci]);
    if (grids.empty()) continue;
    const ExtractionStats st = aggregate_extraction_stats(grids);
    cond_rows.push_back({{"sublayer", "mhsa"},
                         {"blocked", condition_names[ci]},
                         {"extraction_rate", st.extraction_rate},
                         {"mean_extracting_layers", st.mean_extracting_layers},
                         {"count", st.n_queries}});
  }
  cond_rows.push_back({{"sublayer", "mlp"},
                       {"blocked", "none"},
                       {"extraction_rate", mlp_stats.extraction_rate},
                       {"mean_extracting_layers", mlp_stats.mean_extracting_layers},
                       {"count", mlp_stats.n_queries}});

  nlohmann::json report = detail::report_envelope(ExperimentKind::extraction, opt, ctx);
  report["aggregates"]["extraction_layers"] = layer_rows;
  report["aggregates"]["extraction_conditions"] = cond_rows;
  return report;
}

// extraction rate after freezing attention reads of chosen positions at a
// source layer
inline nlohmann::json run_patching(const ExperimentOptions& opt, ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int nq = static_cast<int>(ctx.queries.size());
  std::vector<int> sources;
  for (int s : opt.patch_sources)
    if (s >= 0 && s <= L - 1) sources.push_back(s);
  std::sort(sources.begin(), sources.end());
  sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
  const std::vector<std::string> conditions = {"subject", "last", "other"};

  struct QueryOut {
    char base_hit = 0;
    // (source index, condition index) -> valid, hit
    std::vector<char> valid, hit;
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    const int attr = q.attribute_token;
    TraceGauges light;
    light.head_weights = false;

    auto any_hit = [&](const InterventionPlan& plan) {
      const auto trace =
          forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), plan, light);
      for (int l = 1; l <= L; ++l)
        if (detail::update_argmax_token(ctx.cfg, ctx.weights, trace, l, SublayerKind::mhsa,
                                        ProjectionMode::raw_embedding) == attr)
          return true;
      return false;
    };

    mine.base_hit = any_hit({});
    mine.valid.assign(sources.size() * conditions.size(), 0);
    mine.hit.assign(sources.size() * conditions.size(), 0);
    const std::vector<int> last_set = {q.last_position()};
    for (std::size_t si = 0; si < sources.size(); ++si) {
      for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
        const std::vector<int>& set = ci == 0   ? q.subject_positions
                                      : ci == 1 ? last_set
                                                : q.relation_positions;
        if (set.empty()) continue;
        const std::size_t slot = si * conditions.size() + ci;
        mine.valid[slot] = 1;
        mine.hit[slot] =
            any_hit(patch_positions(std::span<const int>(set), sources[si]));
      }
    }
  });

  detail::MeanAcc base_acc;
  std::map<std::pair<int, int>, detail::MeanAcc> acc;
  for (const auto& out : outs) {
    base_acc.add(out.base_hit ? 1.0 : 0.0);
    for (std::size_t si = 0; si < sources.size(); ++si)
      for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
        const std::size_t slot = si * conditions.size() + ci;
        if (out.valid[slot])
          acc[{static_cast<int>(si), static_cast<int>(ci)}].add(out.hit[slot] ? 1.0 : 0.0);
      }
  }

  nlohmann::json rows = nlohmann::json::array();
  rows.push_back({{"source_layer", -1},
                  {"condition", "none"},
                  {"extraction_rate", base_acc.mean()},
                  {"count", base_acc.n}});
  for (const auto& [key, a] : acc)
    rows.push_back({{"source_layer", sources[static_cast<std::size_t>(key.first)]},
                    {"condition", conditions[static_cast<std::size_t>(key.second)]},
                    {"extraction_rate", a.mean()},
                    {"count", a.n}});

  nlohmann::json report = detail::report_envelope(ExperimentKind::patching, opt, ctx);
  report["aggregates"]["patching"] = rows;
  return report;
}

// which attention heads map subject tokens onto the prediction
inline nlohmann::json run_heads(const ExperimentOptions& opt, ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int H = ctx.cfg.n_heads;
  const int top_k = opt.top_k > 0 ? opt.top_k : 10;
  const int nq = static_cast<int>(ctx.queries.size());

  struct QueryOut {
    int events = 0;
    int covered = 0;
    std::vector<std::pair<int, int>> hits;  // (layer, head) with the attribute in range
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    const int attr = q.attribute_token;
    TraceGauges light;
    light.head_weights = false;
    const auto trace =
        forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), {}, light);

    std::set<int> subject_ids;
    for (int p : q.subject_positions)
      subject_ids.insert(q.token_ids[static_cast<std::size_t>(p)]);

    for (int l = 1; l <= L; ++l) {
      if (detail::update_argmax_token(ctx.cfg, ctx.weights, trace, l, SublayerKind::mhsa,
                                      ProjectionMode::raw_embedding) != attr)
        continue;
      ++mine.events;
      bool covered = false;
      for (int h = 0; h < H; ++h) {
        bool head_hit = false;
        for (int tid : subject_ids) {
          const auto row = head_mapping(ctx.cfg, ctx.weights, l, h, tid, top_k);
          for (const auto& [t, s] : row.top)
            if (t == attr) {
              head_hit = true;
              break;
            }
          if (head_hit) break;
        }
        if (head_hit) {
          covered = true;
          mine.hits.emplace_back(l, h);
        }
      }
      if (covered) ++mine.covered;
    }
  });

  long events = 0, covered = 0;
  std::map<std::pair<int, int>, long> head_counts;
  for (const auto& out : outs) {
    events += out.events;
    covered += out.covered;
    for (const auto& lh : out.hits) ++head_counts[lh];
  }

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [lh, count] : head_counts)
    rows.push_back({{"layer", lh.first}, {"head", lh.second}, {"events", count}});

  nlohmann::json report = detail::report_envelope(ExperimentKind::heads, opt, ctx);
  report["aggregates"]["heads"] = rows;
  report["aggregates"]["events_total"] = events;
  report["aggregates"]["events_with_matching_head"] = covered;
  report["aggregates"]["match_rate"] =
      events ? static_cast<double>(covered) / static_cast<double>(events) : 0.0;
  return report;
}

// gradient-times-activation per position bucket across layers
inline nlohmann::json run_saliency(const ExperimentOptions& opt, ExperimentContext& ctx) {
  const int L = ctx.cfg.n_layers;
  const int nq = static_cast<int>(ctx.queries.size());

  struct QueryOut {
    // (layer, position, role index, score)
    std::vector<std::tuple<int, int, int, double>> scores;
  };
  std::vector<QueryOut> outs(static_cast<std::size_t>(nq));

  detail::parallel_for(nq, opt.workers, [&](int qi) {
    const FilteredQuery& fq = ctx.queries[static_cast<std::size_t>(qi)];
    const TokenizedQuery& q = fq.query;
    QueryOut& mine = outs[static_cast<std::size_t>(qi)];
    TraceGauges light;
    light.head_weights = false;
    const auto trace =
        forward(ctx.cfg, ctx.weights, std::span<const int>(q.token_ids), {}, light);
    for (int l = 0; l <= L; ++l) {
      const auto sal =
          gradient_times_activation(ctx.cfg, ctx.weights, trace, q.attribute_token, l);
      for (int p = 0; p < q.length(); ++p)
        mine.scores.emplace_back(
            l, p, static_cast<int>(position_role(q, p)),
            sal.scores[static_cast<std::size_t>(p)]);
    }
  });

  std::map<std::pair<int, int>, detail::MeanAcc> acc;
  for (const auto& out : outs)
    for (const auto& [l, p, role, v] : out.scores) acc[{l, role}].add(v);

  const PositionRole all_roles[] = {PositionRole::first_subject, PositionRole::last_subject,
                                    PositionRole::other_subject, PositionRole::first_relation,
                                    PositionRole::other_relation, PositionRole::last};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [key, a] : acc)
    rows.push_back({{"layer", key.first},
                    {"role", to_string(all_roles[key.second])},
                    {"mean_score", a.mean()},
                    {"count", a.n}});

  nlohmann::json per_query = nlohmann::json::array();
  for (int qi = 0; qi < nq; ++qi) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [l, p, role, v] : outs[static_cast<std::size_t>(qi)].scores)
      entries.push_back({{"layer", l},
                         {"position", p},
                         {"role", to_string(all_roles[role])},
                         {"score", v}});
    per_query.push_back({{"index", qi},
                         {"subject", ctx.queries[static_cast<std::size_t>(qi)].record.subject},
                         {"scores", entries}});
  }

  nlohmann::json report = detail::report_envelope(ExperimentKind::saliency, opt, ctx);
  report["aggregates"]["saliency"] = rows;
  report["per_query"] = per_query;
  return report;
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Turns a finished report into one tidy CSV per plot the study draws.
inline void emit_plot_data(const nlohmann::json& report, const std::string& out_dir) {
  ensure_dir(out_dir);
  const std::string kind = report.at("kind").get<std::string>();
  const auto& agg = report.at("aggregates");
  auto path = [&](const char* name) { return out_dir + "/" + name; };

  if (kind == "info-flow" || kind == "window-sweep") {
    CsvTable t({"window_k", "center_layer", "condition", "split", "mean_rel_change", "count"});
    const char* key = kind == "window-sweep" ? "window_sweep" : "info_flow";
    for (const auto& r : agg.at(key))
      t.add_row({r.at("window_k").get<int>(), r.at("center_layer").get<int>(),
                 r.at("condition").get<std::string>(), r.at("split").get<std::string>(),
                 r.at("mean_rel_change").get<double>(), r.at("count").get<long>()});
    t.write(path(kind == "window-sweep" ? "window_sweep.csv" : "info_flow.csv"));
  } else if (kind == "attr-rate") {
    CsvTable t({"layer", "position", "mean_rate", "count"});
    for (const auto& r : agg.at("attr_rate"))
      t.add_row({r.at("layer").get<int>(), r.at("position").get<std::string>(),
                 r.at("mean_rate").get<double>(), r.at("count").get<long>()});
    t.write(path("attr_rate.csv"));
    CsvTable e({"metric", "mean", "count"});
    for (const auto& r : agg.at("embedding_rate"))
      e.add_row({r.at("metric").get<std::string>(), r.at("mean").get<double>(),
                 r.at("count").get<long>()});
    e.write(path("embedding_rate.csv"));
  } else if (kind == "sublayer-knockout") {
    CsvTable t({"condition", "start_layer", "mean_rate", "count"});
    for (const auto& r : agg.at("sublayer_knockout"))
      t.add_row({r.at("condition").get<std::string>(), r.at("start_layer").get<int>(),
                 r.at("mean_rate").get<double>(), r.at("count").get<long>()});
    t.write(path("sublayer_knockout.csv"));
  } else if (kind == "extraction") {
    CsvTable t({"layer", "sublayer", "rate", "count"});
    for (const auto& r : agg.at("extraction_layers"))
      t.add_row({r.at("layer").get<int>(), r.at("sublayer").get<std::string>(),
                 r.at("rate").get<double>(), r.at("count").get<long>()});
    t.write(path("extraction_layers.csv"));
    CsvTable c({"sublayer", "blocked", "extraction_rate", "mean_extracting_layers", "count"});
    for (const auto& r : agg.at("extraction_conditions"))
      c.add_row({r.at("sublayer").get<std::string>(), r.at("blocked").get<std::string>(),
                 r.at("extraction_rate").get<double>(),
                 r.at("mean_extracting_layers").get<double>(), r.at("count").get<long>()});
    c.write(path("extraction_conditions.csv"));
  } else if (kind == "patching") {
    CsvTable t({"source_layer", "condition", "extraction_rate", "count"});
    for (const auto& r : agg.at("patching"))
      t.add_row({r.at("source_layer").get<int>(), r.at("condition").get<std::string>(),
                 r.at("extraction_rate").get<double>(), r.at("count").get<long>()});
    t.write(path("patching.csv"));
  } else if (kind == "heads") {
    CsvTable t({"layer", "head", "events"});
    for (const auto& r : agg.at("heads"))
      t.add_row({r.at("layer").get<int>(), r.at("head").get<int>(), r.at("events").get<long>()});
    t.write(path("heads.csv"));
  } else if (kind == "saliency") {
    CsvTable t({"layer", "role", "mean_score", "count"});
    for (const auto& r : agg.at("saliency"))
      t.add_row({r.at("layer").get<int>(), r.at("role").get<std::string>(),
                 r.at("mean_score").get<double>(), r.at("count").get<long>()});
    t.write(path("saliency.csv"));
    if (report.contains("per_query")) {
      CsvTable p({"query_index", "layer", "position", "role", "score"});
      for (const auto& q : report.at("per_query"))
        for (const auto& s : q.at("scores"))
          p.add_row({q.at("index").get<int>(), s.at("layer").get<int>(),
                     s.at("position").get<int>(), s.at("role").get<std::string>(),
                     s.at("score").get<double>()});
      p.write(path("saliency_per_query.csv"));
    }
  } else {
    fail(errc::validation, "no plot emitter for kind '" + kind + "'");
  }
}

// Runs one experiment over an already-loaded context and, when out_dir is
// set, writes report.json plus the plot CSVs (and candidate_sets.json where
// that applies) into it.
inline nlohmann::json run_experiment(ExperimentKind kind, const ExperimentOptions& opt,
                                     ExperimentContext& ctx) {
  nlohmann::json report;
  switch (kind) {
    case ExperimentKind::info_flow:
      report = detail::run_info_flow_like(kind, opt, ctx, {opt.window_k});
      break;
    case ExperimentKind::window_sweep:
      report = detail::run_info_flow_like(kind, opt, ctx, opt.sweep_widths);
      break;
    case ExperimentKind::attr_rate:
      report = detail::run_attr_rate(opt, ctx);
      break;
    case ExperimentKind::sublayer_knockout:
      report = detail::run_sublayer_knockout(opt, ctx);
      break;
    case ExperimentKind::extraction:
      report = detail::run_extraction(opt, ctx);
      break;
    case ExperimentKind::patching:
      report = detail::run_patching(opt, ctx);
      break;
    case ExperimentKind::heads:
      report = detail::run_heads(opt, ctx);
      break;
    case ExperimentKind::saliency:
      report = detail::run_saliency(opt, ctx);
      break;
  }
  if (!opt.out_dir.empty()) {
    ensure_dir(opt.out_dir);
    write_json(opt.out_dir + "/report.json", report);
    if (report.contains("candidate_sets"))
      write_json(opt.out_dir + "/candidate_sets.json", report["candidate_sets"]);
    emit_plot_data(report, opt.out_dir);
  }
  return report;
}

inline nlohmann::json run_experiment(ExperimentKind kind, const ExperimentOptions& opt) {
  ExperimentContext ctx = load_context(opt, kind);
  return run_experiment(kind, opt, ctx);
}

}  // namespace rp

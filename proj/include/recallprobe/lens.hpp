#pragma once

#include <map>
#include <span>
#include <utility>
#include <vector>

#include "recallprobe/forward.hpp"

namespace rp {

// How a hidden state is read out as vocabulary scores. final_head runs the
// final layernorm and the prediction head, matching what the model itself
// does at the top of the stack. raw_embedding skips the norm and dots the
// state against the token embeddings directly, which is the right reading for
// additive updates rather than full residual states.
enum class ProjectionMode { final_head, raw_embedding };

inline std::string to_string(ProjectionMode m) {
  return m == ProjectionMode::final_head ? "final_head" : "raw_embedding";
}

template <class T>
Vec<T> vocab_scores(const ModelConfig& cfg, const WeightStore<T>& w, std::span<const T> state,
                    ProjectionMode mode) {
  if (state.size() != static_cast<std::size_t>(cfg.d_model))
    fail(errc::validation, "vocab projection: state width differs from d_model");
  if (mode == ProjectionMode::raw_embedding) return matvec(w.embedding, state);
  const Vec<T> z = layernorm_row(state, w.final_norm, static_cast<T>(cfg.norm_epsilon));
  return head_logits(cfg, w, std::span<const T>(z));
}

struct VocabProjection {
  std::vector<std::pair<int, double>> top;  // (token, score), best first, ties by lower id
  std::map<int, int> rank_of;               // 1-based ranks for explicitly requested tokens
};

// 1-based rank of `token` among the scores: one plus the number of strictly
// larger entries plus the number of equal entries with a lower id.
template <class T>
int rank_among(std::span<const T> scores, int token) {
  if (token < 0 || static_cast<std::size_t>(token) >= scores.size())
    fail(errc::validation, "rank: token outside the vocabulary");
  const T s = scores[static_cast<std::size_t>(token)];
  int rank = 1;
  for (std::size_t t = 0; t < scores.size(); ++t) {
    if (scores[t] > s || (scores[t] == s && static_cast<int>(t) < token)) ++rank;
  }
  return rank;
}

template <class T>
VocabProjection project_to_vocab(const ModelConfig& cfg, const WeightStore<T>& w,
                                 std::span<const T> state, int top_k,
                                 ProjectionMode mode = ProjectionMode::final_head,
                                 std::span<const int> rank_tokens = {}) {
  const Vec<T> scores = vocab_scores(cfg, w, state, mode);
  VocabProjection out;
  for (int t : topk_indices(std::span<const T>(scores), static_cast<std::size_t>(top_k)))
    out.top.emplace_back(t, static_cast<double>(scores[static_cast<std::size_t>(t)]));
  for (int t : rank_tokens) out.rank_of[t] = rank_among(std::span<const T>(scores), t);
  return out;
}

// Rank of `token` in the final-head readout of a hidden state.
template <class T>
int attribute_rank(const ModelConfig& cfg, const WeightStore<T>& w, std::span<const T> state,
                   int token) {
  const Vec<T> scores = vocab_scores(cfg, w, state, ProjectionMode::final_head);
  return rank_among(std::span<const T>(scores), token);
}

// A sublayer update at the last position whose strongest vocabulary reading
// agrees with the model's final prediction. t_star is the argmax of the final
// distribution, t_prime the argmax reading of the update itself.
struct ExtractionEvent {
  int layer = 0;
  SublayerKind kind = SublayerKind::mhsa;
  int t_star = -1;
  int t_prime = -1;
  bool matched = false;
};

template <class T>
ExtractionEvent detect_extraction(const ModelConfig& cfg, const WeightStore<T>& w,
                                  const ForwardTrace<T>& trace, int layer, SublayerKind kind,
                                  ProjectionMode mode = ProjectionMode::raw_embedding) {
  if (layer < 1 || layer > trace.n_layers)
    fail(errc::validation, "detect_extraction: layer outside [1, n_layers]");
  const auto last = static_cast<std::size_t>(trace.n_positions - 1);
  const Mat<T>& upd =
      kind == SublayerKind::mhsa ? trace.attn_update(layer) : trace.mlp_update(layer);
  const Vec<T> scores = vocab_scores(cfg, w, upd.row(last), mode);

  ExtractionEvent ev;
  ev.layer = layer;
  ev.kind = kind;
  ev.t_star = argmax_index(std::span<const T>(trace.final_probs));
  ev.t_prime = argmax_index(std::span<const T>(scores));
  ev.matched = ev.t_star == ev.t_prime;
  return ev;
}

// Vocabulary readings of where one attention head sends a given token: row
// `token` of the head's value-output map against the embedding, computed as
// two small matvecs so the vocab x vocab matrix never exists in memory.
struct HeadMappingRow {
  int layer = 0;
  int head = 0;
  int source_token = 0;
  std::vector<std::pair<int, double>> top;  // (token, score)
};

template <class T>
HeadMappingRow head_mapping(const ModelConfig& cfg, const WeightStore<T>& w, int layer, int head,
                            int token, int top_k) {
  if (layer < 1 || layer > cfg.n_layers)
    fail(errc::validation, "head_mapping: layer outside [1, n_layers]");
  if (head < 0 || head >= cfg.n_heads)
    fail(errc::validation, "head_mapping: head outside [0, n_heads)");
  if (token < 0 || token >= cfg.vocab_size)
    fail(errc::validation, "head_mapping: token outside the vocabulary");
  const LayerWeights<T>& lw = w.layer(layer);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dh = d / static_cast<std::size_t>(cfg.n_heads);
  const std::size_t off = static_cast<std::size_t>(head) * dh;

  const auto emb = w.embedding.row(static_cast<std::size_t>(token));
  Vec<T> through_v(dh, T(0));
  for (std::size_t k = 0; k < d; ++k) {
    const T e = emb[k];
    for (std::size_t t = 0; t < dh; ++t) through_v[t] += e * lw.w_v(k, off + t);
  }
  Vec<T> direction(d, T(0));
  for (std::size_t t = 0; t < dh; ++t) {
    const T c = through_v[t];
    const T* orow = lw.w_o.data() + (off + t) * d;
    for (std::size_t j = 0; j < d; ++j) direction[j] += c * orow[j];
  }
  const Vec<T> scores = matvec(w.embedding, std::span<const T>(direction));

  HeadMappingRow out;
  out.layer = layer;
  out.head = head;
  out.source_token = token;
  for (int t : topk_indices(std::span<const T>(scores), static_cast<std::size_t>(top_k)))
    out.top.emplace_back(t, static_cast<double>(scores[static_cast<std::size_t>(t)]));
  return out;
}

// One inner neuron's share of a feed-forward update: coefficient times its
// output column. Ordered by |coefficient| * ||column|| so the strongest parts
// come first; summing every part reproduces the update minus its bias.
template <class T>
struct SubUpdate {
  int layer = 0;
  int inner_index = 0;
  T coefficient = T(0);
  double weight = 0;  // |coefficient| * ||direction||
  Vec<T> direction;   // the output column
  std::vector<std::pair<int, double>> top_tokens;
};

template <class T>
std::vector<SubUpdate<T>> mlp_subupdate_decomposition(const ModelConfig& cfg,
                                                      const WeightStore<T>& w,
                                                      const ForwardTrace<T>& trace, int layer,
                                                      int position, int top_m,
                                                      int token_top_k = 10) {
  if (layer < 1 || layer > trace.n_layers)
    fail(errc::validation, "sub-update split: layer outside [1, n_layers]");
  if (position < 0 || position >= trace.n_positions)
    fail(errc::validation, "sub-update split: position outside the sequence");
  if (!trace.gauges.mlp_inputs || trace.mlp_inputs.empty())
    fail(errc::validation,
         "sub-update split needs a trace captured with the mlp_inputs gauge on");
  const LayerWeights<T>& lw = w.layer(layer);
  const auto z = trace.mlp_input(layer).row(static_cast<std::size_t>(position));
  const std::size_t di = static_cast<std::size_t>(cfg.d_inner);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);

  Vec<T> coeff(di);
  Vec<double> strength(di);
  for (std::size_t j = 0; j < di; ++j) {
    coeff[j] = activation(cfg.activation, dot(lw.w_fc.row(j), z) + lw.b_fc[j]);
    double norm2 = 0;
    for (std::size_t r = 0; r < d; ++r) {
      const double val = static_cast<double>(lw.w_proj(r, j));
      norm2 += val * val;
    }
    strength[j] = std::abs(static_cast<double>(coeff[j])) * std::sqrt(norm2);
  }

  std::vector<SubUpdate<T>> out;
  for (int j : topk_indices(std::span<const double>(strength), static_cast<std::size_t>(top_m))) {
    SubUpdate<T> su;
    su.layer = layer;
    su.inner_index = j;
    su.coefficient = coeff[static_cast<std::size_t>(j)];
    su.weight = strength[static_cast<std::size_t>(j)];
    su.direction.resize(d);
    for (std::size_t r = 0; r < d; ++r) su.direction[r] = lw.w_proj(r, static_cast<std::size_t>(j));
    Vec<T> scaled(d);
    for (std::size_t r = 0; r < d; ++r) scaled[r] = su.coefficient * su.direction[r];
    const Vec<T> scores = vocab_scores(cfg, w, std::span<const T>(scaled),
                                       ProjectionMode::raw_embedding);
    for (int t : topk_indices(std::span<const T>(scores), static_cast<std::size_t>(token_top_k)))
      su.top_tokens.emplace_back(t, static_cast<double>(scores[static_cast<std::size_t>(t)]));
    out.push_back(std::move(su));
  }
  return out;
}

}  // namespace rp

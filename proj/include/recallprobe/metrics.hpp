#pragma once

#include <optional>
#include <span>
#include <vector>

#include "recallprobe/candidates.hpp"
#include "recallprobe/lens.hpp"

namespace rp {

// Share of the given tokens that appear in the candidate set. An empty
// candidate set yields no value at all; an empty token list is a caller bug.
inline std::optional<double> attributes_rate(std::span<const int> tokens,
                                             const CandidateAttributeSet& candidates) {
  if (tokens.empty()) fail(errc::validation, "attributes rate over an empty token list");
  if (candidates.missing()) return std::nullopt;
  int hit = 0;
  for (int t : tokens)
    if (candidates.contains(t)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(tokens.size());
}

// Attribute rates read straight off the token embeddings of a subject:
// per_token_max takes the best rate over the subject's tokens projected one
// at a time, mean_vector the rate of the averaged embedding. Both use the
// raw embedding reading since these are not residual states.
struct EmbeddingAttributeRate {
  std::optional<double> per_token_max;
  std::optional<double> mean_vector;
};

template <class T>
EmbeddingAttributeRate embedding_attribute_rate(const ModelConfig& cfg, const WeightStore<T>& w,
                                                std::span<const int> subject_tokens,
                                                const CandidateAttributeSet& candidates,
                                                int top_k = 50) {
  if (subject_tokens.empty()) fail(errc::validation, "subject with no tokens");
  EmbeddingAttributeRate out;
  if (candidates.missing()) return out;

  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::optional<double> best;
  Vec<T> mean(d, T(0));
  for (int id : subject_tokens) {
    if (id < 0 || id >= cfg.vocab_size)
      fail(errc::validation, "subject token outside the vocabulary");
    const auto emb = w.embedding.row(static_cast<std::size_t>(id));
    for (std::size_t j = 0; j < d; ++j) mean[j] += emb[j];
    const auto proj = project_to_vocab(cfg, w, emb, top_k, ProjectionMode::raw_embedding);
    std::vector<int> top_ids;
    for (const auto& [t, s] : proj.top) top_ids.push_back(t);
    const auto rate = attributes_rate(std::span<const int>(top_ids), candidates);
    if (rate && (!best || *rate > *best)) best = rate;
  }
  out.per_token_max = best;

  for (auto& v : mean) v /= static_cast<T>(subject_tokens.size());
  const auto proj = project_to_vocab(cfg, w, std::span<const T>(mean), top_k,
                                     ProjectionMode::raw_embedding);
  std::vector<int> top_ids;
  for (const auto& [t, s] : proj.top) top_ids.push_back(t);
  out.mean_vector = attributes_rate(std::span<const int>(top_ids), candidates);
  return out;
}

// (intervened - base) / base; negative when the intervention hurt.
inline double relative_prob_change(double base, double intervened) {
  if (!(base > 0)) fail(errc::validation, "relative change against a non-positive base");
  return (intervened - base) / base;
}

// Per-query extraction grids rolled up: how often any layer extracts, and how
// many layers do so on average, plus the per-layer match rates.
struct ExtractionStats {
  int n_queries = 0;
  double extraction_rate = 0;        // queries with at least one matching layer
  double mean_extracting_layers = 0; // matching layers per query
  std::vector<double> per_layer_rates;
};

inline ExtractionStats aggregate_extraction_stats(
    const std::vector<std::vector<char>>& grids) {
  ExtractionStats out;
  out.n_queries = static_cast<int>(grids.size());
  if (grids.empty()) return out;
  const std::size_t n_layers = grids.front().size();
  for (const auto& g : grids)
    if (g.size() != n_layers)
      fail(errc::validation, "extraction grids disagree on the layer count");
  out.per_layer_rates.assign(n_layers, 0.0);
  int any = 0;
  long total = 0;
  for (const auto& g : grids) {
    bool hit = false;
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (g[l]) {
        out.per_layer_rates[l] += 1.0;
        ++total;
        hit = true;
      }
    }
    if (hit) ++any;
  }
  for (auto& r : out.per_layer_rates) r /= static_cast<double>(out.n_queries);
  out.extraction_rate = static_cast<double>(any) / static_cast<double>(out.n_queries);
  out.mean_extracting_layers = static_cast<double>(total) / static_cast<double>(out.n_queries);
  return out;
}

}  // namespace rp

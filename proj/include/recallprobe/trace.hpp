#pragma once

#include <vector>

#include "recallprobe/matrix.hpp"
#include "recallprobe/plan.hpp"

namespace rp {

// Optional per-layer captures beyond the residual stream and sublayer
// updates. Everything here is recomputable from the residuals, so heavier
// gauges default to off.
struct TraceGauges {
  bool head_weights = true;    // per-head attention matrices
  bool head_contribs = false;  // per-head value-path contributions
  bool mlp_inputs = false;     // normed feed-forward inputs, needed to split sub-updates
};

// Complete record of one forward pass. residuals[l] is the stream after
// layer l, with residuals[0] the token+position embedding. Sublayer updates
// and per-layer captures are 1-based; index 0 stays empty.
template <class T>
struct ForwardTrace {
  int n_layers = 0;
  int n_heads = 0;
  int n_positions = 0;
  int d_model = 0;

  std::vector<Mat<T>> residuals;
  std::vector<Mat<T>> attn_updates;
  std::vector<Mat<T>> mlp_updates;
  std::vector<std::vector<Mat<T>>> head_weights;
  std::vector<std::vector<Mat<T>>> head_contribs;
  std::vector<Mat<T>> mlp_inputs;
  Vec<T> final_probs;  // next-token distribution at the last position

  std::vector<int> token_ids;
  InterventionPlan plan;  // the plan this trace was computed under
  TraceGauges gauges;

  const Mat<T>& residual(int l) const { return residuals[static_cast<std::size_t>(l)]; }
  const Mat<T>& attn_update(int l) const { return attn_updates[static_cast<std::size_t>(l)]; }
  const Mat<T>& mlp_update(int l) const { return mlp_updates[static_cast<std::size_t>(l)]; }
  const Mat<T>& mlp_input(int l) const { return mlp_inputs[static_cast<std::size_t>(l)]; }
  const Mat<T>& head_weight(int l, int h) const {
    return head_weights[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
  }
  const Mat<T>& head_contrib(int l, int h) const {
    return head_contribs[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
  }
};

}  // namespace rp

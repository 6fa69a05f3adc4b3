#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "recallprobe/config.hpp"
#include "recallprobe/matrix.hpp"
#include "recallprobe/plan.hpp"
#include "recallprobe/trace.hpp"
#include "recallprobe/weights.hpp"

namespace rp {

// Numerically shifted softmax. Entries of -inf are treated as masked out and
// come back as exact zeros; a row with nothing unmasked is an error.
template <class T>
Vec<T> softmax_row(std::span<const T> logits) {
  T best = neg_inf<T>;
  for (T v : logits) best = std::max(best, v);
  if (best == neg_inf<T>) fail(errc::fully_masked_row, "softmax over a fully masked row");
  Vec<T> out(logits.size());
  T denom = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == neg_inf<T>) {
      out[i] = T(0);
    } else {
      out[i] = std::exp(logits[i] - best);
      denom += out[i];
    }
  }
  for (auto& v : out) v /= denom;
  return out;
}

template <class T>
Mat<T> causal_mask(int n) {
  const auto un = static_cast<std::size_t>(n);
  Mat<T> m(un, un, T(0));
  for (std::size_t r = 0; r < un; ++r)
    for (std::size_t c = r + 1; c < un; ++c) m(r, c) = neg_inf<T>;
  return m;
}

template <class T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + a * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T a = T(0.044715);
  const T u = k * (x + a * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * a * x * x);
}

template <class T>
T activation(Activation act, T x) {
  return act == Activation::gelu ? gelu(x) : (x > T(0) ? x : T(0));
}

template <class T>
T activation_grad(Activation act, T x) {
  return act == Activation::gelu ? gelu_grad(x) : (x > T(0) ? T(1) : T(0));
}

template <class T>
struct AttentionOutput {
  Mat<T> update;                 // n x d, bias included
  std::vector<Mat<T>> weights;   // per head, n x n
  std::vector<Mat<T>> contribs;  // per head, n x d; their sum is update minus the output bias
};

namespace detail {

template <class T>
Mat<T> project_with_bias(const Mat<T>& x, const Mat<T>& w, const Vec<T>& b) {
  Mat<T> out = matmul(x, w);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return out;
}

}  // namespace detail

// Multi-head attention over an already-normed input x (n x d). The additive
// mask carries both causal structure and any knockout edits; it lands on the
// scaled scores before the row softmax, so surviving weights renormalize.
// Per-head contributions carry their slice of the value bias, which makes
// them sum to the update minus the output bias.
template <class T>
AttentionOutput<T> attention_sublayer(const ModelConfig& cfg, const LayerWeights<T>& lw,
                                      const Mat<T>& x, const Mat<T>& mask) {
  const std::size_t n = x.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t nh = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / nh;
  if (x.cols() != d) fail(errc::validation, "attention input width differs from d_model");
  if (mask.rows() != n || mask.cols() != n)
    fail(errc::validation, "attention mask must be n x n");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  const Mat<T> q = detail::project_with_bias(x, lw.w_q, lw.b_q);
  const Mat<T> k = detail::project_with_bias(x, lw.w_k, lw.b_k);
  const Mat<T> v = detail::project_with_bias(x, lw.w_v, lw.b_v);

  AttentionOutput<T> out;
  out.update = Mat<T>(n, d);
  out.weights.reserve(nh);
  out.contribs.reserve(nh);

  for (std::size_t h = 0; h < nh; ++h) {
    const std::size_t off = h * dh;
    Mat<T> a(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      Vec<T> scores(n);
      for (std::size_t c = 0; c < n; ++c) {
        T s = T(0);
        for (std::size_t t = 0; t < dh; ++t) s += q(r, off + t) * k(c, off + t);
        scores[c] = s * scale + mask(r, c);
      }
      Vec<T> w = softmax_row<T>(scores);
      std::copy(w.begin(), w.end(), a.row(r).begin());
    }

    // ctx = A * V_h, then through this head's rows of w_o
    Mat<T> contrib(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      Vec<T> ctx(dh, T(0));
      for (std::size_t c = 0; c < n; ++c) {
        const T arc = a(r, c);
        for (std::size_t t = 0; t < dh; ++t) ctx[t] += arc * v(c, off + t);
      }
      auto crow = contrib.row(r);
      for (std::size_t t = 0; t < dh; ++t) {
        const T ct = ctx[t];
        const T* orow = lw.w_o.data() + (off + t) * d;
        for (std::size_t j = 0; j < d; ++j) crow[j] += ct * orow[j];
      }
    }
    add_inplace(out.update, contrib);
    out.weights.push_back(std::move(a));
    out.contribs.push_back(std::move(contrib));
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.update.row(r);
    for (std::size_t j = 0; j < d; ++j) row[j] += lw.b_o[j];
  }
  return out;
}

// Feed-forward block over one already-normed input row.
template <class T>
Vec<T> mlp_sublayer(const ModelConfig& cfg, const LayerWeights<T>& lw, std::span<const T> input) {
  const std::size_t di = static_cast<std::size_t>(cfg.d_inner);
  Vec<T> act(di);
  for (std::size_t j = 0; j < di; ++j)
    act[j] = activation(cfg.activation, dot(lw.w_fc.row(j), input) + lw.b_fc[j]);
  Vec<T> out = matvec(lw.w_proj, std::span<const T>(act));
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += lw.b_proj[j];
  return out;
}

template <class T>
Mat<T> mlp_sublayer_rows(const ModelConfig& cfg, const LayerWeights<T>& lw, const Mat<T>& x) {
  Mat<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Vec<T> y = mlp_sublayer(cfg, lw, x.row(r));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

namespace detail {

// Plan coordinates regrouped for O(1) lookups inside the layer loop.
struct PlanIndex {
  std::vector<std::vector<std::pair<int, int>>> blocks_by_layer;  // layer -> (query, key)
  std::vector<std::vector<int>> zero_mhsa_by_layer;
  std::vector<std::vector<int>> zero_mlp_by_layer;
  std::vector<int> patch_source;  // per position, -1 when unpatched

  PlanIndex(const InterventionPlan& plan, int n_layers, int n_positions)
      : blocks_by_layer(static_cast<std::size_t>(n_layers) + 1),
        zero_mhsa_by_layer(static_cast<std::size_t>(n_layers) + 1),
        zero_mlp_by_layer(static_cast<std::size_t>(n_layers) + 1),
        patch_source(static_cast<std::size_t>(n_positions), -1) {
    for (const auto& b : plan.attention_blocks)
      blocks_by_layer[static_cast<std::size_t>(b.layer)].emplace_back(b.query_pos, b.key_pos);
    for (const auto& z : plan.sublayer_zeroings) {
      auto& dst = z.kind == SublayerKind::mhsa ? zero_mhsa_by_layer : zero_mlp_by_layer;
      dst[static_cast<std::size_t>(z.layer)].push_back(z.position);
    }
    for (const auto& p : plan.patches)
      patch_source[static_cast<std::size_t>(p.position)] = p.source_layer;
  }
};

template <class T>
void zero_row(Mat<T>& m, int pos) {
  auto row = m.row(static_cast<std::size_t>(pos));
  std::fill(row.begin(), row.end(), T(0));
}

// The matrix attention reads at layer l: the incoming residual, with patched
// positions swapped for their frozen source-layer states.
template <class T>
Mat<T> attention_input(const std::vector<Mat<T>>& residuals, int layer,
                       const PlanIndex& idx) {
  Mat<T> x = residuals[static_cast<std::size_t>(layer) - 1];
  for (std::size_t p = 0; p < idx.patch_source.size(); ++p) {
    const int src = idx.patch_source[p];
    if (src >= 0 && src < layer) {
      auto from = residuals[static_cast<std::size_t>(src)].row(p);
      std::copy(from.begin(), from.end(), x.row(p).begin());
    }
  }
  return x;
}

}  // namespace detail

template <class T>
Vec<T> head_logits(const ModelConfig& cfg, const WeightStore<T>& w, std::span<const T> state) {
  if (cfg.head_kind == HeadKind::tied_embedding) return matvec(w.embedding, state);
  Vec<T> logits = matvec(w.head_w, state);
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] += w.head_u[t];
  return logits;
}

// Next-token distribution read off a finished trace at one position: final
// layernorm, then the prediction head, then an unmasked softmax.
template <class T>
Vec<T> predict_distribution(const ModelConfig& cfg, const WeightStore<T>& w,
                            const ForwardTrace<T>& trace, int position) {
  if (position < 0 || position >= trace.n_positions)
    fail(errc::validation, "predict_distribution: position outside the sequence");
  const Vec<T> z = layernorm_row(trace.residual(trace.n_layers).row(
                                     static_cast<std::size_t>(position)),
                                 w.final_norm, static_cast<T>(cfg.norm_epsilon));
  const Vec<T> logits = head_logits(cfg, w, std::span<const T>(z));
  return softmax_row(std::span<const T>(logits));
}

// Runs the model over token_ids under an intervention plan and records the
// full trace. Computation is single-threaded with fixed loop orders, so the
// same inputs always give bit-identical traces.
template <class T>
ForwardTrace<T> forward(const ModelConfig& cfg, const WeightStore<T>& w,
                        std::span<const int> token_ids, const InterventionPlan& plan = {},
                        const TraceGauges& gauges = {}) {
  cfg.validate();
  const int n = static_cast<int>(token_ids.size());
  if (n < 1) fail(errc::validation, "forward: empty token sequence");
  if (n > cfg.max_positions)
    fail(errc::validation, "forward: sequence longer than max_positions");
  for (int id : token_ids)
    if (id < 0 || id >= cfg.vocab_size)
      fail(errc::validation, "forward: token id " + std::to_string(id) + " outside the vocabulary");
  plan.validate(cfg.n_layers, n);
  const detail::PlanIndex idx(plan, cfg.n_layers, n);

  const auto un = static_cast<std::size_t>(n);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto L = static_cast<std::size_t>(cfg.n_layers);

  ForwardTrace<T> trace;
  trace.n_layers = cfg.n_layers;
  trace.n_heads = cfg.n_heads;
  trace.n_positions = n;
  trace.d_model = cfg.d_model;
  trace.token_ids.assign(token_ids.begin(), token_ids.end());
  trace.plan = plan;
  trace.gauges = gauges;
  trace.residuals.resize(L + 1);
  trace.attn_updates.resize(L + 1);
  trace.mlp_updates.resize(L + 1);
  if (gauges.head_weights) trace.head_weights.resize(L + 1);
  if (gauges.head_contribs) trace.head_contribs.resize(L + 1);
  if (gauges.mlp_inputs) trace.mlp_inputs.resize(L + 1);

  Mat<T> x0(un, d);
  for (std::size_t i = 0; i < un; ++i) {
    auto row = x0.row(i);
    auto emb = w.embedding.row(static_cast<std::size_t>(token_ids[i]));
    auto pos = w.pos_embedding.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = emb[j] + pos[j];
  }
  trace.residuals[0] = std::move(x0);

  const Mat<T> base_mask = causal_mask<T>(n);
  const T eps = static_cast<T>(cfg.norm_epsilon);

  for (int l = 1; l <= cfg.n_layers; ++l) {
    const auto ul = static_cast<std::size_t>(l);
    const LayerWeights<T>& lw = w.layer(l);
    const Mat<T>& xin = trace.residuals[ul - 1];

    Mat<T> attn_in = detail::attention_input(trace.residuals, l, idx);
    Mat<T> z1 = layernorm_rows(attn_in, lw.attn_norm, eps);
    Mat<T> mask = base_mask;
    for (auto [qp, kp] : idx.blocks_by_layer[ul])
      mask(static_cast<std::size_t>(qp), static_cast<std::size_t>(kp)) = neg_inf<T>;

    AttentionOutput<T> att = attention_sublayer(cfg, lw, z1, mask);
    for (int p : idx.zero_mhsa_by_layer[ul]) {
      detail::zero_row(att.update, p);
      for (auto& c : att.contribs) detail::zero_row(c, p);
    }

    Mat<T> mlp_in(un, d);
    if (cfg.layout == Layout::serial) {
      for (std::size_t i = 0; i < un; ++i)
        for (std::size_t j = 0; j < d; ++j) mlp_in(i, j) = att.update(i, j) + xin(i, j);
    } else {
      mlp_in = xin;
    }
    Mat<T> z2 = layernorm_rows(mlp_in, lw.mlp_norm, eps);
    Mat<T> m = mlp_sublayer_rows(cfg, lw, z2);
    for (int p : idx.zero_mlp_by_layer[ul]) detail::zero_row(m, p);

    Mat<T> xout(un, d);
    for (std::size_t i = 0; i < un; ++i)
      for (std::size_t j = 0; j < d; ++j) xout(i, j) = xin(i, j) + att.update(i, j) + m(i, j);

    trace.attn_updates[ul] = std::move(att.update);
    trace.mlp_updates[ul] = std::move(m);
    if (gauges.head_weights) trace.head_weights[ul] = std::move(att.weights);
    if (gauges.head_contribs) trace.head_contribs[ul] = std::move(att.contribs);
    if (gauges.mlp_inputs) trace.mlp_inputs[ul] = std::move(z2);
    trace.residuals[ul] = std::move(xout);
  }

  trace.final_probs = predict_distribution(cfg, w, trace, n - 1);
  return trace;
}

}  // namespace rp

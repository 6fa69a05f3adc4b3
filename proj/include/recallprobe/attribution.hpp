#pragma once

#include <cmath>
#include <vector>

#include "recallprobe/forward.hpp"
#include "recallprobe/query.hpp"

namespace rp {

namespace detail {

// Backward through y = (x - mean)/sqrt(var + eps) * scale + bias for one row.
template <class T>
Vec<T> layernorm_backward(std::span<const T> x, const NormParams<T>& p, T eps,
                          std::span<const T> dy) {
  const std::size_t d = x.size();
  T mean = T(0);
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<T>(d);
  T var = T(0);
  for (std::size_t i = 0; i < d; ++i) {
    const T c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<T>(d);
  const T inv = T(1) / std::sqrt(var + eps);

  Vec<T> xhat(d), dyh(d);
  T dyh_mean = T(0), proj = T(0);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * inv;
    dyh[i] = dy[i] * p.scale[i];
    dyh_mean += dyh[i];
    proj += dyh[i] * xhat[i];
  }
  dyh_mean /= static_cast<T>(d);
  proj /= static_cast<T>(d);
  Vec<T> dx(d);
  for (std::size_t i = 0; i < d; ++i) dx[i] = (dyh[i] - dyh_mean - xhat[i] * proj) * inv;
  return dx;
}

// Backward through the attention sublayer. x is the (patch-substituted,
// pre-norm) input the layer saw; d_update is the gradient on its output with
// zeroed rows already nulled. Returns the gradient on x.
template <class T>
Mat<T> attention_backward(const ModelConfig& cfg, const LayerWeights<T>& lw, const Mat<T>& x,
                          const Mat<T>& mask, const Mat<T>& d_update) {
  const std::size_t n = x.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t nh = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / nh;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T eps = static_cast<T>(cfg.norm_epsilon);

  const Mat<T> z1 = layernorm_rows(x, lw.attn_norm, eps);
  const Mat<T> q = project_with_bias(z1, lw.w_q, lw.b_q);
  const Mat<T> k = project_with_bias(z1, lw.w_k, lw.b_k);
  const Mat<T> v = project_with_bias(z1, lw.w_v, lw.b_v);

  Mat<T> dq(n, d), dk(n, d), dv(n, d);
  for (std::size_t h = 0; h < nh; ++h) {
    const std::size_t off = h * dh;
    // recompute this head's attention rows exactly as the forward pass did
    Mat<T> a(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      Vec<T> scores(n);
      for (std::size_t c = 0; c < n; ++c) {
        T s = T(0);
        for (std::size_t t = 0; t < dh; ++t) s += q(r, off + t) * k(c, off + t);
        scores[c] = s * scale + mask(r, c);
      }
      Vec<T> wrow = softmax_row<T>(scores);
      std::copy(wrow.begin(), wrow.end(), a.row(r).begin());
    }

    // through w_o: dctx(r,t) = sum_j d_update(r,j) w_o(off+t, j)
    Mat<T> dctx(n, dh);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < dh; ++t) {
        T s = T(0);
        const T* orow = lw.w_o.data() + (off + t) * d;
        for (std::size_t j = 0; j < d; ++j) s += d_update(r, j) * orow[j];
        dctx(r, t) = s;
      }

    // ctx = A * V_h: gradient splits into dA and dV
    Mat<T> da(n, n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        T s = T(0);
        for (std::size_t t = 0; t < dh; ++t) s += dctx(r, t) * v(c, off + t);
        da(r, c) = s;
      }
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t t = 0; t < dh; ++t) {
        T s = T(0);
        for (std::size_t r = 0; r < n; ++r) s += a(r, c) * dctx(r, t);
        dv(c, off + t) += s;
      }

    // softmax rows: ds = A o (dA - <dA, A>_row)
    Mat<T> ds(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      T inner = T(0);
      for (std::size_t c = 0; c < n; ++c) inner += da(r, c) * a(r, c);
      for (std::size_t c = 0; c < n; ++c) ds(r, c) = a(r, c) * (da(r, c) - inner);
    }

    // scores = scale * Q K^T
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t t = 0; t < dh; ++t) {
        T s = T(0);
        for (std::size_t c = 0; c < n; ++c) s += ds(r, c) * k(c, off + t);
        dq(r, off + t) += s * scale;
      }
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t t = 0; t < dh; ++t) {
        T s = T(0);
        for (std::size_t r = 0; r < n; ++r) s += ds(r, c) * q(r, off + t);
        dk(c, off + t) += s * scale;
      }
  }

  // back through the three projections onto z1, then the pre-attention norm
  Mat<T> dz1(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      T s = T(0);
      const T* qrow = lw.w_q.data() + i * d;
      const T* krow = lw.w_k.data() + i * d;
      const T* vrow = lw.w_v.data() + i * d;
      for (std::size_t j = 0; j < d; ++j)
        s += dq(r, j) * qrow[j] + dk(r, j) * krow[j] + dv(r, j) * vrow[j];
      dz1(r, i) = s;
    }

  Mat<T> dx(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    Vec<T> g = layernorm_backward(x.row(r), lw.attn_norm, eps, std::span<const T>(dz1.row(r)));
    std::copy(g.begin(), g.end(), dx.row(r).begin());
  }
  return dx;
}

// Backward through the feed-forward block for every row of mlp_in (pre-norm
// input). d_out rows for zeroed positions must already be nulled.
template <class T>
Mat<T> mlp_backward(const ModelConfig& cfg, const LayerWeights<T>& lw, const Mat<T>& mlp_in,
                    const Mat<T>& d_out) {
  const std::size_t n = mlp_in.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t di = static_cast<std::size_t>(cfg.d_inner);
  const T eps = static_cast<T>(cfg.norm_epsilon);

  Mat<T> dx(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const Vec<T> z2 = layernorm_row(mlp_in.row(r), lw.mlp_norm, eps);
    Vec<T> dz2(d, T(0));
    for (std::size_t j = 0; j < di; ++j) {
      const T pre = dot(lw.w_fc.row(j), std::span<const T>(z2)) + lw.b_fc[j];
      T dact = T(0);
      for (std::size_t i = 0; i < d; ++i) dact += d_out(r, i) * lw.w_proj(i, j);
      const T dpre = activation_grad(cfg.activation, pre) * dact;
      const T* frow = lw.w_fc.data() + j * d;
      for (std::size_t i = 0; i < d; ++i) dz2[i] += dpre * frow[i];
    }
    Vec<T> g = layernorm_backward(mlp_in.row(r), lw.mlp_norm, eps, std::span<const T>(dz2));
    std::copy(g.begin(), g.end(), dx.row(r).begin());
  }
  return dx;
}

}  // namespace detail

// Gradient of the target token's pre-softmax logit (read at the last
// position) with respect to the residual states after `layer`. Follows the
// exact computation the trace was recorded under, interventions included:
// zeroed sublayer rows pass no gradient and patched attention reads route
// their gradient to the source layer they actually read from.
template <class T>
Mat<T> logit_gradient(const ModelConfig& cfg, const WeightStore<T>& w,
                      const ForwardTrace<T>& trace, int target_token, int layer) {
  if (layer < 0 || layer > trace.n_layers)
    fail(errc::validation, "gradient layer outside [0, n_layers]");
  if (target_token < 0 || target_token >= cfg.vocab_size)
    fail(errc::validation, "gradient target outside the vocabulary");
  const int n = trace.n_positions;
  const auto un = static_cast<std::size_t>(n);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const T eps = static_cast<T>(cfg.norm_epsilon);
  const detail::PlanIndex idx(trace.plan, trace.n_layers, n);

  std::vector<Mat<T>> gx(static_cast<std::size_t>(trace.n_layers) + 1);
  for (auto& g : gx) g = Mat<T>(un, d);

  // the logit is row `target` of the head applied to the normed last state
  {
    const auto x_last = trace.residual(trace.n_layers).row(un - 1);
    std::span<const T> dz = cfg.head_kind == HeadKind::tied_embedding
                                ? w.embedding.row(static_cast<std::size_t>(target_token))
                                : w.head_w.row(static_cast<std::size_t>(target_token));
    Vec<T> g0 = detail::layernorm_backward(x_last, w.final_norm, eps, dz);
    std::copy(g0.begin(), g0.end(), gx[static_cast<std::size_t>(trace.n_layers)].row(un - 1).begin());
  }

  const Mat<T> base_mask = causal_mask<T>(n);
  for (int l = trace.n_layers; l > layer; --l) {
    const auto ul = static_cast<std::size_t>(l);
    const LayerWeights<T>& lw = w.layer(l);
    const Mat<T>& g = gx[ul];
    const Mat<T>& xin = trace.residual(l - 1);

    // recompute what the layer saw and produced
    Mat<T> attn_in = detail::attention_input(trace.residuals, l, idx);
    Mat<T> mask = base_mask;
    for (auto [qp, kp] : idx.blocks_by_layer[ul])
      mask(static_cast<std::size_t>(qp), static_cast<std::size_t>(kp)) = neg_inf<T>;

    Mat<T> mlp_in(un, d);
    if (cfg.layout == Layout::serial) {
      const Mat<T> z1 = layernorm_rows(attn_in, lw.attn_norm, eps);
      AttentionOutput<T> att = attention_sublayer(cfg, lw, z1, mask);
      for (int p : idx.zero_mhsa_by_layer[ul]) detail::zero_row(att.update, p);
      for (std::size_t i = 0; i < un; ++i)
        for (std::size_t j = 0; j < d; ++j) mlp_in(i, j) = att.update(i, j) + xin(i, j);
    } else {
      mlp_in = xin;
    }

    // feed-forward path
    Mat<T> dm = g;
    for (int p : idx.zero_mlp_by_layer[ul]) detail::zero_row(dm, p);
    const Mat<T> dmlp_in = detail::mlp_backward(cfg, lw, mlp_in, dm);

    // attention path: in the serial layout the feed-forward input also
    // carries the attention update
    Mat<T> datt = g;
    if (cfg.layout == Layout::serial) add_inplace(datt, dmlp_in);
    for (int p : idx.zero_mhsa_by_layer[ul]) detail::zero_row(datt, p);
    const Mat<T> dattn_in = detail::attention_backward(cfg, lw, attn_in, mask, datt);

    // residual-plus-feed-forward gradient lands on the previous layer
    Mat<T>& prev = gx[ul - 1];
    for (std::size_t i = 0; i < un; ++i)
      for (std::size_t j = 0; j < d; ++j) prev(i, j) += g(i, j) + dmlp_in(i, j);

    // attention reads go wherever each row actually read from
    for (std::size_t r = 0; r < un; ++r) {
      const int src = idx.patch_source[r];
      const int dst = (src >= 0 && src < l) ? src : l - 1;
      if (dst >= layer) {
        auto drow = dattn_in.row(r);
        auto grow = gx[static_cast<std::size_t>(dst)].row(r);
        for (std::size_t j = 0; j < d; ++j) grow[j] += drow[j];
      }
    }
  }
  return gx[static_cast<std::size_t>(layer)];
}

// Raw score per position: the L2 norm of gradient times activation,
// elementwise, at the post-layer residual states.
inline Vec<double> saliency_scores_raw(const Mat<double>& grad, const Mat<double>& acts) {
  if (grad.rows() != acts.rows() || grad.cols() != acts.cols())
    fail(errc::validation, "saliency: gradient and activation shapes differ");
  Vec<double> raw(grad.rows(), 0.0);
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < grad.cols(); ++j) {
      const double v = grad(i, j) * acts(i, j);
      s += v * v;
    }
    raw[i] = std::sqrt(s);
  }
  return raw;
}

inline Vec<double> normalize_scores(Vec<double> raw) {
  double total = 0;
  for (double v : raw) total += v;
  if (!(total > 0)) fail(errc::validation, "saliency scores have no mass to normalize");
  for (auto& v : raw) v /= total;
  return raw;
}

struct SaliencyMap {
  int layer = 0;
  int target_token = -1;
  Vec<double> scores;  // per position, sums to one
};

template <class T>
SaliencyMap gradient_times_activation(const ModelConfig& cfg, const WeightStore<T>& w,
                                      const ForwardTrace<T>& trace, int target_token,
                                      int layer) {
  const Mat<T> grad = logit_gradient(cfg, w, trace, target_token, layer);
  SaliencyMap out;
  out.layer = layer;
  out.target_token = target_token;
  Mat<double> g64 = grad.template cast<double>();
  Mat<double> a64 = trace.residual(layer).template cast<double>();
  out.scores = normalize_scores(saliency_scores_raw(g64, a64));
  return out;
}

// Position buckets used when aggregating saliency over a prompt.
enum class PositionRole {
  first_subject,
  last_subject,
  other_subject,
  first_relation,
  other_relation,
  last
};

inline const char* to_string(PositionRole r) {
  switch (r) {
    case PositionRole::first_subject: return "first_subject";
    case PositionRole::last_subject: return "last_subject";
    case PositionRole::other_subject: return "other_subject";
    case PositionRole::first_relation: return "first_relation";
    case PositionRole::other_relation: return "other_relation";
    case PositionRole::last: return "last";
  }
  return "?";
}

// The last position wins over subject membership; a one-token subject counts
// as its own last token.
inline PositionRole position_role(const TokenizedQuery& q, int pos) {
  if (pos == q.last_position()) return PositionRole::last;
  if (!q.subject_positions.empty() && pos >= q.first_subject_position() &&
      pos <= q.last_subject_position()) {
    if (pos == q.last_subject_position()) return PositionRole::last_subject;
    if (pos == q.first_subject_position()) return PositionRole::first_subject;
    return PositionRole::other_subject;
  }
  if (!q.relation_positions.empty() && pos == q.relation_positions.front())
    return PositionRole::first_relation;
  return PositionRole::other_relation;
}

}  // namespace rp

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "recallprobe/config.hpp"
#include "recallprobe/matrix.hpp"

namespace rp {

template <class T>
struct NormParams {
  Vec<T> scale;
  Vec<T> bias;
};

// Weights of one transformer layer.
//
// Attention projections are stored d x d and applied on the right (x * W);
// head j owns columns [j*dh, (j+1)*dh) of w_q/w_k/w_v and the matching rows
// of w_o. The feed-forward matrices follow the opposite convention: w_fc is
// d_inner x d with one row per inner neuron, w_proj is d x d_inner with one
// column per inner neuron.
template <class T>
struct LayerWeights {
  Mat<T> w_q, w_k, w_v, w_o;
  Vec<T> b_q, b_k, b_v, b_o;
  Mat<T> w_fc;
  Vec<T> b_fc;
  Mat<T> w_proj;
  Vec<T> b_proj;
  NormParams<T> attn_norm, mlp_norm;
};

template <class T>
struct WeightStore {
  Mat<T> embedding;      // vocab_size x d_model
  Mat<T> pos_embedding;  // max_positions x d_model
  std::vector<LayerWeights<T>> layers;
  NormParams<T> final_norm;
  Mat<T> head_w;  // vocab_size x d_model, only with a linear head
  Vec<T> head_u;  // vocab_size, only with a linear head

  // Layers are addressed 1-based throughout; index 0 means the embedding.
  const LayerWeights<T>& layer(int l) const { return layers[static_cast<std::size_t>(l) - 1]; }
  LayerWeights<T>& layer(int l) { return layers[static_cast<std::size_t>(l) - 1]; }

  template <class U>
  WeightStore<U> cast() const {
    WeightStore<U> out;
    out.embedding = embedding.template cast<U>();
    out.pos_embedding = pos_embedding.template cast<U>();
    out.layers.reserve(layers.size());
    for (const auto& lw : layers) {
      LayerWeights<U> o;
      o.w_q = lw.w_q.template cast<U>();
      o.w_k = lw.w_k.template cast<U>();
      o.w_v = lw.w_v.template cast<U>();
      o.w_o = lw.w_o.template cast<U>();
      o.b_q = cast_vec<U>(lw.b_q);
      o.b_k = cast_vec<U>(lw.b_k);
      o.b_v = cast_vec<U>(lw.b_v);
      o.b_o = cast_vec<U>(lw.b_o);
      o.w_fc = lw.w_fc.template cast<U>();
      o.b_fc = cast_vec<U>(lw.b_fc);
      o.w_proj = lw.w_proj.template cast<U>();
      o.b_proj = cast_vec<U>(lw.b_proj);
      o.attn_norm = {cast_vec<U>(lw.attn_norm.scale), cast_vec<U>(lw.attn_norm.bias)};
      o.mlp_norm = {cast_vec<U>(lw.mlp_norm.scale), cast_vec<U>(lw.mlp_norm.bias)};
      out.layers.push_back(std::move(o));
    }
    out.final_norm = {cast_vec<U>(final_norm.scale), cast_vec<U>(final_norm.bias)};
    out.head_w = head_w.template cast<U>();
    out.head_u = cast_vec<U>(head_u);
    return out;
  }

 private:
  template <class U, class S>
  static Vec<U> cast_vec(const Vec<S>& v) {
    Vec<U> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<U>(v[i]);
    return out;
  }
};

namespace detail {

inline void check_shape(const std::string& name, std::size_t got_r, std::size_t got_c,
                        std::size_t want_r, std::size_t want_c) {
  if (got_r != want_r || got_c != want_c)
    fail(errc::bad_shape, "tensor '" + name + "' has shape " + std::to_string(got_r) + "x" +
                              std::to_string(got_c) + ", expected " + std::to_string(want_r) +
                              "x" + std::to_string(want_c));
}

inline void check_len(const std::string& name, std::size_t got, std::size_t want) {
  if (got != want)
    fail(errc::bad_shape, "tensor '" + name + "' has length " + std::to_string(got) +
                              ", expected " + std::to_string(want));
}

}  // namespace detail

template <class T>
void validate_shapes(const ModelConfig& cfg, const WeightStore<T>& w) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto di = static_cast<std::size_t>(cfg.d_inner);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  detail::check_shape("embedding", w.embedding.rows(), w.embedding.cols(), v, d);
  detail::check_shape("pos_embedding", w.pos_embedding.rows(), w.pos_embedding.cols(),
                      static_cast<std::size_t>(cfg.max_positions), d);
  if (w.layers.size() != static_cast<std::size_t>(cfg.n_layers))
    fail(errc::bad_shape, "expected " + std::to_string(cfg.n_layers) + " layers, found " +
                              std::to_string(w.layers.size()));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& lw = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    detail::check_shape(p + "w_q", lw.w_q.rows(), lw.w_q.cols(), d, d);
    detail::check_shape(p + "w_k", lw.w_k.rows(), lw.w_k.cols(), d, d);
    detail::check_shape(p + "w_v", lw.w_v.rows(), lw.w_v.cols(), d, d);
    detail::check_shape(p + "w_o", lw.w_o.rows(), lw.w_o.cols(), d, d);
    detail::check_len(p + "b_q", lw.b_q.size(), d);
    detail::check_len(p + "b_k", lw.b_k.size(), d);
    detail::check_len(p + "b_v", lw.b_v.size(), d);
    detail::check_len(p + "b_o", lw.b_o.size(), d);
    detail::check_shape(p + "w_fc", lw.w_fc.rows(), lw.w_fc.cols(), di, d);
    detail::check_len(p + "b_fc", lw.b_fc.size(), di);
    detail::check_shape(p + "w_proj", lw.w_proj.rows(), lw.w_proj.cols(), d, di);
    detail::check_len(p + "b_proj", lw.b_proj.size(), d);
    detail::check_len(p + "attn_norm.scale", lw.attn_norm.scale.size(), d);
    detail::check_len(p + "attn_norm.bias", lw.attn_norm.bias.size(), d);
    detail::check_len(p + "mlp_norm.scale", lw.mlp_norm.scale.size(), d);
    detail::check_len(p + "mlp_norm.bias", lw.mlp_norm.bias.size(), d);
  }
  detail::check_len("final_norm.scale", w.final_norm.scale.size(), d);
  detail::check_len("final_norm.bias", w.final_norm.bias.size(), d);
  if (cfg.head_kind == HeadKind::linear_head) {
    detail::check_shape("head.w", w.head_w.rows(), w.head_w.cols(), v, d);
    detail::check_len("head.u", w.head_u.size(), v);
  } else {
    if (!w.head_w.empty() || !w.head_u.empty())
      fail(errc::bad_shape, "tied embedding head must not carry head.w/head.u tensors");
  }
}

// Column block [h*dh, (h+1)*dh) of m, as its own matrix.
template <class T>
Mat<T> head_col_block(const Mat<T>& m, int head, int n_heads) {
  const std::size_t dh = m.cols() / static_cast<std::size_t>(n_heads);
  const std::size_t off = static_cast<std::size_t>(head) * dh;
  Mat<T> out(m.rows(), dh);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < dh; ++c) out(r, c) = m(r, off + c);
  return out;
}

// Row block [h*dh, (h+1)*dh) of m, as its own matrix.
template <class T>
Mat<T> head_row_block(const Mat<T>& m, int head, int n_heads) {
  const std::size_t dh = m.rows() / static_cast<std::size_t>(n_heads);
  const std::size_t off = static_cast<std::size_t>(head) * dh;
  Mat<T> out(dh, m.cols());
  for (std::size_t r = 0; r < dh; ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(off + r, c);
  return out;
}

// y = layernorm(x) * scale + bias with the usual epsilon inside the root.
template <class T>
Vec<T> layernorm_row(std::span<const T> x, const NormParams<T>& p, T eps) {
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
  Vec<T> y(d);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * p.scale[i] + p.bias[i];
  return y;
}

template <class T>
Mat<T> layernorm_rows(const Mat<T>& x, const NormParams<T>& p, T eps) {
  Mat<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Vec<T> y = layernorm_row(x.row(r), p, eps);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace rp

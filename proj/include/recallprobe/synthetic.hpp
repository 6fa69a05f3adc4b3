#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>

#include "recallprobe/config.hpp"
#include "recallprobe/weights.hpp"

namespace rp {

// Random draws built on raw mt19937 output. The standard pins down the
// engine's bit stream but not the library distributions, so the mapping to
// floats is spelled out here to keep generated fixtures stable everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed)) {}

  double uniform() { return (gen_() >> 8) * (1.0 / 16777216.0); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-12) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(gen_() % static_cast<std::uint32_t>(hi - lo + 1));
  }

 private:
  std::mt19937 gen_;
  bool have_spare_ = false;
  double spare_ = 0;
};

namespace detail {

template <class T>
Mat<T> random_mat(Rng& rng, std::size_t r, std::size_t c, double scale) {
  Mat<T> m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * scale);
  return m;
}

template <class T>
Vec<T> random_vec(Rng& rng, std::size_t n, double scale) {
  Vec<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return v;
}

}  // namespace detail

// A model with sensible random weights: projections scaled by 1/sqrt(d) so
// activations stay O(1), norm scales near one, small biases.
template <class T = float>
WeightStore<T> make_random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto di = static_cast<std::size_t>(cfg.d_inner);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const double ws = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  WeightStore<T> w;
  w.embedding = detail::random_mat<T>(rng, v, d, 1.0);
  w.pos_embedding = detail::random_mat<T>(rng, static_cast<std::size_t>(cfg.max_positions), d, 0.3);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& lw : w.layers) {
    lw.w_q = detail::random_mat<T>(rng, d, d, ws);
    lw.w_k = detail::random_mat<T>(rng, d, d, ws);
    lw.w_v = detail::random_mat<T>(rng, d, d, ws);
    lw.w_o = detail::random_mat<T>(rng, d, d, ws);
    lw.b_q = detail::random_vec<T>(rng, d, 0.02);
    lw.b_k = detail::random_vec<T>(rng, d, 0.02);
    lw.b_v = detail::random_vec<T>(rng, d, 0.02);
    lw.b_o = detail::random_vec<T>(rng, d, 0.02);
    lw.w_fc = detail::random_mat<T>(rng, di, d, ws);
    lw.b_fc = detail::random_vec<T>(rng, di, 0.02);
    lw.w_proj = detail::random_mat<T>(rng, d, di, 1.0 / std::sqrt(static_cast<double>(cfg.d_inner)));
    lw.b_proj = detail::random_vec<T>(rng, d, 0.02);
    lw.attn_norm.scale = detail::random_vec<T>(rng, d, 0.05);
    for (auto& s : lw.attn_norm.scale) s += T(1);
    lw.attn_norm.bias = detail::random_vec<T>(rng, d, 0.02);
    lw.mlp_norm.scale = detail::random_vec<T>(rng, d, 0.05);
    for (auto& s : lw.mlp_norm.scale) s += T(1);
    lw.mlp_norm.bias = detail::random_vec<T>(rng, d, 0.02);
  }
  w.final_norm.scale = detail::random_vec<T>(rng, d, 0.05);
  for (auto& s : w.final_norm.scale) s += T(1);
  w.final_norm.bias = detail::random_vec<T>(rng, d, 0.02);
  if (cfg.head_kind == HeadKind::linear_head) {
    w.head_w = detail::random_mat<T>(rng, v, d, ws);
    w.head_u = detail::random_vec<T>(rng, v, 0.02);
  }
  return w;
}

// Word vocabulary t0, t1, ... for synthetic prompts.
inline std::unordered_map<std::string, int> make_word_vocab(int vocab_size) {
  std::unordered_map<std::string, int> vocab;
  for (int i = 0; i < vocab_size; ++i) vocab["t" + std::to_string(i)] = i;
  return vocab;
}

// A random ModelConfig inside the given caps, for property tests.
inline ModelConfig random_small_config(Rng& rng, int max_layers, int max_positions, int max_dim) {
  ModelConfig cfg;
  cfg.n_layers = rng.uniform_int(1, max_layers);
  const int dh = rng.uniform_int(1, 4);
  cfg.n_heads = rng.uniform_int(1, std::max(1, max_dim / dh));
  cfg.d_model = cfg.n_heads * dh;
  if (cfg.d_model > max_dim) {
    cfg.n_heads = std::max(1, max_dim / dh);
    cfg.d_model = cfg.n_heads * dh;
  }
  cfg.d_inner = rng.uniform_int(1, 2 * max_dim);
  cfg.vocab_size = rng.uniform_int(8, 40);
  cfg.max_positions = max_positions;
  cfg.layout = rng.uniform() < 0.5 ? Layout::serial : Layout::parallel;
  cfg.activation = rng.uniform() < 0.5 ? Activation::gelu : Activation::relu;
  cfg.head_kind = rng.uniform() < 0.5 ? HeadKind::tied_embedding : HeadKind::linear_head;
  return cfg;
}

}  // namespace rp

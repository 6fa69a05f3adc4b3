#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "recallprobe/config.hpp"
#include "recallprobe/io.hpp"
#include "recallprobe/weights.hpp"

// Weight container layout, all integers little-endian:
//
//   bytes 0..3   magic "RPWT"
//   u32          format version (currently 1)
//   u32          config JSON length, followed by that many bytes
//   u32          tensor directory JSON length, followed by that many bytes
//   zero padding up to the next 64-byte boundary
//   tensor data, float32, each tensor starting on a 64-byte boundary
//
// Directory entries carry name, dtype, shape and the tensor's byte offset
// relative to the start of the data section. The writer lays tensors out in
// one canonical order, so writing what was just read reproduces the file
// byte for byte.

namespace rp {

inline constexpr char container_magic[4] = {'R', 'P', 'W', 'T'};
inline constexpr std::uint32_t container_version = 1;

namespace detail {

inline std::size_t align64(std::size_t x) { return (x + 63) & ~static_cast<std::size_t>(63); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view data, std::size_t off) {
  if (off + 4 > data.size()) fail(errc::truncated, "container ends inside a header field");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[off + i])) << (8 * i);
  return v;
}

struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  const float* data;
  std::size_t count;
};

template <class F>
void for_each_tensor(const ModelConfig& cfg, const WeightStore<float>& w, F&& visit) {
  auto mat = [&](const std::string& name, const Mat<float>& m) {
    visit(TensorRef{name, {m.rows(), m.cols()}, m.data(), m.size()});
  };
  auto vec = [&](const std::string& name, const Vec<float>& v) {
    visit(TensorRef{name, {v.size()}, v.data(), v.size()});
  };
  mat("embedding", w.embedding);
  mat("pos_embedding", w.pos_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& lw = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    mat(p + "w_q", lw.w_q);
    vec(p + "b_q", lw.b_q);
    mat(p + "w_k", lw.w_k);
    vec(p + "b_k", lw.b_k);
    mat(p + "w_v", lw.w_v);
    vec(p + "b_v", lw.b_v);
    mat(p + "w_o", lw.w_o);
    vec(p + "b_o", lw.b_o);
    mat(p + "w_fc", lw.w_fc);
    vec(p + "b_fc", lw.b_fc);
    mat(p + "w_proj", lw.w_proj);
    vec(p + "b_proj", lw.b_proj);
    vec(p + "attn_norm.scale", lw.attn_norm.scale);
    vec(p + "attn_norm.bias", lw.attn_norm.bias);
    vec(p + "mlp_norm.scale", lw.mlp_norm.scale);
    vec(p + "mlp_norm.bias", lw.mlp_norm.bias);
  }
  vec("final_norm.scale", w.final_norm.scale);
  vec("final_norm.bias", w.final_norm.bias);
  if (cfg.head_kind == HeadKind::linear_head) {
    mat("head.w", w.head_w);
    vec("head.u", w.head_u);
  }
}

}  // namespace detail

inline std::string serialize_weights(const ModelConfig& cfg, const WeightStore<float>& w) {
  validate_shapes(cfg, w);
  const std::string cfg_json = nlohmann::json(cfg).dump();

  nlohmann::json dir = nlohmann::json::array();
  std::size_t running = 0;
  detail::for_each_tensor(cfg, w, [&](const detail::TensorRef& t) {
    const std::size_t off = detail::align64(running);
    dir.push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", off}});
    running = off + t.count * sizeof(float);
  });
  const std::string dir_json = dir.dump();

  std::string out;
  out.append(container_magic, 4);
  detail::put_u32(out, container_version);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
  out.append(cfg_json);
  detail::put_u32(out, static_cast<std::uint32_t>(dir_json.size()));
  out.append(dir_json);
  out.resize(detail::align64(out.size()), '\0');

  const std::size_t data_start = out.size();
  out.resize(data_start + running, '\0');
  std::size_t idx = 0;
  detail::for_each_tensor(cfg, w, [&](const detail::TensorRef& t) {
    const std::size_t off = dir[idx++]["offset"].get<std::size_t>();
    std::memcpy(out.data() + data_start + off, t.data, t.count * sizeof(float));
  });
  return out;
}

inline std::pair<ModelConfig, WeightStore<float>> parse_weights(std::string_view data) {
  if (data.size() < 4 || std::memcmp(data.data(), container_magic, 4) != 0)
    fail(errc::bad_magic, "not a weight container (bad magic)");
  std::size_t pos = 4;
  const std::uint32_t version = detail::get_u32(data, pos);
  pos += 4;
  if (version != container_version)
    fail(errc::bad_version, "container version " + std::to_string(version) +
                                " not supported (expected " +
                                std::to_string(container_version) + ")");
  const std::uint32_t cfg_len = detail::get_u32(data, pos);
  pos += 4;
  if (pos + cfg_len > data.size()) fail(errc::truncated, "container ends inside the config");
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(data.substr(pos, cfg_len)).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(errc::validation, std::string("container config is not valid JSON: ") + e.what());
  }
  pos += cfg_len;
  const std::uint32_t dir_len = detail::get_u32(data, pos);
  pos += 4;
  if (pos + dir_len > data.size()) fail(errc::truncated, "container ends inside the directory");
  nlohmann::json dir;
  try {
    dir = nlohmann::json::parse(data.substr(pos, dir_len));
  } catch (const nlohmann::json::exception& e) {
    fail(errc::validation, std::string("tensor directory is not valid JSON: ") + e.what());
  }
  pos += dir_len;
  const std::size_t data_start = detail::align64(pos);

  struct Loaded {
    std::vector<std::size_t> shape;
    std::vector<float> values;
    bool used = false;
  };
  std::map<std::string, Loaded> tensors;
  for (const auto& entry : dir) {
    const auto name = entry.at("name").get<std::string>();
    const auto dtype = entry.at("dtype").get<std::string>();
    if (dtype != "f32")
      fail(errc::validation, "tensor '" + name + "' has unsupported dtype '" + dtype + "'");
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    std::size_t count = 1;
    for (std::size_t s : shape) count *= s;
    const std::size_t begin = data_start + offset;
    if (begin + count * sizeof(float) > data.size())
      fail(errc::truncated, "tensor '" + name + "' runs past the end of the file");
    Loaded t;
    t.shape = shape;
    t.values.resize(count);
    std::memcpy(t.values.data(), data.data() + begin, count * sizeof(float));
    if (!tensors.emplace(name, std::move(t)).second)
      fail(errc::bad_shape, "tensor '" + name + "' appears twice");
  }

  auto take_mat = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(errc::bad_shape, "tensor '" + name + "' is missing");
    it->second.used = true;
    const auto& shape = it->second.shape;
    if (shape.size() != 2)
      fail(errc::bad_shape, "tensor '" + name + "' should have two dimensions");
    Mat<float> m(shape[0], shape[1]);
    std::copy(it->second.values.begin(), it->second.values.end(), m.data());
    return m;
  };
  auto take_vec = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(errc::bad_shape, "tensor '" + name + "' is missing");
    it->second.used = true;
    if (it->second.shape.size() != 1)
      fail(errc::bad_shape, "tensor '" + name + "' should have one dimension");
    return it->second.values;
  };

  WeightStore<float> w;
  w.embedding = take_mat("embedding");
  w.pos_embedding = take_mat("pos_embedding");
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& lw = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    lw.w_q = take_mat(p + "w_q");
    lw.b_q = take_vec(p + "b_q");
    lw.w_k = take_mat(p + "w_k");
    lw.b_k = take_vec(p + "b_k");
    lw.w_v = take_mat(p + "w_v");
    lw.b_v = take_vec(p + "b_v");
    lw.w_o = take_mat(p + "w_o");
    lw.b_o = take_vec(p + "b_o");
    lw.w_fc = take_mat(p + "w_fc");
    lw.b_fc = take_vec(p + "b_fc");
    lw.w_proj = take_mat(p + "w_proj");
    lw.b_proj = take_vec(p + "b_proj");
    lw.attn_norm = {take_vec(p + "attn_norm.scale"), take_vec(p + "attn_norm.bias")};
    lw.mlp_norm = {take_vec(p + "mlp_norm.scale"), take_vec(p + "mlp_norm.bias")};
  }
  w.final_norm = {take_vec("final_norm.scale"), take_vec("final_norm.bias")};
  if (cfg.head_kind == HeadKind::linear_head) {
    w.head_w = take_mat("head.w");
    w.head_u = take_vec("head.u");
  }
  for (const auto& [name, t] : tensors)
    if (!t.used) fail(errc::bad_shape, "tensor '" + name + "' is not part of this model");

  validate_shapes(cfg, w);
  return {cfg, std::move(w)};
}

inline void write_weights(const std::string& path, const ModelConfig& cfg,
                          const WeightStore<float>& w) {
  atomic_write_file(path, serialize_weights(cfg, w));
}

inline std::pair<ModelConfig, WeightStore<float>> load_weights(const std::string& path) {
  return parse_weights(read_file(path));
}

}  // namespace rp

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "json.hpp"
#include "recallprobe/errors.hpp"
#include "recallprobe/matrix.hpp"

namespace rp {

enum class SublayerKind { mhsa, mlp };

inline std::string to_string(SublayerKind k) { return k == SublayerKind::mhsa ? "mhsa" : "mlp"; }

inline SublayerKind sublayer_kind_from_string(const std::string& s) {
  if (s == "mhsa") return SublayerKind::mhsa;
  if (s == "mlp") return SublayerKind::mlp;
  fail(errc::validation, "unknown sublayer kind '" + s + "'");
}

// Stops query_pos from attending to key_pos at one layer, across all heads.
// The edit lands in the additive attention mask, so the remaining weights of
// that row renormalize through the softmax.
struct AttentionBlock {
  int layer = 0;
  int query_pos = 0;
  int key_pos = 0;
  auto operator<=>(const AttentionBlock&) const = default;
};

// Replaces one sublayer update row with zeros after it has been computed.
struct SublayerZero {
  SublayerKind kind = SublayerKind::mhsa;
  int layer = 0;
  int position = 0;
  auto operator<=>(const SublayerZero&) const = default;
};

// Makes attention at every layer past source_layer read the residual state of
// this position as it stood after source_layer, instead of the current one.
// The residual stream itself keeps evolving unmodified.
struct Patch {
  int position = 0;
  int source_layer = 0;
  auto operator<=>(const Patch&) const = default;
};

struct InterventionPlan {
  std::vector<AttentionBlock> attention_blocks;
  std::vector<SublayerZero> sublayer_zeroings;
  std::vector<Patch> patches;

  bool empty() const {
    return attention_blocks.empty() && sublayer_zeroings.empty() && patches.empty();
  }

  void merge(const InterventionPlan& other) {
    attention_blocks.insert(attention_blocks.end(), other.attention_blocks.begin(),
                            other.attention_blocks.end());
    sublayer_zeroings.insert(sublayer_zeroings.end(), other.sublayer_zeroings.begin(),
                             other.sublayer_zeroings.end());
    patches.insert(patches.end(), other.patches.begin(), other.patches.end());
  }

  // Sorts and removes duplicates; two patches on the same position with
  // different source layers stay distinct and will be rejected by validate.
  void canonicalize() {
    std::sort(attention_blocks.begin(), attention_blocks.end());
    attention_blocks.erase(std::unique(attention_blocks.begin(), attention_blocks.end()),
                           attention_blocks.end());
    std::sort(sublayer_zeroings.begin(), sublayer_zeroings.end());
    sublayer_zeroings.erase(std::unique(sublayer_zeroings.begin(), sublayer_zeroings.end()),
                            sublayer_zeroings.end());
    std::sort(patches.begin(), patches.end());
    patches.erase(std::unique(patches.begin(), patches.end()), patches.end());
  }

  // Every coordinate must land inside a real forward pass before any compute
  // starts: layers are 1-based up to n_layers, positions 0-based below
  // n_positions, blocks must respect causality, and at most one patch may
  // claim a position.
  void validate(int n_layers, int n_positions) const {
    for (const auto& b : attention_blocks) {
      if (b.layer < 1 || b.layer > n_layers)
        fail(errc::validation, "attention block layer " + std::to_string(b.layer) +
                                   " outside [1, " + std::to_string(n_layers) + "]");
      if (b.query_pos < 0 || b.query_pos >= n_positions || b.key_pos < 0 ||
          b.key_pos >= n_positions)
        fail(errc::validation, "attention block position outside the sequence");
      if (b.key_pos > b.query_pos)
        fail(errc::validation,
             "attention block targets a key after its query; that edge is already causalized");
    }
    for (const auto& z : sublayer_zeroings) {
      if (z.layer < 1 || z.layer > n_layers)
        fail(errc::validation, "sublayer zeroing layer " + std::to_string(z.layer) +
                                   " outside [1, " + std::to_string(n_layers) + "]");
      if (z.position < 0 || z.position >= n_positions)
        fail(errc::validation, "sublayer zeroing position outside the sequence");
    }
    std::vector<int> patched;
    for (const auto& p : patches) {
      if (p.source_layer < 0 || p.source_layer > n_layers)
        fail(errc::validation, "patch source layer " + std::to_string(p.source_layer) +
                                   " outside [0, " + std::to_string(n_layers) + "]");
      if (p.position < 0 || p.position >= n_positions)
        fail(errc::validation, "patch position outside the sequence");
      patched.push_back(p.position);
    }
    std::sort(patched.begin(), patched.end());
    if (std::adjacent_find(patched.begin(), patched.end()) != patched.end())
      fail(errc::validation, "two patches claim the same position");
  }
};

inline void to_json(nlohmann::json& j, const AttentionBlock& b) {
  j = nlohmann::json{{"layer", b.layer}, {"query_pos", b.query_pos}, {"key_pos", b.key_pos}};
}
inline void from_json(const nlohmann::json& j, AttentionBlock& b) {
  j.at("layer").get_to(b.layer);
  j.at("query_pos").get_to(b.query_pos);
  j.at("key_pos").get_to(b.key_pos);
}

inline void to_json(nlohmann::json& j, const SublayerZero& z) {
  j = nlohmann::json{
      {"kind", to_string(z.kind)}, {"layer", z.layer}, {"position", z.position}};
}
inline void from_json(const nlohmann::json& j, SublayerZero& z) {
  z.kind = sublayer_kind_from_string(j.at("kind").get<std::string>());
  j.at("layer").get_to(z.layer);
  j.at("position").get_to(z.position);
}

inline void to_json(nlohmann::json& j, const Patch& p) {
  j = nlohmann::json{{"position", p.position}, {"source_layer", p.source_layer}};
}
inline void from_json(const nlohmann::json& j, Patch& p) {
  j.at("position").get_to(p.position);
  j.at("source_layer").get_to(p.source_layer);
}

inline void to_json(nlohmann::json& j, const InterventionPlan& p) {
  j = nlohmann::json{{"attention_blocks", p.attention_blocks},
                     {"sublayer_zeroings", p.sublayer_zeroings},
                     {"patches", p.patches}};
}
inline void from_json(const nlohmann::json& j, InterventionPlan& p) {
  j.at("attention_blocks").get_to(p.attention_blocks);
  j.at("sublayer_zeroings").get_to(p.sublayer_zeroings);
  j.at("patches").get_to(p.patches);
}

// A symmetric band of layers around center_layer in which target_position is
// cut off from every source position. width must be odd; the band clamps to
// [1, n_layers].
struct KnockoutWindow {
  int center_layer = 0;
  int width = 1;
  std::vector<int> source_positions;
  int target_position = 0;
};

inline std::pair<int, int> window_layer_range(int center, int width, int n_layers) {
  if (width < 1 || width % 2 == 0) fail(errc::validation, "window width must be odd and >= 1");
  const int half = width / 2;
  return {std::max(1, center - half), std::min(n_layers, center + half)};
}

inline InterventionPlan knockout_window(const KnockoutWindow& w, int n_layers) {
  if (w.center_layer < 1 || w.center_layer > n_layers)
    fail(errc::validation, "window center outside [1, n_layers]");
  if (w.source_positions.empty()) fail(errc::validation, "window has no source positions");
  for (int s : w.source_positions)
    if (s > w.target_position)
      fail(errc::validation, "window source position " + std::to_string(s) +
                                 " is after the target; that edge does not exist");
  auto [lo, hi] = window_layer_range(w.center_layer, w.width, n_layers);
  InterventionPlan plan;
  for (int l = lo; l <= hi; ++l)
    for (int s : w.source_positions)
      plan.attention_blocks.push_back({l, w.target_position, s});
  plan.canonicalize();
  return plan;
}

// Zeroes one sublayer at one position for ten consecutive layers starting at
// start_layer, clamped to the top of the stack.
inline InterventionPlan sublayer_knockout(SublayerKind kind, int start_layer, int position,
                                          int n_layers) {
  if (start_layer < 1 || start_layer > n_layers)
    fail(errc::validation, "knockout start layer outside [1, n_layers]");
  InterventionPlan plan;
  const int hi = std::min(start_layer + 9, n_layers);
  for (int l = start_layer; l <= hi; ++l) plan.sublayer_zeroings.push_back({kind, l, position});
  return plan;
}

inline InterventionPlan patch_positions(std::span<const int> positions, int source_layer) {
  InterventionPlan plan;
  for (int p : positions) plan.patches.push_back({p, source_layer});
  plan.canonicalize();
  return plan;
}

// Writes -inf into an additive attention mask for every block this plan holds
// at the given layer.
template <class T>
void apply_plan_to_mask(const InterventionPlan& plan, int layer, Mat<T>& mask) {
  for (const auto& b : plan.attention_blocks)
    if (b.layer == layer)
      mask(static_cast<std::size_t>(b.query_pos), static_cast<std::size_t>(b.key_pos)) =
          neg_inf<T>;
}

}  // namespace rp

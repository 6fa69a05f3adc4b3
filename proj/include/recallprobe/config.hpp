#pragma once

#include <string>

#include "json.hpp"
#include "recallprobe/errors.hpp"

namespace rp {

// Sublayer wiring. In the serial layout the feed-forward block reads the
// attention output added back to the incoming residual; in the parallel
// layout both sublayers read the incoming residual independently.
enum class Layout { serial, parallel };

enum class Activation { gelu, relu };

// How logits are produced from a hidden state: either by dotting against the
// token embedding matrix, or through a separately stored linear map.
enum class HeadKind { tied_embedding, linear_head };

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_inner = 0;
  int vocab_size = 0;
  int max_positions = 0;
  Layout layout = Layout::serial;
  Activation activation = Activation::gelu;
  HeadKind head_kind = HeadKind::tied_embedding;
  float norm_epsilon = 1e-5f;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) fail(errc::validation, "config: n_layers must be >= 1");
    if (n_heads < 1) fail(errc::validation, "config: n_heads must be >= 1");
    if (d_model < 1) fail(errc::validation, "config: d_model must be >= 1");
    if (d_inner < 1) fail(errc::validation, "config: d_inner must be >= 1");
    if (vocab_size < 1) fail(errc::validation, "config: vocab_size must be >= 1");
    if (max_positions < 1) fail(errc::validation, "config: max_positions must be >= 1");
    if (d_model % n_heads != 0)
      fail(errc::validation, "config: d_model must be divisible by n_heads");
    if (!(norm_epsilon > 0)) fail(errc::validation, "config: norm_epsilon must be positive");
  }
};

inline std::string to_string(Layout v) { return v == Layout::serial ? "serial" : "parallel"; }
inline std::string to_string(Activation v) { return v == Activation::gelu ? "gelu" : "relu"; }
inline std::string to_string(HeadKind v) {
  return v == HeadKind::tied_embedding ? "tied_embedding" : "linear_head";
}

inline Layout layout_from_string(const std::string& s) {
  if (s == "serial") return Layout::serial;
  if (s == "parallel") return Layout::parallel;
  fail(errc::validation, "config: unknown layout '" + s + "'");
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  fail(errc::validation, "config: unknown activation '" + s + "'");
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "tied_embedding") return HeadKind::tied_embedding;
  if (s == "linear_head") return HeadKind::linear_head;
  fail(errc::validation, "config: unknown head kind '" + s + "'");
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},
                     {"d_inner", c.d_inner},
                     {"vocab_size", c.vocab_size},
                     {"max_positions", c.max_positions},
                     {"layout", to_string(c.layout)},
                     {"activation", to_string(c.activation)},
                     {"head_kind", to_string(c.head_kind)},
                     {"norm_epsilon", c.norm_epsilon}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_inner").get_to(c.d_inner);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_positions").get_to(c.max_positions);
  c.layout = layout_from_string(j.at("layout").get<std::string>());
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.head_kind = head_kind_from_string(j.at("head_kind").get<std::string>());
  if (j.contains("norm_epsilon")) j.at("norm_epsilon").get_to(c.norm_epsilon);
}

}  // namespace rp

#include "patchtok/forecaster.hpp"

#include <string>

#include "patchtok/errors.hpp"
#include "patchtok/layers.hpp"
#include "patchtok/ops.hpp"
#include "patchtok/patching.hpp"

namespace patchtok {

void ForecasterConfig::validate() const {
  if (input_dim < 1 || d_model < 1 || ffn_dim < 1) throw ConfigError("forecaster: dimensions must be >= 1");
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw ConfigError("forecaster: d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (horizon < 1) throw ConfigError("forecaster: horizon must be >= 1");
  if (horizon >= max_patches) throw ConfigError("forecaster: horizon must be smaller than max_patches");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("forecaster: dropout_rate must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ForecasterConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},     {"d_model", c.d_model},   {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},   {"max_patches", c.max_patches},
                     {"horizon", c.horizon},         {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, ForecasterConfig& c) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.d_model = j.value("d_model", c.d_model);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_patches = j.value("max_patches", c.max_patches);
  c.horizon = j.value("horizon", c.horizon);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
}

Forecaster::Forecaster(ForecasterConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  if (cfg_.projects_input()) layers::init_affine(params_, "input_proj", cfg_.input_dim, cfg_.d_model, rng);
  Tensor pos({cfg_.max_patches, cfg_.d_model});
  for (double& v : pos.storage()) v = rng.normal(0.0, 0.02);
  params_.add("pos", std::move(pos));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    layers::init_layer_norm(params_, p + ".ln1", cfg_.d_model);
    layers::init_attention(params_, p + ".attn", cfg_.d_model, rng);
    layers::init_layer_norm(params_, p + ".ln2", cfg_.d_model);
    layers::init_affine(params_, p + ".ffn1", cfg_.d_model, cfg_.ffn_dim, rng);
    layers::init_affine(params_, p + ".ffn2", cfg_.ffn_dim, cfg_.d_model, rng);
  }
  layers::init_layer_norm(params_, "final_ln", cfg_.d_model);
  layers::init_affine(params_, "head", cfg_.d_model, 1, rng);
}

Forecaster::Forecaster(ForecasterConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  Forecaster reference(cfg_, 0);
  for (const auto& [name, p] : reference.params()) {
    if (!params_.contains(name) || params_.get(name).value.shape() != p.value.shape()) {
      throw ConfigError("forecaster parameter '" + name + "' missing or mis-shaped for this configuration");
    }
  }
  if (params_.size() != reference.params().size()) throw ConfigError("forecaster parameter set has unexpected entries");
}

Var Forecaster::project_input(Tape& tape, Var tokens) {
  if (tokens.shape().back() != cfg_.input_dim) {
    throw DimensionError("forecaster: token width " + std::to_string(tokens.shape().back()) + " != input_dim " +
                         std::to_string(cfg_.input_dim));
  }
  if (!cfg_.projects_input()) return tokens;
  return layers::affine(tape, params_, "input_proj", tokens);
}

Var Forecaster::add_positional(Tape& tape, Var x, Rng* dropout_rng) {
  const Shape s = x.shape();
  const std::size_t k = s[s.size() - 2];
  if (k > cfg_.max_patches) {
    throw ConfigError("forecaster: " + std::to_string(k) + " patches exceed max_patches " + std::to_string(cfg_.max_patches));
  }
  Var table = slice(tape.param(params_.get("pos")), 0, 0, k);
  return dropout(add(x, table), cfg_.dropout_rate, dropout_rng);
}

Var Forecaster::encoder_forward(Tape& tape, Var x) {
  if (x.shape().back() != cfg_.d_model) throw DimensionError("forecaster: encoder input width must equal d_model");
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    Var attn = multi_head_attention(layers::layer_norm(tape, params_, p + ".ln1", x),
                                    layers::attention(tape, params_, p + ".attn"), cfg_.num_heads);
    Var u = add(x, attn);
    Var ffn = layers::affine(tape, params_, p + ".ffn2",
                             gelu(layers::affine(tape, params_, p + ".ffn1", layers::layer_norm(tape, params_, p + ".ln2", u))));
    x = add(u, ffn);
  }
  return layers::layer_norm(tape, params_, "final_ln", x);
}

Var Forecaster::predict_horizon(Tape& tape, Var hidden) {
  const Shape s = hidden.shape();
  const std::size_t axis = s.size() - 2;
  const std::size_t k = s[axis];
  check_horizon(cfg_.horizon, k);
  Var kept = slice(hidden, axis, 0, k - cfg_.horizon);
  Var out = layers::affine(tape, params_, "head", kept);
  Shape out_shape(s.begin(), s.end() - 1);
  out_shape.back() = k - cfg_.horizon;
  return reshape(out, out_shape);
}

Var Forecaster::forward(Tape& tape, Var tokens, Rng* dropout_rng) {
  return predict_horizon(tape, encoder_forward(tape, add_positional(tape, project_input(tape, tokens), dropout_rng)));
}

}  // namespace patchtok

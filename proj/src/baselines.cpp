#include "patchtok/baselines.hpp"

#include <string>

#include "patchtok/errors.hpp"
#include "patchtok/layers.hpp"
#include "patchtok/ops.hpp"
#include "patchtok/patching.hpp"

namespace patchtok {

std::size_t TcnConfig::dilation(std::size_t level) const {
  std::size_t d = 1;
  for (std::size_t i = 0; i < level; ++i) d *= dilation_base;
  return d;
}

std::size_t TcnConfig::receptive_field() const {
  std::size_t rf = 1;
  for (std::size_t l = 0; l < levels; ++l) rf += 2 * (kernel_width - 1) * dilation(l);
  return rf;
}

void TcnConfig::validate() const {
  if (in_features < 1 || patch_len < 1) throw ConfigError("tcn: in_features and patch_len must be >= 1");
  if (levels < 1 || channels < 1) throw ConfigError("tcn: levels and channels must be >= 1");
  if (kernel_width < 1) throw ConfigError("tcn: kernel_width must be >= 1");
  if (dilation_base < 1) throw ConfigError("tcn: dilation_base must be >= 1");
  if (horizon < 1) throw ConfigError("tcn: horizon must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("tcn: dropout_rate must lie in [0, 1)");
  if (receptive_field() > (std::size_t{1} << 24)) throw ConfigError("tcn: receptive field is unreasonably large");
}

void to_json(nlohmann::json& j, const TcnConfig& c) {
  j = nlohmann::json{{"in_features", c.in_features}, {"patch_len", c.patch_len},       {"levels", c.levels},
                     {"channels", c.channels},       {"kernel_width", c.kernel_width}, {"dilation_base", c.dilation_base},
                     {"horizon", c.horizon},         {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, TcnConfig& c) {
  c.in_features = j.value("in_features", c.in_features);
  c.patch_len = j.value("patch_len", c.patch_len);
  c.levels = j.value("levels", c.levels);
  c.channels = j.value("channels", c.channels);
  c.kernel_width = j.value("kernel_width", c.kernel_width);
  c.dilation_base = j.value("dilation_base", c.dilation_base);
  c.horizon = j.value("horizon", c.horizon);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
}

Tcn::Tcn(TcnConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t in = cfg_.in_features;
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    const std::string p = "level" + std::to_string(l);
    layers::init_conv(params_, p + ".conv1", in, cfg_.channels, cfg_.kernel_width, rng);
    layers::init_conv(params_, p + ".conv2", cfg_.channels, cfg_.channels, cfg_.kernel_width, rng);
    if (in != cfg_.channels) layers::init_conv(params_, p + ".skip", in, cfg_.channels, 1, rng);
    in = cfg_.channels;
  }
  layers::init_affine(params_, "head", cfg_.channels, 1, rng);
}

Tcn::Tcn(TcnConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  Tcn reference(cfg_, 0);
  for (const auto& [name, p] : reference.params()) {
    if (!params_.contains(name) || params_.get(name).value.shape() != p.value.shape()) {
      throw ConfigError("tcn parameter '" + name + "' missing or mis-shaped for this configuration");
    }
  }
  if (params_.size() != reference.params().size()) throw ConfigError("tcn parameter set has unexpected entries");
}

Var Tcn::step_states(Tape& tape, Var x, Rng* dropout_rng) {
  const Shape s = x.shape();
  if (s.size() != 3 || s[2] != cfg_.in_features) {
    throw DimensionError("tcn: input " + shape_str(s) + " must be [B, T, " + std::to_string(cfg_.in_features) + "]");
  }
  Var h = permute(x, {0, 2, 1});
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    const std::string p = "level" + std::to_string(l);
    const Conv1dOptions causal{(cfg_.kernel_width - 1) * cfg_.dilation(l), 0, cfg_.dilation(l)};
    Var branch = dropout(gelu(layers::conv(tape, params_, p + ".conv1", h, causal)), cfg_.dropout_rate, dropout_rng);
    branch = dropout(gelu(layers::conv(tape, params_, p + ".conv2", branch, causal)), cfg_.dropout_rate, dropout_rng);
    Var skip = params_.contains(p + ".skip.w") ? layers::conv(tape, params_, p + ".skip", h, Conv1dOptions{}) : h;
    h = gelu(add(branch, skip));
  }
  return permute(h, {0, 2, 1});
}

Var Tcn::forward(Tape& tape, Var x, Rng* dropout_rng) {
  const std::size_t b = x.shape().at(0);
  const std::size_t t = x.shape().at(1);
  const std::size_t k = num_patches(t, cfg_.patch_len);
  check_horizon(cfg_.horizon, k);
  Var states = slice(step_states(tape, x, dropout_rng), 1, 0, k * cfg_.patch_len);
  Var pooled = mean_axis(reshape(states, {b, k, cfg_.patch_len, cfg_.channels}), 2);
  Var kept = slice(pooled, 1, 0, k - cfg_.horizon);
  return reshape(layers::affine(tape, params_, "head", kept), {b, k - cfg_.horizon});
}

ForecasterConfig PatchTstConfig::backbone() const {
  ForecasterConfig f;
  f.input_dim = d_model;
  f.d_model = d_model;
  f.num_layers = layers;
  f.num_heads = heads;
  f.ffn_dim = ffn_dim;
  f.max_patches = max_patches;
  f.horizon = horizon;
  f.dropout_rate = dropout_rate;
  return f;
}

void PatchTstConfig::validate() const {
  if (in_features < 1 || patch_len < 1) throw ConfigError("patchtst: in_features and patch_len must be >= 1");
  backbone().validate();
}

void to_json(nlohmann::json& j, const PatchTstConfig& c) {
  j = nlohmann::json{{"in_features", c.in_features}, {"patch_len", c.patch_len}, {"d_model", c.d_model},
                     {"layers", c.layers},           {"heads", c.heads},         {"ffn_dim", c.ffn_dim},
                     {"max_patches", c.max_patches}, {"horizon", c.horizon},     {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, PatchTstConfig& c) {
  c.in_features = j.value("in_features", c.in_features);
  c.patch_len = j.value("patch_len", c.patch_len);
  c.d_model = j.value("d_model", c.d_model);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_patches = j.value("max_patches", c.max_patches);
  c.horizon = j.value("horizon", c.horizon);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
}

namespace {
ParamSet make_embedding(const PatchTstConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet ps;
  layers::init_affine(ps, "embed", cfg.patch_len * cfg.in_features, cfg.d_model, rng);
  return ps;
}
}  // namespace

PatchTst::PatchTst(PatchTstConfig cfg, std::uint64_t seed)
    : cfg_(cfg), embed_(make_embedding(cfg, seed)), backbone_(cfg.backbone(), splitmix64(seed)) {}

PatchTst::PatchTst(PatchTstConfig cfg, ParamSet embedding, ParamSet backbone)
    : cfg_(cfg), embed_(std::move(embedding)), backbone_(cfg.backbone(), std::move(backbone)) {
  const std::size_t in = cfg_.patch_len * cfg_.in_features;
  if (!embed_.contains("embed.w") || !embed_.contains("embed.b") || embed_.size() != 2 ||
      embed_.get("embed.w").value.shape() != Shape{in, cfg_.d_model} || embed_.get("embed.b").value.shape() != Shape{cfg_.d_model}) {
    throw ConfigError("patchtst embedding parameters missing or mis-shaped for this configuration");
  }
}

Var PatchTst::embed(Tape& tape, Var x) {
  const Shape s = x.shape();
  if (s.size() != 3 || s[2] != cfg_.in_features) {
    throw DimensionError("patchtst: input " + shape_str(s) + " must be [B, T, " + std::to_string(cfg_.in_features) + "]");
  }
  const std::size_t k = num_patches(s[1], cfg_.patch_len);
  Var flat = reshape(slice(x, 1, 0, k * cfg_.patch_len), {s[0], k, cfg_.patch_len * cfg_.in_features});
  return layers::affine(tape, embed_, "embed", flat);
}

Var PatchTst::forward(Tape& tape, Var x, Rng* dropout_rng) { return backbone_.forward(tape, embed(tape, x), dropout_rng); }

}  // namespace patchtok

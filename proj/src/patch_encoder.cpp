#include "patchtok/patch_encoder.hpp"

#include <numeric>
#include <string>

#include "patchtok/errors.hpp"
#include "patchtok/layers.hpp"
#include "patchtok/ops.hpp"

namespace patchtok {

std::size_t EncoderConfig::feature_channels() const {
  return std::accumulate(conv_channels.begin(), conv_channels.end(), in_features);
}

void EncoderConfig::validate() const {
  if (patch_len < 1 || in_features < 1) throw ConfigError("encoder: patch_len and in_features must be >= 1");
  if (conv_channels.empty()) throw ConfigError("encoder: at least one dense block is required");
  for (std::size_t c : conv_channels) {
    if (c < 1) throw ConfigError("encoder: conv block channel counts must be >= 1");
  }
  if (kernel_width < 1 || kernel_width > patch_len) {
    throw ConfigError("encoder: kernel_width " + std::to_string(kernel_width) + " must lie in [1, P=" +
                      std::to_string(patch_len) + "]");
  }
  if (token_dim < 1 || pool_hidden < 1) throw ConfigError("encoder: token_dim and pool_hidden must be >= 1");
  if (refine_heads == 0 || token_dim % refine_heads != 0) {
    throw ConfigError("encoder: token_dim " + std::to_string(token_dim) + " not divisible by refine_heads " +
                      std::to_string(refine_heads));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("encoder: dropout_rate must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"patch_len", c.patch_len},       {"in_features", c.in_features}, {"conv_channels", c.conv_channels},
                     {"kernel_width", c.kernel_width}, {"token_dim", c.token_dim},     {"refine_heads", c.refine_heads},
                     {"pool_hidden", c.pool_hidden},   {"dropout_rate", c.dropout_rate}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.patch_len = j.value("patch_len", c.patch_len);
  c.in_features = j.value("in_features", c.in_features);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.kernel_width = j.value("kernel_width", c.kernel_width);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.refine_heads = j.value("refine_heads", c.refine_heads);
  c.pool_hidden = j.value("pool_hidden", c.pool_hidden);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
}

PatchEncoder::PatchEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t channels = cfg_.in_features;
  for (std::size_t b = 0; b < cfg_.num_dense_blocks(); ++b) {
    layers::init_conv(params_, "conv" + std::to_string(b), channels, cfg_.conv_channels[b], cfg_.kernel_width, rng);
    channels += cfg_.conv_channels[b];
  }
  layers::init_affine(params_, "pool.score", channels, cfg_.pool_hidden, rng);
  layers::init_affine(params_, "pool.query", cfg_.pool_hidden, 1, rng);
  layers::init_affine(params_, "proj", channels, cfg_.token_dim, rng);
  layers::init_attention(params_, "refine", cfg_.token_dim, rng);
}

PatchEncoder::PatchEncoder(EncoderConfig cfg, ParamSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  PatchEncoder reference(cfg_, 0);
  for (const auto& [name, p] : reference.params()) {
    if (!params_.contains(name) || params_.get(name).value.shape() != p.value.shape()) {
      throw ConfigError("encoder parameter '" + name + "' missing or mis-shaped for this configuration");
    }
  }
  if (params_.size() != reference.params().size()) throw ConfigError("encoder parameter set has unexpected entries");
}

void PatchEncoder::check_patches(const Shape& s, std::size_t expected_rank) const {
  if (s.size() != expected_rank || s[expected_rank - 2] != cfg_.patch_len || s[expected_rank - 1] != cfg_.in_features) {
    throw DimensionError("encoder: patches " + shape_str(s) + " do not match P=" + std::to_string(cfg_.patch_len) +
                         ", F=" + std::to_string(cfg_.in_features));
  }
}

Var PatchEncoder::encode_patches(Tape& tape, Var patches) {
  check_patches(patches.shape(), 3);
  const std::size_t pad_left = (cfg_.kernel_width - 1) / 2;
  const Conv1dOptions same{pad_left, cfg_.kernel_width - 1 - pad_left, 1};
  std::vector<Var> maps{permute(patches, {0, 2, 1})};
  for (std::size_t b = 0; b < cfg_.num_dense_blocks(); ++b) {
    Var in = maps.size() == 1 ? maps[0] : concat(maps, 1);
    maps.push_back(gelu(layers::conv(tape, params_, "conv" + std::to_string(b), in, same)));
  }
  return concat(maps, 1);
}

Var PatchEncoder::pool_scores(Tape& tape, Var features) {
  const Shape s = features.shape();
  if (s.size() != 3 || s[1] != cfg_.feature_channels()) {
    throw DimensionError("attention_pool: features " + shape_str(s) + " need " + std::to_string(cfg_.feature_channels()) +
                         " channels");
  }
  Var steps = permute(features, {0, 2, 1});
  Var hidden = tanh(layers::affine(tape, params_, "pool.score", steps));
  return reshape(layers::affine(tape, params_, "pool.query", hidden), {s[0], s[2]});
}

Var pool_with_scores(Var features, Var scores) {
  const Shape s = features.shape();
  if (s.size() != 3 || scores.shape() != Shape{s[0], s[2]}) {
    throw DimensionError("pool_with_scores: features " + shape_str(s) + " and scores " + shape_str(scores.shape()) +
                         " disagree");
  }
  Var weights = reshape(softmax_last(scores), {s[0], s[2], 1});
  return reshape(bmm(features, weights), {s[0], s[1]});
}

Var PatchEncoder::attention_pool(Tape& tape, Var features) {
  return pool_with_scores(features, pool_scores(tape, features));
}

Var PatchEncoder::project_tokens(Tape& tape, Var pooled) { return layers::affine(tape, params_, "proj", pooled); }

Var PatchEncoder::refine_tokens(Tape& tape, Var tokens) {
  return add(tokens, multi_head_attention(tokens, layers::attention(tape, params_, "refine"), cfg_.refine_heads));
}

Var PatchEncoder::encode(Tape& tape, Var patches, Rng* dropout_rng) {
  check_patches(patches.shape(), 4);
  const std::size_t b = patches.shape()[0];
  const std::size_t k = patches.shape()[1];
  Var flat = reshape(patches, {b * k, cfg_.patch_len, cfg_.in_features});
  Var tokens = project_tokens(tape, attention_pool(tape, encode_patches(tape, flat)));
  tokens = dropout(tokens, cfg_.dropout_rate, dropout_rng);
  return refine_tokens(tape, reshape(tokens, {b, k, cfg_.token_dim}));
}

Tensor PatchEncoder::encode_patch(const Tensor& patch) {
  check_patches(patch.shape(), 2);
  Tape tape(false);
  Var x = tape.constant(patch.reshaped({1, cfg_.patch_len, cfg_.in_features}));
  Var f = encode_patches(tape, x);
  return permute(f, {0, 2, 1}).value().reshaped({cfg_.patch_len, cfg_.feature_channels()});
}

TokenSequence PatchEncoder::encode_sequence(const PatchSequence& patches) {
  const Tensor& p = patches.patches;
  check_patches(p.shape(), 3);
  Tape tape(false);
  Var x = tape.constant(p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)}));
  Var tokens = encode(tape, x);
  return {tokens.value().reshaped({p.dim(0), cfg_.token_dim})};
}

}  // namespace patchtok

#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "patchtok/autodiff.hpp"
#include "patchtok/patching.hpp"
#include "patchtok/rng.hpp"

namespace patchtok {

struct EncoderConfig {
  std::size_t patch_len = 8;
  std::size_t in_features = 6;
  std::vector<std::size_t> conv_channels{32, 32};  // one entry per dense block
  std::size_t kernel_width = 3;
  std::size_t token_dim = 64;
  std::size_t refine_heads = 4;
  std::size_t pool_hidden = 32;
  double dropout_rate = 0.1;

  std::size_t num_dense_blocks() const { return conv_channels.size(); }
  // Channels of the dense feature map: the patch itself plus every block output.
  std::size_t feature_channels() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct TokenSequence {
  Tensor tokens;  // [K, D]
};

// Stage-1 patch encoder. Parameters are named "conv<b>", "pool.score",
// "pool.query", "proj" and "refine". Every patch goes through the same
// convolutional weights.
class PatchEncoder {
 public:
  PatchEncoder(EncoderConfig cfg, std::uint64_t seed);
  PatchEncoder(EncoderConfig cfg, ParamSet params);

  const EncoderConfig& config() const noexcept { return cfg_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // patches [N, P, F] -> dense feature map [N, C, P].
  Var encode_patches(Tape& tape, Var patches);
  // Softmax-weighted sum over the temporal axis; features [N, C, P] -> [N, C].
  Var attention_pool(Tape& tape, Var features);
  // Unnormalized pooling scores [N, P].
  Var pool_scores(Tape& tape, Var features);
  Var project_tokens(Tape& tape, Var pooled);
  // tokens [B, K, D] or [K, D] -> tokens + MHA(tokens).
  Var refine_tokens(Tape& tape, Var tokens);
  // patches [B, K, P, F] -> refined tokens [B, K, D]. Dropout (on the
  // projected tokens) only when dropout_rng is non-null.
  Var encode(Tape& tape, Var patches, Rng* dropout_rng = nullptr);

  // Single-sequence conveniences in evaluation mode.
  Tensor encode_patch(const Tensor& patch);
  TokenSequence encode_sequence(const PatchSequence& patches);

 private:
  void check_patches(const Shape& s, std::size_t expected_rank) const;

  EncoderConfig cfg_;
  ParamSet params_;
};

// features [N, C, P], scores [N, P] -> sum_t softmax(scores)[t] * features[:, :, t].
Var pool_with_scores(Var features, Var scores);

}  // namespace patchtok

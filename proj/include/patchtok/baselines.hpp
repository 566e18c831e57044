#pragma once

#include <cstdint>

#include "json.hpp"
#include "patchtok/autodiff.hpp"
#include "patchtok/forecaster.hpp"

namespace patchtok {

struct TcnConfig {
  std::size_t in_features = 6;
  std::size_t patch_len = 8;
  std::size_t levels = 4;
  std::size_t channels = 32;
  std::size_t kernel_width = 3;
  std::size_t dilation_base = 2;
  std::size_t horizon = 1;
  double dropout_rate = 0.1;

  std::size_t dilation(std::size_t level) const;
  std::size_t receptive_field() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TcnConfig& c);
void from_json(const nlohmann::json& j, TcnConfig& c);

// Causal dilated residual convolution stack over the raw sequence. Step
// states are mean-pooled within each patch and a shared affine head maps
// patch state k to the target of patch k + h.
class Tcn {
 public:
  Tcn(TcnConfig cfg, std::uint64_t seed);
  Tcn(TcnConfig cfg, ParamSet params);

  const TcnConfig& config() const noexcept { return cfg_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // x [B, T, F] -> step states [B, T, C].
  Var step_states(Tape& tape, Var x, Rng* dropout_rng = nullptr);
  // x [B, T, F] -> forecasts [B, K - h].
  Var forward(Tape& tape, Var x, Rng* dropout_rng = nullptr);

 private:
  TcnConfig cfg_;
  ParamSet params_;
};

struct PatchTstConfig {
  std::size_t in_features = 6;
  std::size_t patch_len = 8;
  std::size_t d_model = 64;
  std::size_t layers = 4;
  std::size_t heads = 16;
  std::size_t ffn_dim = 256;
  std::size_t max_patches = 64;
  std::size_t horizon = 1;
  double dropout_rate = 0.1;

  ForecasterConfig backbone() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PatchTstConfig& c);
void from_json(const nlohmann::json& j, PatchTstConfig& c);

// Patch-token Transformer trained end to end: each flattened patch is
// linearly embedded ("embed"), then a Forecaster backbone with input_dim ==
// d_model supplies the positional table, pre-norm stack and horizon head.
class PatchTst {
 public:
  PatchTst(PatchTstConfig cfg, std::uint64_t seed);
  PatchTst(PatchTstConfig cfg, ParamSet embedding, ParamSet backbone);

  const PatchTstConfig& config() const noexcept { return cfg_; }
  ParamSet& embedding_params() noexcept { return embed_; }
  const ParamSet& embedding_params() const noexcept { return embed_; }
  Forecaster& backbone() noexcept { return backbone_; }
  const Forecaster& backbone() const noexcept { return backbone_; }

  // x [B, T, F] -> patch embeddings [B, K, d_model].
  Var embed(Tape& tape, Var x);
  Var forward(Tape& tape, Var x, Rng* dropout_rng = nullptr);

 private:
  PatchTstConfig cfg_;
  ParamSet embed_;
  Forecaster backbone_;
};

}  // namespace patchtok

#pragma once

#include <cstdint>

#include "json.hpp"
#include "patchtok/autodiff.hpp"
#include "patchtok/rng.hpp"

namespace patchtok {

struct ForecasterConfig {
  std::size_t input_dim = 64;
  std::size_t d_model = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 16;
  std::size_t ffn_dim = 256;
  std::size_t max_patches = 64;
  std::size_t horizon = 1;
  double dropout_rate = 0.1;

  bool projects_input() const { return input_dim != d_model; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ForecasterConfig& c);
void from_json(const nlohmann::json& j, ForecasterConfig& c);

// Stage-2 model: optional input projection, learned positional table,
// pre-norm Transformer encoder (unmasked attention), final LayerNorm and a
// shared linear head mapping hidden state k to the target of patch k + h.
//
// Parameters: "input_proj" (only when input_dim != d_model), "pos",
// "layer<i>.{ln1,attn,ln2,ffn1,ffn2}", "final_ln", "head".
class Forecaster {
 public:
  Forecaster(ForecasterConfig cfg, std::uint64_t seed);
  Forecaster(ForecasterConfig cfg, ParamSet params);

  const ForecasterConfig& config() const noexcept { return cfg_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // All stages accept [K, d] or [B, K, d].
  Var project_input(Tape& tape, Var tokens);
  Var add_positional(Tape& tape, Var x, Rng* dropout_rng = nullptr);
  Var encoder_forward(Tape& tape, Var x);
  Var predict_horizon(Tape& tape, Var hidden);
  // tokens [B, K, input_dim] -> forecasts [B, K - h].
  Var forward(Tape& tape, Var tokens, Rng* dropout_rng = nullptr);

 private:
  ForecasterConfig cfg_;
  ParamSet params_;
};

}  // namespace patchtok

#pragma once

#include <string>

#include "patchtok/autodiff.hpp"
#include "patchtok/ops.hpp"
#include "patchtok/rng.hpp"

// Parameter-naming helpers shared by the encoder, forecaster and baselines.
// A layer called "blk" owns "blk.w" and "blk.b" (and so on) in a ParamSet.
namespace patchtok::layers {

Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out);

void init_affine(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
Var affine(Tape& tape, ParamSet& ps, const std::string& name, Var x);

void init_conv(ParamSet& ps, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t width, Rng& rng);
Var conv(Tape& tape, ParamSet& ps, const std::string& name, Var x, const Conv1dOptions& opts);

void init_layer_norm(ParamSet& ps, const std::string& name, std::size_t dim);
Var layer_norm(Tape& tape, ParamSet& ps, const std::string& name, Var x);

void init_attention(ParamSet& ps, const std::string& name, std::size_t dim, Rng& rng);
AttentionParams attention(Tape& tape, ParamSet& ps, const std::string& name);

}  // namespace patchtok::layers

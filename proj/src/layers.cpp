#include "patchtok/layers.hpp"

#include <cmath>

namespace patchtok::layers {

Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-limit, limit);
  return t;
}

void init_affine(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  ps.add(name + ".w", xavier_uniform(rng, {in, out}, in, out));
  ps.add(name + ".b", Tensor({out}));
}

Var affine(Tape& tape, ParamSet& ps, const std::string& name, Var x) {
  return patchtok::affine(x, tape.param(ps.get(name + ".w")), tape.param(ps.get(name + ".b")));
}

void init_conv(ParamSet& ps, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t width, Rng& rng) {
  ps.add(name + ".w", xavier_uniform(rng, {c_out, c_in, width}, c_in * width, c_out * width));
  ps.add(name + ".b", Tensor({c_out}));
}

Var conv(Tape& tape, ParamSet& ps, const std::string& name, Var x, const Conv1dOptions& opts) {
  return conv1d(x, tape.param(ps.get(name + ".w")), tape.param(ps.get(name + ".b")), opts);
}

void init_layer_norm(ParamSet& ps, const std::string& name, std::size_t dim) {
  ps.add(name + ".gamma", Tensor({dim}, 1.0));
  ps.add(name + ".beta", Tensor({dim}));
}

Var layer_norm(Tape& tape, ParamSet& ps, const std::string& name, Var x) {
  return patchtok::layer_norm(x, tape.param(ps.get(name + ".gamma")), tape.param(ps.get(name + ".beta")));
}

void init_attention(ParamSet& ps, const std::string& name, std::size_t dim, Rng& rng) {
  for (const char* proj : {"q", "k", "v", "o"}) init_affine(ps, name + "." + proj, dim, dim, rng);
}

AttentionParams attention(Tape& tape, ParamSet& ps, const std::string& name) {
  auto p = [&](const std::string& s) { return tape.param(ps.get(name + s)); };
  return {p(".q.w"), p(".q.b"), p(".k.w"), p(".k.b"), p(".v.w"), p(".v.b"), p(".o.w"), p(".o.b")};
}

}  // namespace patchtok::layers

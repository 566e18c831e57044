#include "patchtok/autodiff.hpp"

#include <cstring>

#include "patchtok/errors.hpp"
#include "patchtok/hash.hpp"

namespace patchtok {

Parameter& ParamSet::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor grad(init.shape());
  auto [it, _] = params_.emplace(name, Parameter{std::move(init), std::move(grad)});
  return it->second;
}

Parameter& ParamSet::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

std::uint64_t ParamSet::hash() const {
  Fnv1a h;
  for (const auto& [name, p] : params_) {
    h.update(name);
    for (std::size_t d : p.value.shape()) {
      const std::uint64_t d64 = d;
      h.update(&d64, sizeof d64);
    }
    h.update(p.value.data().data(), p.value.size() * sizeof(double));
  }
  return h.value();
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = record_;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced by forward op (shape " + shape_str(value.shape()) + ")");
  }
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var v : inputs) {
      if (v.tape != this) throw InvariantError("operands recorded on different tapes");
      if (nodes_[v.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var output) {
  if (!record_) throw InvariantError("backward() on a tape that does not record");
  if (backward_done_) throw InvariantError("backward() called twice on one tape");
  if (output.value().size() != 1) {
    throw DimensionError("backward() needs a scalar output, got " + shape_str(output.shape()));
  }
  backward_done_ = true;
  grad_buffer(output.id)[0] = 1.0;
  for (std::int64_t i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) {
      n.backward(*this, n.grad, n.value);
    } else if (n.param) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

}  // namespace patchtok

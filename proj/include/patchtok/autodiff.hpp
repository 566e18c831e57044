#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "patchtok/tensor.hpp"

namespace patchtok {

struct Parameter {
  Tensor value;
  Tensor grad;
};

// Named trainable tensors. std::map keeps iteration order (and therefore
// checkpoints, hashes and optimizer updates) independent of insertion order.
class ParamSet {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_scalars() const;

  void zero_grad();
  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t hash() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Records operations in execution order so a single reverse sweep visits each
// node exactly once. One tape per forward pass, confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

  // When record is false no backward closures are kept (evaluation mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient is readable through grad() after backward().
  Var input(Tensor value);
  // Leaf bound to a parameter; backward() adds its gradient into p.grad.
  Var param(Parameter& p);

  // Used by op implementations.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  // Zero-initialized on first access.
  Tensor& grad_buffer(std::uint32_t id);

  void backward(Var output);
  // Zeros when the node did not influence the output.
  Tensor grad(Var v) const;

  bool recording() const noexcept { return record_; }
  std::size_t num_nodes() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node node);

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

}  // namespace patchtok

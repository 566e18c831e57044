#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "patchtok/autodiff.hpp"

namespace patchtok {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One decoupled-weight-decay Adam update using the gradients stored in
// params. Throws NumericalError naming the first parameter with a
// non-finite gradient, before any parameter is modified.
void adamw_step(ParamSet& params, AdamWState& state);

}  // namespace patchtok

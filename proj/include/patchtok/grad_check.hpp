#pragma once

#include <functional>
#include <span>
#include <vector>

#include "patchtok/autodiff.hpp"

namespace patchtok {

// Compares reverse-mode gradients against central finite differences and
// returns max |analytic - numeric| / max(1, |analytic|, |numeric|) over every
// scalar. `loss` must bind parameters through tape.param() and return a
// scalar; it is treated as a pure function of the parameter values.
double grad_check(const std::function<Var(Tape&)>& loss, ParamSet& params, double epsilon = 1e-5);

// Same check against plain input tensors, which are perturbed in place and
// restored afterwards.
double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& loss, std::vector<Tensor>& inputs,
                  double epsilon = 1e-5);

}  // namespace patchtok

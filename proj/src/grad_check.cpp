#include "patchtok/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "patchtok/errors.hpp"

namespace patchtok {

double grad_check(const std::function<Var(Tape&)>& loss, ParamSet& params, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw ConfigError("grad_check epsilon must lie in [1e-7, 1e-3], got " + std::to_string(epsilon));
  }
  auto evaluate = [&] {
    Tape tape(false);
    Var out = loss(tape);
    if (out.value().size() != 1) throw DimensionError("grad_check: loss is not scalar: " + shape_str(out.shape()));
    return out.value()[0];
  };

  params.zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Var out = loss(tape);
    base = out.value()[0];
    tape.backward(out);
  }
  if (evaluate() != base || evaluate() != base) {
    throw OracleError("grad_check: loss is not deterministic across repeated evaluations");
  }

  double worst = 0.0;
  for (auto& [name, p] : params) {
    auto data = p.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + epsilon;
      const double up = evaluate();
      data[i] = saved - epsilon;
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = p.grad[i];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  params.zero_grad();
  return worst;
}

double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& loss, std::vector<Tensor>& inputs,
                  double epsilon) {
  ParamSet params;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    names.push_back("input" + std::to_string(i));
    params.add(names.back(), inputs[i]);
  }
  auto bound = [&](Tape& tape) {
    std::vector<Var> vars;
    for (const auto& n : names) vars.push_back(tape.param(params.get(n)));
    return loss(tape, vars);
  };
  return grad_check(bound, params, epsilon);
}

}  // namespace patchtok

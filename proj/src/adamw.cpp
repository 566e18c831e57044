#include "patchtok/adamw.hpp"

#include <cmath>

#include "patchtok/errors.hpp"

namespace patchtok {

void adamw_step(ParamSet& params, AdamWState& state) {
  for (const auto& [name, p] : params) {
    if (!p.grad.all_finite()) throw NumericalError("non-finite gradient for parameter '" + name + "'");
  }
  const AdamWConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.value.size()) {
      m.assign(p.value.size(), 0.0);
      v.assign(p.value.size(), 0.0);
    }
    auto theta = p.value.data();
    auto g = p.grad.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= c.lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * theta[i]);
    }
  }
}

}  // namespace patchtok

#include "patchtok/patching.hpp"

#include <string>

#include "patchtok/errors.hpp"
#include "patchtok/log.hpp"

namespace patchtok {

std::size_t num_patches(std::size_t seq_len, std::size_t patch_len) {
  if (patch_len < 1) throw ConfigError("patch length must be >= 1");
  if (seq_len < patch_len) {
    throw ConfigError("sequence length T=" + std::to_string(seq_len) + " is shorter than patch length P=" +
                      std::to_string(patch_len));
  }
  return seq_len / patch_len;
}

PatchSequence patchify(const Tensor& x, std::size_t patch_len) {
  if (x.rank() != 2) throw DimensionError("patchify: expected [T, F] input, got " + shape_str(x.shape()));
  const std::size_t seq_len = x.dim(0);
  const std::size_t features = x.dim(1);
  const std::size_t k = num_patches(seq_len, patch_len);
  if (const std::size_t dropped = seq_len - k * patch_len; dropped > 0) {
    log_debug("patchify: dropping " + std::to_string(dropped) + " trailing time steps");
  }
  PatchSequence ps;
  ps.num_patches = k;
  ps.patch_len = patch_len;
  ps.features = features;
  ps.patches = Tensor({k, patch_len, features},
                      std::vector<double>(x.storage().begin(), x.storage().begin() + static_cast<std::ptrdiff_t>(k * patch_len * features)));
  return ps;
}

PatchTargets aggregate_targets(std::span<const double> y, std::size_t patch_len) {
  const std::size_t k = num_patches(y.size(), patch_len);
  PatchTargets out;
  out.values.resize(k);
  for (std::size_t p = 0; p < k; ++p) {
    double s = 0.0;
    for (std::size_t j = 0; j < patch_len; ++j) s += y[p * patch_len + j];
    out.values[p] = s / static_cast<double>(patch_len);
  }
  return out;
}

void check_horizon(std::size_t horizon, std::size_t num_patches) {
  if (horizon < 1) throw ConfigError("forecast horizon must be >= 1");
  if (horizon >= num_patches) {
    throw ConfigError("forecast horizon h=" + std::to_string(horizon) + " must be smaller than the patch count K=" +
                      std::to_string(num_patches));
  }
}

AlignedPairs align_horizon(const Tensor& states, const PatchTargets& targets, std::size_t horizon) {
  if (states.rank() != 2) throw DimensionError("align_horizon: expected [K, D] states, got " + shape_str(states.shape()));
  const std::size_t k = states.dim(0);
  const std::size_t d = states.dim(1);
  if (targets.values.size() != k) {
    throw DimensionError("align_horizon: " + std::to_string(k) + " states but " + std::to_string(targets.values.size()) +
                         " targets");
  }
  check_horizon(horizon, k);
  const std::size_t m = k - horizon;
  AlignedPairs out;
  out.inputs = Tensor({m, d}, std::vector<double>(states.storage().begin(), states.storage().begin() + static_cast<std::ptrdiff_t>(m * d)));
  out.labels.assign(targets.values.begin() + static_cast<std::ptrdiff_t>(horizon), targets.values.end());
  return out;
}

}  // namespace patchtok

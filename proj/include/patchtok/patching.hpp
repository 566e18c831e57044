#pragma once

#include <span>
#include <vector>

#include "patchtok/tensor.hpp"

namespace patchtok {

struct PatchSequence {
  Tensor patches;  // [K, P, F]
  std::size_t num_patches = 0;
  std::size_t patch_len = 0;
  std::size_t features = 0;
};

struct PatchTargets {
  std::vector<double> values;  // [K], mean of y within each patch
};

struct AlignedPairs {
  Tensor inputs;                // [K - h, D]
  std::vector<double> labels;   // [K - h]
};

std::size_t num_patches(std::size_t seq_len, std::size_t patch_len);

// Non-overlapping segmentation of x [T, F]; the trailing T mod P rows are dropped.
PatchSequence patchify(const Tensor& x, std::size_t patch_len);
PatchTargets aggregate_targets(std::span<const double> y, std::size_t patch_len);

// Pairs state i with target i + h.
AlignedPairs align_horizon(const Tensor& states, const PatchTargets& targets, std::size_t horizon);
void check_horizon(std::size_t horizon, std::size_t num_patches);

}  // namespace patchtok

#pragma once

#include <cstddef>
#include <vector>

#include "patchtok/autodiff.hpp"
#include "patchtok/rng.hpp"

// Differentiable operations on tape variables. Every op checks shapes and
// throws DimensionError / ConfigError before touching data.
namespace patchtok {

// b must have a's shape or a trailing suffix of it (broadcast over leading axes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);

// a [..., k] times b [k, n] -> [..., n].
Var matmul(Var a, Var b);
// x [..., in] W [in, out] + b [out].
Var affine(Var x, Var w, Var b);
// Batched a [B, m, k] times b [B, k, n] (or b [B, n, k] transposed).
Var bmm(Var a, Var b, bool transpose_b = false);

Var gelu(Var x);
Var tanh(Var x);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_last(Var x);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<std::size_t>& axes);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
// Mean over one axis; the axis is removed from the shape.
Var mean_axis(Var x, std::size_t axis);

struct Conv1dOptions {
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t dilation = 1;
};

// input [C_in, L] or [N, C_in, L]; kernels [C_out, C_in, W]; bias [C_out].
Var conv1d(Var input, Var kernels, Var bias, std::size_t padding);
Var conv1d(Var input, Var kernels, Var bias, const Conv1dOptions& opts);

// Inverted dropout. Identity when rate is 0 or rng is null (evaluation).
Var dropout(Var x, double rate, Rng* rng);

Var sum(Var x);
Var mean(Var x);
Var mse_loss(Var pred, Var target);

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Per-head softmax(q k^T / sqrt(dh)) v on [B, K, D] operands whose last axis
// holds `heads` contiguous slices of width dh = D / heads.
Var scaled_dot_attention(Var q, Var k, Var v, std::size_t heads);

// Unmasked scaled dot-product self-attention over x [K, D] or [B, K, D].
Var multi_head_attention(Var x, const AttentionParams& p, std::size_t heads);

}  // namespace patchtok

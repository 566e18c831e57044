#include "patchtok/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "patchtok/errors.hpp"

namespace patchtok {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return ConstMap(t.data().data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap mmap(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MutMap(t.data().data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// dst[j] += sum_i g[i, j], rows summed in order. Eigen's colwise sum mixes
// tree and sequential reductions depending on alignment.
void accumulate_column_sums(Tensor& dst, const double* g, std::size_t rows, std::size_t cols) {
  double* d = dst.data().data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) d[j] += g[i * cols + j];
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

[[noreturn]] void dim_error(const std::string& op, const std::string& detail) {
  throw DimensionError(op + ": " + detail);
}

void require_same_shape(const std::string& op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    dim_error(op, "operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

std::size_t last_dim(const std::string& op, const Tensor& t) {
  if (t.rank() == 0) dim_error(op, "rank-0 tensor");
  return t.shape().back();
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    dim_error("add", "cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
  }
  const std::size_t inner = bv.size();
  const std::size_t outer = inner ? av.size() / inner : 0;
  Tensor out = av;
  for (std::size_t o = 0; o < outer; ++o) {
    double* dst = out.data().data() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] += bv[i];
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, outer, inner](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) accumulate(t.grad_buffer(a.id), g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.data().data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) gb[i] += src[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) accumulate(t.grad_buffer(a.id), g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a.id);
    const Tensor& bv2 = t.value(b.id);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 2) dim_error("matmul", "right operand must be rank 2, got " + shape_str(bv.shape()));
  const std::size_t k = last_dim("matmul", av);
  if (k != bv.dim(0)) {
    dim_error("matmul", "inner dimensions differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t n = bv.dim(1);
  const std::size_t m = k ? av.size() / k : 0;
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  mmap(out, m, n).noalias() = cmap(av, m, k) * cmap(bv, k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const auto gm = cmap(g, m, n);
    if (t.requires_grad(a)) mmap(t.grad_buffer(a.id), m, k).noalias() += gm * cmap(t.value(b.id), k, n).transpose();
    if (t.requires_grad(b)) mmap(t.grad_buffer(b.id), k, n).noalias() += cmap(t.value(a.id), m, k).transpose() * gm;
  });
}

Var affine(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2) dim_error("affine", "weight must be rank 2, got " + shape_str(wv.shape()));
  const std::size_t in = last_dim("affine", xv);
  if (in != wv.dim(0)) {
    dim_error("affine", "input width " + std::to_string(in) + " does not match weight " + shape_str(wv.shape()));
  }
  const std::size_t out_dim = wv.dim(1);
  if (bv.rank() != 1 || bv.dim(0) != out_dim) {
    dim_error("affine", "bias " + shape_str(bv.shape()) + " does not match output width " + std::to_string(out_dim));
  }
  const std::size_t m = in ? xv.size() / in : 0;
  Shape out_shape = xv.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  auto om = mmap(out, m, out_dim);
  om.noalias() = cmap(xv, m, in) * cmap(wv, in, out_dim);
  om.rowwise() += cmap(bv, 1, out_dim).row(0);
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b, m, in, out_dim](Tape& t, const Tensor& g, const Tensor&) {
    const auto gm = cmap(g, m, out_dim);
    if (t.requires_grad(x)) {
      mmap(t.grad_buffer(x.id), m, in).noalias() += gm * cmap(t.value(w.id), in, out_dim).transpose();
    }
    if (t.requires_grad(w)) {
      mmap(t.grad_buffer(w.id), in, out_dim).noalias() += cmap(t.value(x.id), m, in).transpose() * gm;
    }
    if (t.requires_grad(b)) accumulate_column_sums(t.grad_buffer(b.id), gm.data(), m, out_dim);
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3) {
    dim_error("bmm", "operands must be rank 3, got " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t batch = av.dim(0);
  const std::size_t m = av.dim(1);
  const std::size_t k = av.dim(2);
  if (bv.dim(0) != batch) dim_error("bmm", "batch axes differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) dim_error("bmm", "inner dimensions differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    const auto am = cmap(av, m, k, i * m * k);
    if (transpose_b) {
      mmap(out, m, n, i * m * n).noalias() = am * cmap(bv, n, k, i * n * k).transpose();
    } else {
      mmap(out, m, n, i * m * n).noalias() = am * cmap(bv, k, n, i * k * n);
    }
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, batch, m, k, n, transpose_b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av2 = t.value(a.id);
    const Tensor& bv2 = t.value(b.id);
    const bool need_a = t.requires_grad(a);
    const bool need_b = t.requires_grad(b);
    Tensor* ga = need_a ? &t.grad_buffer(a.id) : nullptr;
    Tensor* gb = need_b ? &t.grad_buffer(b.id) : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      const auto gm = cmap(g, m, n, i * m * n);
      const auto am = cmap(av2, m, k, i * m * k);
      if (transpose_b) {
        const auto bm = cmap(bv2, n, k, i * n * k);
        if (need_a) mmap(*ga, m, k, i * m * k).noalias() += gm * bm;
        if (need_b) mmap(*gb, n, k, i * n * k).noalias() += gm.transpose() * am;
      } else {
        const auto bm = cmap(bv2, k, n, i * k * n);
        if (need_a) mmap(*ga, m, k, i * m * k).noalias() += gm * bm.transpose();
        if (need_b) mmap(*gb, k, n, i * k * n).noalias() += am.transpose() * gm;
      }
    }
  });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor th(xv.shape());
  Tensor out(xv.shape());
  // tanh(u) = 1 - 2 / (exp(2u) + 1) through Eigen's vectorized exp. Fixed-size
  // chunks keep every element on the same code path regardless of alignment.
  using Chunk = Eigen::Array<double, 8, 1>;
  const std::size_t n = xv.size();
  for (std::size_t i = 0; i < n; i += 8) {
    const std::size_t m = std::min<std::size_t>(8, n - i);
    Chunk v = Chunk::Zero();
    for (std::size_t j = 0; j < m; ++j) v[j] = xv[i + j];
    const Chunk t = 1.0 - 2.0 / ((2.0 * kGeluC * (v + kGeluA * v.cube())).exp() + 1.0);
    const Chunk y = 0.5 * v * (1.0 + t);
    for (std::size_t j = 0; j < m; ++j) {
      th[i + j] = t[j];
      out[i + j] = y[j];
    }
  }
  return x.tape->record(std::move(out), {x}, [x, th = std::move(th)](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& xin = t.value(x.id);
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xin[i];
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * du);
    }
  });
}

Var tanh(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = std::tanh(v);
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = last_dim("layer_norm", xv);
  if (d == 0) dim_error("layer_norm", "normalized axis has size 0");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    dim_error("layer_norm", "gamma/beta must be [" + std::to_string(d) + "], got " + shape_str(gamma.shape()) +
                                " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = xv.size() / d;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (src[j] - mu) * rs;
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& gv2 = t.value(gamma.id);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          Tensor* gg = t.requires_grad(gamma) ? &t.grad_buffer(gamma.id) : nullptr;
          Tensor* gbeta = t.requires_grad(beta) ? &t.grad_buffer(beta.id) : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) (*gg)[j] += g[r * d + j] * xhat[r * d + j];
              if (gbeta) (*gbeta)[j] += g[r * d + j];
            }
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x.id);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxh = 0.0;
          double mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gv2[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[r * d + j];
          }
          mean_dxh *= inv_d;
          mean_dxh_xh *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gv2[j];
            gx[r * d + j] += rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
          }
        }
      });
}

Var softmax_last(Var x) {
  const Tensor& xv = x.value();
  const std::size_t d = last_dim("softmax_last", xv);
  const std::size_t rows = d ? xv.size() / d : 0;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data().data() + r * d;
    double* dst = out.data().data() + r * d;
    double mx = src[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (std::size_t j = 0; j < d; ++j) dst[j] /= z;
  }
  return x.tape->record(std::move(out), {x}, [x, d, rows](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Var permute(Var x, const std::vector<std::size_t>& axes) {
  const Tensor& xv = x.value();
  const std::size_t rank = xv.rank();
  if (axes.size() != rank) dim_error("permute", "expected " + std::to_string(rank) + " axes");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) dim_error("permute", "axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * xv.shape()[i];
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = xv.shape()[axes[i]];
  std::vector<std::size_t> src_index(xv.size());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < src_index.size(); ++j) {
    src_index[j] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      offset += in_strides[axes[ax]];
      if (counter[ax] < out_shape[ax]) break;
      offset -= counter[ax] * in_strides[axes[ax]];
      counter[ax] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t j = 0; j < src_index.size(); ++j) out[j] = xv[src_index[j]];
  return x.tape->record(std::move(out), {x}, [x, src_index = std::move(src_index)](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t j = 0; j < src_index.size(); ++j) gx[src_index[j]] += g[j];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) dim_error("concat", "no operands");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) dim_error("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> chunk(parts.size());
  std::size_t total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape s = parts[p].shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) dim_error("concat", "operand " + shape_str(s) + " incompatible with " + shape_str(first) + " on axis " + std::to_string(axis));
    chunk[p] = s[axis] * inner;
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor out(out_shape);
  const std::size_t row = total * inner;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data().data() + o * chunk[p], chunk[p], out.data().data() + o * row + off);
    }
    off += chunk[p];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, chunk, outer, row](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t off2 = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (t.requires_grad(parts[p])) {
        Tensor& gp = t.grad_buffer(parts[p].id);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data().data() + o * row + off2;
          double* dst = gp.data().data() + o * chunk[p];
          for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += src[i];
        }
      }
      off2 += chunk[p];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) dim_error("slice", "axis " + std::to_string(axis) + " out of range for " + shape_str(xv.shape()));
  const std::size_t extent = xv.shape()[axis];
  if (start + length > extent) {
    dim_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") exceeds axis " +
                           std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.shape()[i];
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape()[i];
  Shape out_shape = xv.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t src_row = extent * inner;
  const std::size_t dst_row = length * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().data() + o * src_row + start * inner, dst_row, out.data().data() + o * dst_row);
  }
  return x.tape->record(std::move(out), {x}, [x, outer, src_row, dst_row, start, inner](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = g.data().data() + o * dst_row;
      double* dst = gx.data().data() + o * src_row + start * inner;
      for (std::size_t i = 0; i < dst_row; ++i) dst[i] += src[i];
    }
  });
}

Var mean_axis(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) dim_error("mean_axis", "axis " + std::to_string(axis) + " out of range for " + shape_str(xv.shape()));
  const std::size_t len = xv.shape()[axis];
  if (len == 0) dim_error("mean_axis", "reduced axis has size 0");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.shape()[i];
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape()[i];
  Shape out_shape;
  for (std::size_t i = 0; i < xv.rank(); ++i) {
    if (i != axis) out_shape.push_back(xv.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = xv.data().data() + (o * len + l) * inner;
      double* dst = out.data().data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
    }
  }
  return x.tape->record(std::move(out), {x}, [x, outer, len, inner, inv](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = g.data().data() + o * inner;
      for (std::size_t l = 0; l < len; ++l) {
        double* dst = gx.data().data() + (o * len + l) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
      }
    }
  });
}

Var conv1d(Var input, Var kernels, Var bias, std::size_t padding) {
  return conv1d(input, kernels, bias, Conv1dOptions{padding, padding, 1});
}

Var conv1d(Var input, Var kernels, Var bias, const Conv1dOptions& opts) {
  const Tensor& xv = input.value();
  const Tensor& kv = kernels.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 && xv.rank() != 3) dim_error("conv1d", "input must be [C_in, L] or [N, C_in, L], got " + shape_str(xv.shape()));
  if (kv.rank() != 3) dim_error("conv1d", "kernels must be [C_out, C_in, W], got " + shape_str(kv.shape()));
  const bool batched = xv.rank() == 3;
  const std::size_t n = batched ? xv.dim(0) : 1;
  const std::size_t c_in = xv.dim(batched ? 1 : 0);
  const std::size_t len = xv.dim(batched ? 2 : 1);
  const std::size_t c_out = kv.dim(0);
  const std::size_t width = kv.dim(2);
  if (kv.dim(1) != c_in) {
    dim_error("conv1d", "input channel axis (" + std::to_string(c_in) + ") does not match kernel axis 1 (" +
                            std::to_string(kv.dim(1)) + ")");
  }
  if (bv.shape() != Shape{c_out}) {
    dim_error("conv1d", "bias " + shape_str(bv.shape()) + " does not match kernel axis 0 (" + std::to_string(c_out) + ")");
  }
  if (width == 0 || opts.dilation == 0) throw ConfigError("conv1d: kernel width and dilation must be positive");
  const std::size_t span = opts.dilation * (width - 1) + 1;
  const std::size_t padded = len + opts.pad_left + opts.pad_right;
  if (span > padded) {
    throw ConfigError("conv1d: kernel span " + std::to_string(span) + " wider than padded input " + std::to_string(padded));
  }
  const std::size_t l_out = padded - span + 1;
  const std::size_t cols_w = c_in * width;
  const std::size_t rows = n * l_out;

  // im2col: row (sample, t), column (channel, tap).
  Tensor cols({rows, cols_w});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < c_in; ++i) {
      const double* src = xv.data().data() + (s * c_in + i) * len;
      for (std::size_t t = 0; t < l_out; ++t) {
        double* dst = cols.data().data() + (s * l_out + t) * cols_w + i * width;
        for (std::size_t w = 0; w < width; ++w) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t + w * opts.dilation) - static_cast<std::ptrdiff_t>(opts.pad_left);
          dst[w] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) ? src[pos] : 0.0;
        }
      }
    }
  }
  Tensor prod({rows, c_out});
  mmap(prod, rows, c_out).noalias() = cmap(cols, rows, cols_w) * cmap(kv, c_out, cols_w).transpose();
  Tensor out(batched ? Shape{n, c_out, l_out} : Shape{c_out, l_out});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < c_out; ++c) {
      double* dst = out.data().data() + (s * c_out + c) * l_out;
      for (std::size_t t = 0; t < l_out; ++t) dst[t] = prod[(s * l_out + t) * c_out + c] + bv[c];
    }
  }
  return input.tape->record(
      std::move(out), {input, kernels, bias},
      [input, kernels, bias, n, c_in, len, c_out, width, l_out, cols_w, rows, opts, cols = std::move(cols)](
          Tape& t, const Tensor& g, const Tensor&) {
        Tensor gmat({rows, c_out});
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < c_out; ++c) {
            const double* src = g.data().data() + (s * c_out + c) * l_out;
            for (std::size_t tt = 0; tt < l_out; ++tt) gmat[(s * l_out + tt) * c_out + c] = src[tt];
          }
        }
        const auto gm = cmap(gmat, rows, c_out);
        if (t.requires_grad(kernels)) mmap(t.grad_buffer(kernels.id), c_out, cols_w).noalias() += gm.transpose() * cmap(cols, rows, cols_w);
        if (t.requires_grad(bias)) accumulate_column_sums(t.grad_buffer(bias.id), gm.data(), rows, c_out);
        if (!t.requires_grad(input)) return;
        Tensor gcols({rows, cols_w});
        mmap(gcols, rows, cols_w).noalias() = gm * cmap(t.value(kernels.id), c_out, cols_w);
        Tensor& gx = t.grad_buffer(input.id);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t i = 0; i < c_in; ++i) {
            double* dst = gx.data().data() + (s * c_in + i) * len;
            for (std::size_t tt = 0; tt < l_out; ++tt) {
              const double* src = gcols.data().data() + (s * l_out + tt) * cols_w + i * width;
              for (std::size_t w = 0; w < width; ++w) {
                const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(tt + w * opts.dilation) - static_cast<std::ptrdiff_t>(opts.pad_left);
                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) dst[pos] += src[w];
              }
            }
          }
        }
      });
}

Var dropout(Var x, double rate, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (rate == 0.0 || rng == nullptr) return x;
  const double keep = 1.0 - rate;
  const Tensor& xv = x.value();
  std::vector<double> mask(xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = xv[i] * mask[i];
  }
  return x.tape->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad_buffer(x.id);
    for (double& v : gx.storage()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t count = x.value().size();
  if (count == 0) dim_error("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(count));
}

Var mse_loss(Var pred, Var target) {
  require_same_shape("mse_loss", pred, target);
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  if (pv.size() == 0) dim_error("mse_loss", "empty prediction");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const double inv = 1.0 / static_cast<double>(pv.size());
  return pred.tape->record(Tensor::scalar(s * inv), {pred, target}, [pred, target, inv](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& pv2 = t.value(pred.id);
    const Tensor& tv2 = t.value(target.id);
    const bool need_p = t.requires_grad(pred);
    const bool need_t = t.requires_grad(target);
    Tensor* gp = need_p ? &t.grad_buffer(pred.id) : nullptr;
    Tensor* gt = need_t ? &t.grad_buffer(target.id) : nullptr;
    for (std::size_t i = 0; i < pv2.size(); ++i) {
      const double d = 2.0 * inv * (pv2[i] - tv2[i]) * g[0];
      if (gp) (*gp)[i] += d;
      if (gt) (*gt)[i] -= d;
    }
  });
}

Var scaled_dot_attention(Var q, Var k, Var v, std::size_t heads) {
  const Shape s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s) {
    dim_error("scaled_dot_attention", "q, k, v must share one [B, K, D] shape, got " + shape_str(s) + ", " +
                                          shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t b = s[0], n = s[1], d = s[2];
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("scaled_dot_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  Tensor weights({b, heads, n, n});
  Tensor out(s);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = bi * n * d + h * dh;
      double* w = weights.data().data() + (bi * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = qv.data().data() + (base + i * d);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = kv.data().data() + (base + j * d);
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          w[i * n + j] = acc * inv;
          mx = std::max(mx, w[i * n + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (w[i * n + j] = std::exp(w[i * n + j] - mx));
        double* oi = out.data().data() + (base + i * d);
        for (std::size_t j = 0; j < n; ++j) {
          w[i * n + j] /= z;
          const double* vj = vv.data().data() + (base + j * d);
          for (std::size_t e = 0; e < dh; ++e) oi[e] += w[i * n + j] * vj[e];
        }
      }
    }
  return q.tape->record(std::move(out), {q, k, v}, [q, k, v, b, n, d, dh, heads, inv, weights = std::move(weights)](
                                                        Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& qv2 = t.value(q.id);
    const Tensor& kv2 = t.value(k.id);
    const Tensor& vv2 = t.value(v.id);
    Tensor* gq = t.requires_grad(q) ? &t.grad_buffer(q.id) : nullptr;
    Tensor* gk = t.requires_grad(k) ? &t.grad_buffer(k.id) : nullptr;
    Tensor* gv = t.requires_grad(v) ? &t.grad_buffer(v.id) : nullptr;
    std::vector<double> ds(n);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = bi * n * d + h * dh;
        const double* w = weights.data().data() + (bi * heads + h) * n * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = g.data().data() + (base + i * d);
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double* vj = vv2.data().data() + (base + j * d);
            double acc = 0.0;
            for (std::size_t e = 0; e < dh; ++e) acc += gi[e] * vj[e];
            ds[j] = acc;
            dot += w[i * n + j] * acc;
            if (gv) {
              double* gvj = gv->data().data() + (base + j * d);
              for (std::size_t e = 0; e < dh; ++e) gvj[e] += w[i * n + j] * gi[e];
            }
          }
          for (std::size_t j = 0; j < n; ++j) ds[j] = w[i * n + j] * (ds[j] - dot) * inv;
          const double* qi = qv2.data().data() + (base + i * d);
          for (std::size_t j = 0; j < n; ++j) {
            if (gq) {
              const double* kj = kv2.data().data() + (base + j * d);
              double* gqi = gq->data().data() + (base + i * d);
              for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds[j] * kj[e];
            }
            if (gk) {
              double* gkj = gk->data().data() + (base + j * d);
              for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds[j] * qi[e];
            }
          }
        }
      }
  });
}

Var multi_head_attention(Var x, const AttentionParams& p, std::size_t heads) {
  const Shape xs = x.shape();
  if (xs.size() != 2 && xs.size() != 3) dim_error("multi_head_attention", "input must be [K, D] or [B, K, D], got " + shape_str(xs));
  const bool batched = xs.size() == 3;
  const std::size_t d = xs.back();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("multi_head_attention: model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const Shape s3 = batched ? xs : Shape{1, xs[0], d};
  Var ctx = scaled_dot_attention(reshape(affine(x, p.wq, p.bq), s3), reshape(affine(x, p.wk, p.bk), s3),
                                 reshape(affine(x, p.wv, p.bv), s3), heads);
  return affine(batched ? ctx : reshape(ctx, xs), p.wo, p.bo);
}

}  // namespace patchtok

#include <cmath>
#include <numbers>

#include "doctest.h"
#include "patchtok/adamw.hpp"
#include "patchtok/errors.hpp"
#include "patchtok/grad_check.hpp"
#include "patchtok/ops.hpp"
#include "test_util.hpp"

using namespace patchtok;
using patchtok::testing::max_abs_diff;
using patchtok::testing::random_tensor;
using patchtok::testing::identity;

namespace {

// Direct nested-loop convolution, independent of the im2col path.
Tensor naive_conv1d(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t pad) {
  const std::size_t c_in = x.dim(0), len = x.dim(1), c_out = k.dim(0), w = k.dim(2);
  const std::size_t l_out = len + 2 * pad - w + 1;
  Tensor out({c_out, l_out});
  for (std::size_t c = 0; c < c_out; ++c) {
    for (std::size_t t = 0; t < l_out; ++t) {
      double acc = b[c];
      for (std::size_t i = 0; i < c_in; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const long pos = static_cast<long>(t + j) - static_cast<long>(pad);
          if (pos >= 0 && pos < static_cast<long>(len)) acc += k.at(c, i, j) * x.at(i, pos);
        }
      }
      out.at(c, t) = acc;
    }
  }
  return out;
}

struct AttnTensors {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<Tensor> all() const { return {wq, bq, wk, bk, wv, bv, wo, bo}; }
};

AttnTensors random_attention(Rng& rng, std::size_t d) {
  return {random_tensor(rng, {d, d}), random_tensor(rng, {d}), random_tensor(rng, {d, d}), random_tensor(rng, {d}),
          random_tensor(rng, {d, d}), random_tensor(rng, {d}), random_tensor(rng, {d, d}), random_tensor(rng, {d})};
}

AttentionParams attention_from(std::span<const Var> v, std::size_t offset) {
  return {v[offset], v[offset + 1], v[offset + 2], v[offset + 3], v[offset + 4], v[offset + 5], v[offset + 6], v[offset + 7]};
}

AttentionParams constants(Tape& tape, const AttnTensors& a) {
  return {tape.constant(a.wq), tape.constant(a.bq), tape.constant(a.wk), tape.constant(a.bk),
          tape.constant(a.wv), tape.constant(a.bv), tape.constant(a.wo), tape.constant(a.bo)};
}

// Hand-rolled attention: per head QK^T / sqrt(dh), softmax, weighted sum.
Tensor naive_mha(const Tensor& x, const AttnTensors& a, std::size_t heads) {
  const std::size_t k = x.dim(0), d = x.dim(1), dh = d / heads;
  auto proj = [&](const Tensor& w, const Tensor& b) {
    Tensor out({k, d});
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = b[c];
        for (std::size_t i = 0; i < d; ++i) acc += x.at(r, i) * w.at(i, c);
        out.at(r, c) = acc;
      }
    return out;
  };
  Tensor q = proj(a.wq, a.bq), kk = proj(a.wk, a.bk), v = proj(a.wv, a.bv);
  Tensor ctx({k, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> s(k);
      double mx = -INFINITY, z = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < dh; ++e) dot += q.at(i, h * dh + e) * kk.at(j, h * dh + e);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (double& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t e = 0; e < dh; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += s[j] / z * v.at(j, h * dh + e);
        ctx.at(i, h * dh + e) = acc;
      }
    }
  }
  Tensor out({k, d});
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = a.bo[c];
      for (std::size_t i = 0; i < d; ++i) acc += ctx.at(r, i) * a.wo.at(i, c);
      out.at(r, c) = acc;
    }
  return out;
}

}  // namespace

TEST_CASE("conv1d examples") {
  Tape tape(false);
  Var x = tape.constant(Tensor::matrix({{1, 2, 3}}));
  Var zero_bias = tape.constant(Tensor::vector({0}));
  SUBCASE("identity kernel") {
    Var y = conv1d(x, tape.constant(Tensor({1, 1, 1}, {1.0})), zero_bias, 0);
    CHECK(y.value() == Tensor::matrix({{1, 2, 3}}));
  }
  SUBCASE("box kernel") {
    Var y = conv1d(x, tape.constant(Tensor({1, 1, 2}, {1.0, 1.0})), zero_bias, 0);
    CHECK(y.value() == Tensor::matrix({{3, 5}}));
  }
  SUBCASE("zero kernel") {
    Var y = conv1d(x, tape.constant(Tensor({1, 1, 2}, {0.0, 0.0})), zero_bias, 0);
    CHECK(y.value() == Tensor::matrix({{0, 0}}));
  }
}

TEST_CASE("conv1d matches nested-loop oracle") {
  Rng rng(3);
  for (std::size_t pad : {0u, 1u, 2u}) {
    Tensor x = random_tensor(rng, {3, 7});
    Tensor k = random_tensor(rng, {4, 3, 3});
    Tensor b = random_tensor(rng, {4});
    Tape tape(false);
    Var y = conv1d(tape.constant(x), tape.constant(k), tape.constant(b), pad);
    CHECK(max_abs_diff(y.value(), naive_conv1d(x, k, b, pad)) < 1e-12);
  }
}

TEST_CASE("conv1d batched equals per-sample") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 3, 6});
  Tensor k = random_tensor(rng, {2, 3, 3});
  Tensor b = random_tensor(rng, {2});
  Tape tape(false);
  Var y = conv1d(tape.constant(x), tape.constant(k), tape.constant(b), 1);
  for (std::size_t s = 0; s < 2; ++s) {
    Tensor xs({3, 6}, std::vector<double>(x.storage().begin() + s * 18, x.storage().begin() + (s + 1) * 18));
    Tensor ref = naive_conv1d(xs, k, b, 1);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.value()[s * ref.size() + i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv1d errors") {
  Tape tape(false);
  Var x = tape.constant(Tensor::matrix({{1, 2, 3}}));
  Var b = tape.constant(Tensor::vector({0}));
  CHECK_THROWS_AS(conv1d(x, tape.constant(Tensor({1, 1, 4})), b, 0), ConfigError);
  CHECK_THROWS_AS(conv1d(x, tape.constant(Tensor({1, 2, 1})), b, 0), DimensionError);
  CHECK_THROWS_AS(conv1d(x, tape.constant(Tensor({1, 1, 1})), tape.constant(Tensor::vector({0, 0})), 0), DimensionError);
}

TEST_CASE("layer_norm examples") {
  Tape tape(false);
  Var ones = tape.constant(Tensor::vector({1, 1, 1}));
  Var zeros = tape.constant(Tensor::vector({0, 0, 0}));
  Var y = layer_norm(tape.constant(Tensor::vector({5, 5, 5})), ones, zeros);
  for (double v : y.value().data()) CHECK(v == 0.0);

  // Population variance of [1,2,3] is 2/3.
  Var z = layer_norm(tape.constant(Tensor::vector({1, 2, 3})), ones, zeros, 1e-12);
  const double expected = 1.0 / std::sqrt(2.0 / 3.0);
  CHECK(z.value()[0] == doctest::Approx(-expected).epsilon(1e-6));
  CHECK(z.value()[1] == doctest::Approx(0.0));
  CHECK(z.value()[2] == doctest::Approx(expected).epsilon(1e-6));
  CHECK(std::abs(z.value()[2] - 1.2247) < 1e-3);

  Var beta = tape.constant(Tensor::vector({0.5, -1, 2}));
  Var w = layer_norm(tape.constant(Tensor::vector({3, -7, 11})), zeros, beta);
  CHECK(w.value() == beta.value());

  CHECK_THROWS_AS(layer_norm(tape.constant(Tensor({2, 0})), tape.constant(Tensor({0})), tape.constant(Tensor({0}))),
                  DimensionError);
}

TEST_CASE("softmax_last examples") {
  Tape tape(false);
  Var u = softmax_last(tape.constant(Tensor::vector({4.2, 4.2, 4.2})));
  for (double v : u.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  Var two = softmax_last(tape.constant(Tensor::vector({0.0, std::log(2.0)})));
  CHECK(two.value()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(two.value()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  Var big = softmax_last(tape.constant(Tensor::vector({1000.0, 0.0})));
  CHECK(big.value()[0] == doctest::Approx(1.0));
  CHECK(big.value()[1] < 1e-300);
}

TEST_CASE("softmax_last rows sum to one for large inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape(false);
    Var y = softmax_last(tape.constant(random_tensor(rng, {4, 9}, 1e4)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        CHECK(y.value().at(r, j) >= 0.0);
        s += y.value().at(r, j);
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("multi_head_attention single token reduces to value and output projections") {
  Rng rng(5);
  AttnTensors a = random_attention(rng, 4);
  Tensor x = random_tensor(rng, {1, 4});
  Tape tape(false);
  Var y = multi_head_attention(tape.constant(x), constants(tape, a), 2);
  Tensor expect({1, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    double acc = a.bo[c];
    for (std::size_t i = 0; i < 4; ++i) {
      double vi = a.bv[i];
      for (std::size_t j = 0; j < 4; ++j) vi += x[j] * a.wv.at(j, i);
      acc += vi * a.wo.at(i, c);
    }
    expect[c] = acc;
  }
  CHECK(max_abs_diff(y.value(), expect) < 1e-12);
}

TEST_CASE("multi_head_attention identical tokens give identical rows") {
  Rng rng(6);
  AttnTensors a = random_attention(rng, 4);
  Tensor row = random_tensor(rng, {4});
  Tensor x({3, 4});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) x.at(r, c) = row[c];
  Tape tape(false);
  Var y = multi_head_attention(tape.constant(x), constants(tape, a), 2);
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.value().at(r, c) == doctest::Approx(y.value().at(0, c)).epsilon(1e-14));
}

TEST_CASE("multi_head_attention two tokens with identity projections") {
  AttnTensors a{identity(2), Tensor({2}), identity(2), Tensor({2}), identity(2), Tensor({2}), identity(2), Tensor({2})};
  Tape tape(false);
  Var y = multi_head_attention(tape.constant(Tensor::matrix({{1, 0}, {0, 1}})), constants(tape, a), 1);
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double hi = e / (e + 1.0), lo = 1.0 / (e + 1.0);
  CHECK(y.value().at(0, 0) == doctest::Approx(hi).epsilon(1e-12));
  CHECK(y.value().at(0, 1) == doctest::Approx(lo).epsilon(1e-12));
  CHECK(y.value().at(1, 0) == doctest::Approx(lo).epsilon(1e-12));
  CHECK(y.value().at(1, 1) == doctest::Approx(hi).epsilon(1e-12));
}

TEST_CASE("multi_head_attention matches hand-rolled oracle") {
  Rng rng(7);
  AttnTensors a = random_attention(rng, 8);
  Tensor x = random_tensor(rng, {5, 8});
  Tape tape(false);
  Var y = multi_head_attention(tape.constant(x), constants(tape, a), 4);
  CHECK(max_abs_diff(y.value(), naive_mha(x, a, 4)) < 1e-12);

  // Batched input equals per-sequence evaluation.
  Tensor xb({2, 5, 8});
  Tensor x2 = random_tensor(rng, {5, 8});
  std::copy(x.storage().begin(), x.storage().end(), xb.storage().begin());
  std::copy(x2.storage().begin(), x2.storage().end(), xb.storage().begin() + 40);
  Var yb = multi_head_attention(tape.constant(xb), constants(tape, a), 4);
  Tensor ref2 = naive_mha(x2, a, 4);
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(yb.value()[40 + i] - ref2[i]) < 1e-12);

  CHECK_THROWS_AS(multi_head_attention(tape.constant(x), constants(tape, a), 3), ConfigError);
}

TEST_CASE("adamw examples") {
  SUBCASE("zero gradient, no decay is identity") {
    ParamSet ps;
    ps.add("w", Tensor::vector({1.0, -2.0, 3.5}));
    AdamWState st;
    st.config.weight_decay = 0.0;
    for (int i = 0; i < 3; ++i) adamw_step(ps, st);
    CHECK(ps.get("w").value == Tensor::vector({1.0, -2.0, 3.5}));
  }
  SUBCASE("decoupled decay") {
    ParamSet ps;
    ps.add("w", Tensor::vector({1.0}));
    AdamWState st;
    st.config.lr = 0.1;
    st.config.weight_decay = 0.01;
    adamw_step(ps, st);
    CHECK(ps.get("w").value[0] == doctest::Approx(0.999).epsilon(1e-14));
  }
  SUBCASE("first step with unit gradient") {
    ParamSet ps;
    ps.add("w", Tensor::vector({1.0}));
    ps.get("w").grad[0] = 1.0;
    AdamWState st;
    st.config.weight_decay = 0.0;
    adamw_step(ps, st);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    CHECK(ps.get("w").value[0] == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(st.step == 1);
    CHECK(st.v["w"][0] >= 0.0);
  }
  SUBCASE("non-finite gradient names the parameter") {
    ParamSet ps;
    ps.add("encoder.w", Tensor::vector({1.0}));
    ps.get("encoder.w").grad[0] = NAN;
    AdamWState st;
    try {
      adamw_step(ps, st);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
    }
    CHECK(ps.get("encoder.w").value[0] == 1.0);
  }
}

TEST_CASE("grad_check examples") {
  std::vector<Tensor> in{Tensor::vector({1, 2, 3})};
  const double constant_err = grad_check(
      [](Tape& t, std::span<const Var>) { return t.constant(Tensor::scalar(4.0)); }, in);
  CHECK(constant_err < 1e-12);

  const double sq_err = grad_check([](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, in);
  CHECK(sq_err < 1e-6);

  // Analytic gradient of sum(x^2) is 2x.
  ParamSet ps;
  ps.add("x", Tensor::vector({1, 2, 3}));
  Tape tape;
  Var x = tape.param(ps.get("x"));
  tape.backward(sum(mul(x, x)));
  CHECK(ps.get("x").grad == Tensor::vector({2, 4, 6}));

  int calls = 0;
  CHECK_THROWS_AS(grad_check(
                      [&calls](Tape& t, std::span<const Var> v) {
                        return add(sum(v[0]), t.constant(Tensor::scalar(static_cast<double>(++calls))));
                      },
                      in),
                  OracleError);
}

TEST_CASE("grad_check on every differentiable op") {
  Rng rng(99);
  auto check = [](double err) { CHECK(err < 1e-4); };
  std::vector<Tensor> conv_in{random_tensor(rng, {2, 3, 6}), random_tensor(rng, {4, 3, 3}), random_tensor(rng, {4})};
  check(grad_check(
      [](Tape& t, std::span<const Var> v) {
        Var y = conv1d(v[0], v[1], v[2], Conv1dOptions{2, 0, 2});
        return sum(mul(y, y));
      },
      conv_in));
  std::vector<Tensor> ln_in{random_tensor(rng, {3, 5}), random_tensor(rng, {5}), random_tensor(rng, {5}),
                            random_tensor(rng, {3, 5})};
  check(grad_check([](Tape&, std::span<const Var> v) { return sum(mul(layer_norm(v[0], v[1], v[2]), v[3])); }, ln_in));
  std::vector<Tensor> sm_in{random_tensor(rng, {3, 4}, 3.0), random_tensor(rng, {3, 4})};
  check(grad_check([](Tape&, std::span<const Var> v) { return sum(mul(softmax_last(v[0]), v[1])); }, sm_in));

  AttnTensors a = random_attention(rng, 8);
  std::vector<Tensor> mha_in = a.all();
  mha_in.push_back(random_tensor(rng, {2, 4, 8}));
  mha_in.push_back(random_tensor(rng, {2, 4, 8}));
  check(grad_check(
      [](Tape& t, std::span<const Var> v) {
        return sum(mul(multi_head_attention(v[8], attention_from(v, 0), 2), v[9]));
      },
      mha_in));
  std::vector<Tensor> sdpa_in{random_tensor(rng, {2, 5, 6}, 2.0), random_tensor(rng, {2, 5, 6}, 2.0),
                              random_tensor(rng, {2, 5, 6}), random_tensor(rng, {2, 5, 6})};
  check(grad_check(
      [](Tape&, std::span<const Var> v) { return sum(mul(scaled_dot_attention(v[0], v[1], v[2], 3), v[3])); },
      sdpa_in));

  std::vector<Tensor> misc{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {4}), random_tensor(rng, {4, 3}),
                           random_tensor(rng, {3})};
  check(grad_check(
      [](Tape& t, std::span<const Var> v) {
        Var h = gelu(affine(add(v[0], v[1]), v[2], v[3]));
        Var p = permute(h, {2, 0, 1});
        Var c = concat({p, tanh(p)}, 1);
        Var s = mean_axis(slice(c, 2, 1, 2), 1);
        return add(mse_loss(s, t.constant(Tensor(s.shape(), 0.3))), mean(sub(h, scale(h, 0.5))));
      },
      misc));
  std::vector<Tensor> mm{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 5, 4}), random_tensor(rng, {4, 2})};
  check(grad_check(
      [](Tape&, std::span<const Var> v) {
        Var s = bmm(v[0], v[1], true);
        Var u = bmm(s, v[1]);
        return sum(mul(matmul(u, v[2]), matmul(u, v[2])));
      },
      mm));
}

TEST_CASE("forward passes are bit-deterministic") {
  Rng rng(12);
  AttnTensors a = random_attention(rng, 8);
  Tensor x = random_tensor(rng, {3, 6, 8});
  Tensor first;
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape(false);
    Var y = layer_norm(multi_head_attention(tape.constant(x), constants(tape, a), 4), tape.constant(Tensor({8}, 1.0)),
                       tape.constant(Tensor({8})));
    if (rep == 0) first = y.value();
    else CHECK(y.value() == first);
  }
}

TEST_CASE("dropout") {
  Tape tape(false);
  Var x = tape.constant(Tensor({1000}, 1.0));
  CHECK(dropout(x, 0.0, nullptr).id == x.id);
  Rng rng(1);
  CHECK(dropout(x, 0.5, nullptr).id == x.id);
  Var y = dropout(x, 0.5, &rng);
  int kept = 0;
  for (double v : y.value().data()) {
    CHECK((v == 0.0 || v == 2.0));
    kept += v != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
  CHECK_THROWS_AS(dropout(x, 1.0, &rng), ConfigError);
}

TEST_CASE("tape records non-finite values as errors") {
  Tape tape(false);
  Var x = tape.constant(Tensor::vector({1e300}));
  CHECK_THROWS_AS(mul(x, x), NumericalError);
}

#include "doctest.h"
#include "patchtok/baselines.hpp"
#include "patchtok/errors.hpp"
#include "patchtok/grad_check.hpp"
#include "patchtok/ops.hpp"
#include "patchtok/patching.hpp"
#include "test_util.hpp"

using namespace patchtok;
using namespace patchtok::testing;

namespace {

TcnConfig tiny_tcn() {
  TcnConfig c;
  c.in_features = 3;
  c.patch_len = 4;
  c.levels = 2;
  c.channels = 4;
  c.kernel_width = 2;
  c.dilation_base = 2;
  c.dropout_rate = 0.0;
  return c;
}

PatchTstConfig tiny_patchtst() {
  PatchTstConfig c;
  c.in_features = 3;
  c.patch_len = 4;
  c.d_model = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  c.max_patches = 8;
  c.dropout_rate = 0.0;
  return c;
}

void randomize(ParamSet& ps, Rng& rng, double scale = 0.5) {
  for (auto& [name, p] : ps) {
    for (double& v : p.value.storage()) v = rng.uniform(-scale, scale);
  }
}

Tensor apply_gelu(Tensor t) {
  for (double& v : t.storage()) v = ref_gelu(v);
  return t;
}

// Kernel-width-1 conv weights [C_out, C_in, 1] as an affine matrix [C_in, C_out].
Tensor pointwise(const Tensor& k) {
  Tensor w({k.dim(1), k.dim(0)});
  for (std::size_t o = 0; o < k.dim(0); ++o)
    for (std::size_t i = 0; i < k.dim(1); ++i) w.at(i, o) = k.at(o, i, 0);
  return w;
}

}  // namespace

TEST_CASE("tcn configuration arithmetic") {
  TcnConfig c;
  CHECK(c.dilation(0) == 1);
  CHECK(c.dilation(3) == 8);
  CHECK(c.receptive_field() == 1 + 2 * 2 * (1 + 2 + 4 + 8));
  c.kernel_width = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  nlohmann::json j = tiny_tcn();
  TcnConfig back = j.get<TcnConfig>();
  CHECK(back.channels == 4);
  CHECK(back.kernel_width == 2);
}

TEST_CASE("tcn zero convolutions give constant forecasts") {
  Tcn m(tiny_tcn(), 1);
  for (auto& [name, p] : m.params())
    if (name.rfind("level", 0) == 0) p.value.fill(0.0);
  m.params().get("head.b").value = Tensor({1}, {-0.4});
  Rng rng(1);
  Tape tape(false);
  Tensor y = m.forward(tape, tape.constant(random_tensor(rng, {2, 17, 3}))).value();
  CHECK(y.shape() == Shape{2, 3});
  for (double v : y.storage()) CHECK(v == -0.4);
}

TEST_CASE("both baselines emit K - h forecasts on the default grid") {
  Rng rng(2);
  Tensor x = random_tensor(rng, {2, 160, 6});
  Tcn tcn(TcnConfig{}, 1);
  PatchTst pt(PatchTstConfig{}, 2);
  Tape tape(false);
  CHECK(tcn.forward(tape, tape.constant(x)).shape() == Shape{2, 19});
  CHECK(pt.forward(tape, tape.constant(x)).shape() == Shape{2, 19});
  Tensor single = random_tensor(rng, {1, 160, 6});
  CHECK(tcn.forward(tape, tape.constant(single)).shape() == Shape{1, 19});
  CHECK_THROWS_AS(tcn.forward(tape, tape.constant(Tensor({1, 7, 6}))), ConfigError);
  CHECK_THROWS_AS(tcn.forward(tape, tape.constant(Tensor({1, 160, 5}))), DimensionError);
}

TEST_CASE("tcn with one level and width-1 kernels is a per-step network") {
  TcnConfig c = tiny_tcn();
  c.levels = 1;
  c.kernel_width = 1;
  Tcn m(c, 3);
  Rng rng(3);
  randomize(m.params(), rng);
  auto v = [&](const std::string& n) { return m.params().get(n).value; };
  Tensor x = random_tensor(rng, {1, 13, 3});
  Tensor xs = x.reshaped({13, 3});

  Tensor branch = apply_gelu(ref_affine(xs, pointwise(v("level0.conv1.w")), v("level0.conv1.b")));
  branch = apply_gelu(ref_affine(branch, pointwise(v("level0.conv2.w")), v("level0.conv2.b")));
  Tensor skip = ref_affine(xs, pointwise(v("level0.skip.w")), v("level0.skip.b"));
  Tensor states({13, 4});
  for (std::size_t i = 0; i < states.size(); ++i) states[i] = ref_gelu(branch[i] + skip[i]);

  const std::size_t k = 3;
  Tensor pooled({k - 1, 4});
  for (std::size_t p = 0; p + 1 < k; ++p)
    for (std::size_t ch = 0; ch < 4; ++ch) {
      for (std::size_t j = 0; j < 4; ++j) pooled.at(p, ch) += states.at(p * 4 + j, ch);
      pooled.at(p, ch) /= 4.0;
    }
  Tensor expected = ref_affine(pooled, v("head.w"), v("head.b"));

  Tape tape(false);
  Tensor got_states = m.step_states(tape, tape.constant(x)).value();
  CHECK(max_abs_diff(got_states.reshaped({13, 4}), states) < 1e-12);
  Tensor y = m.forward(tape, tape.constant(x)).value();
  CHECK(max_abs_diff(y.reshaped({k - 1, 1}), expected) < 1e-12);
}

TEST_CASE("tcn step states are causal") {
  TcnConfig c = tiny_tcn();
  c.levels = 3;
  c.kernel_width = 3;
  Tcn m(c, 4);
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 30, 3});
  Tape tape(false);
  Tensor full = m.step_states(tape, tape.constant(x)).value();
  for (std::size_t cut : {0, 5, 17, 28}) {
    Tensor masked = x;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = cut + 1; t < 30; ++t)
        for (std::size_t f = 0; f < 3; ++f) masked.at(b, t, f) = 0.0;
    Tensor part = m.step_states(tape, tape.constant(masked)).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t <= cut; ++t)
        for (std::size_t ch = 0; ch < 4; ++ch) CHECK(part.at(b, t, ch) == full.at(b, t, ch));
  }
  // The oldest step inside the receptive field still reaches the last state.
  REQUIRE(c.receptive_field() == 29);
  Tensor shifted = x;
  shifted.at(0, 29 - (c.receptive_field() - 1), 0) += 1.0;
  Tensor moved = m.step_states(tape, tape.constant(shifted)).value();
  CHECK(moved.at(0, 29, 0) != full.at(0, 29, 0));
}

TEST_CASE("patchtst zero embedding and table give constant forecasts") {
  PatchTst m(tiny_patchtst(), 5);
  Rng rng(5);
  randomize(m.backbone().params(), rng);
  m.embedding_params().get("embed.w").value.fill(0.0);
  m.embedding_params().get("embed.b").value = random_tensor(rng, {8});
  m.backbone().params().get("pos").value.fill(0.0);
  Tensor x = random_tensor(rng, {2, 20, 3});
  Tape tape(false);
  Tensor tokens = m.embed(tape, tape.constant(x)).value();
  CHECK(tokens.shape() == Shape{2, 5, 8});
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(tokens[r * 8 + j] == m.embedding_params().get("embed.b").value[j]);
  Tensor y = m.forward(tape, tape.constant(x)).value();
  REQUIRE(y.shape() == Shape{2, 4});
  for (double v : y.storage()) CHECK(v == doctest::Approx(y[0]).epsilon(1e-12));
}

TEST_CASE("patchtst equals patchify, affine embedding and the backbone") {
  PatchTst m(tiny_patchtst(), 6);
  Rng rng(6);
  randomize(m.embedding_params(), rng);
  Tensor x = random_tensor(rng, {1, 22, 3});
  PatchSequence ps = patchify(x.reshaped({22, 3}), 4);
  Tensor flat = ps.patches.reshaped({ps.num_patches, 12});
  Tensor tokens = ref_affine(flat, m.embedding_params().get("embed.w").value, m.embedding_params().get("embed.b").value);
  Tape tape(false);
  Tensor embedded = m.embed(tape, tape.constant(x)).value();
  CHECK(max_abs_diff(embedded.reshaped({5, 8}), tokens) < 1e-14);
  Tensor expected = m.backbone().forward(tape, tape.constant(tokens.reshaped({1, 5, 8}))).value();
  CHECK(max_abs_diff(m.forward(tape, tape.constant(x)).value(), expected) < 1e-12);
}

TEST_CASE("patchtst parameter validation") {
  PatchTst m(tiny_patchtst(), 7);
  PatchTst copy(tiny_patchtst(), m.embedding_params(), m.backbone().params());
  CHECK(copy.embedding_params().hash() == m.embedding_params().hash());
  ParamSet bad = m.embedding_params();
  bad.get("embed.w").value = Tensor({3, 8});
  CHECK_THROWS_AS(PatchTst(tiny_patchtst(), bad, m.backbone().params()), ConfigError);
  PatchTstConfig c = tiny_patchtst();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  nlohmann::json j = tiny_patchtst();
  CHECK(j.get<PatchTstConfig>().ffn_dim == 16);
}

TEST_CASE("baseline gradient checks") {
  Rng rng(8);
  SUBCASE("tcn") {
    TcnConfig c = tiny_tcn();
    c.kernel_width = 3;
    Tcn m(c, 9);
    Tensor x = random_tensor(rng, {2, 12, 3});
    Tensor y = random_tensor(rng, {2, 2});
    CHECK(grad_check([&](Tape& t) { return mse_loss(m.forward(t, t.constant(x)), t.constant(y)); }, m.params()) < 1e-4);
  }
  SUBCASE("patchtst") {
    PatchTst m(tiny_patchtst(), 10);
    randomize(m.backbone().params(), rng, 0.3);
    Tensor x = random_tensor(rng, {2, 16, 3});
    Tensor y = random_tensor(rng, {2, 3});
    auto loss = [&](Tape& t) { return mse_loss(m.forward(t, t.constant(x)), t.constant(y)); };
    CHECK(grad_check(loss, m.embedding_params()) < 1e-4);
    CHECK(grad_check(loss, m.backbone().params()) < 1e-4);
  }
}

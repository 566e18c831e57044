#include "patchtok/synthgen.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <thread>

#include "patchtok/errors.hpp"

namespace patchtok {

void SynthConfig::validate() const {
  if (num_samples < 1) throw ConfigError("synth: num_samples must be >= 1");
  if (seq_len < 1) throw ConfigError("synth: seq_len must be >= 1");
  if (sigma1 < 0 || sigma2 < 0 || sigma_y < 0) throw ConfigError("synth: noise standard deviations must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"num_samples", c.num_samples}, {"seq_len", c.seq_len}, {"alpha1", c.alpha1},
                     {"alpha2", c.alpha2},           {"alpha3", c.alpha3},   {"sigma1", c.sigma1},
                     {"sigma2", c.sigma2},           {"sigma_y", c.sigma_y}, {"rho", c.rho},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.num_samples = j.value("num_samples", c.num_samples);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.alpha1 = j.value("alpha1", c.alpha1);
  c.alpha2 = j.value("alpha2", c.alpha2);
  c.alpha3 = j.value("alpha3", c.alpha3);
  c.sigma1 = j.value("sigma1", c.sigma1);
  c.sigma2 = j.value("sigma2", c.sigma2);
  c.sigma_y = j.value("sigma_y", c.sigma_y);
  c.rho = j.value("rho", c.rho);
  c.seed = j.value("seed", c.seed);
}

double trend_f(double t, double seq_len) {
  return -5.0 + 0.04 * t + 0.0002 * t * t + 0.8 * std::exp(t / seq_len) + 2.0 * std::sin(2.0 * std::numbers::pi * t / 20.0);
}

double coupling_g(double d1) {
  const double sign = d1 > 0 ? 1.0 : (d1 < 0 ? -1.0 : 0.0);
  return 0.4 * d1 + 0.6 * sign * std::log1p(std::abs(d1));
}

double trend_h(double t) { return 0.02 * t; }

double periodic_p(double t) { return 1.5 * std::sin(2.0 * std::numbers::pi * t / 25.0); }

std::vector<double> gen_dynamic1(std::size_t seq_len, Rng& rng, const SynthConfig& cfg) {
  std::vector<double> d1(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) {
    const double t = static_cast<double>(i + 1);
    d1[i] = trend_f(t, static_cast<double>(seq_len)) + cfg.sigma1 * rng.normal();
  }
  return d1;
}

std::vector<double> gen_dynamic2(std::span<const double> d1, std::size_t seq_len, Rng& rng, const SynthConfig& cfg) {
  if (d1.size() != seq_len) {
    throw DimensionError("gen_dynamic2: d1 has " + std::to_string(d1.size()) + " steps, expected " + std::to_string(seq_len));
  }
  std::vector<double> d2(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) {
    const double t = static_cast<double>(i + 1);
    d2[i] = cfg.rho * coupling_g(d1[i]) + trend_h(t) + periodic_p(t) + cfg.sigma2 * rng.normal();
  }
  return d2;
}

Statics sample_statics(Rng& rng) {
  Statics s;
  s.s1 = static_cast<double>(rng.uniform_int(1, 4));
  s.s2 = rng.uniform(10.0, 30.0);
  s.s3 = static_cast<double>(rng.uniform_int(1, 5));
  s.s4 = static_cast<double>(rng.uniform_int(1, 5));
  return s;
}

std::vector<double> gen_target(std::span<const double> d1, std::span<const double> d2, const Statics& s, Rng& rng,
                               const SynthConfig& cfg) {
  if (d1.size() != d2.size()) throw DimensionError("gen_target: d1 and d2 lengths differ");
  if (!(s.s2 > 3.0)) throw InvariantError("gen_target: s2 = " + std::to_string(s.s2) + " must exceed 3");
  const double static_term = cfg.alpha2 * (35.0 - s.s2) / (s.s2 - 3.0);
  std::vector<double> y(d1.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = cfg.alpha1 * d1[i] * s.s1 + static_term + cfg.alpha3 * d2[i] * s.s4 + cfg.sigma_y * rng.normal();
  }
  return y;
}

SeriesSample generate_sample(const SynthConfig& cfg, std::size_t index) {
  Rng rng = Rng::substream(cfg.seed, index);
  const std::size_t len = cfg.seq_len;
  const Statics s = sample_statics(rng);
  const auto d1 = gen_dynamic1(len, rng, cfg);
  const auto d2 = gen_dynamic2(d1, len, rng, cfg);
  SeriesSample out;
  out.y = gen_target(d1, d2, s, rng, cfg);
  out.x = Tensor({len, kSynthFeatures});
  for (std::size_t t = 0; t < len; ++t) {
    out.x.at(t, 0) = d1[t];
    out.x.at(t, 1) = d2[t];
    out.x.at(t, 2) = s.s1;
    out.x.at(t, 3) = s.s2;
    out.x.at(t, 4) = s.s3;
    out.x.at(t, 5) = s.s4;
  }
  return out;
}

std::vector<SeriesSample> generate_dataset(const SynthConfig& cfg, std::size_t threads) {
  cfg.validate();
  std::vector<SeriesSample> out(cfg.num_samples);
  threads = std::max<std::size_t>(1, std::min(threads, cfg.num_samples));
  if (threads == 1) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = generate_sample(cfg, i);
    return out;
  }
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < out.size(); i += threads) out[i] = generate_sample(cfg, i);
      });
    }
  }
  return out;
}

}  // namespace patchtok

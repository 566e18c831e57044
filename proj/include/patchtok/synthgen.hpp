#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "patchtok/rng.hpp"
#include "patchtok/tensor.hpp"

namespace patchtok {

// Generator for the controlled synthetic benchmark: two dynamic features,
// four per-sequence static features and a non-linear target.
struct SynthConfig {
  std::size_t num_samples = 10000;
  std::size_t seq_len = 160;
  double alpha1 = 0.045;
  double alpha2 = 0.38;
  double alpha3 = 0.07;
  double sigma1 = 1.0;
  double sigma2 = 2.0;
  double sigma_y = 0.1;
  double rho = 0.8;
  std::uint64_t seed = 42;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

inline constexpr std::size_t kSynthFeatures = 6;

struct Statics {
  double s1 = 0;
  double s2 = 0;
  double s3 = 0;
  double s4 = 0;
};

struct SeriesSample {
  Tensor x;               // [T, F]; synthetic column order d1, d2, s1, s2, s3, s4
  std::vector<double> y;  // [T]

  std::size_t length() const { return y.size(); }
  friend bool operator==(const SeriesSample&, const SeriesSample&) = default;
};

// Deterministic components; t is 1-based.
double trend_f(double t, double seq_len);
double coupling_g(double d1);
double trend_h(double t);
double periodic_p(double t);

std::vector<double> gen_dynamic1(std::size_t seq_len, Rng& rng, const SynthConfig& cfg);
std::vector<double> gen_dynamic2(std::span<const double> d1, std::size_t seq_len, Rng& rng, const SynthConfig& cfg);
Statics sample_statics(Rng& rng);
std::vector<double> gen_target(std::span<const double> d1, std::span<const double> d2, const Statics& s, Rng& rng,
                               const SynthConfig& cfg);

// Sample i draws from Rng::substream(cfg.seed, i), so the result does not
// depend on `threads`.
SeriesSample generate_sample(const SynthConfig& cfg, std::size_t index);
std::vector<SeriesSample> generate_dataset(const SynthConfig& cfg, std::size_t threads = 1);

}  // namespace patchtok

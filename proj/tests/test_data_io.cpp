#include <cmath>
#include <cstring>
#include <functional>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "patchtok/data_io.hpp"
#include "patchtok/errors.hpp"
#include "patchtok/hash.hpp"
#include "patchtok/rng.hpp"
#include "test_util.hpp"

using namespace patchtok;
using namespace patchtok::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "patchtok_test_data_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

SynthConfig small_synth(std::size_t n, std::size_t t) {
  SynthConfig c;
  c.num_samples = n;
  c.seq_len = t;
  return c;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.patch_len = 4;
  c.encoder.conv_channels = {4};
  c.encoder.token_dim = 8;
  c.encoder.refine_heads = 2;
  c.encoder.pool_hidden = 4;
  c.forecaster.d_model = 8;
  c.forecaster.num_layers = 1;
  c.forecaster.num_heads = 2;
  c.forecaster.ffn_dim = 16;
  c.forecaster.max_patches = 8;
  c.tcn.levels = 2;
  c.tcn.channels = 4;
  c.patchtst.d_model = 8;
  c.patchtst.layers = 1;
  c.patchtst.heads = 2;
  c.patchtst.ffn_dim = 16;
  c.patchtst.max_patches = 8;
  c.train.batch_size = 4;
  c.train.stage1_epochs = 1;
  c.train.stage2_epochs = 1;
  c.train.baseline_epochs = 1;
  c.harmonize();
  return c;
}

// Timestamps at 15-minute steps from `start`, one column per meter.
std::string meter_csv(const std::string& start, std::size_t rows, const std::vector<std::function<double(std::size_t)>>& meters) {
  std::ostringstream ss;
  ss << "\"\"";
  for (std::size_t m = 0; m < meters.size(); ++m) ss << ";\"MT_" << (m + 1) << "\"";
  ss << "\n";
  const std::int64_t t0 = parse_timestamp(start);
  for (std::size_t r = 0; r < rows; ++r) {
    ss << "\"" << format_timestamp(t0 + static_cast<std::int64_t>(r) * 900) << "\"";
    for (const auto& f : meters) {
      std::string v = std::to_string(f(r));
      for (char& c : v)
        if (c == '.') c = ',';
      ss << ";" << v;
    }
    ss << "\n";
  }
  return ss.str();
}

}  // namespace

TEST_CASE("dataset round trip is bitwise lossless") {
  const SynthConfig cfg = small_synth(3, 16);
  const auto samples = generate_dataset(cfg);
  const DatasetManifest m = synthetic_manifest(cfg);
  const fs::path p = scratch("round.pcds");
  save_dataset(samples, m, p);
  const LoadedDataset back = load_dataset(p);
  CHECK(back.samples == samples);
  CHECK(back.manifest == m);
  CHECK(nlohmann::json(back.manifest).dump() == nlohmann::json(m).dump());
  CHECK(back.manifest.seed == std::optional<std::uint64_t>(42));
  CHECK(back.manifest.config.get<SynthConfig>().seq_len == 16);

  const fs::path p2 = scratch("round2.pcds");
  save_dataset(back.samples, back.manifest, p2);
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("dataset file layout") {
  const SynthConfig cfg = small_synth(2, 4);
  const auto samples = generate_dataset(cfg);
  const DatasetManifest m = synthetic_manifest(cfg);
  const fs::path p = scratch("layout.pcds");
  save_dataset(samples, m, p);
  const std::string bytes = slurp(p);
  const std::size_t payload = 2 * 4 * 6 * 8 + 2 * 4 * 8;
  const std::string header = bytes.substr(10, bytes.size() - 10 - payload);
  CHECK(bytes.size() == 4 + 2 + 4 + header.size() + 2 * 4 * 6 * 8 + 2 * 4 * 8);
  CHECK(bytes.size() == dataset_file_size(m));
  CHECK(bytes.substr(0, 4) == "PCDS");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[5]) == 0);
  const std::uint32_t len = static_cast<unsigned char>(bytes[6]) | static_cast<unsigned char>(bytes[7]) << 8 |
                            static_cast<unsigned char>(bytes[8]) << 16 | static_cast<unsigned>(static_cast<unsigned char>(bytes[9])) << 24;
  CHECK(len == header.size());
  nlohmann::json parsed = nlohmann::json::parse(header);
  CHECK(parsed.at("payload_digest") == hash_hex(bytes.substr(10 + len)));
  parsed.erase("payload_digest");
  CHECK(parsed == nlohmann::json(m));
  double first_x = 0.0;
  std::memcpy(&first_x, bytes.data() + 10 + len, 8);
  CHECK(first_x == samples[0].x.at(0, 0));
  double first_y = 0.0;
  std::memcpy(&first_y, bytes.data() + 10 + len + 2 * 4 * 6 * 8, 8);
  CHECK(first_y == samples[0].y[0]);
}

TEST_CASE("corrupted datasets raise typed errors") {
  const SynthConfig cfg = small_synth(2, 8);
  const fs::path p = scratch("corrupt.pcds");
  save_dataset(generate_dataset(cfg), synthetic_manifest(cfg), p);
  const std::string good = slurp(p);
  const fs::path bad = scratch("corrupt_bad.pcds");

  dump(bad, good.substr(0, good.size() - 3));
  CHECK_THROWS_AS(load_dataset(bad), IntegrityError);
  dump(bad, good.substr(0, 7));
  CHECK_THROWS_AS(load_dataset(bad), IntegrityError);
  dump(bad, good + "x");
  CHECK_THROWS_AS(load_dataset(bad), IntegrityError);
  dump(bad, "");
  CHECK_THROWS_AS(load_dataset(bad), IntegrityError);

  std::string magic = good;
  magic[0] = 'X';
  dump(bad, magic);
  CHECK_THROWS_AS(load_dataset(bad), FormatError);
  try {
    load_dataset(bad);
  } catch (const IntegrityError&) {
    FAIL("bad magic must not be reported as truncation");
  } catch (const FormatError&) {
  }

  std::string version = good;
  version[4] = 2;
  dump(bad, version);
  CHECK_THROWS_AS(load_dataset(bad), VersionError);

  CHECK_THROWS_AS(load_dataset(scratch("missing.pcds")), IoError);

  std::vector<SeriesSample> samples = generate_dataset(cfg);
  DatasetManifest m = synthetic_manifest(cfg);
  m.num_samples = 3;
  CHECK_THROWS_AS(save_dataset(samples, m, bad), IntegrityError);
  m = synthetic_manifest(cfg);
  m.seq_len = 9;
  CHECK_THROWS_AS(save_dataset(samples, m, bad), IntegrityError);
}

TEST_CASE("byte-flip fuzzing: typed errors, payload damage always detected") {
  const SynthConfig cfg = small_synth(2, 8);
  const fs::path p = scratch("fuzz.pcds");
  save_dataset(generate_dataset(cfg), synthetic_manifest(cfg), p);
  const std::string good = slurp(p);
  const fs::path bad = scratch("fuzz_bad.pcds");
  Rng rng(11);
  std::size_t header_failures = 0, payload_failures = 0;
  const std::size_t header_end = good.size() - 2 * 8 * (6 + 1) * 8;
  for (int trial = 0; trial < 300; ++trial) {
    std::string b = good;
    const auto flips = rng.uniform_int(1, 4);
    // Bias half the trials toward the header, where structure lives.
    const std::size_t span = trial % 2 ? 10 + nlohmann::json(synthetic_manifest(cfg)).dump().size() : b.size();
    for (std::int64_t f = 0; f < flips; ++f) {
      const auto at = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(span) - 1));
      b[at] = static_cast<char>(rng.uniform_int(0, 255));
    }
    if (trial % 5 == 0) b.resize(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.size()))));
    dump(bad, b);
    if (b.size() == good.size() && b.compare(0, header_end, good, 0, header_end) == 0 && b != good) {
      CHECK_THROWS_AS(load_dataset(bad), IntegrityError);
      ++payload_failures;
      continue;
    }
    try {
      const LoadedDataset d = load_dataset(bad);
      CHECK(d.samples.size() == d.manifest.num_samples);
    } catch (const FormatError&) {
      ++header_failures;
    }
  }
  CHECK(header_failures > 0);
  CHECK(payload_failures > 0);
}

TEST_CASE("checkpoint round trip for every model kind") {
  const ExperimentConfig cfg = tiny_experiment();
  const auto data = generate_dataset(small_synth(6, 16));
  for (ModelKind kind : {ModelKind::proposed, ModelKind::tcn, ModelKind::patchtst}) {
    TrainRun run = train_model(kind, data, cfg);
    const fs::path p = scratch("model_" + to_string(kind) + ".pckp");
    save_model(run.model, p);
    TrainedModel back = load_model(p);
    CHECK(back.kind() == kind);
    CHECK(back.standardizer == run.model.standardizer);
    CHECK(back.config_hash() == run.model.config_hash());
    CHECK(to_checkpoint(back) == to_checkpoint(run.model));
    const Tensor x = prepare_data(data, Standardizer::identity(kSynthFeatures), 4, 1).x;
    CHECK(back.predict(x) == run.model.predict(x));

    const fs::path p2 = scratch("model_" + to_string(kind) + "_again.pckp");
    save_model(back, p2);
    CHECK(file_digest(p) == file_digest(p2));
  }
}

TEST_CASE("checkpoint layout and corruption") {
  Checkpoint c;
  c.config = {{"model", "tcn"}};
  c.tensors.emplace("a", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  c.tensors.emplace("b", Tensor({1}, {-0.5}));
  const fs::path p = scratch("raw.pckp");
  save_checkpoint(c, p);
  CHECK(load_checkpoint(p) == c);
  const std::string good = slurp(p);
  nlohmann::json stored = c.config;
  stored["payload_digest"] = hash_hex(good.substr(good.size() - (4 + (4 + 1 + 4 + 2 * 8 + 6 * 8) + (4 + 1 + 4 + 8 + 8))));
  const std::string cfg = stored.dump();
  CHECK(good.substr(10, cfg.size()) == cfg);
  // header, config, count, then name/rank/dims/values for each tensor
  CHECK(good.size() == 4 + 2 + 4 + cfg.size() + 4 + (4 + 1 + 4 + 2 * 8 + 6 * 8) + (4 + 1 + 4 + 8 + 8));
  CHECK(good.substr(0, 4) == "PCKP");

  const fs::path bad = scratch("raw_bad.pckp");
  dump(bad, good.substr(0, good.size() - 1));
  CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);
  dump(bad, good + std::string(1, '\0'));
  CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);
  std::string m = good;
  m[3] = 'S';
  dump(bad, m);
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
  m = good;
  m[4] = 9;
  dump(bad, m);
  CHECK_THROWS_AS(load_checkpoint(bad), VersionError);

  // A dims field claiming an enormous tensor must fail before allocation.
  m = good;
  const std::size_t dims_at = 4 + 2 + 4 + cfg.size() + 4 + 4 + 1 + 4;
  for (int i = 0; i < 8; ++i) m[dims_at + i] = static_cast<char>(0xff);
  dump(bad, m);
  CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);

  // Any damage after the config block is caught by the payload digest.
  Rng rng(5);
  const std::size_t payload_at = 10 + cfg.size();
  for (int trial = 0; trial < 300; ++trial) {
    std::string b = good;
    const auto at = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.size()) - 1));
    b[at] = static_cast<char>(rng.uniform_int(0, 255));
    if (trial % 4 == 0) b.resize(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.size()))));
    dump(bad, b);
    if (b != good && at >= payload_at) {
      CHECK_THROWS_AS(load_checkpoint(bad), IntegrityError);
      continue;
    }
    try {
      (void)load_checkpoint(bad);
    } catch (const FormatError&) {
    }
  }
}

TEST_CASE("malformed checkpoints are rejected when rebuilding models") {
  const ExperimentConfig cfg = tiny_experiment();
  const auto data = generate_dataset(small_synth(4, 16));
  TrainRun run = train_model(ModelKind::tcn, data, cfg);
  Checkpoint c = to_checkpoint(run.model);
  c.tensors.erase(c.tensors.begin());
  CHECK_THROWS_AS(from_checkpoint(c), ConfigError);
  c = to_checkpoint(run.model);
  c.config.erase("tcn");
  CHECK_THROWS_AS(from_checkpoint(c), FormatError);
  c = to_checkpoint(run.model);
  c.config["model"] = "rnn";
  CHECK_THROWS_AS(from_checkpoint(c), ConfigError);
}

TEST_CASE("encoder checkpoints") {
  const EncoderConfig cfg = tiny_experiment().encoder;
  const PatchEncoder enc(cfg, 9);
  const Checkpoint c = encoder_checkpoint(enc, Standardizer::identity(6));
  const fs::path p = scratch("encoder.pckp");
  save_checkpoint(c, p);
  const PatchEncoder back = encoder_from_checkpoint(load_checkpoint(p));
  CHECK(back.params().hash() == enc.params().hash());
  Checkpoint tcn_only;
  tcn_only.config = {{"model", "tcn"}};
  CHECK_THROWS_AS(encoder_from_checkpoint(tcn_only), ConfigError);
}

TEST_CASE("timestamps") {
  CHECK(parse_timestamp("1970-01-01 00:00:00") == 0);
  CHECK(parse_timestamp("2012-01-01 00:15:00") == 1325376900);
  CHECK(parse_timestamp("2014-12-31 23:45:00") == 1420069500);
  CHECK(format_timestamp(1325376900) == "2012-01-01 00:15:00");
  CHECK(format_timestamp(parse_timestamp("2012-02-29 12:34:56")) == "2012-02-29 12:34:56");
  CHECK_THROWS_AS(parse_timestamp("2012-13-01 00:00:00"), ConfigError);
  CHECK_THROWS_AS(parse_timestamp("2012-01-01"), ConfigError);
  CHECK_THROWS_AS(parse_timestamp("2012/01/01 00:00:00"), ConfigError);
}

TEST_CASE("electricity rows use decimal commas") {
  std::int64_t ts = 0;
  const auto v = parse_meter_values("2012-01-01 00:15:00;1,25;0,00", 2, &ts);
  REQUIRE(v.size() == 2);
  CHECK(v[0] == 1.25);
  CHECK(v[1] == 0.0);
  CHECK(ts == parse_timestamp("2012-01-01 00:15:00"));
  const auto q = parse_meter_values("\"2012-01-01 00:15:00\";\"3,5\";12", 2);
  CHECK(q == std::vector<double>{3.5, 12.0});
  try {
    parse_meter_values("2012-01-01 00:15:00;1,25;abc", 7);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 7);
    CHECK(e.column() == 26);
  }
}

TEST_CASE("electricity parser consumes the header") {
  std::istringstream in("\"\";\"MT_001\";\"MT_002\"\n2012-01-01 00:15:00;1,25;0,00\n2012-01-01 00:30:00;2,5;1\n");
  const MeterReadings r = parse_electricity(in);
  CHECK(r.meter_ids == std::vector<std::string>{"MT_001", "MT_002"});
  REQUIRE(r.timestamps.size() == 2);
  CHECK(r.values.shape() == Shape{2, 2});
  CHECK(r.values.at(0, 0) == 1.25);
  CHECK(r.values.at(1, 0) == 2.5);
  CHECK(r.values.at(1, 1) == 1.0);
  CHECK(r.timestamps[1] - r.timestamps[0] == 900);
}

TEST_CASE("electricity parser errors") {
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_electricity(empty), ParseError);
  std::istringstream header_only("\"\";\"MT_001\"\n");
  CHECK_THROWS_AS(parse_electricity(header_only), ParseError);
  std::istringstream ragged("\"\";\"MT_001\";\"MT_002\"\n2012-01-01 00:15:00;1,0;2,0\n2012-01-01 00:30:00;1,0\n");
  try {
    parse_electricity(ragged);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream bad_ts("\"\";\"MT_001\"\n2012-01-01 00:15;1,0\n");
  try {
    parse_electricity(bad_ts);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.column() == 1);
  }
  CHECK_THROWS_AS(load_electricity(scratch("no_such_file.txt")), IoError);
}

TEST_CASE("window counts") {
  CHECK(window_count(480, 160, 160) == 3);
  CHECK(window_count(479, 160, 160) == 2);
  CHECK(window_count(159, 160, 160) == 0);
  CHECK(window_count(480, 160, 80) == 5);
}

TEST_CASE("normalize_and_window splits, normalizes and excludes constant meters") {
  // 1000 training rows in 2013, then 480 rows after the 2014 boundary.
  const std::int64_t boundary = parse_timestamp("2014-01-01 00:00:00");
  std::vector<std::function<double(std::size_t)>> meters{
      [](std::size_t r) { return 10.0 + std::sin(0.1 * static_cast<double>(r)) + (r >= 1000 ? 5.0 : 0.0); },
      [](std::size_t) { return 0.0; },
      [](std::size_t r) { return std::cos(0.07 * static_cast<double>(r)); },
      [](std::size_t r) { return static_cast<double>(r % 13); },
  };
  std::istringstream in(meter_csv(format_timestamp(boundary - 1000 * 900), 1481, meters));
  const MeterReadings raw = parse_electricity(in);
  ElectricityConfig cfg;
  cfg.auxiliary_meters = 5;
  const ElectricitySplit s = normalize_and_window(raw, cfg);

  CHECK(s.boundary == boundary);
  CHECK(s.stats.meter_ids == std::vector<std::string>{"MT_1", "MT_3", "MT_4"});
  REQUIRE(s.stats.excluded.size() == 1);
  CHECK(s.stats.excluded[0].first == "MT_2");
  CHECK(!s.stats.excluded[0].second.empty());
  for (double sd : s.stats.stddev) CHECK(sd > 0.0);

  // 1000 train rows at stride 80 and 480 test rows after the boundary row.
  CHECK(s.train.size() == window_count(1000, 160, 80));
  CHECK(s.test.size() == 3);
  for (std::int64_t t : s.test_window_starts) CHECK(t > s.boundary);
  for (std::size_t w = 0; w < s.train.size(); ++w) CHECK(s.train_window_starts[w] + 159 * 900 < s.boundary);
  CHECK(s.test_window_ends.back() == parse_timestamp(format_timestamp(boundary + 480 * 900)));

  for (const auto& smp : s.test) {
    CHECK(smp.x.shape() == Shape{160, 3});
    for (std::size_t t = 0; t < 160; ++t) CHECK(smp.y[t] == smp.x.at(t, 0));
  }

  // Train-split stats normalize the raw training rows to zero mean, unit sd.
  for (std::size_t j = 0; j < 3; ++j) {
    const std::size_t m = j == 0 ? 0 : j + 1;
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 1000; ++r) mu += (raw.values.at(r, m) - s.stats.mean[j]) / s.stats.stddev[j];
    mu /= 1000.0;
    for (std::size_t r = 0; r < 1000; ++r) var += std::pow((raw.values.at(r, m) - s.stats.mean[j]) / s.stats.stddev[j] - mu, 2);
    CHECK(std::fabs(mu) < 1e-9);
    CHECK(std::fabs(std::sqrt(var / 1000.0) - 1.0) < 1e-9);
  }

  // Leakage witness: the shifted test period has different statistics, and the
  // test windows carry the shift instead of being re-centred.
  double test_mean = 0.0;
  for (std::size_t r = 1001; r < 1481; ++r) test_mean += raw.values.at(r, 0);
  test_mean /= 480.0;
  CHECK(std::fabs(test_mean - s.stats.mean[0]) > 1.0);
  double window_mean = 0.0;
  for (const auto& smp : s.test)
    for (double v : smp.y) window_mean += v;
  window_mean /= 480.0;
  CHECK(window_mean > 2.0);
}

TEST_CASE("normalize_and_window configuration errors") {
  const std::int64_t boundary = parse_timestamp("2014-01-01 00:00:00");
  std::vector<std::function<double(std::size_t)>> meters{[](std::size_t) { return 1.0; },
                                                         [](std::size_t r) { return static_cast<double>(r % 7); }};
  std::istringstream in(meter_csv(format_timestamp(boundary - 400 * 900), 600, meters));
  const MeterReadings raw = parse_electricity(in);
  ElectricityConfig cfg;
  cfg.target_meter = "MT_1";
  CHECK_THROWS_AS(normalize_and_window(raw, cfg), ConfigError);
  cfg.target_meter = "MT_9";
  CHECK_THROWS_AS(normalize_and_window(raw, cfg), ConfigError);
  cfg.target_meter = "MT_2";
  cfg.window_len = 300;
  CHECK_THROWS_AS(normalize_and_window(raw, cfg), ConfigError);
  cfg.window_len = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  ElectricityConfig auto_cfg;
  const ElectricitySplit s = normalize_and_window(raw, auto_cfg);
  CHECK(s.stats.meter_ids == std::vector<std::string>{"MT_2"});
  CHECK(s.stats.excluded.size() == 1);

  ElectricityConfig j = auto_cfg;
  j.split_boundary = "2014-01-01 00:00:00";
  j.input_meters = {"MT_1"};
  CHECK(nlohmann::json(nlohmann::json(j).get<ElectricityConfig>()) == nlohmann::json(j));
}

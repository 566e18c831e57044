#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchtok/synthgen.hpp"
#include "patchtok/training.hpp"

namespace patchtok {

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct DatasetManifest {
  std::uint32_t schema_version = kDatasetVersion;
  std::string kind = "synthetic";  // synthetic | electricity
  std::size_t num_samples = 0;
  std::size_t seq_len = 0;
  std::size_t features = 0;
  std::optional<std::uint64_t> seed;  // synthetic only
  std::string source_digest;          // electricity only
  nlohmann::json config = nlohmann::json::object();
  std::optional<std::string> created;  // left empty so files are reproducible byte for byte

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

DatasetManifest synthetic_manifest(const SynthConfig& cfg);

// "PCDS", u16 version, u32 manifest length, manifest JSON, then X and y as
// little-endian f64 in sample-major order.
void save_dataset(const std::vector<SeriesSample>& samples, const DatasetManifest& manifest,
                  const std::filesystem::path& path);

struct LoadedDataset {
  std::vector<SeriesSample> samples;
  DatasetManifest manifest;
};

LoadedDataset load_dataset(const std::filesystem::path& path);

// Byte size of a dataset file with this manifest.
std::size_t dataset_file_size(const DatasetManifest& manifest);

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// "PCKP", u16 version, u32 config length, config JSON, u32 tensor count,
// then per tensor: u32 name length, name, u32 rank, u64 dims, f64 values.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const TrainedModel& model);
TrainedModel from_checkpoint(const Checkpoint& ckpt);
Checkpoint encoder_checkpoint(const PatchEncoder& encoder, const Standardizer& standardizer);
PatchEncoder encoder_from_checkpoint(const Checkpoint& ckpt);

void save_model(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

std::string file_digest(const std::filesystem::path& path);

struct MeterReadings {
  std::vector<std::int64_t> timestamps;  // seconds since 1970-01-01, UTC
  std::vector<std::string> meter_ids;
  Tensor values;  // [rows, meters]
};

// Semicolon-separated, first line a header naming the meters, first column
// "YYYY-MM-DD HH:MM:SS", decimal commas, optional double quotes.
MeterReadings parse_electricity(std::istream& in);
MeterReadings load_electricity(const std::filesystem::path& path);

// One data row; `line` is used for error positions.
std::vector<double> parse_meter_values(const std::string& row, std::size_t line, std::int64_t* timestamp = nullptr);

std::int64_t parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t seconds);

struct ElectricityConfig {
  std::string source;
  std::string target_meter;               // empty: first non-constant meter
  std::vector<std::string> input_meters;  // empty: the next auxiliary_meters non-constant meters
  std::size_t auxiliary_meters = 5;
  std::size_t window_len = 160;
  std::size_t train_stride = 80;
  std::size_t test_stride = 160;
  std::optional<std::string> split_boundary;  // empty: start of the final calendar year
  std::size_t patch_len = 8;
  std::size_t horizon = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ElectricityConfig& c);
void from_json(const nlohmann::json& j, ElectricityConfig& c);

struct MeterStats {
  std::vector<std::string> meter_ids;  // retained feature meters; the target comes first
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::pair<std::string, std::string>> excluded;  // meter id, reason
};

void to_json(nlohmann::json& j, const MeterStats& s);

struct ElectricitySplit {
  std::vector<SeriesSample> train;
  std::vector<SeriesSample> test;
  MeterStats stats;
  std::int64_t boundary = 0;
  std::vector<std::int64_t> train_window_starts;  // timestamps of each window's first row
  std::vector<std::int64_t> test_window_starts;
  std::vector<std::int64_t> test_window_ends;
};

ElectricitySplit normalize_and_window(const MeterReadings& raw, const ElectricityConfig& cfg);

// Counts windows of length `window` at `stride` over `rows` rows.
std::size_t window_count(std::size_t rows, std::size_t window, std::size_t stride);

}  // namespace patchtok

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "patchtok/adamw.hpp"
#include "patchtok/baselines.hpp"
#include "patchtok/errors.hpp"
#include "patchtok/forecaster.hpp"
#include "patchtok/patch_encoder.hpp"
#include "patchtok/synthgen.hpp"

namespace patchtok {

// Independent per-purpose seeds derived from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);
inline constexpr std::uint64_t kSeedEncoderInit = 1;
inline constexpr std::uint64_t kSeedForecasterInit = 3;
inline constexpr std::uint64_t kSeedBaselineInit = 5;

struct DeskScale {
  std::size_t num_samples = 500;
  std::size_t stage1_epochs = 200;
  std::size_t stage2_epochs = 100;
  std::size_t baseline_epochs = 100;
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::size_t stage1_epochs = 2000;
  std::size_t stage2_epochs = 300;
  std::size_t baseline_epochs = 300;
  std::uint64_t seed = 0;
  std::optional<DeskScale> desk_scale;

  void validate() const;
  // Epoch counts after applying desk_scale, if present.
  TrainConfig resolved() const;
  AdamWConfig optimizer() const;
};

void to_json(nlohmann::json& j, const DeskScale& d);
void from_json(const nlohmann::json& j, DeskScale& d);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class ModelKind { proposed, tcn, patchtst };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

// All model configurations for one experiment. harmonize() copies the shared
// patch length, horizon and feature count into every sub-config and ties the
// forecaster input width to the encoder token width.
struct ExperimentConfig {
  std::size_t patch_len = 8;
  std::size_t horizon = 1;
  std::size_t in_features = kSynthFeatures;
  EncoderConfig encoder;
  ForecasterConfig forecaster;
  TcnConfig tcn;
  PatchTstConfig patchtst;
  TrainConfig train;

  void harmonize();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Per-feature z-scoring fitted on the training inputs. Zero-variance
// features keep unit scale.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const std::vector<SeriesSample>& samples);
  static Standardizer identity(std::size_t features);
  // x [T, F] or [B, T, F], standardized in place.
  void apply(Tensor& x) const;
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

void to_json(nlohmann::json& j, const Standardizer& s);
void from_json(const nlohmann::json& j, Standardizer& s);

// Samples stacked into model-ready tensors.
struct PreparedData {
  Tensor x;        // [N, T, F], standardized
  Tensor targets;  // [N, K] patch means
  Tensor labels;   // [N, K - h], labels[i][k] = targets[i][k + h]
  std::size_t patch_len = 0;
  std::size_t horizon = 0;

  std::size_t size() const { return x.dim(0); }
  std::size_t num_patches() const { return targets.dim(1); }
};

PreparedData prepare_data(const std::vector<SeriesSample>& samples, const Standardizer& standardizer,
                          std::size_t patch_len, std::size_t horizon);

// Rows `first .. first + count` of `order`, gathered along axis 0.
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& order, std::size_t first, std::size_t count);

void shuffle_indices(std::vector<std::size_t>& order, Rng& rng);

struct LossHistory {
  std::vector<double> epoch_loss;  // one mean training loss per epoch
};

// Thrown when a batch loss or gradient becomes non-finite. Parameters have
// already been restored to the end of the last finite epoch; `history`
// holds the epochs completed before the failure.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, LossHistory history)
      : NumericalError(what), history_(std::move(history)) {}
  const LossHistory& history() const noexcept { return history_; }

 private:
  LossHistory history_;
};

// Scalar loss for the samples order[first .. first + count).
using BatchLoss = std::function<Var(Tape& tape, const std::vector<std::size_t>& order, std::size_t first,
                                    std::size_t count, Rng& dropout_rng)>;

struct LoopOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

// Mini-batch AdamW over every ParamSet in `params`, reshuffling the sample
// order each epoch.
LossHistory run_training(const std::vector<ParamSet*>& params, std::size_t num_samples, const BatchLoss& loss,
                         const LoopOptions& options);

struct Stage1Result {
  PatchEncoder encoder;
  ParamSet probe;  // "probe.w", "probe.b"; not used after stage 1
  LossHistory history;
};

Stage1Result train_stage1(const PreparedData& data, const EncoderConfig& cfg, const TrainConfig& train);

struct Stage2Hooks {
  // Runs after every epoch; tests use it to tamper with the encoder.
  std::function<void(std::size_t epoch)> after_epoch;
};

struct Stage2Result {
  Forecaster forecaster;
  LossHistory history;
};

// Frozen-encoder tokens for every sample, [N, K, D].
Tensor encode_tokens(PatchEncoder& encoder, const Tensor& x, std::size_t patch_len);

Stage2Result train_stage2(const PreparedData& data, PatchEncoder& encoder, const ForecasterConfig& cfg,
                          const TrainConfig& train, const Stage2Hooks& hooks = {});

struct ProposedModel {
  PatchEncoder encoder;
  Forecaster forecaster;
};

using ModelVariant = std::variant<ProposedModel, Tcn, PatchTst>;

struct TrainedModel {
  ModelVariant model;
  Standardizer standardizer;

  ModelKind kind() const;
  std::size_t patch_len() const;
  std::size_t horizon() const;
  std::size_t in_features() const;
  nlohmann::json config_json() const;
  std::string config_hash() const;
  // Raw (unstandardized) x [B, T, F] -> forecasts [B, K - h], evaluation mode.
  Tensor predict(const Tensor& raw_x);
};

struct BaselineResult {
  TrainedModel model;
  LossHistory history;
};

BaselineResult train_baseline(const PreparedData& data, const Standardizer& standardizer, ModelKind kind,
                              const ExperimentConfig& cfg);

struct TrainRun {
  TrainedModel model;
  LossHistory encoder_history;  // stage 1, proposed model only
  LossHistory history;          // stage 2 or single-stage baseline
};

// Fits the standardizer on `train_set`, then trains the requested model.
TrainRun train_model(ModelKind kind, const std::vector<SeriesSample>& train_set, const ExperimentConfig& cfg);

// Stage 2 only, on top of an already trained encoder (for example one trained
// on another dataset). The standardizer is fitted on `train_set`.
TrainRun train_with_encoder(PatchEncoder encoder, const std::vector<SeriesSample>& train_set, const ExperimentConfig& cfg);

struct ErrorPair {
  double mse = 0.0;
  double mae = 0.0;
};

ErrorPair mse_mae(const std::vector<std::vector<double>>& preds, const std::vector<std::vector<double>>& targets);
ErrorPair mse_mae(const Tensor& preds, const Tensor& targets);

struct MetricsReport {
  std::string model_name;
  double mse = 0.0;
  double mae = 0.0;
  std::size_t num_eval_pairs = 0;
  std::string config_hash;
  std::string dataset_digest;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

std::string dataset_digest(const std::vector<SeriesSample>& samples);

MetricsReport evaluate(TrainedModel& model, const std::vector<SeriesSample>& samples);

// Predicts each patch target from the most recent observed patch, k + h from k.
MetricsReport evaluate_persistence(const std::vector<SeriesSample>& samples, std::size_t patch_len, std::size_t horizon);

}  // namespace patchtok

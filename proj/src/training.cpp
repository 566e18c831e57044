#include "patchtok/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchtok/hash.hpp"
#include "patchtok/layers.hpp"
#include "patchtok/log.hpp"
#include "patchtok/ops.hpp"
#include "patchtok/patching.hpp"

namespace patchtok {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return splitmix64(seed ^ splitmix64(tag)); }

namespace {

constexpr std::uint64_t kEncoderInit = kSeedEncoderInit;
constexpr std::uint64_t kStage1Loop = 2;
constexpr std::uint64_t kForecasterInit = kSeedForecasterInit;
constexpr std::uint64_t kStage2Loop = 4;
constexpr std::uint64_t kBaselineInit = kSeedBaselineInit;
constexpr std::uint64_t kBaselineLoop = 6;
constexpr std::size_t kEvalChunk = 64;

// x [N, T, F] -> [N, K, P, F], dropping the trailing T mod P steps.
Tensor to_patches(const Tensor& x, std::size_t patch_len) {
  const std::size_t n = x.dim(0), t = x.dim(1), f = x.dim(2);
  const std::size_t k = num_patches(t, patch_len);
  Tensor out({n, k, patch_len, f});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data().begin() + i * t * f, k * patch_len * f, out.data().begin() + i * k * patch_len * f);
  }
  return out;
}

Tensor stack_inputs(const std::vector<SeriesSample>& samples) {
  if (samples.empty()) throw ConfigError("dataset is empty");
  const Shape s = samples.front().x.shape();
  if (s.size() != 2) throw DimensionError("sample inputs must be [T, F], got " + shape_str(s));
  Tensor x({samples.size(), s[0], s[1]});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].x.shape() != s || samples[i].y.size() != s[0]) {
      throw DimensionError("sample " + std::to_string(i) + " does not match the first sample's shape " + shape_str(s));
    }
    std::copy(samples[i].x.data().begin(), samples[i].x.data().end(), x.data().begin() + i * s[0] * s[1]);
  }
  return x;
}

std::vector<ParamSet> snapshot(const std::vector<ParamSet*>& params) {
  std::vector<ParamSet> out;
  out.reserve(params.size());
  for (const ParamSet* p : params) out.push_back(*p);
  return out;
}

Var probe_forecast(Tape& tape, ParamSet& probe, Var tokens, std::size_t horizon) {
  const Shape s = tokens.shape();
  const std::size_t kept = s[1] - horizon;
  Var head = affine(slice(tokens, 1, 0, kept), tape.param(probe.get("probe.w")), tape.param(probe.get("probe.b")));
  return reshape(head, {s[0], kept});
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (stage1_epochs < 1 || stage2_epochs < 1 || baseline_epochs < 1) throw ConfigError("train: all epoch counts must be >= 1");
  if (desk_scale) {
    const DeskScale& d = *desk_scale;
    if (d.num_samples < 1 || d.stage1_epochs < 1 || d.stage2_epochs < 1 || d.baseline_epochs < 1) {
      throw ConfigError("train: desk-scale sample and epoch counts must be >= 1");
    }
  }
}

TrainConfig TrainConfig::resolved() const {
  TrainConfig r = *this;
  if (desk_scale) {
    r.stage1_epochs = desk_scale->stage1_epochs;
    r.stage2_epochs = desk_scale->stage2_epochs;
    r.baseline_epochs = desk_scale->baseline_epochs;
  }
  return r;
}

AdamWConfig TrainConfig::optimizer() const {
  AdamWConfig c;
  c.lr = lr;
  c.weight_decay = weight_decay;
  return c;
}

void to_json(nlohmann::json& j, const DeskScale& d) {
  j = nlohmann::json{{"num_samples", d.num_samples},
                     {"stage1_epochs", d.stage1_epochs},
                     {"stage2_epochs", d.stage2_epochs},
                     {"baseline_epochs", d.baseline_epochs}};
}

void from_json(const nlohmann::json& j, DeskScale& d) {
  d.num_samples = j.value("num_samples", d.num_samples);
  d.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
  d.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
  d.baseline_epochs = j.value("baseline_epochs", d.baseline_epochs);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"stage1_epochs", c.stage1_epochs},
                     {"stage2_epochs", c.stage2_epochs},
                     {"baseline_epochs", c.baseline_epochs},
                     {"seed", c.seed},
                     {"desk_scale", c.desk_scale ? nlohmann::json(*c.desk_scale) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.baseline_epochs = j.value("baseline_epochs", c.baseline_epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("desk_scale")) {
    if (j.at("desk_scale").is_null()) {
      c.desk_scale.reset();
    } else {
      c.desk_scale = j.at("desk_scale").get<DeskScale>();
    }
  }
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::proposed: return "proposed";
    case ModelKind::tcn: return "tcn";
    case ModelKind::patchtst: return "patchtst";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "proposed") return ModelKind::proposed;
  if (name == "tcn") return ModelKind::tcn;
  if (name == "patchtst") return ModelKind::patchtst;
  throw ConfigError("unknown model kind '" + name + "' (expected proposed, tcn or patchtst)");
}

void ExperimentConfig::harmonize() {
  encoder.patch_len = patch_len;
  encoder.in_features = in_features;
  forecaster.input_dim = encoder.token_dim;
  forecaster.horizon = horizon;
  tcn.patch_len = patch_len;
  tcn.in_features = in_features;
  tcn.horizon = horizon;
  patchtst.patch_len = patch_len;
  patchtst.in_features = in_features;
  patchtst.horizon = horizon;
}

void ExperimentConfig::validate() const {
  if (patch_len < 1) throw ConfigError("experiment: patch_len must be >= 1");
  if (horizon < 1) throw ConfigError("experiment: horizon must be >= 1");
  encoder.validate();
  forecaster.validate();
  tcn.validate();
  patchtst.validate();
  train.validate();
  if (encoder.patch_len != patch_len || tcn.patch_len != patch_len || patchtst.patch_len != patch_len ||
      forecaster.horizon != horizon || tcn.horizon != horizon || patchtst.horizon != horizon ||
      forecaster.input_dim != encoder.token_dim) {
    throw ConfigError("experiment: sub-configs disagree on patch length, horizon or token width");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"patch_len", c.patch_len}, {"horizon", c.horizon}, {"in_features", c.in_features},
                     {"encoder", c.encoder},     {"forecaster", c.forecaster}, {"tcn", c.tcn},
                     {"patchtst", c.patchtst},   {"train", c.train}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.patch_len = j.value("patch_len", c.patch_len);
  c.horizon = j.value("horizon", c.horizon);
  c.in_features = j.value("in_features", c.in_features);
  if (j.contains("encoder")) from_json(j.at("encoder"), c.encoder);
  if (j.contains("forecaster")) from_json(j.at("forecaster"), c.forecaster);
  if (j.contains("tcn")) from_json(j.at("tcn"), c.tcn);
  if (j.contains("patchtst")) from_json(j.at("patchtst"), c.patchtst);
  if (j.contains("train")) from_json(j.at("train"), c.train);
}

Standardizer Standardizer::fit(const std::vector<SeriesSample>& samples) {
  const Tensor x = stack_inputs(samples);
  const std::size_t f = x.dim(2);
  const std::size_t rows = x.dim(0) * x.dim(1);
  Standardizer s{std::vector<double>(f, 0.0), std::vector<double>(f, 0.0)};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) s.mean[j] += x[r * f + j];
  for (double& m : s.mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      const double d = x[r * f + j] - s.mean[j];
      s.stddev[j] += d * d;
    }
  for (std::size_t j = 0; j < f; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(rows));
    if (!(s.stddev[j] > 1e-12)) {
      log_info("standardizer: feature " + std::to_string(j) + " is constant; leaving it unscaled");
      s.stddev[j] = 1.0;
    }
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t features) {
  return {std::vector<double>(features, 0.0), std::vector<double>(features, 1.0)};
}

void Standardizer::apply(Tensor& x) const {
  const std::size_t f = mean.size();
  if (x.rank() < 2 || x.shape().back() != f || stddev.size() != f) {
    throw DimensionError("standardizer fitted on " + std::to_string(f) + " features cannot transform " + shape_str(x.shape()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i % f]) / stddev[i % f];
}

void to_json(nlohmann::json& j, const Standardizer& s) { j = nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}}; }

void from_json(const nlohmann::json& j, Standardizer& s) {
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  if (s.mean.size() != s.stddev.size()) throw ConfigError("standardizer mean and stddev lengths differ");
}

PreparedData prepare_data(const std::vector<SeriesSample>& samples, const Standardizer& standardizer,
                          std::size_t patch_len, std::size_t horizon) {
  PreparedData d;
  d.x = stack_inputs(samples);
  standardizer.apply(d.x);
  const std::size_t k = num_patches(d.x.dim(1), patch_len);
  check_horizon(horizon, k);
  d.patch_len = patch_len;
  d.horizon = horizon;
  d.targets = Tensor({samples.size(), k});
  d.labels = Tensor({samples.size(), k - horizon});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::vector<double> agg = aggregate_targets(samples[i].y, patch_len).values;
    for (std::size_t j = 0; j < k; ++j) d.targets.at(i, j) = agg[j];
    for (std::size_t j = 0; j + horizon < k; ++j) d.labels.at(i, j) = agg[j + horizon];
  }
  return d;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& order, std::size_t first, std::size_t count) {
  Shape s = t.shape();
  const std::size_t inner = t.size() / s[0];
  s[0] = count;
  Tensor out(s);
  for (std::size_t i = 0; i < count; ++i) {
    std::copy_n(t.data().begin() + order[first + i] * inner, inner, out.data().begin() + i * inner);
  }
  return out;
}

void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
}

LossHistory run_training(const std::vector<ParamSet*>& params, std::size_t num_samples, const BatchLoss& loss,
                         const LoopOptions& options) {
  if (num_samples == 0) throw ConfigError("training: dataset is empty");
  if (options.batch_size < 1 || options.epochs < 1) throw ConfigError("training: batch size and epochs must be >= 1");
  std::vector<AdamWState> states(params.size());
  for (AdamWState& s : states) s.config = options.optimizer;
  Rng shuffle_rng = Rng::substream(options.seed, 0);
  Rng dropout_rng = Rng::substream(options.seed, 1);
  std::vector<std::size_t> order(num_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ParamSet> last_finite = snapshot(params);
  LossHistory history;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    double total = 0.0;
    for (std::size_t first = 0; first < num_samples; first += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, num_samples - first);
      try {
        for (ParamSet* p : params) p->zero_grad();
        Tape tape;
        Var l = loss(tape, order, first, count, dropout_rng);
        const double value = l.value()[0];
        if (!std::isfinite(value)) throw NumericalError("batch loss is " + std::to_string(value));
        tape.backward(l);
        for (std::size_t i = 0; i < params.size(); ++i) adamw_step(*params[i], states[i]);
        total += value * static_cast<double>(count);
      } catch (const NumericalError& e) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = last_finite[i];
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what() +
                                  "; parameters restored to the last finite epoch",
                              history);
      }
    }
    const double epoch_loss = total / static_cast<double>(num_samples);
    history.epoch_loss.push_back(epoch_loss);
    last_finite = snapshot(params);
    log_debug("epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(epoch_loss));
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }
  return history;
}

Stage1Result train_stage1(const PreparedData& data, const EncoderConfig& cfg, const TrainConfig& train) {
  train.validate();
  const TrainConfig tc = train.resolved();
  if (cfg.patch_len != data.patch_len) throw ConfigError("stage 1: encoder patch_len differs from the prepared data");
  Stage1Result r{PatchEncoder(cfg, derive_seed(tc.seed, kEncoderInit)), ParamSet{}, {}};
  Rng init(derive_seed(tc.seed, kEncoderInit + 100));
  layers::init_affine(r.probe, "probe", cfg.token_dim, 1, init);
  const Tensor patches = to_patches(data.x, data.patch_len);

  BatchLoss loss = [&](Tape& tape, const std::vector<std::size_t>& order, std::size_t first, std::size_t count, Rng& drop) {
    Var tokens = r.encoder.encode(tape, tape.constant(gather_rows(patches, order, first, count)), &drop);
    Var pred = probe_forecast(tape, r.probe, tokens, data.horizon);
    return mse_loss(pred, tape.constant(gather_rows(data.labels, order, first, count)));
  };
  LoopOptions opts{tc.stage1_epochs, tc.batch_size, tc.optimizer(), derive_seed(tc.seed, kStage1Loop), {}};
  r.history = run_training({&r.encoder.params(), &r.probe}, data.size(), loss, opts);
  return r;
}

Tensor encode_tokens(PatchEncoder& encoder, const Tensor& x, std::size_t patch_len) {
  const Tensor patches = to_patches(x, patch_len);
  const std::size_t n = patches.dim(0), k = patches.dim(1), d = encoder.config().token_dim;
  Tensor tokens({n, k, d});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t first = 0; first < n; first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, n - first);
    Tape tape(false);
    Var z = encoder.encode(tape, tape.constant(gather_rows(patches, order, first, count)));
    std::copy(z.value().data().begin(), z.value().data().end(), tokens.data().begin() + first * k * d);
  }
  return tokens;
}

Stage2Result train_stage2(const PreparedData& data, PatchEncoder& encoder, const ForecasterConfig& cfg,
                          const TrainConfig& train, const Stage2Hooks& hooks) {
  train.validate();
  const TrainConfig tc = train.resolved();
  if (cfg.input_dim != encoder.config().token_dim) throw ConfigError("stage 2: forecaster input_dim differs from the encoder token_dim");
  if (cfg.horizon != data.horizon) throw ConfigError("stage 2: forecaster horizon differs from the prepared data");
  const std::uint64_t frozen = encoder.params().hash();
  auto check_frozen = [&](const std::string& when) {
    if (encoder.params().hash() != frozen) {
      throw InvariantError("stage 2: encoder parameters changed " + when + " (hash " + hex64(frozen) + " -> " +
                           hex64(encoder.params().hash()) + ")");
    }
  };
  const Tensor tokens = encode_tokens(encoder, data.x, data.patch_len);
  Stage2Result r{Forecaster(cfg, derive_seed(tc.seed, kForecasterInit)), {}};

  BatchLoss loss = [&](Tape& tape, const std::vector<std::size_t>& order, std::size_t first, std::size_t count, Rng& drop) {
    Var pred = r.forecaster.forward(tape, tape.constant(gather_rows(tokens, order, first, count)), &drop);
    return mse_loss(pred, tape.constant(gather_rows(data.labels, order, first, count)));
  };
  LoopOptions opts{tc.stage2_epochs, tc.batch_size, tc.optimizer(), derive_seed(tc.seed, kStage2Loop),
                   [&](std::size_t epoch, double) {
                     if (hooks.after_epoch) hooks.after_epoch(epoch);
                     check_frozen("during epoch " + std::to_string(epoch + 1));
                   }};
  r.history = run_training({&r.forecaster.params()}, data.size(), loss, opts);
  check_frozen("by the end of training");
  return r;
}

ModelKind TrainedModel::kind() const {
  if (std::holds_alternative<ProposedModel>(model)) return ModelKind::proposed;
  if (std::holds_alternative<Tcn>(model)) return ModelKind::tcn;
  return ModelKind::patchtst;
}

std::size_t TrainedModel::patch_len() const {
  if (const auto* p = std::get_if<ProposedModel>(&model)) return p->encoder.config().patch_len;
  if (const auto* t = std::get_if<Tcn>(&model)) return t->config().patch_len;
  return std::get<PatchTst>(model).config().patch_len;
}

std::size_t TrainedModel::horizon() const {
  if (const auto* p = std::get_if<ProposedModel>(&model)) return p->forecaster.config().horizon;
  if (const auto* t = std::get_if<Tcn>(&model)) return t->config().horizon;
  return std::get<PatchTst>(model).config().horizon;
}

std::size_t TrainedModel::in_features() const {
  if (const auto* p = std::get_if<ProposedModel>(&model)) return p->encoder.config().in_features;
  if (const auto* t = std::get_if<Tcn>(&model)) return t->config().in_features;
  return std::get<PatchTst>(model).config().in_features;
}

nlohmann::json TrainedModel::config_json() const {
  nlohmann::json j{{"model", to_string(kind())}};
  if (const auto* p = std::get_if<ProposedModel>(&model)) {
    j["encoder"] = p->encoder.config();
    j["forecaster"] = p->forecaster.config();
  } else if (const auto* t = std::get_if<Tcn>(&model)) {
    j["tcn"] = t->config();
  } else {
    j["patchtst"] = std::get<PatchTst>(model).config();
  }
  return j;
}

std::string TrainedModel::config_hash() const { return hash_hex(config_json().dump()); }

Tensor TrainedModel::predict(const Tensor& raw_x) {
  if (raw_x.rank() != 3 || raw_x.dim(2) != in_features()) {
    throw ConfigError("model expects [B, T, " + std::to_string(in_features()) + "] inputs, got " + shape_str(raw_x.shape()));
  }
  const std::size_t k = num_patches(raw_x.dim(1), patch_len());
  check_horizon(horizon(), k);
  Tensor x = raw_x;
  standardizer.apply(x);
  const std::size_t n = x.dim(0), m = k - horizon();
  Tensor out({n, m});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t first = 0; first < n; first += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, n - first);
    Tape tape(false);
    Tensor chunk = gather_rows(x, order, first, count);
    Var y;
    if (auto* p = std::get_if<ProposedModel>(&model)) {
      Var tokens = p->encoder.encode(tape, tape.constant(to_patches(chunk, patch_len())));
      y = p->forecaster.forward(tape, tokens);
    } else if (auto* t = std::get_if<Tcn>(&model)) {
      y = t->forward(tape, tape.constant(chunk));
    } else {
      y = std::get<PatchTst>(model).forward(tape, tape.constant(chunk));
    }
    std::copy(y.value().data().begin(), y.value().data().end(), out.data().begin() + first * m);
  }
  return out;
}

BaselineResult train_baseline(const PreparedData& data, const Standardizer& standardizer, ModelKind kind,
                              const ExperimentConfig& cfg) {
  cfg.train.validate();
  const TrainConfig tc = cfg.train.resolved();
  if (kind == ModelKind::proposed) throw ConfigError("train_baseline: model kind must be tcn or patchtst");
  const std::uint64_t init = derive_seed(tc.seed, kBaselineInit);
  LoopOptions opts{tc.baseline_epochs, tc.batch_size, tc.optimizer(), derive_seed(tc.seed, kBaselineLoop), {}};
  if (kind == ModelKind::tcn) {
    if (cfg.tcn.patch_len != data.patch_len || cfg.tcn.horizon != data.horizon) {
      throw ConfigError("tcn: patch_len or horizon differs from the prepared data");
    }
    Tcn m(cfg.tcn, init);
    BatchLoss loss = [&](Tape& tape, const std::vector<std::size_t>& order, std::size_t first, std::size_t count, Rng& drop) {
      Var pred = m.forward(tape, tape.constant(gather_rows(data.x, order, first, count)), &drop);
      return mse_loss(pred, tape.constant(gather_rows(data.labels, order, first, count)));
    };
    LossHistory h = run_training({&m.params()}, data.size(), loss, opts);
    return {TrainedModel{std::move(m), standardizer}, std::move(h)};
  }
  if (cfg.patchtst.patch_len != data.patch_len || cfg.patchtst.horizon != data.horizon) {
    throw ConfigError("patchtst: patch_len or horizon differs from the prepared data");
  }
  PatchTst m(cfg.patchtst, init);
  BatchLoss loss = [&](Tape& tape, const std::vector<std::size_t>& order, std::size_t first, std::size_t count, Rng& drop) {
    Var pred = m.forward(tape, tape.constant(gather_rows(data.x, order, first, count)), &drop);
    return mse_loss(pred, tape.constant(gather_rows(data.labels, order, first, count)));
  };
  LossHistory h = run_training({&m.embedding_params(), &m.backbone().params()}, data.size(), loss, opts);
  return {TrainedModel{std::move(m), standardizer}, std::move(h)};
}

TrainRun train_model(ModelKind kind, const std::vector<SeriesSample>& train_set, const ExperimentConfig& cfg) {
  cfg.validate();
  const Standardizer standardizer = Standardizer::fit(train_set);
  const PreparedData data = prepare_data(train_set, standardizer, cfg.patch_len, cfg.horizon);
  if (kind != ModelKind::proposed) {
    BaselineResult b = train_baseline(data, standardizer, kind, cfg);
    return {std::move(b.model), {}, std::move(b.history)};
  }
  Stage1Result s1 = train_stage1(data, cfg.encoder, cfg.train);
  Stage2Result s2 = train_stage2(data, s1.encoder, cfg.forecaster, cfg.train);
  return {TrainedModel{ProposedModel{std::move(s1.encoder), std::move(s2.forecaster)}, standardizer},
          std::move(s1.history), std::move(s2.history)};
}

TrainRun train_with_encoder(PatchEncoder encoder, const std::vector<SeriesSample>& train_set, const ExperimentConfig& cfg) {
  cfg.validate();
  const EncoderConfig& e = encoder.config();
  if (e.patch_len != cfg.patch_len || e.in_features != cfg.in_features || e.token_dim != cfg.forecaster.input_dim) {
    throw ConfigError("pretrained encoder (P=" + std::to_string(e.patch_len) + ", F=" + std::to_string(e.in_features) +
                      ", D=" + std::to_string(e.token_dim) + ") does not fit the experiment config");
  }
  const Standardizer standardizer = Standardizer::fit(train_set);
  const PreparedData data = prepare_data(train_set, standardizer, cfg.patch_len, cfg.horizon);
  Stage2Result s2 = train_stage2(data, encoder, cfg.forecaster, cfg.train);
  return {TrainedModel{ProposedModel{std::move(encoder), std::move(s2.forecaster)}, standardizer}, {}, std::move(s2.history)};
}

ErrorPair mse_mae(const std::vector<std::vector<double>>& preds, const std::vector<std::vector<double>>& targets) {
  if (preds.size() != targets.size()) {
    throw DimensionError("mse_mae: " + std::to_string(preds.size()) + " prediction rows vs " +
                         std::to_string(targets.size()) + " target rows");
  }
  double se = 0.0, ae = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != targets[i].size()) {
      throw DimensionError("mse_mae: row " + std::to_string(i) + " has " + std::to_string(preds[i].size()) +
                           " predictions for " + std::to_string(targets[i].size()) + " targets");
    }
    for (std::size_t j = 0; j < preds[i].size(); ++j) {
      const double e = preds[i][j] - targets[i][j];
      se += e * e;
      ae += std::abs(e);
    }
    count += preds[i].size();
  }
  if (count == 0) throw ConfigError("mse_mae: empty prediction set");
  return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

ErrorPair mse_mae(const Tensor& preds, const Tensor& targets) {
  if (preds.shape() != targets.shape()) {
    throw DimensionError("mse_mae: shapes " + shape_str(preds.shape()) + " and " + shape_str(targets.shape()) + " differ");
  }
  if (preds.size() == 0) throw ConfigError("mse_mae: empty prediction set");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = preds[i] - targets[i];
    se += e * e;
    ae += std::abs(e);
  }
  return {se / static_cast<double>(preds.size()), ae / static_cast<double>(preds.size())};
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"model_name", r.model_name},         {"mse", r.mse},
                     {"mae", r.mae},                       {"num_eval_pairs", r.num_eval_pairs},
                     {"config_hash", r.config_hash},       {"dataset_digest", r.dataset_digest}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.model_name = j.at("model_name").get<std::string>();
  r.mse = j.at("mse").get<double>();
  r.mae = j.at("mae").get<double>();
  r.num_eval_pairs = j.at("num_eval_pairs").get<std::size_t>();
  r.config_hash = j.value("config_hash", std::string{});
  r.dataset_digest = j.value("dataset_digest", std::string{});
}

std::string dataset_digest(const std::vector<SeriesSample>& samples) {
  Fnv1a h;
  for (const SeriesSample& s : samples) {
    for (std::size_t d : s.x.shape()) {
      const std::uint64_t d64 = d;
      h.update(&d64, sizeof d64);
    }
    h.update(s.x.data().data(), s.x.size() * sizeof(double));
    h.update(s.y.data(), s.y.size() * sizeof(double));
  }
  return hex64(h.value());
}

MetricsReport evaluate(TrainedModel& model, const std::vector<SeriesSample>& samples) {
  if (samples.empty()) throw ConfigError("evaluate: dataset is empty");
  const Shape s = samples.front().x.shape();
  if (s.size() != 2 || s[1] != model.in_features()) {
    throw ConfigError("evaluate: dataset samples " + shape_str(s) + " do not match the model's " +
                      std::to_string(model.in_features()) + " input features");
  }
  if (s[0] < model.patch_len() || s[0] / model.patch_len() <= model.horizon()) {
    throw ConfigError("evaluate: sequence length " + std::to_string(s[0]) + " too short for P=" +
                      std::to_string(model.patch_len()) + ", h=" + std::to_string(model.horizon()));
  }
  const PreparedData raw = prepare_data(samples, Standardizer::identity(s[1]), model.patch_len(), model.horizon());
  const Tensor preds = model.predict(raw.x);
  const ErrorPair e = mse_mae(preds, raw.labels);
  return {to_string(model.kind()), e.mse, e.mae, preds.size(), model.config_hash(), dataset_digest(samples)};
}

MetricsReport evaluate_persistence(const std::vector<SeriesSample>& samples, std::size_t patch_len, std::size_t horizon) {
  if (samples.empty()) throw ConfigError("evaluate: dataset is empty");
  const PreparedData raw = prepare_data(samples, Standardizer::identity(samples.front().x.dim(1)), patch_len, horizon);
  const std::size_t n = raw.size(), m = raw.labels.dim(1);
  Tensor preds({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) preds.at(i, j) = raw.targets.at(i, j);
  const ErrorPair e = mse_mae(preds, raw.labels);
  const nlohmann::json cfg{{"model", "persistence"}, {"patch_len", patch_len}, {"horizon", horizon}};
  return {"persistence", e.mse, e.mae, preds.size(), hash_hex(cfg.dump()), dataset_digest(samples)};
}

}  // namespace patchtok

#include "patchtok/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "patchtok/data_io.hpp"
#include "patchtok/errors.hpp"
#include "patchtok/hash.hpp"
#include "patchtok/log.hpp"

namespace patchtok::cli {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kUsage;
  if (dynamic_cast<const IoError*>(&e)) return kIo;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ParseError*>(&e)) return kFormat;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return kConfig;
  if (dynamic_cast<const InvariantError*>(&e) || dynamic_cast<const OracleError*>(&e)) return kInvariant;
  return kFailure;
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"command", m.command},         {"argv", m.argv},
                     {"config", m.config},           {"seeds", m.seeds},
                     {"dataset_digests", m.dataset_digests}, {"tool_version", m.tool_version},
                     {"started", m.started},         {"finished", m.finished},
                     {"outputs", m.outputs}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  m.command = j.at("command").get<std::string>();
  m.argv = j.value("argv", std::vector<std::string>{});
  m.config = j.value("config", nlohmann::json::object());
  m.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
  m.dataset_digests = j.value("dataset_digests", std::map<std::string, std::string>{});
  m.tool_version = j.value("tool_version", std::string{});
  m.started = j.value("started", std::string{});
  m.finished = j.value("finished", std::string{});
  m.outputs = j.value("outputs", std::vector<std::string>{});
}

std::vector<MetricsReport> rank_reports(std::vector<MetricsReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const MetricsReport& a, const MetricsReport& b) { return a.mse < b.mse; });
  return reports;
}

namespace {

std::string full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string comparison_text(const std::vector<MetricsReport>& ranked) {
  std::ostringstream ss;
  ss << std::left << std::setw(6) << "rank" << std::setw(14) << "model" << std::setw(12) << "mse" << std::setw(12) << "mae"
     << "pairs\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const MetricsReport& r = ranked[i];
    char mse[32], mae[32];
    std::snprintf(mse, sizeof mse, "%.6f", r.mse);
    std::snprintf(mae, sizeof mae, "%.6f", r.mae);
    ss << std::left << std::setw(6) << i + 1 << std::setw(14) << r.model_name << std::setw(12) << mse << std::setw(12) << mae
       << r.num_eval_pairs << "\n";
  }
  return ss.str();
}

std::string comparison_csv(const std::vector<MetricsReport>& ranked) {
  std::ostringstream ss;
  ss << "model,mse,mae,num_eval_pairs,config_hash,dataset_digest\n";
  for (const MetricsReport& r : ranked) {
    ss << r.model_name << "," << full(r.mse) << "," << full(r.mae) << "," << r.num_eval_pairs << "," << r.config_hash << ","
       << r.dataset_digest << "\n";
  }
  return ss.str();
}

std::vector<MetricsReport> parse_comparison_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::vector<MetricsReport> out;
  if (!std::getline(in, line)) throw FormatError("comparison csv is empty");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw ParseError("expected 6 comparison columns", line_no, 1);
    MetricsReport r;
    r.model_name = f[0];
    try {
      r.mse = std::stod(f[1]);
      r.mae = std::stod(f[2]);
      r.num_eval_pairs = std::stoull(f[3]);
    } catch (const std::exception&) {
      throw ParseError("bad number in comparison row", line_no, 1);
    }
    r.config_hash = f[4];
    r.dataset_digest = f[5];
    out.push_back(std::move(r));
  }
  return out;
}

std::string loss_csv(const LossHistory& history) {
  std::ostringstream ss;
  ss << "epoch,loss\n";
  for (std::size_t i = 0; i < history.epoch_loss.size(); ++i) ss << i + 1 << "," << full(history.epoch_loss[i]) << "\n";
  return ss.str();
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed while writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& path) {
  const nlohmann::json j = nlohmann::json::parse(read_text(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError("'" + path.string() + "' is not a JSON object");
  return j;
}

// A config file is either a plain config object or a RunManifest written by
// an earlier run, in which case its resolved config is replayed.
nlohmann::json load_config(const std::optional<std::string>& path) {
  if (!path) return nlohmann::json::object();
  nlohmann::json j = read_json(*path);
  if (j.contains("command") && j.contains("config") && j.contains("tool_version")) return j.at("config");
  return j;
}

template <class T>
void merge_json(const nlohmann::json& j, const char* key, T& target) {
  if (!j.contains(key)) return;
  try {
    from_json(j.at(key), target);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config '") + key + "': " + e.what());
  }
}

struct Session {
  std::ostream& out;
  RunManifest manifest;

  void finish(const fs::path& dir) {
    manifest.finished = utc_now();
    const fs::path p = dir / "run_manifest.json";
    manifest.outputs.push_back(p.string());
    write_text(p, nlohmann::json(manifest).dump(2) + "\n");
  }
  void output(const fs::path& p) { manifest.outputs.push_back(p.string()); }
};

std::vector<SeriesSample> desk_subset(std::vector<SeriesSample> samples, const TrainConfig& train) {
  if (train.desk_scale && samples.size() > train.desk_scale->num_samples) {
    log_info("desk scale: using the first " + std::to_string(train.desk_scale->num_samples) + " of " +
             std::to_string(samples.size()) + " samples");
    samples.resize(train.desk_scale->num_samples);
  }
  return samples;
}

// --- generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string out;
  std::optional<std::string> config;
  std::optional<std::size_t> n, t, threads;
  std::optional<std::uint64_t> seed, test_seed;
  std::optional<double> alpha1, alpha2, alpha3, sigma1, sigma2, sigma_y, rho;
  bool desk_scale = false;
};

void cmd_generate(const GenerateArgs& a, Session& s) {
  const nlohmann::json file = load_config(a.config);
  SynthConfig train;
  merge_json(file, "synth", train);
  std::uint64_t test_seed = file.value("test_seed", std::uint64_t{101});
  if (a.desk_scale) train.num_samples = DeskScale{}.num_samples;
  if (a.n) train.num_samples = *a.n;
  if (a.t) train.seq_len = *a.t;
  if (a.seed) train.seed = *a.seed;
  if (a.test_seed) test_seed = *a.test_seed;
  if (a.alpha1) train.alpha1 = *a.alpha1;
  if (a.alpha2) train.alpha2 = *a.alpha2;
  if (a.alpha3) train.alpha3 = *a.alpha3;
  if (a.sigma1) train.sigma1 = *a.sigma1;
  if (a.sigma2) train.sigma2 = *a.sigma2;
  if (a.sigma_y) train.sigma_y = *a.sigma_y;
  if (a.rho) train.rho = *a.rho;
  train.validate();
  SynthConfig test = train;
  test.seed = test_seed;
  const std::size_t threads = a.threads.value_or(1);

  s.manifest.config = {{"synth", train}, {"test_seed", test_seed}, {"threads", threads}};
  s.manifest.seeds = {{"train", train.seed}, {"test", test_seed}};
  const fs::path dir(a.out);
  for (const auto& [name, cfg] : {std::pair{"train", train}, std::pair{"test", test}}) {
    const auto samples = generate_dataset(cfg, threads);
    const fs::path p = dir / (std::string(name) + ".pcds");
    save_dataset(samples, synthetic_manifest(cfg), p);
    s.output(p);
    s.manifest.dataset_digests[name] = dataset_digest(samples);
    s.out << "wrote " << p.string() << " (N=" << cfg.num_samples << ", T=" << cfg.seq_len << ", seed=" << cfg.seed << ")\n";
  }
  s.finish(dir);
}

// --- train ------------------------------------------------------------------

struct ExperimentArgs {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> horizon, patch_len, batch_size, stage1_epochs, stage2_epochs, baseline_epochs;
  std::optional<double> lr;
  bool desk_scale = false;
};

ExperimentConfig resolve_experiment(const nlohmann::json& file, const ExperimentArgs& a, std::size_t features) {
  ExperimentConfig cfg;
  merge_json(file, "experiment", cfg);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.desk_scale) cfg.train.desk_scale = DeskScale{};
  if (a.horizon) cfg.horizon = *a.horizon;
  if (a.patch_len) cfg.patch_len = *a.patch_len;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  // Explicit epoch flags win over the desk-scale counts as well.
  auto epochs = [&](const std::optional<std::size_t>& v, std::size_t TrainConfig::*full, std::size_t DeskScale::*desk) {
    if (!v) return;
    cfg.train.*full = *v;
    if (cfg.train.desk_scale) (*cfg.train.desk_scale).*desk = *v;
  };
  epochs(a.stage1_epochs, &TrainConfig::stage1_epochs, &DeskScale::stage1_epochs);
  epochs(a.stage2_epochs, &TrainConfig::stage2_epochs, &DeskScale::stage2_epochs);
  epochs(a.baseline_epochs, &TrainConfig::baseline_epochs, &DeskScale::baseline_epochs);
  if (a.lr) cfg.train.lr = *a.lr;
  cfg.in_features = features;
  cfg.harmonize();
  cfg.validate();
  return cfg;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::optional<std::string> model;
  std::optional<std::string> encoder;
  ExperimentArgs exp;
};

// Trains one model into `dir`, writing checkpoint and loss logs. Partial logs
// are kept when training diverges.
TrainedModel train_into(ModelKind kind, const std::vector<SeriesSample>& samples, const ExperimentConfig& cfg,
                        const std::optional<PatchEncoder>& pretrained, const fs::path& dir, Session& s) {
  auto write_loss = [&](const fs::path& p, const LossHistory& h) {
    write_text(p, loss_csv(h));
    s.output(p);
  };
  const Standardizer standardizer = Standardizer::fit(samples);
  const PreparedData data = prepare_data(samples, standardizer, cfg.patch_len, cfg.horizon);
  std::optional<TrainedModel> model;
  if (kind == ModelKind::proposed) {
    std::optional<PatchEncoder> encoder = pretrained;
    if (!encoder) {
      try {
        Stage1Result s1 = train_stage1(data, cfg.encoder, cfg.train);
        write_loss(dir / "encoder_loss.csv", s1.history);
        encoder.emplace(std::move(s1.encoder));
      } catch (const DivergenceError& e) {
        write_loss(dir / "encoder_loss.csv", e.history());
        throw;
      }
      save_checkpoint(encoder_checkpoint(*encoder, standardizer), dir / "encoder.pckp");
      s.output(dir / "encoder.pckp");
    }
    try {
      Stage2Result s2 = train_stage2(data, *encoder, cfg.forecaster, cfg.train);
      write_loss(dir / "loss.csv", s2.history);
      model.emplace(TrainedModel{ProposedModel{std::move(*encoder), std::move(s2.forecaster)}, standardizer});
    } catch (const DivergenceError& e) {
      write_loss(dir / "loss.csv", e.history());
      throw;
    }
  } else {
    try {
      BaselineResult b = train_baseline(data, standardizer, kind, cfg);
      write_loss(dir / "loss.csv", b.history);
      model.emplace(std::move(b.model));
    } catch (const DivergenceError& e) {
      write_loss(dir / "loss.csv", e.history());
      throw;
    }
  }
  save_model(*model, dir / "model.pckp");
  s.output(dir / "model.pckp");
  return std::move(*model);
}

std::optional<PatchEncoder> load_encoder(const std::optional<std::string>& path, ExperimentConfig& cfg,
                                         const ExperimentArgs& a) {
  if (!path) return std::nullopt;
  PatchEncoder enc = encoder_from_checkpoint(load_checkpoint(*path));
  if (a.patch_len && *a.patch_len != enc.config().patch_len) {
    throw ConfigError("--patch-len " + std::to_string(*a.patch_len) + " disagrees with the encoder's patch length " +
                      std::to_string(enc.config().patch_len));
  }
  if (enc.config().in_features != cfg.in_features) {
    throw ConfigError("encoder expects " + std::to_string(enc.config().in_features) + " features, dataset has " +
                      std::to_string(cfg.in_features));
  }
  cfg.encoder = enc.config();
  cfg.patch_len = enc.config().patch_len;
  cfg.harmonize();
  cfg.validate();
  return enc;
}

void cmd_train(const TrainArgs& a, Session& s) {
  const nlohmann::json file = load_config(a.exp.config);
  LoadedDataset ds = load_dataset(a.data);
  const ModelKind kind = parse_model_kind(a.model.value_or(file.value("model", std::string("proposed"))));
  ExperimentConfig cfg = resolve_experiment(file, a.exp, ds.manifest.features);
  std::optional<std::string> encoder_path = a.encoder;
  if (!encoder_path && file.contains("encoder") && file.at("encoder").is_string()) encoder_path = file.at("encoder").get<std::string>();
  if (encoder_path && kind != ModelKind::proposed) throw UsageError("--encoder only applies to --model proposed");
  const std::optional<PatchEncoder> pretrained = load_encoder(encoder_path, cfg, a.exp);
  const std::vector<SeriesSample> samples = desk_subset(std::move(ds.samples), cfg.train);

  s.manifest.config = {{"experiment", cfg}, {"model", to_string(kind)}, {"data", a.data},
                       {"encoder", encoder_path ? nlohmann::json(*encoder_path) : nlohmann::json(nullptr)}};
  s.manifest.seeds = {{"train", cfg.train.seed}};
  s.manifest.dataset_digests = {{"train", dataset_digest(samples)}};
  const fs::path dir(a.out);
  fs::create_directories(dir);
  TrainedModel model = train_into(kind, samples, cfg, pretrained, dir, s);
  s.out << "trained " << to_string(kind) << " on " << samples.size() << " samples; checkpoint " << (dir / "model.pckp").string()
        << " (config " << model.config_hash() << ")\n";
  s.finish(dir);
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
  std::string data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> out;
  bool persistence = false;
  std::size_t patch_len = 8;
  std::size_t horizon = 1;
};

void cmd_evaluate(const EvaluateArgs& a, Session& s) {
  if (a.persistence == a.checkpoint.has_value()) throw UsageError("evaluate needs exactly one of --checkpoint or --persistence");
  const LoadedDataset ds = load_dataset(a.data);
  MetricsReport r;
  if (a.checkpoint) {
    TrainedModel model = load_model(*a.checkpoint);
    r = evaluate(model, ds.samples);
    s.manifest.config = {{"checkpoint", *a.checkpoint}, {"checkpoint_digest", file_digest(*a.checkpoint)},
                         {"model", model.config_json()}, {"data", a.data}};
  } else {
    r = evaluate_persistence(ds.samples, a.patch_len, a.horizon);
    s.manifest.config = {{"model", "persistence"}, {"patch_len", a.patch_len}, {"horizon", a.horizon}, {"data", a.data}};
  }
  s.manifest.dataset_digests = {{"eval", r.dataset_digest}};
  const std::string text = nlohmann::json(r).dump(2) + "\n";
  s.out << text;
  if (a.out) {
    const fs::path dir(*a.out);
    write_text(dir / "metrics.json", text);
    s.output(dir / "metrics.json");
    s.finish(dir);
  }
}

// --- compare ----------------------------------------------------------------

struct CompareArgs {
  std::vector<std::string> reports;
  bool end_to_end = false;
  std::optional<std::string> train_data, test_data;
  std::string out;
  ExperimentArgs exp;
};

void write_comparison(const std::vector<MetricsReport>& reports, const fs::path& dir, Session& s) {
  const auto ranked = rank_reports(reports);
  const std::string text = comparison_text(ranked);
  write_text(dir / "comparison.txt", text);
  write_text(dir / "comparison.csv", comparison_csv(ranked));
  s.output(dir / "comparison.txt");
  s.output(dir / "comparison.csv");
  s.out << text;
}

void cmd_compare(const CompareArgs& a, Session& s) {
  const fs::path dir(a.out);
  if (!a.end_to_end) {
    if (a.reports.size() < 2) throw UsageError("compare needs at least two --reports (or --end-to-end)");
    std::vector<MetricsReport> reports;
    for (const std::string& p : a.reports) {
      try {
        reports.push_back(read_json(p).get<MetricsReport>());
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + p + "' is not a metrics report: " + e.what());
      }
    }
    s.manifest.config = {{"reports", a.reports}};
    write_comparison(reports, dir, s);
    s.finish(dir);
    return;
  }

  const nlohmann::json file = load_config(a.exp.config);
  const bool desk = a.exp.desk_scale || (file.contains("experiment") && file["experiment"].contains("train") &&
                                         file["experiment"]["train"].value("desk_scale", nlohmann::json()).is_object());
  std::vector<SeriesSample> train, test;
  if (a.train_data && a.test_data) {
    train = load_dataset(*a.train_data).samples;
    test = load_dataset(*a.test_data).samples;
  } else if (a.train_data || a.test_data) {
    throw UsageError("--train-data and --test-data must be given together");
  } else {
    SynthConfig tr;
    merge_json(file, "synth", tr);
    if (desk && !file.contains("synth")) tr.num_samples = DeskScale{}.num_samples;
    SynthConfig te = tr;
    te.seed = file.value("test_seed", std::uint64_t{101});
    train = generate_dataset(tr);
    test = generate_dataset(te);
    s.manifest.seeds["data_train"] = tr.seed;
    s.manifest.seeds["data_test"] = te.seed;
  }
  if (train.empty() || test.empty()) throw ConfigError("compare: empty dataset");
  ExperimentConfig cfg = resolve_experiment(file, a.exp, train.front().x.dim(1));
  train = desk_subset(std::move(train), cfg.train);
  s.manifest.config = {{"experiment", cfg}, {"end_to_end", true}};
  s.manifest.seeds["train"] = cfg.train.seed;
  s.manifest.dataset_digests = {{"train", dataset_digest(train)}, {"test", dataset_digest(test)}};

  std::vector<MetricsReport> reports;
  for (ModelKind kind : {ModelKind::proposed, ModelKind::tcn, ModelKind::patchtst}) {
    const fs::path sub = dir / to_string(kind);
    fs::create_directories(sub);
    const auto t0 = std::chrono::steady_clock::now();
    TrainedModel model = train_into(kind, train, cfg, std::nullopt, sub, s);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const MetricsReport r = evaluate(model, test);
    const MetricsReport on_train = evaluate(model, train);
    log_info(to_string(kind) + ": trained in " + std::to_string(secs) + " s; train mse " + std::to_string(on_train.mse) +
             ", test mse " + std::to_string(r.mse) + (on_train.mse <= r.mse ? "" : " (train above test)"));
    write_text(sub / "metrics.json", nlohmann::json(r).dump(2) + "\n");
    s.output(sub / "metrics.json");
    reports.push_back(r);
  }
  const MetricsReport persistence = evaluate_persistence(test, cfg.patch_len, cfg.horizon);
  log_info("persistence reference: test mse " + std::to_string(persistence.mse) + ", mae " + std::to_string(persistence.mae));
  write_comparison(reports, dir, s);
  s.finish(dir);
}

// --- electricity-prepare ----------------------------------------------------

struct ElectricityArgs {
  std::optional<std::string> source;
  std::string out;
  std::optional<std::string> config, target_meter, boundary;
  std::vector<std::string> meters;
  std::optional<std::size_t> aux_meters, window, train_stride, test_stride, patch_len, horizon;
};

void cmd_electricity(const ElectricityArgs& a, Session& s) {
  const nlohmann::json file = load_config(a.config);
  ElectricityConfig cfg;
  merge_json(file, "electricity", cfg);
  if (a.source) {
    cfg.source = *a.source;
  } else if (cfg.source.empty()) {
    const char* env = std::getenv("PATCHTOK_ELECTRICITY");
    if (!env || !*env) throw UsageError("electricity-prepare needs --source or PATCHTOK_ELECTRICITY");
    cfg.source = env;
  }
  if (a.target_meter) cfg.target_meter = *a.target_meter;
  if (!a.meters.empty()) cfg.input_meters = a.meters;
  if (a.aux_meters) cfg.auxiliary_meters = *a.aux_meters;
  if (a.window) cfg.window_len = *a.window;
  if (a.train_stride) cfg.train_stride = *a.train_stride;
  if (a.test_stride) cfg.test_stride = *a.test_stride;
  if (a.boundary) cfg.split_boundary = *a.boundary;
  if (a.patch_len) cfg.patch_len = *a.patch_len;
  if (a.horizon) cfg.horizon = *a.horizon;
  cfg.validate();

  const MeterReadings raw = load_electricity(cfg.source);
  const ElectricitySplit split = normalize_and_window(raw, cfg);
  const std::string digest = file_digest(cfg.source);
  const fs::path dir(a.out);
  const nlohmann::json config_json{{"electricity", cfg}, {"stats", split.stats}, {"boundary", format_timestamp(split.boundary)}};
  for (const auto& [name, samples] : {std::pair{"train", &split.train}, std::pair{"test", &split.test}}) {
    DatasetManifest m;
    m.kind = "electricity";
    m.num_samples = samples->size();
    m.seq_len = cfg.window_len;
    m.features = split.stats.meter_ids.size();
    m.source_digest = digest;
    m.config = config_json;
    m.config["split"] = name;
    const fs::path p = dir / (std::string(name) + ".pcds");
    save_dataset(*samples, m, p);
    s.output(p);
    s.manifest.dataset_digests[name] = dataset_digest(*samples);
    s.out << "wrote " << p.string() << " (" << samples->size() << " windows of " << cfg.window_len << " x "
          << m.features << ")\n";
  }
  write_text(dir / "meter_stats.json", nlohmann::json(split.stats).dump(2) + "\n");
  s.output(dir / "meter_stats.json");
  s.manifest.config = nlohmann::json{{"electricity", cfg}};
  s.manifest.dataset_digests["source"] = digest;
  s.finish(dir);
}

void add_experiment_flags(CLI::App* c, ExperimentArgs& a) {
  c->add_option("--config", a.config, "JSON config file or an earlier run_manifest.json");
  c->add_option("--seed", a.seed, "training seed");
  c->add_flag("--desk-scale", a.desk_scale, "N=500, 200 encoder epochs, 100 forecaster/baseline epochs");
  c->add_option("--horizon", a.horizon, "patch-level forecast horizon h")->check(CLI::PositiveNumber);
  c->add_option("--patch-len", a.patch_len, "patch length P")->check(CLI::PositiveNumber);
  c->add_option("--batch-size", a.batch_size)->check(CLI::PositiveNumber);
  c->add_option("--lr", a.lr)->check(CLI::PositiveNumber);
  c->add_option("--stage1-epochs", a.stage1_epochs)->check(CLI::PositiveNumber);
  c->add_option("--stage2-epochs", a.stage2_epochs)->check(CLI::PositiveNumber);
  c->add_option("--baseline-epochs", a.baseline_epochs)->check(CLI::PositiveNumber);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"patchtok: patch-tokenized time series forecasting experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(PATCHTOK_VERSION));
  bool quiet = false, verbose = false;
  app.add_flag("--quiet", quiet, "warnings only");
  app.add_flag("--verbose", verbose, "per-epoch losses");

  GenerateArgs gen;
  CLI::App* g = app.add_subcommand("generate", "write synthetic train (seed 42) and test (seed 101) datasets");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--config", gen.config, "JSON config file or an earlier run_manifest.json");
  g->add_option("--n", gen.n, "samples per dataset")->check(CLI::PositiveNumber);
  g->add_option("--t", gen.t, "sequence length")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "train seed");
  g->add_option("--test-seed", gen.test_seed, "test seed");
  g->add_option("--threads", gen.threads, "generator threads")->check(CLI::PositiveNumber);
  g->add_flag("--desk-scale", gen.desk_scale, "N=500");
  g->add_option("--alpha1", gen.alpha1);
  g->add_option("--alpha2", gen.alpha2);
  g->add_option("--alpha3", gen.alpha3);
  g->add_option("--sigma1", gen.sigma1);
  g->add_option("--sigma2", gen.sigma2);
  g->add_option("--sigma-y", gen.sigma_y);
  g->add_option("--rho", gen.rho);

  TrainArgs tr;
  CLI::App* t = app.add_subcommand("train", "train one model and write its checkpoint and loss log");
  t->add_option("--data", tr.data, "training dataset (.pcds)")->required();
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--model", tr.model, "proposed | tcn | patchtst");
  t->add_option("--encoder", tr.encoder, "reuse a trained encoder checkpoint and run stage 2 only");
  add_experiment_flags(t, tr.exp);

  EvaluateArgs ev;
  CLI::App* e = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
  e->add_option("--data", ev.data, "evaluation dataset (.pcds)")->required();
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint (.pckp)");
  e->add_option("--out", ev.out, "output directory for metrics.json");
  e->add_flag("--persistence", ev.persistence, "score the previous-patch baseline instead of a checkpoint");
  e->add_option("--patch-len", ev.patch_len, "persistence patch length")->check(CLI::PositiveNumber);
  e->add_option("--horizon", ev.horizon, "persistence horizon")->check(CLI::PositiveNumber);

  CompareArgs cp;
  CLI::App* c = app.add_subcommand("compare", "rank evaluation reports, or train and rank all three models");
  c->add_option("--reports", cp.reports, "metrics.json files");
  c->add_flag("--end-to-end", cp.end_to_end, "train proposed, tcn and patchtst, then compare");
  c->add_option("--train-data", cp.train_data);
  c->add_option("--test-data", cp.test_data);
  c->add_option("--out", cp.out, "output directory")->required();
  add_experiment_flags(c, cp.exp);

  ElectricityArgs el;
  CLI::App* x = app.add_subcommand("electricity-prepare", "window and normalize the UCI electricity load file");
  x->add_option("--source", el.source, "LD2011_2014.txt (default: $PATCHTOK_ELECTRICITY)");
  x->add_option("--out", el.out, "output directory")->required();
  x->add_option("--config", el.config);
  x->add_option("--target-meter", el.target_meter);
  x->add_option("--meters", el.meters, "input meters; the target is always feature 0")->delimiter(',');
  x->add_option("--aux-meters", el.aux_meters, "auxiliary meters chosen automatically");
  x->add_option("--window", el.window)->check(CLI::PositiveNumber);
  x->add_option("--train-stride", el.train_stride)->check(CLI::PositiveNumber);
  x->add_option("--test-stride", el.test_stride)->check(CLI::PositiveNumber);
  x->add_option("--boundary", el.boundary, "split timestamp, YYYY-MM-DD HH:MM:SS");
  x->add_option("--patch-len", el.patch_len)->check(CLI::PositiveNumber);
  x->add_option("--horizon", el.horizon)->check(CLI::PositiveNumber);

  std::vector<const char*> argv;
  for (const std::string& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const LogLevel previous = log_level();
  if (quiet) set_log_level(LogLevel::warn);
  if (verbose) set_log_level(LogLevel::debug);
  Session s{out, {}};
  s.manifest.argv = args;
  s.manifest.tool_version = PATCHTOK_VERSION;
  s.manifest.started = utc_now();
  int code = kOk;
  try {
    if (*g) {
      s.manifest.command = "generate";
      cmd_generate(gen, s);
    } else if (*t) {
      s.manifest.command = "train";
      cmd_train(tr, s);
    } else if (*e) {
      s.manifest.command = "evaluate";
      cmd_evaluate(ev, s);
    } else if (*c) {
      s.manifest.command = "compare";
      cmd_compare(cp, s);
    } else if (*x) {
      s.manifest.command = "electricity-prepare";
      cmd_electricity(el, s);
    }
  } catch (const std::exception& ex) {
    code = exit_code_for(ex);
    err << "patchtok " << s.manifest.command << ": " << ex.what() << "\n";
  }
  set_log_level(previous);
  return code;
}

}  // namespace patchtok::cli

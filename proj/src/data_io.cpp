#include "patchtok/data_io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "patchtok/errors.hpp"
#include "patchtok/hash.hpp"
#include "patchtok/log.hpp"

namespace patchtok {

namespace {

constexpr char kDatasetMagic[4] = {'P', 'C', 'D', 'S'};
constexpr char kCheckpointMagic[4] = {'P', 'C', 'K', 'P'};
constexpr std::size_t kMaxRank = 8;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  const std::string& bytes() const noexcept { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }
  std::string_view rest() const noexcept { return std::string_view(buf_).substr(pos_); }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw IntegrityError(origin_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_) + " (" +
                           std::to_string(n) + " bytes needed, " + std::to_string(remaining()) + " left)");
    }
  }
  std::string raw(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint16_t u16(const std::string& what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const std::string& what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const std::string& what) { return le(8, what); }
  double f64(const std::string& what) { return std::bit_cast<double>(le(8, what)); }
  void f64s(double* out, std::size_t n, const std::string& what) {
    need(n * 8, what);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<double>(le(8, what));
  }

 private:
  std::uint64_t le(int n, const std::string& what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed while reading '" + path.string() + "'");
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("failed while writing '" + path.string() + "'");
}

void check_magic(ByteReader& r, const char (&magic)[4], const std::string& origin, const std::string& kind) {
  if (r.remaining() < 4) throw IntegrityError(origin + ": file too short to hold a " + kind + " header");
  const std::string m = r.raw(4, "magic");
  if (m != std::string(magic, 4)) throw FormatError(origin + ": not a " + kind + " file (bad magic bytes)");
}

nlohmann::json parse_json_block(const std::string& text, const std::string& origin) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw IntegrityError(origin + ": embedded JSON header is malformed");
  return j;
}

// a * b * c with an overflow check against `limit`.
bool product_within(std::initializer_list<std::uint64_t> factors, std::uint64_t limit, std::uint64_t& out) {
  unsigned __int128 p = 1;
  for (std::uint64_t f : factors) {
    p *= f;
    if (p > limit) return false;
  }
  out = static_cast<std::uint64_t>(p);
  return true;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  s = s.substr(b, e - b);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

struct Field {
  std::string text;
  std::size_t column;  // 1-based character column of the raw field
};

std::vector<Field> split_fields(const std::string& line) {
  std::vector<Field> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t semi = line.find(';', start);
    const std::size_t end = semi == std::string::npos ? line.size() : semi;
    out.push_back({trim(std::string_view(line).substr(start, end - start)), start + 1});
    if (semi == std::string::npos) break;
    start = semi + 1;
  }
  return out;
}

double parse_decimal(const Field& f, std::size_t line) {
  std::string s = f.text;
  for (char& c : s) {
    if (c == ',') c = '.';
  }
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError("cannot parse meter reading '" + f.text + "'", line, f.column);
  }
  return v;
}

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

std::int64_t year_start(std::int64_t seconds) {
  std::int64_t days = seconds >= 0 ? seconds / 86400 : (seconds - 86399) / 86400;
  std::int64_t y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  return days_from_civil(y, 1, 1) * 86400;
}

}  // namespace

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"schema_version", m.schema_version},
                     {"kind", m.kind},
                     {"num_samples", m.num_samples},
                     {"seq_len", m.seq_len},
                     {"features", m.features},
                     {"seed", m.seed ? nlohmann::json(*m.seed) : nlohmann::json(nullptr)},
                     {"source_digest", m.source_digest},
                     {"config", m.config},
                     {"created", m.created ? nlohmann::json(*m.created) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.schema_version = j.at("schema_version").get<std::uint32_t>();
  m.kind = j.at("kind").get<std::string>();
  m.num_samples = j.at("num_samples").get<std::size_t>();
  m.seq_len = j.at("seq_len").get<std::size_t>();
  m.features = j.at("features").get<std::size_t>();
  m.seed.reset();
  if (j.contains("seed") && !j.at("seed").is_null()) m.seed = j.at("seed").get<std::uint64_t>();
  m.source_digest = j.value("source_digest", std::string{});
  m.config = j.value("config", nlohmann::json::object());
  m.created.reset();
  if (j.contains("created") && !j.at("created").is_null()) m.created = j.at("created").get<std::string>();
}

DatasetManifest synthetic_manifest(const SynthConfig& cfg) {
  DatasetManifest m;
  m.kind = "synthetic";
  m.num_samples = cfg.num_samples;
  m.seq_len = cfg.seq_len;
  m.features = kSynthFeatures;
  m.seed = cfg.seed;
  m.config = cfg;
  return m;
}

// The header JSON carries a digest of every byte that follows it, so damage to
// the float payload is caught as well as damage to the structure.
constexpr const char* kPayloadDigestKey = "payload_digest";

std::string dataset_header(const DatasetManifest& manifest, const std::string& digest) {
  nlohmann::json j = manifest;
  j[kPayloadDigestKey] = digest;
  return j.dump();
}

// Removes and checks the digest written by save_dataset / save_checkpoint.
void verify_payload(nlohmann::json& header, std::string_view payload, const std::string& origin) {
  const auto it = header.find(kPayloadDigestKey);
  if (it == header.end() || !it->is_string()) throw IntegrityError(origin + ": header has no payload digest");
  const std::string expected = it->get<std::string>();
  header.erase(it);
  if (hash_hex(payload) != expected) throw IntegrityError(origin + ": payload digest mismatch, the file is corrupted");
}

std::size_t dataset_file_size(const DatasetManifest& manifest) {
  const std::string header = dataset_header(manifest, hex64(0));
  return 4 + 2 + 4 + header.size() + manifest.num_samples * manifest.seq_len * (manifest.features + 1) * sizeof(double);
}

void save_dataset(const std::vector<SeriesSample>& samples, const DatasetManifest& manifest,
                  const std::filesystem::path& path) {
  if (manifest.num_samples != samples.size()) {
    throw IntegrityError("save_dataset: manifest declares " + std::to_string(manifest.num_samples) + " samples but " +
                         std::to_string(samples.size()) + " were given");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].x.shape() != Shape{manifest.seq_len, manifest.features} || samples[i].y.size() != manifest.seq_len) {
      throw IntegrityError("save_dataset: sample " + std::to_string(i) + " does not match the manifest's T=" +
                           std::to_string(manifest.seq_len) + ", F=" + std::to_string(manifest.features));
    }
  }
  ByteWriter payload;
  for (const SeriesSample& s : samples)
    for (double v : s.x.data()) payload.f64(v);
  for (const SeriesSample& s : samples)
    for (double v : s.y) payload.f64(v);
  const std::string header = dataset_header(manifest, hash_hex(payload.bytes()));
  ByteWriter w;
  w.raw(kDatasetMagic, 4);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header.data(), header.size());
  w.raw(payload.bytes().data(), payload.bytes().size());
  write_file(path, w.bytes());
}

LoadedDataset load_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string origin = path.string();
  ByteReader r(bytes, origin);
  check_magic(r, kDatasetMagic, origin, "PCDS dataset");
  const std::uint16_t version = r.u16("version");
  if (version != kDatasetVersion) {
    throw VersionError(origin + ": dataset version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kDatasetVersion) + ")");
  }
  const std::uint32_t header_len = r.u32("manifest length");
  nlohmann::json j = parse_json_block(r.raw(header_len, "manifest"), origin);
  verify_payload(j, r.rest(), origin);
  LoadedDataset out;
  try {
    out.manifest = j.get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(origin + ": manifest is incomplete: " + e.what());
  }
  const DatasetManifest& m = out.manifest;
  if (m.schema_version != version) throw IntegrityError(origin + ": manifest schema_version disagrees with the file header");
  std::uint64_t x_count = 0, y_count = 0;
  if (!product_within({m.num_samples, m.seq_len, m.features}, r.remaining() / 8, x_count) ||
      !product_within({m.num_samples, m.seq_len}, r.remaining() / 8, y_count) || (x_count + y_count) * 8 != r.remaining()) {
    throw IntegrityError(origin + ": payload of " + std::to_string(r.remaining()) + " bytes does not match N=" +
                         std::to_string(m.num_samples) + ", T=" + std::to_string(m.seq_len) + ", F=" +
                         std::to_string(m.features));
  }
  out.samples.resize(m.num_samples);
  for (SeriesSample& s : out.samples) {
    s.x = Tensor({m.seq_len, m.features});
    r.f64s(s.x.data().data(), s.x.size(), "inputs");
  }
  for (SeriesSample& s : out.samples) {
    s.y.resize(m.seq_len);
    r.f64s(s.y.data(), s.y.size(), "targets");
  }
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (ckpt.config.contains(kPayloadDigestKey)) throw ConfigError(std::string("checkpoint config may not use the key ") + kPayloadDigestKey);
  ByteWriter payload;
  payload.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    payload.u32(static_cast<std::uint32_t>(name.size()));
    payload.raw(name.data(), name.size());
    payload.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) payload.u64(d);
    for (double v : t.data()) payload.f64(v);
  }
  nlohmann::json config = ckpt.config;
  config[kPayloadDigestKey] = hash_hex(payload.bytes());
  const std::string header = config.dump();
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header.data(), header.size());
  w.raw(payload.bytes().data(), payload.bytes().size());
  write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string origin = path.string();
  ByteReader r(bytes, origin);
  check_magic(r, kCheckpointMagic, origin, "PCKP checkpoint");
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw VersionError(origin + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config = parse_json_block(r.raw(r.u32("config length"), "config"), origin);
  verify_payload(c.config, r.rest(), origin);
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32("tensor name length"), "tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > kMaxRank) throw IntegrityError(origin + ": tensor '" + name + "' claims rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (std::size_t& d : shape) {
      d = r.u64("tensor dims");
      if (!product_within({n, d}, r.remaining() / 8, n)) {
        throw IntegrityError(origin + ": tensor '" + name + "' is larger than the remaining file");
      }
    }
    Tensor t(shape);
    r.f64s(t.data().data(), t.size(), "tensor values");
    if (!c.tensors.emplace(std::move(name), std::move(t)).second) throw IntegrityError(origin + ": duplicate tensor name");
  }
  if (r.remaining() != 0) throw IntegrityError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  return c;
}

namespace {

void add_prefixed(Checkpoint& c, const std::string& prefix, const ParamSet& ps) {
  for (const auto& [name, p] : ps) c.tensors.emplace(prefix + "/" + name, p.value);
}

ParamSet take_prefixed(const Checkpoint& c, const std::string& prefix) {
  ParamSet ps;
  const std::string pre = prefix + "/";
  for (const auto& [name, t] : c.tensors) {
    if (name.compare(0, pre.size(), pre) == 0) ps.add(name.substr(pre.size()), t);
  }
  return ps;
}

template <class F>
auto with_format_errors(F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is malformed: ") + e.what());
  }
}

}  // namespace

Checkpoint to_checkpoint(const TrainedModel& model) {
  Checkpoint c;
  c.config = model.config_json();
  c.config["standardizer"] = model.standardizer;
  if (const auto* p = std::get_if<ProposedModel>(&model.model)) {
    add_prefixed(c, "encoder", p->encoder.params());
    add_prefixed(c, "forecaster", p->forecaster.params());
  } else if (const auto* t = std::get_if<Tcn>(&model.model)) {
    add_prefixed(c, "tcn", t->params());
  } else {
    const auto& pt = std::get<PatchTst>(model.model);
    add_prefixed(c, "embed", pt.embedding_params());
    add_prefixed(c, "backbone", pt.backbone().params());
  }
  return c;
}

TrainedModel from_checkpoint(const Checkpoint& ckpt) {
  return with_format_errors([&]() -> TrainedModel {
    const ModelKind kind = parse_model_kind(ckpt.config.at("model").get<std::string>());
    const Standardizer st = ckpt.config.at("standardizer").get<Standardizer>();
    switch (kind) {
      case ModelKind::proposed:
        return {ProposedModel{PatchEncoder(ckpt.config.at("encoder").get<EncoderConfig>(), take_prefixed(ckpt, "encoder")),
                              Forecaster(ckpt.config.at("forecaster").get<ForecasterConfig>(), take_prefixed(ckpt, "forecaster"))},
                st};
      case ModelKind::tcn:
        return {Tcn(ckpt.config.at("tcn").get<TcnConfig>(), take_prefixed(ckpt, "tcn")), st};
      case ModelKind::patchtst:
        return {PatchTst(ckpt.config.at("patchtst").get<PatchTstConfig>(), take_prefixed(ckpt, "embed"),
                         take_prefixed(ckpt, "backbone")),
                st};
    }
    throw ConfigError("unknown model kind in checkpoint");
  });
}

Checkpoint encoder_checkpoint(const PatchEncoder& encoder, const Standardizer& standardizer) {
  Checkpoint c;
  c.config = nlohmann::json{{"model", "encoder"}, {"encoder", encoder.config()}, {"standardizer", standardizer}};
  add_prefixed(c, "encoder", encoder.params());
  return c;
}

PatchEncoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  return with_format_errors([&] {
    if (!ckpt.config.contains("encoder")) throw ConfigError("checkpoint holds no patch encoder");
    return PatchEncoder(ckpt.config.at("encoder").get<EncoderConfig>(), take_prefixed(ckpt, "encoder"));
  });
}

void save_model(const TrainedModel& model, const std::filesystem::path& path) { save_checkpoint(to_checkpoint(model), path); }

TrainedModel load_model(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

std::string file_digest(const std::filesystem::path& path) { return hash_hex(read_file(path)); }

std::int64_t parse_timestamp(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char tail = 0;
  if (text.size() != 19 || std::sscanf(text.c_str(), "%4d-%2d-%2d %2d:%2d:%2d%c", &y, &mo, &d, &h, &mi, &s, &tail) != 6 ||
      text[4] != '-' || text[7] != '-' || text[10] != ' ' || text[13] != ':' || text[16] != ':' || mo < 1 || mo > 12 ||
      d < 1 || d > 31 || h > 23 || mi > 59 || s > 59 || h < 0 || mi < 0 || s < 0) {
    throw ConfigError("timestamp '" + text + "' is not YYYY-MM-DD HH:MM:SS");
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 + s;
}

std::string format_timestamp(std::int64_t seconds) {
  const std::int64_t days = seconds >= 0 ? seconds / 86400 : (seconds - 86399) / 86400;
  const std::int64_t rem = seconds - days * 86400;
  std::int64_t y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02u %02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>(rem / 60 % 60), static_cast<long long>(rem % 60));
  return buf;
}

std::vector<double> parse_meter_values(const std::string& row, std::size_t line, std::int64_t* timestamp) {
  const std::vector<Field> fields = split_fields(row);
  if (fields.size() < 2) throw ParseError("expected a timestamp and at least one reading", line, 1);
  if (timestamp) {
    try {
      *timestamp = parse_timestamp(fields[0].text);
    } catch (const ConfigError&) {
      throw ParseError("bad timestamp '" + fields[0].text + "'", line, fields[0].column);
    }
  }
  std::vector<double> values;
  values.reserve(fields.size() - 1);
  for (std::size_t i = 1; i < fields.size(); ++i) values.push_back(parse_decimal(fields[i], line));
  return values;
}

MeterReadings parse_electricity(std::istream& in) {
  MeterReadings out;
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) throw ParseError("empty file: expected a header row", 1, 1);
  const std::vector<Field> header = split_fields(line);
  if (header.size() < 2) throw ParseError("header must name at least one meter", 1, 1);
  for (std::size_t i = 1; i < header.size(); ++i) out.meter_ids.push_back(header[i].text);
  const std::size_t meters = out.meter_ids.size();
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::int64_t ts = 0;
    std::vector<double> row = parse_meter_values(line, line_no, &ts);
    if (row.size() != meters) {
      throw ParseError("expected " + std::to_string(meters) + " readings, found " + std::to_string(row.size()), line_no,
                       row.size() < meters ? line.size() + 1 : split_fields(line)[meters + 1].column);
    }
    out.timestamps.push_back(ts);
    values.insert(values.end(), row.begin(), row.end());
  }
  if (out.timestamps.empty()) throw ParseError("no data rows after the header", line_no + 1, 1);
  out.values = Tensor({out.timestamps.size(), meters}, std::move(values));
  return out;
}

MeterReadings load_electricity(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open electricity source '" + path.string() + "'");
  return parse_electricity(in);
}

void ElectricityConfig::validate() const {
  if (window_len < patch_len || patch_len < 1) throw ConfigError("electricity: window_len must be >= patch_len >= 1");
  if (train_stride < 1 || test_stride < 1) throw ConfigError("electricity: strides must be >= 1");
  check_horizon(horizon, window_len / patch_len);
}

void to_json(nlohmann::json& j, const ElectricityConfig& c) {
  j = nlohmann::json{{"source", c.source},
                     {"target_meter", c.target_meter},
                     {"input_meters", c.input_meters},
                     {"auxiliary_meters", c.auxiliary_meters},
                     {"window_len", c.window_len},
                     {"train_stride", c.train_stride},
                     {"test_stride", c.test_stride},
                     {"split_boundary", c.split_boundary ? nlohmann::json(*c.split_boundary) : nlohmann::json(nullptr)},
                     {"patch_len", c.patch_len},
                     {"horizon", c.horizon}};
}

void from_json(const nlohmann::json& j, ElectricityConfig& c) {
  c.source = j.value("source", c.source);
  c.target_meter = j.value("target_meter", c.target_meter);
  c.input_meters = j.value("input_meters", c.input_meters);
  c.auxiliary_meters = j.value("auxiliary_meters", c.auxiliary_meters);
  c.window_len = j.value("window_len", c.window_len);
  c.train_stride = j.value("train_stride", c.train_stride);
  c.test_stride = j.value("test_stride", c.test_stride);
  if (j.contains("split_boundary")) {
    c.split_boundary.reset();
    if (!j.at("split_boundary").is_null()) c.split_boundary = j.at("split_boundary").get<std::string>();
  }
  c.patch_len = j.value("patch_len", c.patch_len);
  c.horizon = j.value("horizon", c.horizon);
}

void to_json(nlohmann::json& j, const MeterStats& s) {
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& [id, reason] : s.excluded) excluded.push_back({{"meter", id}, {"reason", reason}});
  j = nlohmann::json{{"meter_ids", s.meter_ids}, {"mean", s.mean}, {"stddev", s.stddev}, {"excluded", excluded}};
}

std::size_t window_count(std::size_t rows, std::size_t window, std::size_t stride) {
  return rows < window ? 0 : (rows - window) / stride + 1;
}

ElectricitySplit normalize_and_window(const MeterReadings& raw, const ElectricityConfig& cfg) {
  cfg.validate();
  const std::size_t rows = raw.timestamps.size(), meters = raw.meter_ids.size();
  if (raw.values.shape() != Shape{rows, meters}) throw DimensionError("electricity: readings do not match timestamps and meters");
  for (std::size_t i = 1; i < rows; ++i) {
    if (raw.timestamps[i] <= raw.timestamps[i - 1]) {
      throw ConfigError("electricity: timestamps are not strictly increasing at row " + std::to_string(i + 1));
    }
  }
  if (rows == 0) throw ConfigError("electricity: no readings");
  ElectricitySplit out;
  out.boundary = cfg.split_boundary ? parse_timestamp(*cfg.split_boundary) : year_start(raw.timestamps.back() - 1);
  std::size_t train_rows = 0;
  while (train_rows < rows && raw.timestamps[train_rows] < out.boundary) ++train_rows;
  std::size_t test_begin = train_rows;
  while (test_begin < rows && raw.timestamps[test_begin] <= out.boundary) ++test_begin;
  const std::size_t test_rows = rows - test_begin;

  auto column_stats = [&](std::size_t m) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < train_rows; ++r) mu += raw.values.at(r, m);
    mu /= static_cast<double>(std::max<std::size_t>(train_rows, 1));
    for (std::size_t r = 0; r < train_rows; ++r) var += (raw.values.at(r, m) - mu) * (raw.values.at(r, m) - mu);
    return std::pair{mu, std::sqrt(var / static_cast<double>(std::max<std::size_t>(train_rows, 1)))};
  };
  auto is_constant = [](double sd) { return !(sd > 1e-12); };
  auto find_meter = [&](const std::string& id) {
    for (std::size_t m = 0; m < meters; ++m)
      if (raw.meter_ids[m] == id) return m;
    throw ConfigError("electricity: meter '" + id + "' is not in the source file");
  };
  std::vector<bool> excluded(meters, false);
  auto exclude = [&](std::size_t m) {
    if (excluded[m]) return;
    excluded[m] = true;
    const std::string reason = "zero variance on the training split";
    log_warn("electricity: excluding meter " + raw.meter_ids[m] + ": " + reason);
    out.stats.excluded.emplace_back(raw.meter_ids[m], reason);
  };

  std::size_t target = meters;
  if (!cfg.target_meter.empty()) {
    target = find_meter(cfg.target_meter);
    if (is_constant(column_stats(target).second)) {
      throw ConfigError("electricity: target meter '" + cfg.target_meter + "' has zero variance on the training split");
    }
  } else {
    for (std::size_t m = 0; m < meters && target == meters; ++m) {
      if (is_constant(column_stats(m).second)) {
        exclude(m);
      } else {
        target = m;
      }
    }
    if (target == meters) throw ConfigError("electricity: every meter has zero variance on the training split");
  }

  std::vector<std::size_t> features{target};
  if (!cfg.input_meters.empty()) {
    for (const std::string& id : cfg.input_meters) {
      const std::size_t m = find_meter(id);
      if (m == target) continue;
      if (is_constant(column_stats(m).second)) {
        exclude(m);
      } else {
        features.push_back(m);
      }
    }
  } else {
    for (std::size_t step = 1; step < meters && features.size() < cfg.auxiliary_meters + 1; ++step) {
      const std::size_t m = (target + step) % meters;
      if (excluded[m]) continue;
      if (is_constant(column_stats(m).second)) {
        exclude(m);
      } else {
        features.push_back(m);
      }
    }
  }
  for (std::size_t m : features) {
    const auto [mu, sd] = column_stats(m);
    out.stats.meter_ids.push_back(raw.meter_ids[m]);
    out.stats.mean.push_back(mu);
    out.stats.stddev.push_back(sd);
  }

  const std::size_t n_train = window_count(train_rows, cfg.window_len, cfg.train_stride);
  const std::size_t n_test = window_count(test_rows, cfg.window_len, cfg.test_stride);
  if (n_train == 0 || n_test == 0) {
    throw ConfigError("electricity: need at least one window on each side of the split boundary " +
                      format_timestamp(out.boundary) + " (train rows " + std::to_string(train_rows) + ", test rows " +
                      std::to_string(test_rows) + ", window " + std::to_string(cfg.window_len) + ")");
  }
  const std::size_t f = features.size();
  auto make_window = [&](std::size_t first_row) {
    SeriesSample s{Tensor({cfg.window_len, f}), std::vector<double>(cfg.window_len)};
    for (std::size_t t = 0; t < cfg.window_len; ++t) {
      for (std::size_t j = 0; j < f; ++j) {
        s.x.at(t, j) = (raw.values.at(first_row + t, features[j]) - out.stats.mean[j]) / out.stats.stddev[j];
      }
      s.y[t] = s.x.at(t, 0);
    }
    return s;
  };
  for (std::size_t w = 0; w < n_train; ++w) {
    out.train.push_back(make_window(w * cfg.train_stride));
    out.train_window_starts.push_back(raw.timestamps[w * cfg.train_stride]);
  }
  for (std::size_t w = 0; w < n_test; ++w) {
    const std::size_t first = test_begin + w * cfg.test_stride;
    out.test.push_back(make_window(first));
    out.test_window_starts.push_back(raw.timestamps[first]);
    out.test_window_ends.push_back(raw.timestamps[first + cfg.window_len - 1]);
  }
  log_info("electricity: " + std::to_string(n_train) + " train and " + std::to_string(n_test) + " test windows, boundary " +
           format_timestamp(out.boundary));
  return out;
}

}  // namespace patchtok

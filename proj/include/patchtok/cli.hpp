#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchtok/training.hpp"

namespace patchtok::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
  kNumerical = 5,
  kConfig = 6,
  kInvariant = 7,
};

int exit_code_for(const std::exception& e);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();  // every resolved value
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> dataset_digests;
  std::string tool_version;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

// Reports sorted by MSE; ties keep their input order.
std::vector<MetricsReport> rank_reports(std::vector<MetricsReport> reports);
std::string comparison_text(const std::vector<MetricsReport>& ranked);
std::string comparison_csv(const std::vector<MetricsReport>& ranked);
std::vector<MetricsReport> parse_comparison_csv(const std::string& csv);

std::string loss_csv(const LossHistory& history);

// Entry point shared by the patchtok binary and the tests. args[0] is the
// program name. Never throws; failures map to ExitCode values.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchtok::cli

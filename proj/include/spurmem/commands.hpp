#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spurmem/config.hpp"

namespace spurmem {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunOptions {
  ExperimentConfig config = default_benchmark_config();
  // One seed writes straight into `out`; several fan out to out/seed_<N>.
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs";
  int jobs = 1;
  std::optional<std::filesystem::path> checkpoint;  // model to trace or fine-tune
  std::optional<std::filesystem::path> baseline;    // ERM model the fine-tuned WGA is compared against
  std::ostream* log = nullptr;                      // warnings and progress; nullptr = silent
};

struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> artifacts;  // name -> path relative to the manifest
  std::map<std::string, double> timings_sec;
  std::vector<std::string> warnings;
};

// manifest_<command>.json
std::string manifest_name(const std::string& command);
// Writes <dir>/<filename> through a temporary file. Every artifact must exist.
void write_manifest(const RunManifest& m, const std::filesystem::path& dir, const std::string& filename);
RunManifest read_manifest(const std::filesystem::path& path);

// Synthetic splits from the config, or the merged CSV files it names.
DatasetSplits load_data(const ExperimentConfig& cfg);

void cmd_gen_data(const RunOptions& opts);
void cmd_train(const RunOptions& opts);
void cmd_trace(const RunOptions& opts);
void cmd_finetune(const RunOptions& opts);
void cmd_ablate(const RunOptions& opts);
// Aggregates every summary.json under run_dir into run_dir/report.json (+ SVG).
void cmd_report(const std::filesystem::path& run_dir, std::ostream* log = nullptr);

struct ReportStats {
  std::size_t runs = 0;
  std::map<std::string, double> values;  // wga_erm_mean, wga_erm_std, ...
};
ReportStats aggregate_summaries(const std::vector<std::filesystem::path>& summaries);

}  // namespace spurmem

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spurmem/data.hpp"
#include "spurmem/finetune.hpp"
#include "spurmem/model.hpp"
#include "spurmem/tracing.hpp"
#include "spurmem/trainer.hpp"

namespace spurmem {

struct DataSection {
  // When non-empty, rows come from these CSV files (merged) instead of the generator.
  std::vector<std::filesystem::path> csv;
  GroupSpec groups;
  FeatureSpec features;

  friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct OutputSection {
  std::filesystem::path directory = "runs";
  bool svg = true;  // emit charts next to the CSVs

  friend bool operator==(const OutputSection&, const OutputSection&) = default;
};

struct ExperimentConfig {
  DataSection data;
  ModelConfig model;
  TrainConfig train;
  TraceConfig trace;
  FinetuneConfig finetune;
  std::vector<MaskCriterion> finetune_criteria{MaskCriterion::kGradient, MaskCriterion::kMagnitude};
  std::vector<AblationAxis> ablation;
  OutputSection output;

  // Cross-section checks on top of every section's own validate().
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Desk-scale benchmark preset; used for keys a config file leaves out.
ExperimentConfig default_benchmark_config();

// INI text with sections [data] [model] [train] [trace] [finetune] [ablation]
// [output]. Unknown sections or keys are ConfigErrors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& cfg);

// FNV-1a of the serialized form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// Seeds every stochastic stage of a run (data, init, batching, masks).
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace spurmem

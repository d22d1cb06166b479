#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spurmem/data.hpp"
#include "spurmem/model.hpp"

namespace spurmem {

enum class CriterionKind { kGradient, kMagnitude };

const char* to_string(CriterionKind kind);
CriterionKind criterion_from_string(const std::string& s);

struct NeuronScore {
  NeuronRef ref;
  double score = 0.0;
};

using ScoreList = std::vector<NeuronScore>;

// l2 norm of d CE(batch) / d(weight row, bias) for every hidden unit.
ScoreList neuron_gradients(const Model& model, const Tensor& x, std::span<const int> y);
// Same, over all of group `group` in one pass. Throws ConfigError if empty.
ScoreList neuron_gradients(const Model& model, const GroupedDataset& data, int group);
ScoreList neuron_magnitudes(const Model& model);

// Candidate set for selection: the whole network, or one hidden layer.
struct Scope {
  std::optional<std::size_t> layer;

  static Scope global() { return {}; }
  static Scope within(std::size_t l) { return {l}; }
  std::string label() const { return layer ? "layer" + std::to_string(*layer) : "global"; }
  // Inverse of label(); throws ConfigError.
  static Scope parse(const std::string& s);
  friend bool operator==(const Scope&, const Scope&) = default;
};

// The k highest-scoring units in scope, descending; ties go to the smaller
// (layer, unit). Independent of the order of `scores`.
std::vector<NeuronRef> top_k(std::span<const NeuronScore> scores, std::size_t k, Scope scope = {});

struct TraceRecord {
  CriterionKind criterion = CriterionKind::kMagnitude;
  Perturbation perturbation;
  Scope scope;
  std::size_t k = 0;
  int group = 0;
  double acc_before = 0.0;
  double acc_after = 0.0;
  double delta_signed = 0.0;  // acc_after - acc_before
  double delta_abs = 0.0;     // |acc_before - acc_after|
  std::uint64_t seed = 0;
};

// Per-group accuracy before and after perturbing `refs`; the input model is not
// modified. Groups with no samples are skipped.
std::vector<TraceRecord> accuracy_shift(const Model& model, std::span<const NeuronRef> refs, const Perturbation& p,
                                        const GroupedDataset& data, std::uint64_t seed);

enum class Execution { kSerial, kParallel };

struct TraceConfig {
  std::vector<CriterionKind> criteria{CriterionKind::kGradient, CriterionKind::kMagnitude};
  std::vector<PerturbationKind> perturbation_kinds{PerturbationKind::kZeroOut};
  std::vector<double> sigmas{0.005, 0.01, 0.02};  // swept by the random kinds
  std::vector<std::size_t> k_list{1, 2, 3};
  std::vector<std::uint64_t> seeds{0};
  Scope scope;
  std::size_t structured_k = 3;
  double histogram_top_fraction = 0.05;

  // zero_out once, each random kind once per sigma.
  std::vector<Perturbation> perturbations() const;
  void validate() const;
  friend bool operator==(const TraceConfig&, const TraceConfig&) = default;
};

struct TraceReport {
  std::vector<TraceRecord> records;
};

// Top-k selection within cfg.scope for every (criterion, perturbation, k, seed, group)
// cell. The gradient criterion uses group j's own gradient ranking when
// evaluating group j.
TraceReport unstructured_trace(const Model& model, const GroupedDataset& data, const TraceConfig& cfg,
                               Execution exec = Execution::kParallel);

// Mean over seeds, one entry per (criterion, perturbation, scope, k, group).
std::vector<TraceRecord> average_over_seeds(std::span<const TraceRecord> records);

struct StructuredTrace {
  std::size_t num_groups = 0;
  std::size_t num_layers = 0;
  std::vector<double> delta_abs;     // [group x layer], mean over seeds
  std::vector<double> delta_signed;  // [group x layer], mean over seeds
  std::vector<TraceRecord> records;
  std::vector<std::string> warnings;

  double abs_at(std::size_t group, std::size_t layer) const { return delta_abs[group * num_layers + layer]; }
};

// Per-layer top-k (k clamped to the layer width, with a warning).
StructuredTrace structured_trace(const Model& model, const GroupedDataset& data, CriterionKind criterion,
                                 const Perturbation& p, std::size_t k, std::span<const std::uint64_t> seeds,
                                 Execution exec = Execution::kParallel);

struct RankHistogram {
  static constexpr std::size_t kBins = 20;
  std::vector<double> bin_lo;
  std::vector<double> bin_hi;
  std::vector<std::size_t> counts;
  std::size_t selected = 0;
  bool clamped_to_one = false;  // the fraction selected fewer than one unit
};

// Select ceil(top_fraction * M) units (at least 1) by scores_a and bin their
// percentile rank under scores_b: rank / (M - 1), 0 = smallest, 100 = largest.
RankHistogram rank_histogram(std::span<const NeuronScore> scores_a, std::span<const NeuronScore> scores_b,
                             double top_fraction);

// Output helpers.
void write_trace_csv(std::span<const TraceRecord> records, const std::filesystem::path& path);
std::vector<TraceRecord> read_trace_csv(const std::filesystem::path& path);
void write_histogram_csv(const RankHistogram& h, const std::filesystem::path& path);
void write_heatmap_csv(const StructuredTrace& s, const std::filesystem::path& path);

}  // namespace spurmem

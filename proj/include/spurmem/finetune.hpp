#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spurmem/data.hpp"
#include "spurmem/model.hpp"
#include "spurmem/optim.hpp"
#include "spurmem/tracing.hpp"
#include "spurmem/trainer.hpp"

namespace spurmem {

enum class MaskCriterion { kGradient, kMagnitude, kCombined };
enum class SupLoss { kMse, kCe };
enum class GradientSource { kFullTrain, kMinorityGroups };

const char* to_string(MaskCriterion c);
const char* to_string(SupLoss s);
const char* to_string(GradientSource s);
MaskCriterion mask_criterion_from_string(const std::string& s);
SupLoss sup_loss_from_string(const std::string& s);
GradientSource gradient_source_from_string(const std::string& s);

struct NtXentOptions {
  // Count the positive pair in the denominator (standard NT-Xent). When false
  // the denominator runs over the negatives only.
  bool include_positive = true;
  // Average the target->aux and aux->target directions.
  bool symmetric = false;

  friend bool operator==(const NtXentOptions&, const NtXentOptions&) = default;
};

struct FinetuneConfig {
  int kick_in_epoch = 40;
  int finetune_epochs = 20;
  double lr = 2e-4;
  PlateauConfig scheduler{0.5, 1};
  MaskCriterion mask_criterion = MaskCriterion::kGradient;
  double prune_fraction = 1e-4;  // of M, rounded up, at least one unit
  double tau = 0.5;
  double lambda = 0.2;
  SupLoss sup_loss = SupLoss::kMse;
  GradientSource gradient_source = GradientSource::kFullTrain;
  bool pseudo_labels = false;  // rank and score by CE against predictions instead of labels
  std::size_t pool_size = 256;
  std::size_t sample_size = 128;
  std::size_t batch_size = 256;
  AugmentConfig augment;
  NtXentOptions ntxent;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

// Indices of `sample_size` rows drawn uniformly without replacement from the
// `pool_size` highest-CE rows (ties to the lower index). Returned ascending.
// Sizes larger than the dataset are clamped and a note is appended to
// `warnings` when given.
std::vector<std::size_t> worst_loss_batch(const Model& model, const GroupedDataset& data, std::size_t pool_size,
                                          std::size_t sample_size, Rng& rng, bool pseudo_labels = false,
                                          std::vector<std::string>* warnings = nullptr);

std::size_t mask_size(double prune_fraction, std::size_t num_neurons);

Mask build_mask(const Model& model, const FinetuneConfig& cfg, const GroupedDataset& train, Rng& rng,
                std::vector<std::string>* warnings = nullptr);

// Rows of r (target branch) are anchors, rows of rp (auxiliary branch) the
// candidates; row i of each comes from the same sample.
Var ntxent_loss(Var r, Var rp, double tau, const NtXentOptions& opts = {});

struct LossTerms {
  Var total;
  Var contrastive;
  Var supervised;
  // Rows whose projected features are exactly zero in either branch carry no
  // direction; they are left out of the contrastive term (not the supervised one).
  std::size_t dropped_rows = 0;
};

// Two augmented views per row. The target branch sees x' unmasked, the
// auxiliary branch sees x'' through `aux_mask`; both share `bound`'s
// parameters. With detach_aux the auxiliary branch reads a constant copy.
LossTerms total_loss(const BoundModel& bound, const Mask& aux_mask, const Tensor& x, std::span<const int> y,
                     const FinetuneConfig& cfg, Rng& rng, bool detach_aux = false);

struct FinetuneHooks {
  MetricsCsvWriter* metrics = nullptr;
  std::function<void(int epoch, const Mask& mask)> on_mask;
};

struct FinetuneResult {
  Model best_model;
  int best_epoch = 0;  // 0 = the input model
  double best_val_wga = 0.0;
  std::vector<EpochMetrics> log;
  std::vector<Mask> masks;  // one per epoch
  std::vector<std::string> warnings;
};

FinetuneResult finetune(Model model, const DatasetSplits& data, const FinetuneConfig& cfg,
                        const FinetuneHooks& hooks = {});

// One-factor-at-a-time sweep around a base config.
struct AblationAxis {
  std::string name;  // loss, kickin, ft_epochs, gradient_source, lambda, prune_fraction, criterion, tau
  std::vector<std::string> values;

  friend bool operator==(const AblationAxis&, const AblationAxis&) = default;
};

FinetuneConfig apply_axis(FinetuneConfig cfg, const std::string& axis, const std::string& value);

struct AblationRow {
  std::string axis;
  std::string value;
  MaskCriterion criterion = MaskCriterion::kGradient;
  double prune_fraction = 0.0;
  double lambda = 0.0;
  double tau = 0.0;
  int kickin = 0;
  int ft_epochs = 0;
  std::uint64_t seed = 0;
  double wga_erm = 0.0;
  double wga_ft = 0.0;
  double delta_wga = 0.0;
};

struct AblationPlan {
  ModelConfig model;
  TrainConfig erm;
  FinetuneConfig base;
  std::vector<AblationAxis> axes;
  std::vector<std::uint64_t> seeds{0};
};

// ERM runs once per seed (snapshots at every kick-in epoch needed); each
// (axis value, seed) cell then fine-tunes independently. WGA is on test.
std::vector<AblationRow> ablation_suite(const DatasetSplits& data, const AblationPlan& plan,
                                        Execution exec = Execution::kParallel);

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path);

}  // namespace spurmem

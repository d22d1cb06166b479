#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "spurmem/data.hpp"
#include "spurmem/model.hpp"
#include "spurmem/optim.hpp"

namespace spurmem {

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 100;
  std::size_t batch_size = 256;  // clipped to the training-set size
  PlateauConfig scheduler{0.5, 3};
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochMetrics {
  std::string stage = "erm";
  int epoch = 0;
  Split split = Split::kVal;
  GroupAccuracy acc;
  double loss = 0.0;  // mean training loss for the train split; mean CE otherwise
  double lr = 0.0;

  double wga() const { return acc.wga; }
};

// Appends rows as they are produced so an interrupted run leaves a usable file.
// Columns: epoch,split,group,accuracy,wga,loss,lr with one row per group plus
// a group=ALL summary row. Fine-tuning logs append a trailing `stage` column.
class MetricsCsvWriter {
 public:
  explicit MetricsCsvWriter(const std::filesystem::path& path, bool with_stage = false);
  void write(const EpochMetrics& m);

 private:
  std::ofstream out_;
  bool with_stage_;
};

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);

struct TrainHooks {
  // Called after each epoch's parameter updates with the 1-based epoch number.
  std::function<void(int epoch, const Model& model)> on_epoch_end;
  MetricsCsvWriter* metrics = nullptr;
};

struct TrainResult {
  Model best_model;
  int best_epoch = 0;
  double best_val_wga = 0.0;
  std::vector<EpochMetrics> log;
};

// Argmax predictions and per-group accuracy on one split; loss is mean CE.
EpochMetrics evaluate(const Model& model, const GroupedDataset& data);

// Mini-batch Adam on cross-entropy. After every epoch the validation split is
// scored; the checkpoint with the highest validation WGA is kept (ties go to
// the earlier epoch) and the same metric drives the plateau scheduler.
TrainResult train_erm(Model model, const DatasetSplits& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

// Fresh seeded permutation split into batches; the last partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng);

void check_finite(double v, const std::string& what);

}  // namespace spurmem

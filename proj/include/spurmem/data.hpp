#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spurmem/rng.hpp"
#include "spurmem/tensor.hpp"

namespace spurmem {

enum class Split { kTrain, kVal, kTest };

const char* to_string(Split split);
Split split_from_string(const std::string& s);

// Group index g = y * num_attrs + a. The majority groups are those whose
// attribute agrees with the class (a == y % num_attrs).
struct GroupSpec {
  int num_classes = 2;
  int num_attrs = 2;
  double correlation = 0.95;  // P(attribute agrees with class) in the training split
  std::size_t n_train = 5000;
  // Explicit per-group counts; a non-empty train_counts overrides n_train/correlation.
  std::vector<std::size_t> train_counts;
  std::vector<std::size_t> val_counts;
  std::vector<std::size_t> test_counts;
  // Used when val_counts/test_counts are empty.
  std::size_t val_per_group = 200;
  std::size_t test_per_group = 500;

  int num_groups() const { return num_classes * num_attrs; }
  int agreeing_attr(int y) const { return y % num_attrs; }
  bool is_minority(int group) const;
  void validate() const;
  friend bool operator==(const GroupSpec&, const GroupSpec&) = default;
};

struct FeatureSpec {
  std::size_t core_dim = 5;
  std::size_t spurious_dim = 5;
  std::size_t noise_dim = 10;
  double core_strength = 1.0;
  double spurious_strength = 1.5;
  double noise_std = 1.0;

  std::size_t dim() const { return core_dim + spurious_dim + noise_dim; }
  void validate(const GroupSpec& groups) const;
  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

struct AugmentConfig {
  double jitter_std = 0.1;
  double dropout_rate = 0.1;

  void validate() const;
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct GroupedDataset {
  Split split = Split::kTrain;
  int num_classes = 2;
  int num_attrs = 2;
  std::size_t feature_dim = 0;
  Tensor x;  // [n x feature_dim]; default-constructed when empty
  std::vector<int> y;
  std::vector<int> g;

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
  int num_groups() const { return num_classes * num_attrs; }
  bool is_minority(int group) const;
  std::vector<std::size_t> group_counts() const;
  std::vector<std::size_t> group_indices(int group) const;
  GroupedDataset subset(std::span<const std::size_t> idx) const;
  void validate() const;
};

struct DatasetSplits {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;

  const GroupedDataset& get(Split s) const;
  GroupedDataset& get(Split s);
};

// Orthogonal templates with norm sqrt(block_dim), one row per class (or attribute).
Tensor class_templates(std::size_t count, std::size_t block_dim, std::uint64_t stream);

// x = [core_strength * v_y + noise, spurious_strength * w_a + noise, noise].
DatasetSplits generate(const GroupSpec& groups, const FeatureSpec& features, std::uint64_t seed);

struct CsvSchema {
  int num_classes = 2;
  int num_attrs = 2;
};

// Columns: feature columns (any names, in order), then `label`, `group`, `split`
// in any position. Rows are routed to the split named in their `split` cell.
DatasetSplits load_csv(const std::filesystem::path& path, const CsvSchema& schema);
void export_csv(const GroupedDataset& data, const std::filesystem::path& path);
DatasetSplits merge_splits(const std::vector<DatasetSplits>& parts);

// x' = dropout_mask ⊙ (x + N(0, jitter_std^2)), no rescaling.
std::vector<double> augment(std::span<const double> row, const AugmentConfig& cfg, Rng& rng);
Tensor augment(const Tensor& batch, const AugmentConfig& cfg, Rng& rng);

struct GroupAccuracy {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> correct;
  std::vector<double> accuracy;  // NaN for empty groups
  std::vector<bool> present;
  double wga = 0.0;              // min over present groups
  double mean_group = 0.0;       // mean over present groups
  std::size_t total_correct = 0;
  std::size_t total = 0;
  bool has_empty_groups = false;

  double overall() const { return total ? static_cast<double>(total_correct) / static_cast<double>(total) : 0.0; }
};

GroupAccuracy group_accuracy(std::span<const int> preds, const GroupedDataset& data);

}  // namespace spurmem

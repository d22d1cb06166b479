#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spurmem/tensor.hpp"

namespace spurmem {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;  // the "momentum" hyperparameter
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;

  // Zeroed moments shaped like params.
  static AdamState like(std::span<const Tensor* const> params);
};

// One bias-corrected Adam update, in place. No weight decay.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

struct PlateauConfig {
  double factor = 0.5;
  int patience = 3;

  friend bool operator==(const PlateauConfig&, const PlateauConfig&) = default;
};

// ReduceLROnPlateau in "max" mode: the learning rate is multiplied by `factor`
// once the metric has failed to improve for more than `patience` consecutive
// steps, after which the counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, PlateauConfig cfg) : lr_(lr), cfg_(cfg) {}

  // Feed one epoch's metric; returns the learning rate for the next epoch.
  double step(double metric);

  double lr() const { return lr_; }
  int bad_epochs() const { return bad_epochs_; }
  int reductions() const { return reductions_; }

 private:
  double lr_;
  PlateauConfig cfg_;
  bool has_best_ = false;
  double best_ = 0.0;
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

}  // namespace spurmem

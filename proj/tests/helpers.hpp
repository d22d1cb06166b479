#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spurmem/data.hpp"
#include "spurmem/model.hpp"
#include "spurmem/rng.hpp"
#include "spurmem/tape.hpp"

namespace testing {

using namespace spurmem;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor for
// entries whose true gradient is ~0.
inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest relative error between tape gradients and central differences over
// every element of every input.
inline double grad_check(const std::vector<Tensor>& inputs, const LossFn& f, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }
  auto eval = [&](const std::vector<Tensor>& in) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : in) leaves.push_back(tape.leaf(t));
    return f(tape, leaves).value().item();
  };
  double worst = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t p = 0; p < inputs.size(); ++p)
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      const double x0 = inputs[p][i];
      work[p][i] = x0 + h;
      const double fp = eval(work);
      work[p][i] = x0 - h;
      const double fm = eval(work);
      work[p][i] = x0;
      worst = std::max(worst, rel_err(analytic[p][i], (fp - fm) / (2 * h)));
    }
  return worst;
}

// Small random model with non-trivial biases so no unit sits exactly at a kink.
inline Model tiny_model(std::uint64_t seed, ModelConfig cfg = {4, {5, 3}, 2, {4, 3}}) {
  Model m = build_model(cfg, seed);
  Rng rng = make_rng(seed, 99);
  std::normal_distribution<double> d(0.0, 0.3);
  for (auto* p : m.parameters())
    if (p->rank() == 1)
      for (auto& v : p->data()) v = d(rng);
  return m;
}

inline GroupedDataset make_dataset(Tensor x, std::vector<int> y, std::vector<int> g, int classes = 2, int attrs = 2,
                                   Split split = Split::kTrain) {
  GroupedDataset d;
  d.split = split;
  d.num_classes = classes;
  d.num_attrs = attrs;
  d.feature_dim = x.cols();
  d.x = std::move(x);
  d.y = std::move(y);
  d.g = std::move(g);
  return d;
}

// Small synthetic benchmark for fast end-to-end tests.
inline DatasetSplits small_benchmark(std::uint64_t seed, std::size_t n_train = 400) {
  GroupSpec gs;
  gs.n_train = n_train;
  gs.val_per_group = 30;
  gs.test_per_group = 30;
  gs.correlation = 0.9;
  return generate(gs, FeatureSpec{}, seed);
}

}  // namespace testing

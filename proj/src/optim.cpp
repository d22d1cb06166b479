#include "spurmem/optim.hpp"

#include <cmath>

#include "spurmem/error.hpp"

namespace spurmem {

AdamState AdamState::like(std::span<const Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape(), std::vector<double>(p->size(), 0.0));
    s.v.emplace_back(p->shape(), std::vector<double>(p->size(), 0.0));
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (g.size() != p.size() || state.m[i].size() != p.size())
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(i));
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double PlateauScheduler::step(double metric) {
  if (!has_best_ || metric > best_) {
    has_best_ = true;
    best_ = metric;
    bad_epochs_ = 0;
    return lr_;
  }
  if (++bad_epochs_ > cfg_.patience) {
    lr_ *= cfg_.factor;
    bad_epochs_ = 0;
    ++reductions_;
  }
  return lr_;
}

}  // namespace spurmem

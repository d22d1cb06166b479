#include "spurmem/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "spurmem/error.hpp"

namespace spurmem {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(scheduler.factor > 0.0 && scheduler.factor <= 1.0)) throw ConfigError("train.scheduler_factor must lie in (0, 1]");
  if (scheduler.patience < 0) throw ConfigError("train.scheduler_patience must be >= 0");
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError(what + " is not finite");
}

MetricsCsvWriter::MetricsCsvWriter(const std::filesystem::path& path, bool with_stage) : with_stage_(with_stage) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot write " + path.string());
  out_ << (with_stage_ ? "epoch,split,group,accuracy,wga,loss,lr,stage\n" : "epoch,split,group,accuracy,wga,loss,lr\n");
  out_.flush();
}

void MetricsCsvWriter::write(const EpochMetrics& m) {
  char buf[256];
  const std::string tail = with_stage_ ? "," + m.stage + "\n" : "\n";
  for (std::size_t j = 0; j < m.acc.accuracy.size(); ++j) {
    std::snprintf(buf, sizeof buf, "%d,%s,%zu,%.17g,%.17g,%.17g,%.17g", m.epoch, to_string(m.split), j,
                  m.acc.accuracy[j], m.acc.wga, m.loss, m.lr);
    out_ << buf << tail;
  }
  std::snprintf(buf, sizeof buf, "%d,%s,ALL,%.17g,%.17g,%.17g,%.17g", m.epoch, to_string(m.split), m.acc.overall(),
                m.acc.wga, m.loss, m.lr);
  out_ << buf << tail;
  out_.flush();
  if (!out_) throw IoError("failed to append metrics row");
}

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochMetrics> out;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    std::stringstream ss(line);
    std::vector<std::string> c;
    std::string cell;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != 7 && c.size() != 8) throw ParseError("metrics row needs 7 or 8 cells", row);
    if (c[2] != "ALL") continue;
    EpochMetrics m;
    m.epoch = std::stoi(c[0]);
    m.split = split_from_string(c[1]);
    m.acc.wga = std::stod(c[4]);
    m.loss = std::stod(c[5]);
    m.lr = std::stod(c[6]);
    if (c.size() == 8) m.stage = c[7];
    out.push_back(m);
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t bs = std::max<std::size_t>(1, std::min(batch_size, n));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += bs)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + bs)));
  return out;
}

EpochMetrics evaluate(const Model& model, const GroupedDataset& data) {
  EpochMetrics m;
  m.split = data.split;
  if (data.empty()) {
    m.acc = group_accuracy({}, data);
    return m;
  }
  if (data.feature_dim != model.config().input_dim)
    throw DimensionError("evaluate: data has " + std::to_string(data.feature_dim) + " features, model expects " +
                         std::to_string(model.config().input_dim));
  const auto logits = forward(model, data.x).logits;
  const auto preds = argmax_rows(logits);
  m.acc = group_accuracy(preds, data);
  const auto ce = cross_entropy_per_row(logits, data.y);
  double s = 0.0;
  for (double v : ce) s += v;
  m.loss = s / static_cast<double>(ce.size());
  return m;
}

TrainResult train_erm(Model model, const DatasetSplits& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train_erm: empty training split");
  if (data.val.empty()) throw ConfigError("train_erm: empty validation split (needed for model selection)");
  if (data.train.feature_dim != model.config().input_dim)
    throw DimensionError("train_erm: data has " + std::to_string(data.train.feature_dim) +
                         " features, model expects " + std::to_string(model.config().input_dim));

  Rng rng = make_rng(cfg.seed, 0x7a11);
  PlateauScheduler sched(cfg.lr, cfg.scheduler);
  auto params = model.parameters();
  AdamState state = AdamState::like(std::vector<const Tensor*>(params.begin(), params.end()));

  TrainResult result;
  bool have_best = false;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = sched.lr();
    double loss_sum = 0.0;
    for (const auto& batch : epoch_batches(data.train.size(), cfg.batch_size, rng)) {
      Tape tape;
      auto bound = bind(tape, model, true);
      Var x = tape.constant(data.train.x.gather_rows(batch));
      std::vector<int> y;
      y.reserve(batch.size());
      for (auto i : batch) y.push_back(data.train.y[i]);
      Var loss = softmax_cross_entropy(forward(bound, x).logits, y);
      check_finite(loss.value().item(), "training loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      loss_sum += loss.value().item() * static_cast<double>(batch.size());
      std::vector<Tensor> grads;
      for (const Var& p : bound.parameters()) grads.push_back(p.grad());
      adam_step(params, grads, state, AdamConfig{lr, 0.9, 0.999, 1e-8});
    }

    EpochMetrics train_m = evaluate(model, data.train);
    train_m.epoch = epoch;
    train_m.loss = loss_sum / static_cast<double>(data.train.size());
    train_m.lr = lr;
    EpochMetrics val_m = evaluate(model, data.val);
    val_m.epoch = epoch;
    val_m.lr = lr;
    check_finite(val_m.wga(), "validation WGA at epoch " + std::to_string(epoch));
    if (hooks.metrics) {
      hooks.metrics->write(train_m);
      hooks.metrics->write(val_m);
    }
    result.log.push_back(train_m);
    result.log.push_back(val_m);

    if (!have_best || val_m.wga() > result.best_val_wga) {
      have_best = true;
      result.best_val_wga = val_m.wga();
      result.best_epoch = epoch;
      result.best_model = model;
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
    sched.step(val_m.wga());
  }
  return result;
}

}  // namespace spurmem

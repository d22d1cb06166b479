#include "spurmem/finetune.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "spurmem/error.hpp"

namespace spurmem {

const char* to_string(MaskCriterion c) {
  switch (c) {
    case MaskCriterion::kGradient: return "gradient";
    case MaskCriterion::kMagnitude: return "magnitude";
    case MaskCriterion::kCombined: return "combined";
  }
  return "?";
}

const char* to_string(SupLoss s) { return s == SupLoss::kMse ? "mse" : "ce"; }

const char* to_string(GradientSource s) {
  return s == GradientSource::kFullTrain ? "full_train" : "minority_groups";
}

MaskCriterion mask_criterion_from_string(const std::string& s) {
  if (s == "gradient") return MaskCriterion::kGradient;
  if (s == "magnitude") return MaskCriterion::kMagnitude;
  if (s == "combined") return MaskCriterion::kCombined;
  throw ConfigError("unknown mask criterion '" + s + "' (gradient, magnitude, combined)");
}

SupLoss sup_loss_from_string(const std::string& s) {
  if (s == "mse") return SupLoss::kMse;
  if (s == "ce") return SupLoss::kCe;
  throw ConfigError("unknown supervised loss '" + s + "' (mse, ce)");
}

GradientSource gradient_source_from_string(const std::string& s) {
  if (s == "full_train") return GradientSource::kFullTrain;
  if (s == "minority_groups") return GradientSource::kMinorityGroups;
  throw ConfigError("unknown gradient source '" + s + "' (full_train, minority_groups)");
}

void FinetuneConfig::validate() const {
  if (kick_in_epoch < 0) throw ConfigError("finetune.kick_in_epoch must be >= 0");
  if (finetune_epochs < 0) throw ConfigError("finetune.finetune_epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("finetune.lr must be positive");
  if (!(scheduler.factor > 0.0 && scheduler.factor <= 1.0))
    throw ConfigError("finetune.scheduler_factor must lie in (0, 1]");
  if (scheduler.patience < 0) throw ConfigError("finetune.scheduler_patience must be >= 0");
  if (!(prune_fraction > 0.0 && prune_fraction <= 1.0)) throw ConfigError("finetune.prune_fraction must lie in (0, 1]");
  if (!(tau > 0.0)) throw ConfigError("finetune.tau must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("finetune.lambda must be >= 0");
  if (pool_size < 1) throw ConfigError("finetune.pool_size must be >= 1");
  if (sample_size < 1) throw ConfigError("finetune.sample_size must be >= 1");
  if (sample_size > pool_size) throw ConfigError("finetune.sample_size must not exceed finetune.pool_size");
  if (batch_size < 2) throw ConfigError("finetune.batch_size must be >= 2");
  augment.validate();
}

namespace {

std::vector<int> ranking_targets(const Model& model, const GroupedDataset& data, bool pseudo_labels) {
  return pseudo_labels ? predict(model, data.x) : data.y;
}

double ceil_tolerant(double x) { return std::ceil(x - 1e-9 * std::max(1.0, std::abs(x))); }

}  // namespace

std::vector<std::size_t> worst_loss_batch(const Model& model, const GroupedDataset& data, std::size_t pool_size,
                                          std::size_t sample_size, Rng& rng, bool pseudo_labels,
                                          std::vector<std::string>* warnings) {
  if (data.empty()) throw ConfigError("worst_loss_batch: empty dataset");
  if (sample_size > pool_size) throw ConfigError("worst_loss_batch: sample_size exceeds pool_size");
  const std::size_t n = data.size();
  if (pool_size > n) {
    if (warnings)
      warnings->push_back("worst_loss_batch: pool " + std::to_string(pool_size) + " clamped to dataset size " +
                          std::to_string(n));
    pool_size = n;
    sample_size = std::min(sample_size, n);
  }
  const auto targets = ranking_targets(model, data, pseudo_labels);
  const auto loss = cross_entropy_per_row(forward(model, data.x).logits, targets);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return loss[a] > loss[b]; });
  order.resize(pool_size);
  std::sort(order.begin(), order.end());
  if (sample_size == pool_size) return order;
  std::vector<std::size_t> picked;
  std::sample(order.begin(), order.end(), std::back_inserter(picked), sample_size, rng);
  return picked;
}

std::size_t mask_size(double prune_fraction, std::size_t num_neurons) {
  if (num_neurons == 0) throw ConfigError("mask_size: model has no hidden units");
  const auto k = static_cast<std::size_t>(ceil_tolerant(prune_fraction * static_cast<double>(num_neurons)));
  return std::clamp<std::size_t>(k, 1, num_neurons);
}

Mask build_mask(const Model& model, const FinetuneConfig& cfg, const GroupedDataset& train, Rng& rng,
                std::vector<std::string>* warnings) {
  const std::size_t k = mask_size(cfg.prune_fraction, model.num_neurons());
  Mask mask;
  if (cfg.mask_criterion != MaskCriterion::kGradient) {
    for (const auto& ref : top_k(neuron_magnitudes(model), k)) mask.masked.insert(ref);
  }
  if (cfg.mask_criterion != MaskCriterion::kMagnitude) {
    GroupedDataset source;
    if (cfg.gradient_source == GradientSource::kMinorityGroups) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < train.size(); ++i)
        if (train.is_minority(train.g[i])) idx.push_back(i);
      if (idx.empty()) throw ConfigError("build_mask: gradient_source=minority_groups but no minority samples");
      source = train.subset(idx);
    }
    const GroupedDataset& src = cfg.gradient_source == GradientSource::kMinorityGroups ? source : train;
    const auto picked = worst_loss_batch(model, src, cfg.pool_size, cfg.sample_size, rng, cfg.pseudo_labels, warnings);
    const auto batch = src.subset(picked);
    const auto targets = ranking_targets(model, batch, cfg.pseudo_labels);
    for (const auto& ref : top_k(neuron_gradients(model, batch.x, targets), k)) mask.masked.insert(ref);
  }
  return mask;
}

namespace {

double row_norm(const Tensor& m, std::size_t r) {
  double s = 0.0;
  for (double v : m.row(r)) s += v * v;
  return std::sqrt(s);
}

Var ntxent_direction(Var anchors, Var candidates, double tau, bool include_positive) {
  Var s = scale(cosine_similarity_matrix(anchors, candidates), 1.0 / tau);
  return mean(diagonal_logsumexp_gap(s, !include_positive));
}

}  // namespace

Var ntxent_loss(Var r, Var rp, double tau, const NtXentOptions& opts) {
  if (!(tau > 0.0)) throw ConfigError("ntxent_loss: tau must be positive");
  if (r.shape() != rp.shape() || r.shape().size() != 2)
    throw DimensionError("ntxent_loss: branches must be matching matrices, got " + shape_string(r.shape()) + " and " +
                         shape_string(rp.shape()));
  if (r.value().rows() < 2) throw ConfigError("ntxent_loss: batch size must be at least 2 so negatives exist");
  Var forward_dir = ntxent_direction(r, rp, tau, opts.include_positive);
  if (!opts.symmetric) return forward_dir;
  return scale(add(forward_dir, ntxent_direction(rp, r, tau, opts.include_positive)), 0.5);
}

LossTerms total_loss(const BoundModel& bound, const Mask& aux_mask, const Tensor& x, std::span<const int> y,
                     const FinetuneConfig& cfg, Rng& rng, bool detach_aux) {
  if (!bound.model) throw Error("total_loss: unbound model");
  if (x.rows() != y.size()) throw DimensionError("total_loss: rows of x and y differ");
  bound.model->check_mask(aux_mask);
  Tape& tape = *bound.classifier.weight.tape();

  const Tensor x1 = augment(x, cfg.augment, rng);
  const Tensor x2 = augment(x, cfg.augment, rng);

  const ForwardVars target = forward(bound, tape.constant(x1));
  Var r = project(bound, target.features);

  BoundModel detached;
  if (detach_aux) detached = bind(tape, *bound.model, false);
  const BoundModel& aux = detach_aux ? detached : bound;
  const ForwardVars masked = forward(aux, tape.constant(x2), &aux_mask);
  Var rp = project(aux, masked.features);

  LossTerms out;
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < r.value().rows(); ++i) {
    if (row_norm(r.value(), i) > 0.0 && row_norm(rp.value(), i) > 0.0) live.push_back(i);
  }
  out.dropped_rows = r.value().rows() - live.size();
  if (out.dropped_rows > 0 && live.size() >= 2) {
    Tensor pick({live.size(), r.value().rows()}, 0.0);
    for (std::size_t k = 0; k < live.size(); ++k) pick(k, live[k]) = 1.0;
    Var sel = tape.constant(std::move(pick));
    r = matmul(sel, r);
    rp = matmul(sel, rp);
  }
  out.contrastive = ntxent_loss(r, rp, cfg.tau, cfg.ntxent);
  if (cfg.sup_loss == SupLoss::kMse) {
    const std::size_t classes = target.logits.value().cols();
    Tensor one_hot({y.size(), classes}, 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classes)
        throw IndexError("total_loss: label " + std::to_string(y[i]) + " out of range");
      one_hot(i, static_cast<std::size_t>(y[i])) = 1.0;
    }
    out.supervised = mse_loss(softmax_rows(target.logits), tape.constant(std::move(one_hot)));
  } else {
    out.supervised = softmax_cross_entropy(target.logits, y);
  }
  out.total = add(out.contrastive, scale(out.supervised, cfg.lambda));
  return out;
}

FinetuneResult finetune(Model model, const DatasetSplits& data, const FinetuneConfig& cfg, const FinetuneHooks& hooks) {
  cfg.validate();
  if (data.train.size() < 2) throw ConfigError("finetune: need at least 2 training rows");
  if (data.val.empty()) throw ConfigError("finetune: empty validation split (needed for model selection)");

  FinetuneResult result;
  EpochMetrics start = evaluate(model, data.val);
  start.stage = "finetune";
  start.epoch = 0;
  start.lr = cfg.lr;
  if (hooks.metrics) hooks.metrics->write(start);
  result.log.push_back(start);
  result.best_model = model;
  result.best_val_wga = start.wga();
  if (cfg.finetune_epochs == 0) return result;

  Rng rng = make_rng(cfg.seed, 0xf17e);
  PlateauScheduler sched(cfg.lr, cfg.scheduler);
  auto params = model.parameters();
  AdamState state = AdamState::like(std::vector<const Tensor*>(params.begin(), params.end()));

  for (int epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
    const double lr = sched.lr();
    const Mask mask = build_mask(model, cfg, data.train, rng, &result.warnings);
    result.masks.push_back(mask);
    if (hooks.on_mask) hooks.on_mask(epoch, mask);

    double loss_sum = 0.0;
    std::size_t seen = 0, dropped = 0;
    for (const auto& batch : epoch_batches(data.train.size(), cfg.batch_size, rng)) {
      if (batch.size() < 2) continue;
      Tape tape;
      auto bound = bind(tape, model, true);
      std::vector<int> y;
      y.reserve(batch.size());
      for (auto i : batch) y.push_back(data.train.y[i]);
      const LossTerms terms = total_loss(bound, mask, data.train.x.gather_rows(batch), y, cfg, rng);
      check_finite(terms.total.value().item(), "fine-tuning loss at epoch " + std::to_string(epoch));
      dropped += terms.dropped_rows;
      tape.backward(terms.total);
      loss_sum += terms.total.value().item() * static_cast<double>(batch.size());
      seen += batch.size();
      std::vector<Tensor> grads;
      for (const Var& p : bound.parameters()) grads.push_back(p.grad());
      adam_step(params, grads, state, AdamConfig{lr, 0.9, 0.999, 1e-8});
    }

    if (dropped > 0)
      result.warnings.push_back("epoch " + std::to_string(epoch) + ": " + std::to_string(dropped) +
                                " rows with zero projected features left out of the contrastive term");
    EpochMetrics train_m = evaluate(model, data.train);
    train_m.stage = "finetune";
    train_m.epoch = epoch;
    train_m.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    train_m.lr = lr;
    EpochMetrics val_m = evaluate(model, data.val);
    val_m.stage = "finetune";
    val_m.epoch = epoch;
    val_m.lr = lr;
    check_finite(val_m.wga(), "validation WGA at fine-tuning epoch " + std::to_string(epoch));
    if (hooks.metrics) {
      hooks.metrics->write(train_m);
      hooks.metrics->write(val_m);
    }
    result.log.push_back(train_m);
    result.log.push_back(val_m);

    if (val_m.wga() > result.best_val_wga) {
      result.best_val_wga = val_m.wga();
      result.best_epoch = epoch;
      result.best_model = model;
    }
    sched.step(val_m.wga());
  }
  return result;
}

namespace {

double parse_double(const std::string& axis, const std::string& s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError("ablation axis " + axis + ": '" + s + "' is not a number");
  return v;
}

int parse_int(const std::string& axis, const std::string& s) {
  int v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError("ablation axis " + axis + ": '" + s + "' is not an integer");
  return v;
}

}  // namespace

FinetuneConfig apply_axis(FinetuneConfig cfg, const std::string& axis, const std::string& value) {
  if (axis == "loss") {
    cfg.sup_loss = sup_loss_from_string(value);
  } else if (axis == "kickin") {
    cfg.kick_in_epoch = parse_int(axis, value);
  } else if (axis == "ft_epochs") {
    cfg.finetune_epochs = parse_int(axis, value);
  } else if (axis == "gradient_source") {
    cfg.gradient_source = gradient_source_from_string(value);
  } else if (axis == "pseudo_labels") {
    if (value != "true" && value != "false") throw ConfigError("ablation axis pseudo_labels: expected true or false");
    cfg.pseudo_labels = value == "true";
  } else if (axis == "lambda") {
    cfg.lambda = parse_double(axis, value);
  } else if (axis == "prune_fraction") {
    cfg.prune_fraction = parse_double(axis, value);
  } else if (axis == "criterion") {
    cfg.mask_criterion = mask_criterion_from_string(value);
  } else if (axis == "tau") {
    cfg.tau = parse_double(axis, value);
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  cfg.validate();
  return cfg;
}

std::vector<AblationRow> ablation_suite(const DatasetSplits& data, const AblationPlan& plan, Execution exec) {
  plan.base.validate();
  plan.erm.validate();
  if (plan.seeds.empty()) throw ConfigError("ablation_suite: no seeds");
  if (data.test.empty()) throw ConfigError("ablation_suite: empty test split");

  struct CellSpec {
    std::string axis;
    std::string value;
    FinetuneConfig cfg;
  };
  std::vector<CellSpec> specs;
  std::set<int> kickins;
  for (const auto& axis : plan.axes) {
    if (axis.values.empty()) throw ConfigError("ablation axis " + axis.name + " has no values");
    for (const auto& v : axis.values) {
      CellSpec s{axis.name, v, apply_axis(plan.base, axis.name, v)};
      if (s.cfg.kick_in_epoch > plan.erm.epochs)
        throw ConfigError("ablation: kick-in epoch " + std::to_string(s.cfg.kick_in_epoch) + " exceeds ERM epochs " +
                          std::to_string(plan.erm.epochs));
      kickins.insert(s.cfg.kick_in_epoch);
      specs.push_back(std::move(s));
    }
  }

  struct SeedRun {
    double wga_erm = 0.0;
    std::map<int, Model> snapshots;
  };
  const auto num_seeds = static_cast<long>(plan.seeds.size());
  std::vector<SeedRun> runs(plan.seeds.size());
  std::exception_ptr failure;

  auto run_seed = [&](std::size_t s) {
    const std::uint64_t seed = plan.seeds[s];
    Model init = build_model(plan.model, seed);
    SeedRun& run = runs[s];
    if (kickins.count(0)) run.snapshots.emplace(0, init);
    TrainConfig tc = plan.erm;
    tc.seed = seed;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](int epoch, const Model& m) {
      if (kickins.count(epoch)) run.snapshots.insert_or_assign(epoch, m);
    };
    const auto erm = train_erm(std::move(init), data, tc, hooks);
    run.wga_erm = evaluate(erm.best_model, data.test).wga();
  };

  const auto num_cells = static_cast<long>(specs.size() * plan.seeds.size());
  std::vector<AblationRow> rows(static_cast<std::size_t>(num_cells));
  auto run_cell = [&](std::size_t c) {
    const std::size_t s = c % plan.seeds.size();
    const CellSpec& spec = specs[c / plan.seeds.size()];
    FinetuneConfig cfg = spec.cfg;
    cfg.seed = plan.seeds[s];
    const auto ft = finetune(runs[s].snapshots.at(cfg.kick_in_epoch), data, cfg);
    AblationRow& row = rows[c];
    row.axis = spec.axis;
    row.value = spec.value;
    row.criterion = cfg.mask_criterion;
    row.prune_fraction = cfg.prune_fraction;
    row.lambda = cfg.lambda;
    row.tau = cfg.tau;
    row.kickin = cfg.kick_in_epoch;
    row.ft_epochs = cfg.finetune_epochs;
    row.seed = cfg.seed;
    row.wga_erm = runs[s].wga_erm;
    row.wga_ft = evaluate(ft.best_model, data.test).wga();
    row.delta_wga = row.wga_ft - row.wga_erm;
  };

  auto guarded = [&](auto&& fn, std::size_t i) {
    try {
      fn(i);
    } catch (...) {
#pragma omp critical(spurmem_ablation_error)
      if (!failure) failure = std::current_exception();
    }
  };

  if (exec == Execution::kSerial) {
    for (long s = 0; s < num_seeds; ++s) run_seed(static_cast<std::size_t>(s));
    for (long c = 0; c < num_cells; ++c) run_cell(static_cast<std::size_t>(c));
    return rows;
  }
#pragma omp parallel for schedule(dynamic)
  for (long s = 0; s < num_seeds; ++s) guarded(run_seed, static_cast<std::size_t>(s));
  if (failure) std::rethrow_exception(failure);
#pragma omp parallel for schedule(dynamic)
  for (long c = 0; c < num_cells; ++c) guarded(run_cell, static_cast<std::size_t>(c));
  if (failure) std::rethrow_exception(failure);
  return rows;
}

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "axis,value,criterion,prune_fraction,lambda,tau,kickin,ft_epochs,seed,wga_erm,wga_ft,delta_wga\n";
  char buf[320];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%d,%d,%llu,%.17g,%.17g,%.17g\n", r.axis.c_str(),
                  r.value.c_str(), to_string(r.criterion), r.prune_fraction, r.lambda, r.tau, r.kickin, r.ft_epochs,
                  static_cast<unsigned long long>(r.seed), r.wga_erm, r.wga_ft, r.delta_wga);
    out << buf;
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace spurmem

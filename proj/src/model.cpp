#include "spurmem/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "spurmem/error.hpp"

namespace spurmem {

void ModelConfig::validate() const {
  if (input_dim == 0) throw ConfigError("model.input_dim must be positive");
  if (hidden_dims.empty()) throw ConfigError("model.hidden_dims needs at least one hidden layer");
  for (auto d : hidden_dims)
    if (d == 0) throw ConfigError("model.hidden_dims entries must be positive");
  if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
  if (projection_dims.empty()) throw ConfigError("model.projection_dims must not be empty");
  for (auto d : projection_dims)
    if (d == 0) throw ConfigError("model.projection_dims entries must be positive");
  if (!(init_gain > 0.0)) throw ConfigError("model.init_gain must be positive");
}

Mask Mask::merged(const Mask& other) const {
  Mask out = *this;
  out.masked.insert(other.masked.begin(), other.masked.end());
  return out;
}

void Perturbation::validate() const {
  if (kind != PerturbationKind::kZeroOut && !(sigma > 0.0))
    throw ConfigError(std::string(to_string(kind)) + " needs sigma > 0, got " + std::to_string(sigma));
}

const char* to_string(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::kZeroOut: return "zero_out";
    case PerturbationKind::kRandomInit: return "random_init";
    case PerturbationKind::kRandomNoise: return "random_noise";
  }
  return "?";
}

PerturbationKind perturbation_kind_from_string(const std::string& s) {
  if (s == "zero_out") return PerturbationKind::kZeroOut;
  if (s == "random_init") return PerturbationKind::kRandomInit;
  if (s == "random_noise") return PerturbationKind::kRandomNoise;
  throw ConfigError("unknown perturbation '" + s + "'");
}

namespace {

DenseLayer zero_layer(std::size_t in, std::size_t out) { return DenseLayer{Tensor(Shape{out, in}), Tensor(Shape{out})}; }

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t in = cfg_.input_dim;
  for (auto h : cfg_.hidden_dims) {
    hidden.push_back(zero_layer(in, h));
    in = h;
  }
  classifier = zero_layer(in, cfg_.num_classes);
  for (auto p : cfg_.projection_dims) {
    projection.push_back(zero_layer(in, p));
    in = p;
  }
}

std::size_t Model::num_neurons() const {
  std::size_t m = 0;
  for (const auto& l : hidden) m += l.out_dim();
  return m;
}

std::vector<NeuronRef> Model::neurons() const {
  std::vector<NeuronRef> out;
  out.reserve(num_neurons());
  for (std::size_t l = 0; l < hidden.size(); ++l)
    for (std::size_t u = 0; u < hidden[l].out_dim(); ++u) out.push_back({l, u});
  return out;
}

void Model::check_ref(const NeuronRef& ref) const {
  if (ref.layer >= hidden.size() || ref.unit >= hidden[ref.layer].out_dim())
    throw ReferenceError("neuron (" + std::to_string(ref.layer) + ", " + std::to_string(ref.unit) +
                         ") is not a hidden unit of this model");
}

void Model::check_mask(const Mask& mask) const {
  for (const auto& r : mask.masked) check_ref(r);
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : hidden) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  out.push_back(&classifier.weight);
  out.push_back(&classifier.bias);
  for (auto& l : projection) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor* p : parameters()) {
    for (double v : p->data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model model(cfg);
  std::mt19937_64 rng(seed);
  auto init = [&rng, &cfg](DenseLayer& l) {
    std::normal_distribution<double> dist(0.0, cfg.init_gain / std::sqrt(static_cast<double>(l.in_dim())));
    for (auto& w : l.weight.data()) w = dist(rng);
  };
  for (auto& l : model.hidden) init(l);
  init(model.classifier);
  for (auto& l : model.projection) init(l);
  return model;
}

std::vector<Var> BoundModel::parameters() const {
  std::vector<Var> out;
  for (const auto& l : hidden) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  out.push_back(classifier.weight);
  out.push_back(classifier.bias);
  for (const auto& l : projection) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

BoundModel bind(Tape& tape, const Model& model, bool trainable) {
  auto rec = [&](const DenseLayer& l) {
    return trainable ? BoundModel::Layer{tape.leaf(l.weight), tape.leaf(l.bias)}
                     : BoundModel::Layer{tape.constant(l.weight), tape.constant(l.bias)};
  };
  BoundModel b;
  b.model = &model;
  for (const auto& l : model.hidden) b.hidden.push_back(rec(l));
  b.classifier = rec(model.classifier);
  for (const auto& l : model.projection) b.projection.push_back(rec(l));
  return b;
}

ForwardVars forward(const BoundModel& bound, Var x, const Mask* mask) {
  const Model& model = *bound.model;
  if (x.value().rank() != 2 || x.value().cols() != model.config().input_dim)
    throw DimensionError("forward: input " + shape_string(x.value().shape()) + " but model expects " +
                         std::to_string(model.config().input_dim) + " columns");
  if (mask) model.check_mask(*mask);
  Var h = x;
  for (std::size_t l = 0; l < bound.hidden.size(); ++l) {
    Var w = bound.hidden[l].weight;
    Var b = bound.hidden[l].bias;
    if (mask && !mask->empty()) {
      const std::size_t in = model.hidden[l].in_dim(), out = model.hidden[l].out_dim();
      std::vector<std::uint8_t> keep_w(in * out, 1), keep_b(out, 1);
      bool any = false;
      for (auto it = mask->masked.lower_bound({l, 0}); it != mask->masked.end() && it->layer == l; ++it) {
        std::fill_n(keep_w.begin() + static_cast<std::ptrdiff_t>(it->unit * in), in, std::uint8_t{0});
        keep_b[it->unit] = 0;
        any = true;
      }
      if (any) {
        w = apply_mask(w, std::move(keep_w));
        b = apply_mask(b, std::move(keep_b));
      }
    }
    h = relu(linear(h, w, b));
  }
  Var logits = linear(h, bound.classifier.weight, bound.classifier.bias);
  return {logits, h};
}

Var project(const BoundModel& bound, Var features) {
  const auto& proj = bound.projection;
  if (features.value().rank() != 2 || features.value().cols() != bound.model->projection.front().in_dim())
    throw DimensionError("project: features " + shape_string(features.value().shape()) +
                         " do not match projection input width " +
                         std::to_string(bound.model->projection.front().in_dim()));
  Var h = features;
  for (std::size_t i = 0; i < proj.size(); ++i) {
    h = linear(h, proj[i].weight, proj[i].bias);
    if (i + 1 < proj.size()) h = relu(h);
  }
  return h;
}

ForwardResult forward(const Model& model, const Tensor& x) {
  Tape tape;
  auto bound = bind(tape, model, false);
  auto out = forward(bound, tape.constant(x));
  return {out.logits.value(), out.features.value()};
}

ForwardResult forward_masked(const Model& model, const Mask& mask, const Tensor& x) {
  Tape tape;
  auto bound = bind(tape, model, false);
  auto out = forward(bound, tape.constant(x), &mask);
  return {out.logits.value(), out.features.value()};
}

Tensor project(const Model& model, const Tensor& features) {
  Tape tape;
  auto bound = bind(tape, model, false);
  return project(bound, tape.constant(features)).value();
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<int> predict(const Model& model, const Tensor& x) { return argmax_rows(forward(model, x).logits); }

double neuron_magnitude(const Model& model, const NeuronRef& ref) {
  model.check_ref(ref);
  const DenseLayer& l = model.hidden[ref.layer];
  double s = 0.0;
  for (double w : l.weight.row(ref.unit)) s += w * w;
  const double b = l.bias[ref.unit];
  return std::sqrt(s + b * b);
}

Model apply_perturbation(const Model& model, std::span<const NeuronRef> refs, const Perturbation& p,
                         std::uint64_t seed) {
  p.validate();
  for (const auto& r : refs) model.check_ref(r);
  std::vector<NeuronRef> sorted(refs.begin(), refs.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  Model out = model;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, p.kind == PerturbationKind::kZeroOut ? 1.0 : p.sigma);
  for (const auto& r : sorted) {
    DenseLayer& l = out.hidden[r.layer];
    auto edit = [&](double& v) {
      switch (p.kind) {
        case PerturbationKind::kZeroOut: v = 0.0; break;
        case PerturbationKind::kRandomInit: v = dist(rng); break;
        case PerturbationKind::kRandomNoise: v += dist(rng); break;
      }
    };
    for (double& w : l.weight.row(r.unit)) edit(w);
    edit(l.bias[r.unit]);
  }
  return out;
}

}  // namespace spurmem

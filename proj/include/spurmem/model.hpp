#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "spurmem/tape.hpp"
#include "spurmem/tensor.hpp"

namespace spurmem {

struct ModelConfig {
  std::size_t input_dim = 20;
  std::vector<std::size_t> hidden_dims{64, 32};
  std::size_t num_classes = 2;
  std::vector<std::size_t> projection_dims{32, 16};
  // Weights ~ N(0, init_gain^2 / fan_in).
  double init_gain = 1.4142135623730951;

  // Throws ConfigError.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One dense layer; row r of `weight` is the incoming weight vector of unit r.
struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// A hidden unit: its incoming weight row plus bias entry. Classifier and
// projection-head units are never neurons.
struct NeuronRef {
  std::size_t layer = 0;
  std::size_t unit = 0;

  friend auto operator<=>(const NeuronRef&, const NeuronRef&) = default;
};

struct Mask {
  std::set<NeuronRef> masked;

  bool empty() const { return masked.empty(); }
  Mask merged(const Mask& other) const;
};

enum class PerturbationKind { kZeroOut, kRandomInit, kRandomNoise };

struct Perturbation {
  PerturbationKind kind = PerturbationKind::kZeroOut;
  double sigma = 0.0;  // per-element standard deviation for the random kinds

  static Perturbation zero_out() { return {PerturbationKind::kZeroOut, 0.0}; }
  static Perturbation random_init(double sigma) { return {PerturbationKind::kRandomInit, sigma}; }
  static Perturbation random_noise(double sigma) { return {PerturbationKind::kRandomNoise, sigma}; }

  void validate() const;
  friend bool operator==(const Perturbation&, const Perturbation&) = default;
};

const char* to_string(PerturbationKind kind);
PerturbationKind perturbation_kind_from_string(const std::string& s);

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig cfg);  // all-zero parameters

  const ModelConfig& config() const { return cfg_; }

  std::vector<DenseLayer> hidden;
  DenseLayer classifier;
  std::vector<DenseLayer> projection;

  // M: number of hidden units across all hidden layers.
  std::size_t num_neurons() const;
  // Canonical order: by layer, then unit.
  std::vector<NeuronRef> neurons() const;
  void check_ref(const NeuronRef& ref) const;
  void check_mask(const Mask& mask) const;

  // Parameter order: per hidden layer weight then bias; classifier; projection head.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  // FNV-1a over the raw parameter bytes; used to prove a model was not mutated.
  std::uint64_t checksum() const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  ModelConfig cfg_;
};

// Weights ~ N(0, init_gain^2 / fan_in) (Kaiming with the default gain), biases zero.
// Deterministic in seed.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// The model's parameters recorded on a tape.
struct BoundModel {
  struct Layer {
    Var weight;
    Var bias;
  };
  const Model* model = nullptr;
  std::vector<Layer> hidden;
  Layer classifier;
  std::vector<Layer> projection;

  // Vars in Model::parameters() order.
  std::vector<Var> parameters() const;
};

// Records parameters as leaves (trainable) or constants.
BoundModel bind(Tape& tape, const Model& model, bool trainable);

struct ForwardVars {
  Var logits;
  Var features;  // last hidden activation
};

// Forward on the tape. With a mask, the masked units' weight rows and bias
// entries are replaced by zeros through a constant mask (m ⊙ θ).
ForwardVars forward(const BoundModel& bound, Var x, const Mask* mask = nullptr);
Var project(const BoundModel& bound, Var features);

struct ForwardResult {
  Tensor logits;
  Tensor features;
};

ForwardResult forward(const Model& model, const Tensor& x);
ForwardResult forward_masked(const Model& model, const Mask& mask, const Tensor& x);
Tensor project(const Model& model, const Tensor& features);
// argmax of logits per row; ties go to the lowest class index.
std::vector<int> predict(const Model& model, const Tensor& x);
std::vector<int> argmax_rows(const Tensor& logits);

// l2 norm of the unit's incoming weight row concatenated with its bias.
double neuron_magnitude(const Model& model, const NeuronRef& ref);

// Returns a perturbed copy; only the listed units' rows and biases change.
// Random draws follow the canonical (sorted) order of refs.
Model apply_perturbation(const Model& model, std::span<const NeuronRef> refs, const Perturbation& p,
                         std::uint64_t seed);

}  // namespace spurmem

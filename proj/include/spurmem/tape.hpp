#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "spurmem/tensor.hpp"

namespace spurmem {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // d(loss)/d(this) from the most recent Tape::backward call.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode automatic differentiation over a linear record of operations.
//
// A tape and every Var on it belong to one thread. Ops append nodes in
// evaluation order; backward() walks them in reverse once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor value);
  // Non-differentiable input; no gradient flows into it.
  Var constant(Tensor value);

  // Fills grad() of every recorded node that depends on a leaf. Gradients from
  // earlier calls are discarded, not accumulated.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Op-authoring interface. `parents` decides requires_grad; `fn` receives the
  // node's own id and must add into the parents' gradient buffers.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Tensor& grad_buffer(std::size_t id) { return nodes_[id].grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  bool has_grads_ = false;
};

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
// x[B x in] * W^T + b, with W stored [out x in] and b [out].
Var linear(Var x, Var w, Var b);
// ReLU; the subgradient at exactly 0 is 0.
Var relu(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var sum(Var x);
Var mean(Var x);
// Entries whose keep flag is 0 become exactly +0.0 and receive no gradient.
Var apply_mask(Var x, std::vector<std::uint8_t> keep);
// Row-wise softmax of a [B x C] matrix.
Var softmax_rows(Var logits);
// Mean over rows of -log softmax(logits)[target], max-subtracted.
Var softmax_cross_entropy(Var logits, std::span<const int> targets);
// Mean over rows of the squared Euclidean distance.
Var mse_loss(Var pred, Var target);
// u.v / (|u||v|) for two vectors of equal length.
Var cosine_similarity(Var u, Var v);
// S[i][k] = cos(a_i, b_k) for row sets a [N x p], b [M x p].
Var cosine_similarity_matrix(Var a, Var b);
// Diagonal of a square matrix as a vector.
Var diagonal(Var s);
// log sum_k exp(s[i][k]) per row; optionally skipping k == i.
Var logsumexp_rows(Var s, bool exclude_diagonal = false);
// logsumexp_rows(s) - s[i][i] per row for square s, computed as (max - s[i][i]) + log sum exp(s - max) so that
// equal rows give log(count) exactly.
Var diagonal_logsumexp_gap(Var s, bool exclude_diagonal = false);

// ---- non-differentiable helpers ------------------------------------------

Tensor softmax_rows(const Tensor& logits);
// Per-row cross-entropy, same stabilisation as softmax_cross_entropy.
std::vector<double> cross_entropy_per_row(const Tensor& logits, std::span<const int> targets);

}  // namespace spurmem

#include "spurmem/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spurmem/error.hpp"
#include "spurmem/kernels.hpp"

namespace spurmem {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw Error("op mixes Vars from different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), needs, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  if (!has_grads_) throw Error("grad() requested before backward()");
  if (!nodes_[id].requires_grad) throw Error("node " + std::to_string(id) + " does not require grad");
  return nodes_[id].grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("backward() on a Var from another tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(lv.shape()));
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor(n.value.shape(), std::vector<double>(n.value.size(), 0.0));
  }
  has_grads_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (nodes_[id].backward) nodes_[id].backward(*this, id);
  }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void accumulate(Tape& tape, std::size_t id, std::span<const double> g) {
  if (!tape.requires_grad(id)) return;
  auto dst = tape.grad_buffer(id).data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(Shape{m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ai))
      kernels::matmul_nt(g.data(), t.value(bi).data(), t.grad_buffer(ai).data(), m, n, k, true);
    if (t.requires_grad(bi))
      kernels::matmul_tn(t.value(ai).data(), g.data(), t.grad_buffer(bi).data(), k, m, n, true);
  });
}

Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_matrix(xv, "linear");
  require_matrix(wv, "linear");
  if (xv.cols() != wv.cols())
    throw DimensionError("linear: input " + shape_string(xv.shape()) + " does not match weight " +
                         shape_string(wv.shape()));
  if (bv.size() != wv.rows())
    throw DimensionError("linear: bias " + shape_string(bv.shape()) + " does not match weight " +
                         shape_string(wv.shape()));
  const std::size_t batch = xv.rows(), in = xv.cols(), out_dim = wv.rows();
  Tensor out(Shape{batch, out_dim});
  kernels::matmul_nt(xv.data(), wv.data(), out.data(), batch, in, out_dim);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < out_dim; ++c) out(r, c) += bv[c];
  const std::size_t xi = x.id(), wi = w.id(), bi = b.id();
  return x.tape()->record(std::move(out), {x, w, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(xi))
      kernels::matmul(g.data(), t.value(wi).data(), t.grad_buffer(xi).data(), batch, out_dim, in, true);
    if (t.requires_grad(wi))
      kernels::matmul_tn(g.data(), t.value(xi).data(), t.grad_buffer(wi).data(), out_dim, batch, in, true);
    if (t.requires_grad(bi)) {
      auto db = t.grad_buffer(bi).data();
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) db[c] += g(r, c);
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t xi = x.id();
  return x.tape()->record(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
    const auto g = t.grad_of(self).data();
    const auto xv = t.value(xi).data();
    auto dx = t.grad_buffer(xi).data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) dx[i] += g[i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    accumulate(t, ai, t.grad_of(self).data());
    accumulate(t, bi, t.grad_of(self).data());
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    accumulate(t, ai, t.grad_of(self).data());
    if (t.requires_grad(bi)) {
      auto g = t.grad_of(self).data();
      auto db = t.grad_buffer(bi).data();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    auto av = t.value(ai).data();
    auto bv2 = t.value(bi).data();
    if (t.requires_grad(ai)) {
      auto da = t.grad_buffer(ai).data();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
    }
    if (t.requires_grad(bi)) {
      auto db = t.grad_buffer(bi).data();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double c) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= c;
  const std::size_t xi = x.id();
  return x.tape()->record(std::move(out), {x}, [xi, c](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    auto dx = t.grad_buffer(xi).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id();
  return x.tape()->record(Tensor::scalar(s), {x}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (auto& d : t.grad_buffer(xi).data()) d += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var apply_mask(Var x, std::vector<std::uint8_t> keep) {
  if (keep.size() != x.value().size())
    throw DimensionError("apply_mask: mask of length " + std::to_string(keep.size()) + " for tensor " +
                         shape_string(x.value().shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!keep[i]) out[i] = 0.0;
  const std::size_t xi = x.id();
  return x.tape()->record(std::move(out), {x}, [xi, keep = std::move(keep)](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    auto dx = t.grad_buffer(xi).data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (keep[i]) dx[i] += g[i];
  });
}

Tensor softmax_rows(const Tensor& logits) {
  require_matrix(logits, "softmax");
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  return out;
}

Var softmax_rows(Var logits) {
  Tensor out = softmax_rows(logits.value());
  const std::size_t li = logits.id();
  return logits.tape()->record(std::move(out), {logits}, [li](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_buffer(li);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

namespace {

void check_targets(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  if (targets.size() != logits.rows())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  for (std::size_t r = 0; r < targets.size(); ++r)
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= logits.cols())
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " at row " + std::to_string(r) +
                       " outside [0, " + std::to_string(logits.cols()) + ")");
}

}  // namespace

std::vector<double> cross_entropy_per_row(const Tensor& logits, std::span<const int> targets) {
  check_targets(logits, targets);
  std::vector<double> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out[r] = std::log(z) + mx - row[static_cast<std::size_t>(targets[r])];
  }
  return out;
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  const auto per_row = cross_entropy_per_row(logits.value(), targets);
  double total = 0.0;
  for (double v : per_row) total += v;
  const double batch = static_cast<double>(per_row.size());
  std::vector<int> tgt(targets.begin(), targets.end());
  const std::size_t li = logits.id();
  return logits.tape()->record(
      Tensor::scalar(total / batch), {logits}, [li, tgt = std::move(tgt), batch](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0];
        Tensor p = softmax_rows(t.value(li));
        Tensor& dx = t.grad_buffer(li);
        for (std::size_t r = 0; r < p.rows(); ++r) {
          p(r, static_cast<std::size_t>(tgt[r])) -= 1.0;
          for (std::size_t c = 0; c < p.cols(); ++c) dx(r, c) += g * p(r, c) / batch;
        }
      });
}

Var mse_loss(Var pred, Var target) {
  require_same_shape(pred.value(), target.value(), "mse_loss");
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  const std::size_t batch = p.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - y[i];
    total += d * d;
  }
  const std::size_t pi = pred.id(), ti = target.id();
  return pred.tape()->record(
      Tensor::scalar(total / static_cast<double>(batch)), {pred, target}, [pi, ti, batch](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)[0] * 2.0 / static_cast<double>(batch);
        auto pv = t.value(pi).data();
        auto yv = t.value(ti).data();
        if (t.requires_grad(pi)) {
          auto dp = t.grad_buffer(pi).data();
          for (std::size_t i = 0; i < pv.size(); ++i) dp[i] += g * (pv[i] - yv[i]);
        }
        if (t.requires_grad(ti)) {
          auto dy = t.grad_buffer(ti).data();
          for (std::size_t i = 0; i < pv.size(); ++i) dy[i] -= g * (pv[i] - yv[i]);
        }
      });
}

namespace {

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Unit rows of m; throws on a zero row.
std::pair<Tensor, std::vector<double>> normalize_rows(const Tensor& m, const char* op) {
  Tensor unit = m;
  std::vector<double> norms(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    norms[r] = norm_of(m.row(r));
    if (!(norms[r] > 0.0)) throw DegenerateInputError(std::string(op) + ": zero-norm vector at row " + std::to_string(r));
    for (auto& v : unit.row(r)) v /= norms[r];
  }
  return {std::move(unit), std::move(norms)};
}

// Gradient through x -> x/|x| for each row, given upstream dU and the unit rows.
void backprop_normalize(const Tensor& unit, const std::vector<double>& norms, const Tensor& du, Tensor& dx) {
  for (std::size_t r = 0; r < unit.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < unit.cols(); ++c) dot += du(r, c) * unit(r, c);
    for (std::size_t c = 0; c < unit.cols(); ++c) dx(r, c) += (du(r, c) - dot * unit(r, c)) / norms[r];
  }
}

}  // namespace

Var cosine_similarity(Var u, Var v) {
  const Tensor& uv = u.value();
  const Tensor& vv = v.value();
  if (uv.size() != vv.size())
    throw DimensionError("cosine_similarity: lengths differ, " + shape_string(uv.shape()) + " vs " +
                         shape_string(vv.shape()));
  const double nu = norm_of(uv.data()), nv = norm_of(vv.data());
  if (!(nu > 0.0) || !(nv > 0.0)) throw DegenerateInputError("cosine_similarity: zero-norm input");
  double dot = 0.0;
  for (std::size_t i = 0; i < uv.size(); ++i) dot += uv[i] * vv[i];
  const double s = dot / (nu * nv);
  const std::size_t ui = u.id(), vi = v.id();
  return u.tape()->record(Tensor::scalar(s), {u, v}, [=](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    auto a = t.value(ui).data();
    auto b = t.value(vi).data();
    if (t.requires_grad(ui)) {
      auto du = t.grad_buffer(ui).data();
      for (std::size_t i = 0; i < a.size(); ++i) du[i] += g * (b[i] / (nu * nv) - s * a[i] / (nu * nu));
    }
    if (t.requires_grad(vi)) {
      auto dv = t.grad_buffer(vi).data();
      for (std::size_t i = 0; i < a.size(); ++i) dv[i] += g * (a[i] / (nu * nv) - s * b[i] / (nv * nv));
    }
  });
}

Var cosine_similarity_matrix(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "cosine_similarity_matrix");
  require_matrix(bv, "cosine_similarity_matrix");
  if (av.cols() != bv.cols())
    throw DimensionError("cosine_similarity_matrix: feature widths differ, " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  auto [ua, na] = normalize_rows(av, "cosine_similarity_matrix");
  auto [ub, nb] = normalize_rows(bv, "cosine_similarity_matrix");
  const std::size_t n = av.rows(), m = bv.rows(), p = av.cols();
  Tensor s(Shape{n, m});
  kernels::matmul_nt(ua.data(), ub.data(), s.data(), n, p, m);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(s), {a, b},
                          [=, ua = std::move(ua), na = std::move(na), ub = std::move(ub), nb = std::move(nb)](
                              Tape& t, std::size_t self) {
                            const Tensor& g = t.grad_of(self);
                            if (t.requires_grad(ai)) {
                              Tensor dua(Shape{n, p});
                              kernels::matmul(g.data(), ub.data(), dua.data(), n, m, p);
                              backprop_normalize(ua, na, dua, t.grad_buffer(ai));
                            }
                            if (t.requires_grad(bi)) {
                              Tensor dub(Shape{m, p});
                              kernels::matmul_tn(g.data(), ua.data(), dub.data(), m, n, p);
                              backprop_normalize(ub, nb, dub, t.grad_buffer(bi));
                            }
                          });
}

Var diagonal(Var s) {
  const Tensor& sv = s.value();
  require_matrix(sv, "diagonal");
  if (sv.rows() != sv.cols()) throw DimensionError("diagonal: matrix not square, " + shape_string(sv.shape()));
  const std::size_t n = sv.rows();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = sv(i, i);
  const std::size_t si = s.id();
  return s.tape()->record(std::move(out), {s}, [si, n](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    Tensor& ds = t.grad_buffer(si);
    for (std::size_t i = 0; i < n; ++i) ds(i, i) += g[i];
  });
}

Var logsumexp_rows(Var s, bool exclude_diagonal) {
  const Tensor& sv = s.value();
  require_matrix(sv, "logsumexp_rows");
  const std::size_t n = sv.rows(), m = sv.cols();
  if (exclude_diagonal && (n != m || m < 2))
    throw DimensionError("logsumexp_rows: excluding the diagonal needs a square matrix with at least 2 columns, got " +
                         shape_string(sv.shape()));
  Tensor out(Shape{n});
  // Softmax weights are kept for backward.
  Tensor w(Shape{n, m});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c)
      if (!(exclude_diagonal && c == r)) mx = std::max(mx, sv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (exclude_diagonal && c == r) continue;
      w(r, c) = std::exp(sv(r, c) - mx);
      z += w(r, c);
    }
    for (std::size_t c = 0; c < m; ++c) w(r, c) /= z;
    out[r] = mx + std::log(z);
  }
  const std::size_t si = s.id();
  return s.tape()->record(std::move(out), {s}, [si, w = std::move(w)](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    Tensor& ds = t.grad_buffer(si);
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) ds(r, c) += g[r] * w(r, c);
  });
}

Var diagonal_logsumexp_gap(Var s, bool exclude_diagonal) {
  const Tensor& sv = s.value();
  require_matrix(sv, "diagonal_logsumexp_gap");
  const std::size_t n = sv.rows();
  if (sv.cols() != n || (exclude_diagonal && n < 2))
    throw DimensionError("diagonal_logsumexp_gap: needs a square matrix" +
                         std::string(exclude_diagonal ? " with at least 2 columns" : "") + ", got " +
                         shape_string(sv.shape()));
  Tensor out(Shape{n});
  Tensor w(Shape{n, n});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (!(exclude_diagonal && c == r)) mx = std::max(mx, sv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (exclude_diagonal && c == r) continue;
      w(r, c) = std::exp(sv(r, c) - mx);
      z += w(r, c);
    }
    for (std::size_t c = 0; c < n; ++c) w(r, c) /= z;
    out[r] = (mx - sv(r, r)) + std::log(z);
  }
  const std::size_t si = s.id();
  return s.tape()->record(std::move(out), {s}, [si, w = std::move(w)](Tape& t, std::size_t self) {
    auto g = t.grad_of(self).data();
    Tensor& ds = t.grad_buffer(si);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) ds(r, c) += g[r] * w(r, c);
      ds(r, r) -= g[r];
    }
  });
}

}  // namespace spurmem

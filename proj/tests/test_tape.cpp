#include <cmath>
#include <numeric>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "spurmem/error.hpp"

using namespace spurmem;
using testing::grad_check;
using testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

// Scalarise an arbitrary output with fixed random weights so every output
// element carries a distinct gradient.
Var weighted_sum(Tape& t, Var y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 7);
  return sum(mul(y, t.constant(random_tensor(y.shape(), rng))));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tape t;
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(t.constant(a), t.constant(Tensor::identity(2))).value() == a);
  const Tensor p = Tensor::matrix({{0, 1}, {1, 0}});
  CHECK(matmul(t.constant(Tensor::identity(2)), t.constant(p)).value() == p);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape t;
  try {
    matmul(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 3})));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul matches triple loop") {
  Rng rng = make_rng(5);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tape t;
  const Tensor c = matmul(t.constant(a), t.constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      CHECK(std::abs(c(i, j) - s) <= 1e-12);
    }
}

TEST_CASE("relu values and subgradient") {
  Tape t;
  CHECK(relu(t.constant(Tensor::vector({-1, 0, 2}))).value() == Tensor::vector({0, 0, 2}));
  CHECK(relu(t.constant(Tensor::vector({-3, -0.5}))).value() == Tensor::vector({0, 0}));
  Var x = t.leaf(Tensor::vector({-1, 2}));
  t.backward(sum(relu(x)));
  CHECK(x.grad() == Tensor::vector({0, 1}));
  Var z = t.leaf(Tensor::vector({0.0}));
  t.backward(sum(relu(z)));
  CHECK(z.grad()[0] == 0.0);
}

TEST_CASE("softmax cross entropy closed forms") {
  Tape t;
  const std::vector<int> zero{0};
  const double big = softmax_cross_entropy(t.constant(Tensor::matrix({{10, -10}})), zero).value().item();
  CHECK(big == doctest::Approx(-std::log(1.0 / (1.0 + std::exp(-20.0)))).epsilon(1e-9));
  CHECK(big == doctest::Approx(2.06e-9).epsilon(0.01));
  const double uni = softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), zero).value().item();
  CHECK(uni == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy matches per-row oracle") {
  Rng rng = make_rng(11);
  const Tensor logits = random_tensor({3, 5}, rng, 3.0);
  const std::vector<int> y{4, 0, 2};
  long double acc = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    long double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += std::exp(static_cast<long double>(logits(r, c)));
    acc += std::log(s) - logits(r, static_cast<std::size_t>(y[r]));
  }
  Tape t;
  const double got = softmax_cross_entropy(t.constant(logits), y).value().item();
  CHECK(std::abs(got - static_cast<double>(acc / 3)) <= 1e-10);
  const auto rows = cross_entropy_per_row(logits, y);
  CHECK(std::accumulate(rows.begin(), rows.end(), 0.0) / 3 == doctest::Approx(got).epsilon(1e-14));
}

TEST_CASE("softmax cross entropy rejects bad targets") {
  Tape t;
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), bad), IndexError);
  const std::vector<int> neg{-1};
  CHECK_THROWS_AS(softmax_cross_entropy(t.constant(Tensor::matrix({{0, 0}})), neg), IndexError);
}

TEST_CASE("cross entropy is nonnegative") {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = make_rng(s);
    const Tensor logits = random_tensor({6, 3}, rng, 20.0);
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    for (double v : cross_entropy_per_row(logits, y)) CHECK(v >= 0.0);
  }
}

TEST_CASE("softmax rows sum to one") {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = make_rng(s);
    const Tensor p = softmax_rows(random_tensor({5, 4}, rng, 10.0));
    for (std::size_t r = 0; r < 5; ++r) {
      const auto row = p.row(r);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("mse loss") {
  Tape t;
  const Tensor a = Tensor::matrix({{1, 0}}), b = Tensor::matrix({{0, 1}});
  CHECK(mse_loss(t.constant(a), t.constant(a)).value().item() == 0.0);
  CHECK(mse_loss(t.constant(a), t.constant(b)).value().item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(mse_loss(t.constant(a), t.constant(Tensor::matrix({{1, 2, 3}}))), DimensionError);

  Rng rng = make_rng(3);
  const Tensor p = random_tensor({4, 3}, rng), q = random_tensor({4, 3}, rng);
  double oracle = 0;
  for (std::size_t i = 0; i < p.size(); ++i) oracle += (p[i] - q[i]) * (p[i] - q[i]);
  CHECK(std::abs(mse_loss(t.constant(p), t.constant(q)).value().item() - oracle / 4) <= 1e-12);
}

TEST_CASE("cosine similarity") {
  Tape t;
  auto cs = [&](std::vector<double> u, std::vector<double> v) {
    return cosine_similarity(t.constant(Tensor::vector(std::move(u))), t.constant(Tensor::vector(std::move(v))))
        .value()
        .item();
  };
  CHECK(cs({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cs({1, 0}, {0, 1}) == 0.0);
  CHECK(cs({1, 2, 3}, {3, 2, 1}) == doctest::Approx(10.0 / 14.0).epsilon(1e-12));
  CHECK_THROWS_AS(cs({0, 0}, {1, 1}), DegenerateInputError);
  CHECK_THROWS_AS(cs({1, 1}, {0, 0}), DegenerateInputError);
  CHECK_THROWS_AS(cosine_similarity_matrix(t.constant(Tensor::matrix({{1, 0}, {0, 0}})),
                                           t.constant(Tensor::matrix({{1, 0}}))),
                  DegenerateInputError);
}

TEST_CASE("cosine similarity stays within [-1, 1]") {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng = make_rng(s);
    Tape t;
    Tensor u = random_tensor({7}, rng);
    const double same = cosine_similarity(t.constant(u), t.constant(u)).value().item();
    CHECK(std::abs(same) <= 1 + 1e-12);
    Tensor neg = u;
    for (auto& v : neg.data()) v = -v * 3.0;
    const double opp = cosine_similarity(t.constant(u), t.constant(neg)).value().item();
    CHECK(opp >= -1 - 1e-12);
    const Tensor s_mat = cosine_similarity_matrix(t.constant(random_tensor({5, 4}, rng)),
                                                  t.constant(random_tensor({6, 4}, rng)))
                             .value();
    for (double v : s_mat.data()) CHECK(std::abs(v) <= 1 + 1e-12);
  }
}

TEST_CASE("backward hand cases") {
  Tape t;
  Var x = t.leaf(Tensor(Shape{2, 3}, 0.7));
  t.backward(sum(x));
  for (double g : x.grad().data()) CHECK(g == 1.0);
  Var w = t.leaf(Tensor::vector({1, -2}));
  t.backward(sum(mul(w, w)));
  CHECK(w.grad() == Tensor::vector({2, -4}));
  CHECK_THROWS_AS(t.backward(w), DimensionError);
}

TEST_CASE("repeated backward overwrites and is deterministic") {
  Rng rng = make_rng(1);
  Tape t;
  Var a = t.leaf(random_tensor({3, 4}, rng));
  Var b = t.leaf(random_tensor({4, 2}, rng));
  Var loss = sum(mul(matmul(a, b), matmul(a, b)));
  t.backward(loss);
  const Tensor g1 = a.grad();
  t.backward(loss);
  CHECK(a.grad() == g1);
  CHECK(b.grad().all_finite());
}

TEST_CASE("constants receive no gradient") {
  Tape t;
  Var c = t.constant(Tensor::vector({1, 2}));
  Var x = t.leaf(Tensor::vector({3, 4}));
  t.backward(sum(mul(c, x)));
  CHECK(x.grad() == Tensor::vector({1, 2}));
  CHECK_FALSE(t.requires_grad(c.id()));
}

TEST_CASE("apply_mask writes exact zeros and blocks gradient") {
  Tape t;
  Var x = t.leaf(Tensor::vector({-0.0, 5, 6}));
  Var y = apply_mask(x, {0, 1, 0});
  CHECK(y.value()[0] == 0.0);
  CHECK_FALSE(std::signbit(y.value()[0]));
  CHECK(y.value()[1] == 5.0);
  t.backward(sum(mul(y, y)));
  CHECK(x.grad() == Tensor::vector({0, 10, 0}));
  CHECK_THROWS_AS(apply_mask(x, {1, 1}), DimensionError);
}

TEST_CASE("finite-difference agreement for every op") {
  for (int s = 0; s < kSeeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    Rng rng = make_rng(seed);
    CAPTURE(s);
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    CHECK(grad_check({a, b}, [&](Tape& t, const auto& v) { return weighted_sum(t, matmul(v[0], v[1]), seed); }) <
          kGradTol);

    const Tensor w = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
    CHECK(grad_check({a, w, bias},
                     [&](Tape& t, const auto& v) { return weighted_sum(t, linear(v[0], v[1], v[2]), seed); }) <
          kGradTol);

    CHECK(grad_check({a}, [&](Tape& t, const auto& v) { return weighted_sum(t, relu(v[0]), seed); }) < kGradTol);

    const Tensor c = random_tensor({3, 4}, rng);
    CHECK(grad_check({a, c}, [&](Tape& t, const auto& v) { return weighted_sum(t, add(v[0], v[1]), seed); }) <
          kGradTol);
    CHECK(grad_check({a, c}, [&](Tape& t, const auto& v) { return weighted_sum(t, sub(v[0], v[1]), seed); }) <
          kGradTol);
    CHECK(grad_check({a, c}, [&](Tape& t, const auto& v) { return weighted_sum(t, mul(v[0], v[1]), seed); }) <
          kGradTol);
    CHECK(grad_check({a}, [&](Tape& t, const auto& v) { return weighted_sum(t, scale(v[0], -1.7), seed); }) <
          kGradTol);
    CHECK(grad_check({a}, [&](Tape&, const auto& v) { return mean(mul(v[0], v[0])); }) < kGradTol);

    std::vector<std::uint8_t> keep(a.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i * 7 + seed) % 3 != 0;
    CHECK(grad_check({a}, [&](Tape& t, const auto& v) { return weighted_sum(t, apply_mask(v[0], keep), seed); }) <
          kGradTol);

    CHECK(grad_check({a}, [&](Tape& t, const auto& v) { return weighted_sum(t, softmax_rows(v[0]), seed); }) <
          kGradTol);
    const std::vector<int> y{0, 3, 1};
    CHECK(grad_check({a}, [&](Tape&, const auto& v) { return softmax_cross_entropy(v[0], y); }) < kGradTol);
    CHECK(grad_check({a, c}, [&](Tape&, const auto& v) { return mse_loss(v[0], v[1]); }) < kGradTol);

    const Tensor u = random_tensor({6}, rng), q = random_tensor({6}, rng);
    CHECK(grad_check({u, q}, [&](Tape&, const auto& v) { return cosine_similarity(v[0], v[1]); }) < kGradTol);
    const Tensor r1 = random_tensor({4, 3}, rng), r2 = random_tensor({4, 3}, rng);
    CHECK(grad_check({r1, r2}, [&](Tape& t, const auto& v) {
            return weighted_sum(t, cosine_similarity_matrix(v[0], v[1]), seed);
          }) < kGradTol);
    const Tensor sq = random_tensor({4, 4}, rng);
    CHECK(grad_check({sq}, [&](Tape& t, const auto& v) { return weighted_sum(t, diagonal(v[0]), seed); }) <
          kGradTol);
    CHECK(grad_check({sq}, [&](Tape& t, const auto& v) { return weighted_sum(t, logsumexp_rows(v[0]), seed); }) <
          kGradTol);
    CHECK(grad_check({sq}, [&](Tape& t, const auto& v) {
            return weighted_sum(t, logsumexp_rows(v[0], true), seed);
          }) < kGradTol);
    for (bool excl : {false, true})
      CHECK(grad_check({sq}, [&](Tape& t, const auto& v) {
              return weighted_sum(t, diagonal_logsumexp_gap(v[0], excl), seed);
            }) < kGradTol);
  }
}

TEST_CASE("diagonal_logsumexp_gap") {
  Rng rng = make_rng(5);
  const Tensor sq = random_tensor({5, 5}, rng);
  for (bool excl : {false, true}) {
    Tape t;
    Var s = t.constant(sq);
    const Tensor gap = diagonal_logsumexp_gap(s, excl).value();
    const Tensor ref = sub(logsumexp_rows(s, excl), diagonal(s)).value();
    for (std::size_t i = 0; i < 5; ++i) CHECK(gap[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  }
  for (std::size_t n : {2, 3, 4, 8}) {
    Tape t;
    const Tensor gap = diagonal_logsumexp_gap(t.constant(Tensor(Shape{n, n}, 1.7))).value();
    for (double v : gap.data()) CHECK(v == std::log(static_cast<double>(n)));
  }
  Tape t;
  CHECK_THROWS_AS(diagonal_logsumexp_gap(t.constant(Tensor(Shape{2, 3}))), DimensionError);
  CHECK_THROWS_AS(diagonal_logsumexp_gap(t.constant(Tensor(Shape{1, 1})), true), DimensionError);
}

TEST_CASE("full MLP with cross entropy matches finite differences") {
  for (int s = 0; s < kSeeds; ++s) {
    const Model m = testing::tiny_model(static_cast<std::uint64_t>(s));
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 3);
    const Tensor x = random_tensor({6, 4}, rng);
    const std::vector<int> y{0, 1, 1, 0, 1, 0};
    std::vector<Tensor> params;
    for (const Tensor* p : m.parameters()) params.push_back(*p);
    const double err = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
      BoundModel b = bind(t, m, false);
      std::size_t i = 0;
      for (auto& l : b.hidden) {
        l.weight = v[i++];
        l.bias = v[i++];
      }
      b.classifier.weight = v[i++];
      b.classifier.bias = v[i++];
      return softmax_cross_entropy(forward(b, t.constant(x)).logits, y);
    });
    CAPTURE(s);
    CHECK(err < kGradTol);
  }
}

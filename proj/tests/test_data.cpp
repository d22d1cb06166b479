#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "spurmem/error.hpp"

using namespace spurmem;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const std::string& name, const std::string& body) {
  fs::path dir = fs::temp_directory_path() / "spurmem_data";
  fs::create_directories(dir);
  fs::path p = dir / name;
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("perfect correlation leaves minority groups empty") {
  GroupSpec gs;
  gs.correlation = 1.0;
  gs.n_train = 500;
  const auto d = generate(gs, FeatureSpec{}, 1);
  const auto c = d.train.group_counts();
  CHECK(c[1] == 0);
  CHECK(c[2] == 0);
  CHECK(c[0] + c[3] == 500);
}

TEST_CASE("minority mass follows the correlation") {
  GroupSpec gs;
  const auto d = generate(gs, FeatureSpec{}, 2);
  const auto c = d.train.group_counts();
  const double minority = static_cast<double>(c[1] + c[2]) / 5000.0;
  // 4 binomial standard deviations
  CHECK(std::abs(minority - 0.05) < 4 * std::sqrt(0.05 * 0.95 / 5000));
  CHECK(d.train.size() == 5000);
  CHECK(d.val.group_counts() == std::vector<std::size_t>(4, 200));
  CHECK(d.test.group_counts() == std::vector<std::size_t>(4, 500));
}

TEST_CASE("explicit counts are honoured") {
  GroupSpec gs;
  gs.train_counts = {40, 3, 2, 50};
  gs.val_counts = {5, 6, 7, 8};
  gs.test_counts = {1, 1, 1, 1};
  const auto d = generate(gs, FeatureSpec{}, 3);
  CHECK(d.train.group_counts() == gs.train_counts);
  CHECK(d.val.group_counts() == gs.val_counts);
  CHECK(d.test.group_counts() == gs.test_counts);
  gs.train_counts = {1, 2};
  CHECK_THROWS_AS(generate(gs, FeatureSpec{}, 3), ConfigError);
}

TEST_CASE("invalid specs are config errors") {
  GroupSpec gs;
  gs.correlation = 1.5;
  CHECK_THROWS_AS(generate(gs, FeatureSpec{}, 0), ConfigError);
  FeatureSpec fs_bad;
  fs_bad.core_dim = 0;
  fs_bad.spurious_dim = 0;
  CHECK_THROWS_AS(generate(GroupSpec{}, fs_bad, 0), ConfigError);
}

TEST_CASE("generation is deterministic and consistent") {
  GroupSpec gs;
  gs.n_train = 300;
  const auto a = generate(gs, FeatureSpec{}, 7), b = generate(gs, FeatureSpec{}, 7);
  CHECK(a.train.x == b.train.x);
  CHECK(a.test.y == b.test.y);
  CHECK_FALSE(generate(gs, FeatureSpec{}, 8).train.x == a.train.x);
  for (const auto* s : {&a.train, &a.val, &a.test}) {
    CHECK_NOTHROW(s->validate());
    for (std::size_t i = 0; i < s->size(); ++i) CHECK(s->g[i] / 2 == s->y[i]);
  }
}

TEST_CASE("templates are orthogonal") {
  const Tensor t = class_templates(3, 6, 11);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 6; ++k) dot += t(i, k) * t(j, k);
      if (i == j)
        CHECK(dot == doctest::Approx(6.0).epsilon(1e-12));
      else
        CHECK(std::abs(dot) < 1e-12);
    }
}

TEST_CASE("core block mean concentrates on the class template") {
  GroupSpec gs;
  gs.train_counts = {2000, 0, 0, 2000};
  gs.val_per_group = 1;
  gs.test_per_group = 1;
  FeatureSpec fs;
  const auto d = generate(gs, fs, 5);
  // Recover v_y from the noiseless limit by regenerating with zero noise.
  FeatureSpec clean = fs;
  clean.noise_std = 0.0;
  const auto c = generate(gs, clean, 5);
  for (int y = 0; y < 2; ++y) {
    const auto idx = d.train.group_indices(y * 3);
    const double n = static_cast<double>(idx.size());
    for (std::size_t k = 0; k < fs.core_dim; ++k) {
      double m = 0;
      for (auto i : idx) m += d.train.x(i, k);
      m /= n;
      const double target = c.train.x(c.train.group_indices(y * 3).front(), k);
      CHECK(std::abs(m - target) < 3 * fs.noise_std / std::sqrt(n));
    }
  }
}

TEST_CASE("csv round trip") {
  GroupSpec gs;
  gs.n_train = 50;
  gs.val_per_group = 3;
  gs.test_per_group = 3;
  const auto d = generate(gs, FeatureSpec{}, 9);
  const fs::path p = fs::temp_directory_path() / "spurmem_data" / "round.csv";
  fs::create_directories(p.parent_path());
  export_csv(d.train, p);
  const auto back = load_csv(p, CsvSchema{});
  REQUIRE(back.train.size() == 50);
  CHECK(back.val.empty());
  CHECK(back.train.y == d.train.y);
  CHECK(back.train.g == d.train.g);
  for (std::size_t i = 0; i < d.train.x.size(); ++i) CHECK(std::abs(back.train.x[i] - d.train.x[i]) <= 1e-12);
}

TEST_CASE("small csv parses") {
  const auto p = scratch_file("ok.csv",
                              "f0,f1,label,group,split\n"
                              "0.5,1,0,0,train\n"
                              "1.5,-2,1,3,val\n"
                              "2,3,1,2,test\n");
  const auto d = load_csv(p, CsvSchema{});
  CHECK(d.train.size() + d.val.size() + d.test.size() == 3);
  CHECK(d.val.x(0, 1) == -2.0);
  CHECK(d.test.g[0] == 2);
}

TEST_CASE("csv errors carry the row number") {
  const auto groop = scratch_file("groop.csv", "f0,label,groop,split\n1,0,0,train\n");
  try {
    load_csv(groop, CsvSchema{});
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("'group'") != std::string::npos);
  }
  const auto nonnum = scratch_file("nonnum.csv", "f0,label,group,split\n1,0,0,train\nabc,0,0,train\n");
  try {
    load_csv(nonnum, CsvSchema{});
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 3);
  }
  const auto split = scratch_file("split.csv", "f0,label,group,split\n1,0,0,holdout\n");
  try {
    load_csv(split, CsvSchema{});
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
  }
  CHECK_THROWS_AS(load_csv(fs::temp_directory_path() / "spurmem_data" / "absent.csv", CsvSchema{}), IoError);
}

TEST_CASE("augment") {
  Rng rng = make_rng(1);
  const std::vector<double> row{1, -2, 3, 0.5};
  CHECK(augment(row, AugmentConfig{0.0, 0.0}, rng) == row);

  std::size_t nonzero = 0;
  for (int i = 0; i < 1000; ++i)
    for (double v : augment(row, AugmentConfig{0.1, 1.0 - 1e-9}, rng)) nonzero += v != 0.0;
  CHECK(nonzero == 0);

  const std::size_t d = 16;
  const std::vector<double> base(d, 0.7);
  const AugmentConfig jitter{0.2, 0.0};
  double total = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto v = augment(base, jitter, rng);
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += (v[k] - base[k]) * (v[k] - base[k]);
    total += std::sqrt(s);
  }
  CHECK(total / draws == doctest::Approx(0.2 * std::sqrt(static_cast<double>(d))).epsilon(0.05));

  CHECK_THROWS_AS(AugmentConfig({0.1, 1.0}).validate(), ConfigError);
}

TEST_CASE("group accuracy") {
  using testing::make_dataset;
  const auto d = make_dataset(Tensor(Shape{8, 1}), {0, 0, 0, 0, 1, 1, 1, 1}, {0, 0, 1, 1, 2, 2, 3, 3});
  const std::vector<int> all = d.y;
  const auto full = group_accuracy(all, d);
  CHECK(full.wga == 1.0);
  for (double a : full.accuracy) CHECK(a == 1.0);

  const std::vector<int> minority_wrong{0, 0, 1, 1, 0, 0, 1, 1};
  CHECK(group_accuracy(minority_wrong, d).wga == 0.0);

  const std::vector<int> mixed{0, 1, 1, 0, 1, 0, 1, 1};
  const auto m = group_accuracy(mixed, d);
  CHECK(m.correct == std::vector<std::size_t>{1, 1, 1, 2});
  CHECK(m.wga == 0.5);
  CHECK(m.total_correct == 5);
  CHECK(m.mean_group == doctest::Approx(0.625));

  const std::vector<int> short_preds{0};
  CHECK_THROWS_AS(group_accuracy(short_preds, d), DimensionError);

  const auto gap = make_dataset(Tensor(Shape{2, 1}), {0, 1}, {0, 3});
  const std::vector<int> p2{0, 1};
  const auto ga = group_accuracy(p2, gap);
  CHECK(ga.has_empty_groups);
  CHECK_FALSE(ga.present[1]);
  CHECK(ga.wga == 1.0);
}

TEST_CASE("wga bounds and totals hold for random predictions") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto d = testing::small_benchmark(s, 200);
    Rng rng = make_rng(s);
    std::vector<int> preds(d.train.size());
    std::uniform_int_distribution<int> c(0, 1);
    for (auto& p : preds) p = c(rng);
    const auto a = group_accuracy(preds, d.train);
    double mx = 0;
    std::size_t correct = 0;
    for (std::size_t j = 0; j < 4; ++j)
      if (a.present[j]) mx = std::max(mx, a.accuracy[j]);
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == d.train.y[i];
    CHECK(a.wga <= a.mean_group);
    CHECK(a.mean_group <= mx);
    CHECK(std::accumulate(a.correct.begin(), a.correct.end(), std::size_t{0}) == correct);
  }
}

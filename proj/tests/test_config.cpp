#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spurmem/config.hpp"
#include "spurmem/error.hpp"

using namespace spurmem;

namespace {

ExperimentConfig unusual() {
  ExperimentConfig c = default_benchmark_config();
  c.data.groups.num_attrs = 3;
  c.data.groups.correlation = 0.8;
  c.data.groups.train_counts = {10, 2, 3, 4, 20, 5};
  c.data.groups.val_per_group = 7;
  c.data.features.noise_dim = 3;
  c.data.features.core_strength = 0.123456789012345678;
  c.model.input_dim = 13;
  c.model.hidden_dims = {7, 5, 3};
  c.model.projection_dims = {4};
  c.model.init_gain = 1.0 / 3.0;
  c.train.lr = 3.3e-4;
  c.train.epochs = 17;
  c.train.seed = 42;
  c.trace.criteria = {CriterionKind::kMagnitude};
  c.trace.perturbation_kinds = {PerturbationKind::kRandomInit, PerturbationKind::kRandomNoise};
  c.trace.sigmas = {0.1, 1e-3};
  c.trace.scope = Scope::within(1);
  c.trace.seeds = {1, 2, 3};
  c.finetune.kick_in_epoch = 5;
  c.finetune.sup_loss = SupLoss::kCe;
  c.finetune.gradient_source = GradientSource::kMinorityGroups;
  c.finetune.pseudo_labels = true;
  c.finetune.ntxent = {false, true};
  c.finetune.seed = 42;
  c.finetune_criteria = {MaskCriterion::kCombined};
  c.ablation = {{"lambda", {"0.01", "10"}}, {"loss", {"ce"}}};
  c.output.directory = "out dir/x";
  c.output.svg = false;
  return c;
}

}  // namespace

TEST_CASE("round trip is identity") {
  for (const auto& c : {default_benchmark_config(), unusual()}) {
    REQUIRE_NOTHROW(c.validate());
    const std::string text = serialize_config(c);
    const auto back = parse_config(text);
    CHECK(back == c);
    CHECK(serialize_config(back) == text);
    CHECK(config_hash(back) == config_hash(c));
  }
  CHECK(config_hash(unusual()) != config_hash(default_benchmark_config()));
  CHECK(config_hash(default_benchmark_config()).size() == 16);
}

TEST_CASE("partial files fall back to the benchmark preset") {
  const auto c = parse_config("# comment\n[train]\nepochs = 3\n; another\n\n[finetune]\nkick_in_epoch = 2\n");
  auto want = default_benchmark_config();
  want.train.epochs = 3;
  want.finetune.kick_in_epoch = 2;
  CHECK(c == want);
}

TEST_CASE("unknown keys and sections are rejected") {
  CHECK_THROWS_AS(parse_config("[train]\nepoch = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[optimizer]\nlr = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[ablation]\nmomentum = 1,2\n"), ConfigError);
  try {
    parse_config("[model]\nwidth = 3\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("width") != std::string::npos);
  }
}

TEST_CASE("bad values are rejected") {
  CHECK_THROWS_AS(parse_config("[train]\nepochs = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nlr = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[finetune]\nsup_loss = hinge\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[trace]\nscope = everywhere\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[output]\nsvg = maybe\n"), ConfigError);
}

TEST_CASE("cross-section checks") {
  CHECK_THROWS_AS(parse_config("[model]\nnum_classes = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\ninput_dim = 19\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = 10\n[finetune]\nkick_in_epoch = 11\n"), ConfigError);
  CHECK_NOTHROW(parse_config("[data]\ncsv = a.csv\n[model]\ninput_dim = 7\n"));
}

TEST_CASE("seed override reaches every stochastic stage") {
  auto c = default_benchmark_config();
  apply_seed(c, 9);
  CHECK(c.train.seed == 9);
  CHECK(c.finetune.seed == 9);
  CHECK(parse_config("[train]\nseed = 5\n").finetune.seed == 5);
}

TEST_CASE("load_config") {
  const auto p = std::filesystem::temp_directory_path() / "spurmem_cfg.ini";
  std::ofstream(p) << serialize_config(unusual());
  CHECK(load_config(p) == unusual());
  CHECK_THROWS_AS(load_config(std::filesystem::temp_directory_path() / "spurmem_absent.ini"), IoError);
}

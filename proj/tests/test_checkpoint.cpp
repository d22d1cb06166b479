#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "spurmem/checkpoint.hpp"
#include "spurmem/error.hpp"

using namespace spurmem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("spurmem_ckpt_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d / "model";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("round trip is bit exact") {
  const Model m = testing::tiny_model(12);
  const auto prefix = scratch("roundtrip");
  save_checkpoint(m, prefix, "seed=12");
  const Model back = load_checkpoint(prefix);
  CHECK(back == m);
  CHECK(back.config() == m.config());
  Rng rng = make_rng(1);
  const Tensor x = testing::random_tensor({3, 4}, rng);
  CHECK(forward(back, x).logits == forward(m, x).logits);
  CHECK(slurp(manifest_path(prefix)).find("lineage=seed=12") != std::string::npos);
}

TEST_CASE("truncated blob is rejected") {
  const auto prefix = scratch("truncated");
  save_checkpoint(testing::tiny_model(1), prefix);
  fs::resize_file(blob_path(prefix), fs::file_size(blob_path(prefix)) - 8);
  CHECK_THROWS_AS(load_checkpoint(prefix), CorruptionError);
}

TEST_CASE("manifest dims disagreeing with blob are rejected") {
  const auto prefix = scratch("dims");
  save_checkpoint(testing::tiny_model(1), prefix);
  std::string text = slurp(manifest_path(prefix));
  const auto pos = text.find("hidden_dims=");
  REQUIRE(pos != std::string::npos);
  const auto end = text.find('\n', pos);
  text.replace(pos, end - pos, "hidden_dims=5,4");
  std::ofstream(manifest_path(prefix)) << text;
  CHECK_THROWS_AS(load_checkpoint(prefix), CorruptionError);
}

TEST_CASE("missing files raise io errors") {
  CHECK_THROWS_AS(load_checkpoint(scratch("missing")), IoError);
}

TEST_CASE("garbage manifest is corruption") {
  const auto prefix = scratch("garbage");
  save_checkpoint(testing::tiny_model(1), prefix);
  std::ofstream(manifest_path(prefix)) << "this is not a manifest\n";
  CHECK_THROWS_AS(load_checkpoint(prefix), CorruptionError);
}

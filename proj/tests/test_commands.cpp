#include <sys/wait.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "spurmem/commands.hpp"
#include "spurmem/error.hpp"

using namespace spurmem;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kSmallConfig = R"([data]
n_train = 400
val_per_group = 25
test_per_group = 25
correlation = 0.9

[model]
hidden_dims = 16,8
projection_dims = 16,8

[train]
lr = 0.003
epochs = 2
batch_size = 64

[trace]
k_list = 1,2
seeds = 0,1

[finetune]
kick_in_epoch = 1
finetune_epochs = 1
batch_size = 64
pool_size = 64
sample_size = 32

[output]
directory = unused
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("spurmem_cmd_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunOptions small_opts(const fs::path& out, std::vector<std::uint64_t> seeds = {0}) {
  RunOptions o;
  o.config = parse_config(kSmallConfig);
  o.seeds = std::move(seeds);
  o.out = out;
  return o;
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string(SPURMEM_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "cfg.ini";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("gen-data writes three splits deterministically") {
  const auto dir = fresh_dir("gen");
  cmd_gen_data(small_opts(dir));
  for (const char* f : {"train.csv", "val.csv", "test.csv", "manifest_gen-data.json", "config.ini"})
    CHECK(fs::exists(dir / f));
  const auto first = slurp(dir / "train.csv");
  cmd_gen_data(small_opts(dir));
  CHECK(slurp(dir / "train.csv") == first);
  const auto m = read_manifest(dir / manifest_name("gen-data"));
  CHECK(m.command == "gen-data");
  CHECK(m.tool_version == kToolVersion);
  CHECK(m.warnings.empty());
  for (const auto& [name, rel] : m.artifacts) CHECK(fs::exists(dir / rel));
}

TEST_CASE("perfect correlation warns about empty groups") {
  const auto dir = fresh_dir("gen_rho1");
  auto o = small_opts(dir);
  o.config.data.groups.correlation = 1.0;
  cmd_gen_data(o);
  const auto m = read_manifest(dir / manifest_name("gen-data"));
  CHECK(m.warnings.size() == 2);
  CHECK(m.warnings[0].find("no samples") != std::string::npos);
}

TEST_CASE("train, trace, finetune and report in process") {
  const auto dir = fresh_dir("pipeline");
  const auto o = small_opts(dir);
  cmd_train(o);
  for (const char* f : {"metrics.csv", "erm_best.manifest", "erm_kickin.bin", "erm_final.bin"})
    CHECK(fs::exists(dir / f));

  cmd_trace(o);
  const auto records = read_trace_csv(dir / "trace.csv");
  const auto& tc = o.config.trace;
  CHECK(records.size() == tc.criteria.size() * tc.perturbations().size() * tc.k_list.size() * tc.seeds.size() * 4);
  for (const auto& r : records) CHECK(r.delta_abs == std::abs(r.delta_signed));
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".svg") {
      std::ifstream in(entry.path());
      boost::property_tree::ptree tree;
      CHECK_NOTHROW(boost::property_tree::read_xml(in, tree));
    }
  CHECK(fs::exists(dir / "heatmap_gradient.csv"));
  CHECK(fs::exists(dir / "histogram.csv"));

  cmd_finetune(o);
  const auto summary = json::parse(slurp(dir / "summary.json"));
  CHECK(summary.contains("wga_erm"));
  CHECK(summary.contains("wga_ft"));
  CHECK(summary.contains("wga_ft_grad"));
  CHECK(summary.contains("wga_ft_mag"));
  const auto first = slurp(dir / "summary.json");
  cmd_finetune(o);
  CHECK(slurp(dir / "summary.json") == first);

  cmd_report(dir);
  const auto report = json::parse(slurp(dir / "report.json"));
  CHECK(report["runs"] == 1);
  CHECK(report["wga_erm_mean"].get<double>() == summary["wga_erm"].get<double>());
  CHECK(report["wga_ft_grad_mean"].get<double>() == summary["wga_ft_grad"].get<double>());
  CHECK(report["wga_erm_std"].get<double>() == 0.0);
  CHECK(report["wga_ft_mag_std"].get<double>() == 0.0);
  for (const char* k : {"wga_erm_mean", "wga_erm_std", "wga_ft_grad_mean", "wga_ft_grad_std", "wga_ft_mag_mean",
                        "wga_ft_mag_std"})
    CHECK(report.contains(k));
}

TEST_CASE("zero fine-tuning epochs give equal bars") {
  const auto dir = fresh_dir("ft0");
  auto o = small_opts(dir);
  cmd_train(o);
  o.config.finetune.finetune_epochs = 0;
  o.checkpoint = dir / "erm_kickin";
  o.baseline = dir / "erm_kickin";
  cmd_finetune(o);
  const auto s = json::parse(slurp(dir / "summary.json"));
  CHECK(s["wga_ft_grad"].get<double>() == s["wga_erm"].get<double>());
  CHECK(s["wga_ft_mag"].get<double>() == s["wga_erm"].get<double>());
}

TEST_CASE("report statistics over several runs") {
  const auto dir = fresh_dir("report5");
  const std::vector<double> erm{0.5, 0.6, 0.7, 0.65, 0.55};
  for (std::size_t i = 0; i < erm.size(); ++i) {
    const auto sub = dir / ("seed_" + std::to_string(i));
    fs::create_directories(sub);
    json s;
    s["wga_erm"] = erm[i];
    s["wga_ft_grad"] = erm[i] + 0.1;
    s["wga_ft_mag"] = 0.8;
    std::ofstream(sub / "summary.json") << s.dump();
    RunManifest m;
    m.command = "finetune";
    m.artifacts["summary.json"] = "summary.json";
    write_manifest(m, sub, manifest_name("finetune"));
  }
  cmd_report(dir);
  const auto r = json::parse(slurp(dir / "report.json"));
  CHECK(r["runs"] == 5);
  // mean 0.6, squared deviations sum 0.025, sample variance 0.00625
  CHECK(r["wga_erm_mean"].get<double>() == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(r["wga_erm_std"].get<double>() == doctest::Approx(std::sqrt(0.00625)).epsilon(1e-12));
  CHECK(r["wga_ft_grad_std"].get<double>() == doctest::Approx(std::sqrt(0.00625)).epsilon(1e-12));
  CHECK(r["wga_ft_mag_std"].get<double>() == doctest::Approx(0.0).epsilon(1e-12));

  std::ofstream(dir / "seed_2" / "summary.json") << "{not json";
  CHECK_THROWS_AS(cmd_report(dir), CorruptionError);
  fs::remove(dir / "seed_2" / "summary.json");
  fs::remove(dir / "seed_3" / manifest_name("finetune"));
  CHECK_THROWS_AS(cmd_report(dir), CorruptionError);
}

TEST_CASE("empty run directory reports no runs") {
  const auto dir = fresh_dir("empty");
  try {
    cmd_report(dir);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("no runs found") != std::string::npos);
  }
}

TEST_CASE("several seeds fan out into subdirectories") {
  const auto dir = fresh_dir("fanout");
  auto o = small_opts(dir, {3, 4});
  o.jobs = 2;
  cmd_train(o);
  CHECK(fs::exists(dir / "seed_3" / "erm_best.bin"));
  CHECK(fs::exists(dir / "seed_4" / "erm_best.bin"));
  const auto top = read_manifest(dir / manifest_name("train"));
  CHECK(top.seeds == std::vector<std::uint64_t>{3, 4});
  const auto one = read_manifest(dir / "seed_3" / manifest_name("train"));
  CHECK(one.seeds == std::vector<std::uint64_t>{3});
  CHECK_FALSE(slurp(dir / "seed_3" / "erm_best.bin") == slurp(dir / "seed_4" / "erm_best.bin"));
}

TEST_CASE("cli smoke run and seed override") {
  const auto dir = fresh_dir("cli_smoke");
  const auto cfg = write_config(dir, kSmallConfig);
  const auto out = dir / "run";
  const auto before = slurp(cfg);
  const auto r = cli("train --config " + cfg.string() + " --seed 7 --out " + out.string(), dir);
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "erm_best.bin"));
  CHECK(read_manifest(out / manifest_name("train")).seeds == std::vector<std::uint64_t>{7});
  CHECK(slurp(cfg) == before);

  const auto c2 = cli("report --out " + out.string(), dir);
  CHECK(c2.code == 3);
  CHECK(c2.err.find("no runs found") != std::string::npos);
}

TEST_CASE("cli exit codes") {
  const auto dir = fresh_dir("cli_codes");
  const auto missing = write_config(dir, std::string("[data]\ncsv = ") + (dir / "nowhere.csv").string() + "\n");
  const auto m = cli("train --config " + missing.string() + " --out " + (dir / "a").string(), dir);
  CHECK(m.code == 3);
  CHECK(m.err.find((dir / "nowhere.csv").string()) != std::string::npos);

  const auto bad = write_config(dir, "[train]\nepoch = 3\n");
  CHECK(cli("train --config " + bad.string() + " --out " + (dir / "b").string(), dir).code == 2);
  CHECK(cli("train --bogus-flag", dir).code == 2);

  const auto nan = write_config(dir, std::string(kSmallConfig) + "");
  std::string text = kSmallConfig;
  text.replace(text.find("lr = 0.003"), 10, "lr = 1e300");
  std::ofstream(nan) << text;
  const auto n = cli("train --config " + nan.string() + " --out " + (dir / "c").string(), dir);
  CHECK(n.code == 4);

  CHECK(cli("trace --config " + write_config(dir, kSmallConfig).string() + " --out " + (dir / "d").string(), dir)
            .code == 3);
}

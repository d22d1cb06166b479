#include <iostream>

#include "CLI11.hpp"
#include "spurmem/commands.hpp"
#include "spurmem/error.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

int fail(int code, const std::string& what) {
  std::cerr << "error: " << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spurious memorization lab: synthetic data, ERM, neuron tracing and dual-branch fine-tuning"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  int jobs = 1;
  std::string checkpoint;
  std::string baseline;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI config file (defaults to the built-in benchmark)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seeds, "run seed; several seeds fan out into seed_<N> subdirectories");
    sub->add_option("--out", out_dir, "output directory (defaults to [output] directory)");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("gen-data", "write train/val/test CSVs");
  auto* train = app.add_subcommand("train", "ERM training with validation-WGA model selection");
  auto* trace = app.add_subcommand("trace", "unstructured and structured neuron tracing");
  auto* ft = app.add_subcommand("finetune", "dual-branch fine-tuning from the kick-in checkpoint");
  auto* ablate = app.add_subcommand("ablate", "one-factor-at-a-time fine-tuning ablation");
  auto* report = app.add_subcommand("report", "aggregate fine-tuning summaries under --out");
  for (auto* sub : {gen, train, trace, ft, ablate}) add_common(sub);
  report->add_option("--out", out_dir, "run directory to aggregate")->required();
  report->add_option("--config", config_path, "ignored; accepted for symmetry");
  report->add_option("--jobs", jobs, "ignored; accepted for symmetry");
  trace->add_option("--checkpoint", checkpoint, "model to trace (default <out>/erm_final)");
  ft->add_option("--checkpoint", checkpoint, "model to fine-tune (default <out>/erm_kickin)");
  ft->add_option("--baseline", baseline, "ERM model to compare against (default <out>/erm_best)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (report->parsed()) {
      spurmem::cmd_report(out_dir, &std::cerr);
      return kOk;
    }
    spurmem::RunOptions opts;
    opts.config = config_path.empty() ? spurmem::default_benchmark_config() : spurmem::load_config(config_path);
    opts.seeds = seeds.empty() ? std::vector<std::uint64_t>{opts.config.train.seed} : seeds;
    opts.out = out_dir.empty() ? opts.config.output.directory : std::filesystem::path(out_dir);
    opts.jobs = jobs;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    if (!baseline.empty()) opts.baseline = baseline;
    opts.log = &std::cerr;

    if (gen->parsed()) spurmem::cmd_gen_data(opts);
    else if (train->parsed()) spurmem::cmd_train(opts);
    else if (trace->parsed()) spurmem::cmd_trace(opts);
    else if (ft->parsed()) spurmem::cmd_finetune(opts);
    else if (ablate->parsed()) spurmem::cmd_ablate(opts);
    return kOk;
  } catch (const spurmem::ConfigError& e) {
    return fail(kConfig, e.what());
  } catch (const spurmem::DimensionError& e) {
    return fail(kConfig, e.what());
  } catch (const spurmem::NumericError& e) {
    return fail(kNumeric, e.what());
  } catch (const spurmem::IoError& e) {
    return fail(kIo, e.what());
  } catch (const spurmem::CorruptionError& e) {
    return fail(kIo, e.what());
  } catch (const spurmem::ParseError& e) {
    return fail(kIo, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, e.what());
  } catch (const std::exception& e) {
    return fail(kOther, e.what());
  }
}

#include "spurmem/commands.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spurmem/checkpoint.hpp"
#include "spurmem/error.hpp"
#include "spurmem/svg.hpp"

namespace spurmem {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void say(const RunOptions& opts, const std::string& line) {
  if (!opts.log) return;
#pragma omp critical(spurmem_log)
  *opts.log << line << "\n" << std::flush;
}

std::string group_label(const GroupedDataset& d, int g) {
  return "G" + std::to_string(g) + (d.is_minority(g) ? " (min)" : "");
}

std::string short_name(MaskCriterion c) {
  switch (c) {
    case MaskCriterion::kGradient: return "grad";
    case MaskCriterion::kMagnitude: return "mag";
    case MaskCriterion::kCombined: return "combined";
  }
  return "?";
}

std::string sigma_tag(const Perturbation& p) {
  if (p.kind == PerturbationKind::kZeroOut) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "_s%g", p.sigma);
  return buf;
}

fs::path require_checkpoint(const fs::path& prefix, const std::string& hint) {
  if (!fs::exists(manifest_path(prefix)))
    throw IoError("checkpoint not found: " + manifest_path(prefix).string() + hint);
  return prefix;
}

void save_artifact_checkpoint(const Model& model, const fs::path& dir, const std::string& name,
                              const std::string& lineage, RunManifest& m) {
  save_checkpoint(model, dir / name, lineage);
  m.artifacts[name + ".manifest"] = name + ".manifest";
  m.artifacts[name + ".bin"] = name + ".bin";
}

void save_text(const fs::path& dir, const std::string& name, const std::string& text, RunManifest& m) {
  svg::write_file_atomic(dir / name, text);
  m.artifacts[name] = name;
}

using SeedFn = std::function<void(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, RunManifest& m)>;

// Runs fn once per seed, in parallel across seeds when several are given, and
// writes each run's manifest plus a merged top-level manifest.
void for_each_seed(const RunOptions& opts, const std::string& command, const SeedFn& fn) {
  if (opts.seeds.empty()) throw ConfigError("no seeds given");
  if (opts.jobs < 1) throw ConfigError("--jobs must be >= 1");
  opts.config.validate();
  const bool fan_out = opts.seeds.size() > 1;

  std::vector<RunManifest> manifests(opts.seeds.size());
  auto run_one = [&](std::size_t i) {
    const std::uint64_t seed = opts.seeds[i];
    ExperimentConfig cfg = opts.config;
    apply_seed(cfg, seed);
    const fs::path dir = fan_out ? opts.out / ("seed_" + std::to_string(seed)) : opts.out;
    fs::create_directories(dir);
    RunManifest& m = manifests[i];
    m.command = command;
    m.config_hash = config_hash(cfg);
    m.seeds = {seed};
    save_text(dir, "config.ini", serialize_config(cfg), m);
    const auto t0 = Clock::now();
    fn(cfg, seed, dir, m);
    m.timings_sec["total"] = seconds_since(t0);
    for (const auto& w : m.warnings) say(opts, "warning: " + w);
    write_manifest(m, dir, manifest_name(command));
  };

  if (!fan_out) {
    omp_set_num_threads(opts.jobs);
    run_one(0);
    return;
  }
  std::exception_ptr failure;
  const auto n = static_cast<long>(opts.seeds.size());
#pragma omp parallel for num_threads(opts.jobs) schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    try {
      run_one(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(spurmem_seed_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  RunManifest top;
  top.command = command;
  top.config_hash = config_hash(opts.config);
  top.seeds = opts.seeds;
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    const std::string sub = "seed_" + std::to_string(opts.seeds[i]);
    top.artifacts[sub] = sub + "/" + manifest_name(command);
    top.timings_sec[sub] = manifests[i].timings_sec["total"];
  }
  write_manifest(top, opts.out, manifest_name(command));
}

}  // namespace

std::string manifest_name(const std::string& command) { return "manifest_" + command + ".json"; }

void write_manifest(const RunManifest& m, const fs::path& dir, const std::string& filename) {
  for (const auto& [name, rel] : m.artifacts)
    if (!fs::exists(dir / rel)) throw IoError("manifest artifact '" + name + "' missing: " + (dir / rel).string());
  json j;
  j["command"] = m.command;
  j["tool_version"] = m.tool_version;
  j["config_hash"] = m.config_hash;
  j["seeds"] = m.seeds;
  j["artifacts"] = m.artifacts;
  j["timings_sec"] = m.timings_sec;
  j["warnings"] = m.warnings;
  svg::write_file_atomic(dir / filename, j.dump(2) + "\n");
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  RunManifest m;
  try {
    const json j = json::parse(in);
    m.command = j.at("command").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.timings_sec = j.at("timings_sec").get<std::map<std::string, double>>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw CorruptionError("manifest " + path.string() + " is corrupt: " + e.what());
  }
  return m;
}

DatasetSplits load_data(const ExperimentConfig& cfg) {
  DatasetSplits data;
  if (cfg.data.csv.empty()) {
    data = generate(cfg.data.groups, cfg.data.features, cfg.train.seed);
  } else {
    std::vector<DatasetSplits> parts;
    const CsvSchema schema{cfg.data.groups.num_classes, cfg.data.groups.num_attrs};
    for (const auto& p : cfg.data.csv) {
      if (!fs::exists(p)) throw IoError("dataset file not found: " + p.string());
      parts.push_back(load_csv(p, schema));
    }
    data = merge_splits(parts);
  }
  for (const auto* split : {&data.train, &data.val, &data.test})
    if (!split->empty() && split->feature_dim != cfg.model.input_dim)
      throw ConfigError("dataset has " + std::to_string(split->feature_dim) + " features but model.input_dim is " +
                        std::to_string(cfg.model.input_dim));
  return data;
}

void cmd_gen_data(const RunOptions& opts) {
  for_each_seed(opts, "gen-data", [&](const ExperimentConfig& cfg, std::uint64_t, const fs::path& dir, RunManifest& m) {
    const auto data = load_data(cfg);
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      const auto& d = data.get(s);
      const auto counts = d.group_counts();
      for (std::size_t g = 0; g < counts.size(); ++g)
        if (counts[g] == 0)
          m.warnings.push_back(std::string(to_string(s)) + " split: group " + std::to_string(g) + " has no samples");
      const std::string name = std::string(to_string(s)) + ".csv";
      export_csv(d, dir / name);
      m.artifacts[name] = name;
    }
    say(opts, "wrote " + std::to_string(data.train.size()) + "/" + std::to_string(data.val.size()) + "/" +
                  std::to_string(data.test.size()) + " rows to " + dir.string());
  });
}

void cmd_train(const RunOptions& opts) {
  for_each_seed(opts, "train", [&](const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, RunManifest& m) {
    const auto data = load_data(cfg);
    Model init = build_model(cfg.model, seed);
    Model kickin = init;
    Model last = init;
    MetricsCsvWriter metrics(dir / "metrics.csv");
    m.artifacts["metrics.csv"] = "metrics.csv";
    TrainHooks hooks;
    hooks.metrics = &metrics;
    hooks.on_epoch_end = [&](int epoch, const Model& model) {
      if (epoch == cfg.finetune.kick_in_epoch) kickin = model;
      last = model;
    };
    const auto t0 = Clock::now();
    const auto result = train_erm(std::move(init), data, cfg.train, hooks);
    m.timings_sec["erm"] = seconds_since(t0);
    const std::string lineage = "erm seed=" + std::to_string(seed);
    save_artifact_checkpoint(result.best_model, dir, "erm_best",
                             lineage + " best_epoch=" + std::to_string(result.best_epoch), m);
    save_artifact_checkpoint(kickin, dir, "erm_kickin",
                             lineage + " epoch=" + std::to_string(cfg.finetune.kick_in_epoch), m);
    save_artifact_checkpoint(last, dir, "erm_final", lineage + " epoch=" + std::to_string(cfg.train.epochs), m);
    char buf[160];
    std::snprintf(buf, sizeof buf, "seed %llu: best epoch %d, val WGA %.4f, test WGA %.4f",
                  static_cast<unsigned long long>(seed), result.best_epoch, result.best_val_wga,
                  evaluate(result.best_model, data.test).wga());
    say(opts, buf);
  });
}

void cmd_trace(const RunOptions& opts) {
  for_each_seed(opts, "trace", [&](const ExperimentConfig& cfg, std::uint64_t, const fs::path& dir, RunManifest& m) {
    const fs::path ckpt = require_checkpoint(opts.checkpoint.value_or(dir / "erm_final"), " (run `spurmem train` first)");
    const Model model = load_checkpoint(ckpt);
    const auto data = load_data(cfg);
    const GroupedDataset& train = data.train;

    auto t0 = Clock::now();
    const auto report = unstructured_trace(model, train, cfg.trace);
    m.timings_sec["unstructured"] = seconds_since(t0);
    write_trace_csv(report.records, dir / "trace.csv");
    m.artifacts["trace.csv"] = "trace.csv";

    const auto averaged = average_over_seeds(report.records);
    if (cfg.output.svg) {
      for (auto crit : cfg.trace.criteria)
        for (const auto& p : cfg.trace.perturbations()) {
          svg::BarChart chart;
          chart.title = std::string("|accuracy change| by group, ") + to_string(crit) + ", " + to_string(p.kind) +
                        (p.kind == PerturbationKind::kZeroOut ? "" : " sigma=" + sigma_tag(p).substr(2));
          chart.y_label = "|delta acc|";
          chart.gradated = true;
          for (int g = 0; g < train.num_groups(); ++g) chart.categories.push_back(group_label(train, g));
          for (auto k : cfg.trace.k_list) {
            svg::Series s{"top-" + std::to_string(k), std::vector<double>(chart.categories.size(), 0.0), {}};
            for (const auto& r : averaged)
              if (r.criterion == crit && r.perturbation == p && r.k == k)
                s.values[static_cast<std::size_t>(r.group)] = r.delta_abs;
            chart.series.push_back(std::move(s));
          }
          const std::string name =
              std::string("trace_") + to_string(crit) + "_" + to_string(p.kind) + sigma_tag(p) + ".svg";
          save_text(dir, name, svg::render(chart), m);
        }
    }

    t0 = Clock::now();
    const auto perturbations = cfg.trace.perturbations();
    for (auto crit : cfg.trace.criteria) {
      const auto st =
          structured_trace(model, train, crit, perturbations.front(), cfg.trace.structured_k, cfg.trace.seeds);
      for (const auto& w : st.warnings) m.warnings.push_back(w);
      const std::string base = std::string("heatmap_") + to_string(crit);
      write_heatmap_csv(st, dir / (base + ".csv"));
      m.artifacts[base + ".csv"] = base + ".csv";
      if (cfg.output.svg) {
        svg::Heatmap map;
        map.title = std::string("per-layer top-") + std::to_string(cfg.trace.structured_k) + " " + to_string(crit) +
                    ", |accuracy change|";
        for (int g = 0; g < train.num_groups(); ++g) map.row_labels.push_back(group_label(train, g));
        for (std::size_t l = 0; l < st.num_layers; ++l) map.col_labels.push_back("layer " + std::to_string(l));
        map.values = st.delta_abs;
        save_text(dir, base + ".svg", svg::render(map), m);
      }
    }
    m.timings_sec["structured"] = seconds_since(t0);

    const auto hist = rank_histogram(neuron_gradients(model, train.x, train.y), neuron_magnitudes(model),
                                     cfg.trace.histogram_top_fraction);
    if (hist.clamped_to_one) m.warnings.push_back("histogram: top fraction selects < 1 unit; using 1");
    write_histogram_csv(hist, dir / "histogram.csv");
    m.artifacts["histogram.csv"] = "histogram.csv";
    if (cfg.output.svg) {
      svg::BarChart chart;
      chart.title = "magnitude percentile of the top-gradient units";
      chart.y_label = "count";
      svg::Series s{"units", {}, {}};
      for (std::size_t b = 0; b < hist.counts.size(); ++b) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%g", hist.bin_lo[b]);
        chart.categories.push_back(buf);
        s.values.push_back(static_cast<double>(hist.counts[b]));
      }
      chart.series.push_back(std::move(s));
      save_text(dir, "histogram.svg", svg::render(chart), m);
    }
    say(opts, "wrote " + std::to_string(report.records.size()) + " trace records to " + (dir / "trace.csv").string());
  });
}

void cmd_finetune(const RunOptions& opts) {
  for_each_seed(opts, "finetune", [&](const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir,
                                      RunManifest& m) {
    const fs::path start_path =
        require_checkpoint(opts.checkpoint.value_or(dir / "erm_kickin"), " (run `spurmem train` first)");
    fs::path baseline_path = start_path;
    if (opts.baseline)
      baseline_path = require_checkpoint(*opts.baseline, "");
    else if (fs::exists(manifest_path(dir / "erm_best")))
      baseline_path = dir / "erm_best";
    const Model start = load_checkpoint(start_path);
    const Model baseline = load_checkpoint(baseline_path);
    const auto data = load_data(cfg);

    json summary;
    summary["seed"] = seed;
    summary["wga_erm"] = evaluate(baseline, data.test).wga();
    summary["wga_start"] = evaluate(start, data.test).wga();
    json ft = json::object();
    json best_epochs = json::object();
    std::set<std::string> seen_warnings;
    for (auto crit : cfg.finetune_criteria) {
      FinetuneConfig fc = cfg.finetune;
      fc.mask_criterion = crit;
      const std::string name = to_string(crit);
      MetricsCsvWriter metrics(dir / ("metrics_ft_" + name + ".csv"), true);
      m.artifacts["metrics_ft_" + name + ".csv"] = "metrics_ft_" + name + ".csv";
      FinetuneHooks hooks;
      hooks.metrics = &metrics;
      const auto t0 = Clock::now();
      const auto result = finetune(start, data, fc, hooks);
      m.timings_sec["finetune_" + name] = seconds_since(t0);
      for (const auto& w : result.warnings)
        if (seen_warnings.insert(w).second) m.warnings.push_back(w);
      save_artifact_checkpoint(result.best_model, dir, "ft_" + name,
                               "finetune " + name + " seed=" + std::to_string(seed) +
                                   " best_epoch=" + std::to_string(result.best_epoch),
                               m);
      const double wga = evaluate(result.best_model, data.test).wga();
      ft[name] = wga;
      best_epochs[name] = result.best_epoch;
      summary["wga_ft_" + short_name(crit)] = wga;
    }
    summary["wga_ft"] = ft;
    summary["best_epoch"] = best_epochs;
    save_text(dir, "summary.json", summary.dump(2) + "\n", m);

    if (cfg.output.svg) {
      svg::BarChart chart;
      chart.title = "test worst-group accuracy";
      chart.y_label = "WGA";
      chart.y_min = 0.0;
      chart.y_max = 1.0;
      svg::Series erm{"ERM", {}, {}};
      svg::Series tuned{"fine-tuned", {}, {}};
      for (auto crit : cfg.finetune_criteria) {
        chart.categories.push_back(to_string(crit));
        erm.values.push_back(summary["wga_erm"].get<double>());
        tuned.values.push_back(ft[to_string(crit)].get<double>());
      }
      chart.series = {erm, tuned};
      save_text(dir, "wga.svg", svg::render(chart), m);
    }
    std::ostringstream line;
    line << "seed " << seed << ": ERM WGA " << summary["wga_erm"].get<double>();
    for (const auto& [k, v] : ft.items()) line << ", " << k << " " << v.get<double>();
    say(opts, line.str());
  });
}

void cmd_ablate(const RunOptions& opts) {
  if (opts.seeds.empty()) throw ConfigError("no seeds given");
  if (opts.jobs < 1) throw ConfigError("--jobs must be >= 1");
  opts.config.validate();
  if (opts.config.ablation.empty()) throw ConfigError("config has no [ablation] axes");
  ExperimentConfig cfg = opts.config;
  apply_seed(cfg, opts.seeds.front());
  omp_set_num_threads(opts.jobs);
  fs::create_directories(opts.out);

  RunManifest m;
  m.command = "ablate";
  m.config_hash = config_hash(cfg);
  m.seeds = opts.seeds;
  save_text(opts.out, "config.ini", serialize_config(cfg), m);
  const auto t0 = Clock::now();
  const auto data = load_data(cfg);
  AblationPlan plan{cfg.model, cfg.train, cfg.finetune, cfg.ablation, opts.seeds};
  plan.base.mask_criterion = cfg.finetune_criteria.front();
  const auto rows = ablation_suite(data, plan);
  m.timings_sec["total"] = seconds_since(t0);
  write_ablation_csv(rows, opts.out / "ablation.csv");
  m.artifacts["ablation.csv"] = "ablation.csv";

  if (cfg.output.svg) {
    svg::BarChart chart;
    chart.title = "WGA change over ERM per ablation cell (mean over seeds)";
    chart.y_label = "delta WGA";
    svg::Series s{"delta WGA", {}, {}};
    for (const auto& axis : cfg.ablation)
      for (const auto& v : axis.values) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& r : rows)
          if (r.axis == axis.name && r.value == v) {
            sum += r.delta_wga;
            ++n;
          }
        chart.categories.push_back(axis.name + "=" + v);
        s.values.push_back(n ? sum / static_cast<double>(n) : 0.0);
      }
    chart.series.push_back(std::move(s));
    save_text(opts.out, "ablation.svg", svg::render(chart), m);
  }
  write_manifest(m, opts.out, manifest_name("ablate"));
  say(opts, "wrote " + std::to_string(rows.size()) + " ablation rows to " + (opts.out / "ablation.csv").string());
}

ReportStats aggregate_summaries(const std::vector<fs::path>& summaries) {
  if (summaries.empty()) throw IoError("no runs found");
  const std::vector<std::string> keys{"wga_erm", "wga_ft_grad", "wga_ft_mag"};
  std::map<std::string, std::vector<double>> values;
  for (const auto& path : summaries) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
      const json j = json::parse(in);
      for (const auto& k : keys) values[k].push_back(j.at(k).get<double>());
    } catch (const json::exception& e) {
      throw CorruptionError("run summary " + path.string() + " is corrupt: " + e.what());
    }
  }
  ReportStats stats;
  stats.runs = summaries.size();
  for (const auto& k : keys) {
    const auto& v = values[k];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    stats.values[k + "_mean"] = mean;
    stats.values[k + "_std"] = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return stats;
}

void cmd_report(const fs::path& run_dir, std::ostream* log) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory not found: " + run_dir.string());
  std::vector<fs::path> summaries;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir))
    if (entry.is_regular_file() && entry.path().filename() == "summary.json") summaries.push_back(entry.path());
  if (summaries.empty()) throw IoError("no runs found in " + run_dir.string());
  std::sort(summaries.begin(), summaries.end());
  for (const auto& s : summaries) {
    const auto manifest = s.parent_path() / manifest_name("finetune");
    if (!fs::exists(manifest))
      throw CorruptionError("run " + s.parent_path().string() + " has no " + manifest_name("finetune"));
    read_manifest(manifest);
  }
  const auto t0 = Clock::now();
  const ReportStats stats = aggregate_summaries(summaries);

  RunManifest m;
  m.command = "report";
  json out;
  out["runs"] = stats.runs;
  for (const auto& k : {"wga_erm", "wga_ft_grad", "wga_ft_mag"}) {
    out[std::string(k) + "_mean"] = stats.values.at(std::string(k) + "_mean");
    out[std::string(k) + "_std"] = stats.values.at(std::string(k) + "_std");
  }
  json dirs = json::array();
  for (const auto& s : summaries) dirs.push_back(fs::relative(s.parent_path(), run_dir).generic_string());
  out["run_dirs"] = dirs;
  save_text(run_dir, "report.json", out.dump(2) + "\n", m);

  svg::BarChart chart;
  chart.title = "test worst-group accuracy, mean and std over " + std::to_string(stats.runs) + " run(s)";
  chart.y_label = "WGA";
  chart.y_min = 0.0;
  chart.y_max = 1.0;
  chart.categories = {"ERM", "fine-tuned (gradient)", "fine-tuned (magnitude)"};
  svg::Series s{"WGA", {}, {}};
  for (const auto& k : {"wga_erm", "wga_ft_grad", "wga_ft_mag"}) {
    s.values.push_back(stats.values.at(std::string(k) + "_mean"));
    s.errors.push_back(stats.values.at(std::string(k) + "_std"));
  }
  chart.series.push_back(std::move(s));
  save_text(run_dir, "report.svg", svg::render(chart), m);
  m.timings_sec["total"] = seconds_since(t0);
  write_manifest(m, run_dir, manifest_name("report"));
  if (log) *log << "aggregated " << stats.runs << " run(s) into " << (run_dir / "report.json").string() << "\n";
}

}  // namespace spurmem

#include "spurmem/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "spurmem/error.hpp"

namespace spurmem {

const char* to_string(CriterionKind kind) {
  return kind == CriterionKind::kGradient ? "gradient" : "magnitude";
}

CriterionKind criterion_from_string(const std::string& s) {
  if (s == "gradient") return CriterionKind::kGradient;
  if (s == "magnitude") return CriterionKind::kMagnitude;
  throw ConfigError("unknown criterion '" + s + "'");
}

ScoreList neuron_gradients(const Model& model, const Tensor& x, std::span<const int> y) {
  if (y.empty()) throw ConfigError("neuron_gradients: empty batch");
  Tape tape;
  auto bound = bind(tape, model, true);
  Var loss = softmax_cross_entropy(forward(bound, tape.constant(x)).logits, y);
  tape.backward(loss);
  ScoreList out;
  out.reserve(model.num_neurons());
  for (std::size_t l = 0; l < bound.hidden.size(); ++l) {
    const Tensor& gw = bound.hidden[l].weight.grad();
    const Tensor& gb = bound.hidden[l].bias.grad();
    for (std::size_t u = 0; u < gw.rows(); ++u) {
      double s = gb[u] * gb[u];
      for (double v : gw.row(u)) s += v * v;
      out.push_back({{l, u}, std::sqrt(s)});
    }
  }
  return out;
}

ScoreList neuron_gradients(const Model& model, const GroupedDataset& data, int group) {
  const auto idx = data.group_indices(group);
  if (idx.empty()) throw ConfigError("neuron_gradients: group " + std::to_string(group) + " has no samples");
  auto sub = data.subset(idx);
  return neuron_gradients(model, sub.x, sub.y);
}

ScoreList neuron_magnitudes(const Model& model) {
  ScoreList out;
  for (const auto& ref : model.neurons()) out.push_back({ref, neuron_magnitude(model, ref)});
  return out;
}

std::vector<NeuronRef> top_k(std::span<const NeuronScore> scores, std::size_t k, Scope scope) {
  std::vector<NeuronScore> cand;
  for (const auto& s : scores)
    if (!scope.layer || s.ref.layer == *scope.layer) cand.push_back(s);
  if (k > cand.size())
    throw ConfigError("top_k: k=" + std::to_string(k) + " exceeds the " + std::to_string(cand.size()) +
                      " candidates in scope " + scope.label());
  auto better = [](const NeuronScore& a, const NeuronScore& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ref < b.ref;
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
  std::vector<NeuronRef> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(cand[i].ref);
  return out;
}

namespace {

struct GroupSlices {
  std::vector<GroupedDataset> subsets;  // empty dataset for empty groups
};

GroupSlices slice_groups(const GroupedDataset& data) {
  GroupSlices s;
  for (int j = 0; j < data.num_groups(); ++j) s.subsets.push_back(data.subset(data.group_indices(j)));
  return s;
}

double accuracy_on(const Model& model, const GroupedDataset& subset) {
  const auto preds = predict(model, subset.x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == subset.y[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

TraceRecord make_record(double before, double after) {
  TraceRecord r;
  r.acc_before = before;
  r.acc_after = after;
  r.delta_signed = after - before;
  r.delta_abs = std::abs(before - after);
  return r;
}

// Scores per group for the gradient criterion, or one shared list for magnitude.
std::vector<ScoreList> scores_for(const Model& model, const GroupedDataset& data, const GroupSlices& slices,
                                  CriterionKind c) {
  std::vector<ScoreList> out(static_cast<std::size_t>(data.num_groups()));
  ScoreList mag;
  if (c == CriterionKind::kMagnitude) mag = neuron_magnitudes(model);
  for (int j = 0; j < data.num_groups(); ++j) {
    const auto& sub = slices.subsets[static_cast<std::size_t>(j)];
    if (sub.empty()) continue;
    out[static_cast<std::size_t>(j)] = c == CriterionKind::kMagnitude ? mag : neuron_gradients(model, sub.x, sub.y);
  }
  return out;
}

struct Cell {
  CriterionKind criterion;
  Perturbation perturbation;
  Scope scope;
  std::size_t k;
  std::uint64_t seed;
  int group;
  const ScoreList* scores;
};

TraceRecord run_cell(const Model& model, const Cell& cell, const GroupedDataset& subset, double before) {
  const auto refs = top_k(*cell.scores, cell.k, cell.scope);
  const Model perturbed = apply_perturbation(model, refs, cell.perturbation, cell.seed);
  TraceRecord r = make_record(before, accuracy_on(perturbed, subset));
  r.criterion = cell.criterion;
  r.perturbation = cell.perturbation;
  r.scope = cell.scope;
  r.k = cell.k;
  r.group = cell.group;
  r.seed = cell.seed;
  return r;
}

std::vector<TraceRecord> run_cells(const Model& model, const std::vector<Cell>& cells, const GroupSlices& slices,
                                   const std::vector<double>& before, Execution exec) {
  std::vector<TraceRecord> out(cells.size());
  const auto n = static_cast<long>(cells.size());
  if (exec == Execution::kSerial) {
    for (long i = 0; i < n; ++i) {
      const auto g = static_cast<std::size_t>(cells[static_cast<std::size_t>(i)].group);
      out[static_cast<std::size_t>(i)] = run_cell(model, cells[static_cast<std::size_t>(i)], slices.subsets[g], before[g]);
    }
    return out;
  }
  // Cells only read the shared model and slices; each writes its own slot.
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    try {
      const auto g = static_cast<std::size_t>(cells[static_cast<std::size_t>(i)].group);
      out[static_cast<std::size_t>(i)] = run_cell(model, cells[static_cast<std::size_t>(i)], slices.subsets[g], before[g]);
    } catch (...) {
#pragma omp critical(spurmem_trace_error)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace

std::vector<TraceRecord> accuracy_shift(const Model& model, std::span<const NeuronRef> refs, const Perturbation& p,
                                        const GroupedDataset& data, std::uint64_t seed) {
  const Model perturbed = apply_perturbation(model, refs, p, seed);
  const auto slices = slice_groups(data);
  std::vector<TraceRecord> out;
  for (int j = 0; j < data.num_groups(); ++j) {
    const auto& sub = slices.subsets[static_cast<std::size_t>(j)];
    if (sub.empty()) continue;
    TraceRecord r = make_record(accuracy_on(model, sub), accuracy_on(perturbed, sub));
    r.perturbation = p;
    r.k = refs.size();
    r.group = j;
    r.seed = seed;
    out.push_back(r);
  }
  return out;
}

Scope Scope::parse(const std::string& s) {
  if (s == "global") return global();
  if (s.size() > 5 && s.compare(0, 5, "layer") == 0 &&
      s.find_first_not_of("0123456789", 5) == std::string::npos)
    return within(std::stoul(s.substr(5)));
  throw ConfigError("scope must be 'global' or 'layerN', got '" + s + "'");
}

std::vector<Perturbation> TraceConfig::perturbations() const {
  std::vector<Perturbation> out;
  for (auto kind : perturbation_kinds) {
    if (kind == PerturbationKind::kZeroOut) {
      out.push_back(Perturbation::zero_out());
      continue;
    }
    for (double s : sigmas) out.push_back({kind, s});
  }
  return out;
}

void TraceConfig::validate() const {
  if (criteria.empty()) throw ConfigError("trace.criteria must not be empty");
  if (perturbation_kinds.empty()) throw ConfigError("trace.perturbations must not be empty");
  for (auto kind : perturbation_kinds)
    if (kind != PerturbationKind::kZeroOut && sigmas.empty())
      throw ConfigError("trace.sigmas must not be empty when a random perturbation is requested");
  if (k_list.empty()) throw ConfigError("trace.k_list must not be empty");
  for (auto k : k_list)
    if (k == 0) throw ConfigError("trace.k_list entries must be >= 1");
  if (seeds.empty()) throw ConfigError("trace.seeds must not be empty");
  if (structured_k == 0) throw ConfigError("trace.structured_k must be >= 1");
  if (!(histogram_top_fraction > 0.0 && histogram_top_fraction <= 1.0))
    throw ConfigError("trace.histogram_top_fraction must lie in (0, 1]");
  for (const auto& p : perturbations()) p.validate();
}

TraceReport unstructured_trace(const Model& model, const GroupedDataset& data, const TraceConfig& cfg, Execution exec) {
  cfg.validate();
  const auto slices = slice_groups(data);
  std::vector<double> before(slices.subsets.size(), 0.0);
  for (std::size_t j = 0; j < slices.subsets.size(); ++j)
    if (!slices.subsets[j].empty()) before[j] = accuracy_on(model, slices.subsets[j]);

  std::vector<std::vector<ScoreList>> scores;
  for (auto c : cfg.criteria) scores.push_back(scores_for(model, data, slices, c));

  if (cfg.scope.layer && *cfg.scope.layer >= model.hidden.size())
    throw ConfigError("trace.scope " + cfg.scope.label() + " names a layer the model does not have");
  const auto perturbations = cfg.perturbations();
  std::vector<Cell> cells;
  for (std::size_t ci = 0; ci < cfg.criteria.size(); ++ci)
    for (const auto& p : perturbations)
      for (auto k : cfg.k_list)
        for (auto seed : cfg.seeds)
          for (int j = 0; j < data.num_groups(); ++j) {
            if (slices.subsets[static_cast<std::size_t>(j)].empty()) continue;
            cells.push_back({cfg.criteria[ci], p, cfg.scope, k, seed, j, &scores[ci][static_cast<std::size_t>(j)]});
          }
  return TraceReport{run_cells(model, cells, slices, before, exec)};
}

std::vector<TraceRecord> average_over_seeds(std::span<const TraceRecord> records) {
  using Key = std::tuple<int, int, double, long, std::size_t, int>;
  std::map<Key, std::pair<TraceRecord, std::size_t>> acc;
  std::vector<Key> order;
  for (const auto& r : records) {
    const Key key{static_cast<int>(r.criterion), static_cast<int>(r.perturbation.kind), r.perturbation.sigma,
                  r.scope.layer ? static_cast<long>(*r.scope.layer) : -1L, r.k, r.group};
    auto it = acc.find(key);
    if (it == acc.end()) {
      acc.emplace(key, std::pair{r, std::size_t{1}});
      order.push_back(key);
      continue;
    }
    auto& [sum, n] = it->second;
    sum.acc_before += r.acc_before;
    sum.acc_after += r.acc_after;
    sum.delta_signed += r.delta_signed;
    sum.delta_abs += r.delta_abs;
    ++n;
  }
  std::vector<TraceRecord> out;
  for (const auto& key : order) {
    auto [r, n] = acc.at(key);
    const double dn = static_cast<double>(n);
    r.acc_before /= dn;
    r.acc_after /= dn;
    r.delta_signed /= dn;
    r.delta_abs /= dn;
    out.push_back(r);
  }
  return out;
}

StructuredTrace structured_trace(const Model& model, const GroupedDataset& data, CriterionKind criterion,
                                 const Perturbation& p, std::size_t k, std::span<const std::uint64_t> seeds,
                                 Execution exec) {
  p.validate();
  if (k == 0) throw ConfigError("structured_trace: k must be >= 1");
  if (seeds.empty()) throw ConfigError("structured_trace: no seeds");
  const auto slices = slice_groups(data);
  std::vector<double> before(slices.subsets.size(), 0.0);
  for (std::size_t j = 0; j < slices.subsets.size(); ++j)
    if (!slices.subsets[j].empty()) before[j] = accuracy_on(model, slices.subsets[j]);
  const auto scores = scores_for(model, data, slices, criterion);

  StructuredTrace out;
  out.num_groups = static_cast<std::size_t>(data.num_groups());
  out.num_layers = model.hidden.size();
  std::vector<Cell> cells;
  for (std::size_t l = 0; l < model.hidden.size(); ++l) {
    const std::size_t width = model.hidden[l].out_dim();
    std::size_t kl = k;
    if (k > width) {
      kl = width;
      out.warnings.push_back("layer " + std::to_string(l) + ": k=" + std::to_string(k) + " clamped to width " +
                             std::to_string(width));
    }
    for (auto seed : seeds)
      for (int j = 0; j < data.num_groups(); ++j) {
        if (slices.subsets[static_cast<std::size_t>(j)].empty()) continue;
        cells.push_back({criterion, p, Scope::within(l), kl, seed, j, &scores[static_cast<std::size_t>(j)]});
      }
  }
  out.records = run_cells(model, cells, slices, before, exec);

  out.delta_abs.assign(out.num_groups * out.num_layers, 0.0);
  out.delta_signed.assign(out.num_groups * out.num_layers, 0.0);
  for (const auto& r : out.records) {
    const std::size_t idx = static_cast<std::size_t>(r.group) * out.num_layers + *r.scope.layer;
    out.delta_abs[idx] += r.delta_abs / static_cast<double>(seeds.size());
    out.delta_signed[idx] += r.delta_signed / static_cast<double>(seeds.size());
  }
  return out;
}

RankHistogram rank_histogram(std::span<const NeuronScore> scores_a, std::span<const NeuronScore> scores_b,
                             double top_fraction) {
  if (scores_a.size() != scores_b.size() || scores_a.empty())
    throw DimensionError("rank_histogram: score lists must cover the same non-empty neuron set");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ConfigError("rank_histogram: top_fraction must lie in (0, 1]");
  const std::size_t m = scores_a.size();

  // Ascending rank under b; ties broken by ref so the ranking is total.
  std::vector<NeuronScore> by_b(scores_b.begin(), scores_b.end());
  std::sort(by_b.begin(), by_b.end(), [](const NeuronScore& x, const NeuronScore& y) {
    if (x.score != y.score) return x.score < y.score;
    return x.ref < y.ref;
  });
  std::map<NeuronRef, std::size_t> rank;
  for (std::size_t i = 0; i < m; ++i) rank[by_b[i].ref] = i;
  if (rank.size() != m) throw DimensionError("rank_histogram: duplicate neuron refs");

  RankHistogram h;
  const double raw = top_fraction * static_cast<double>(m);
  h.clamped_to_one = raw < 1.0;
  std::size_t count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
  count = std::min(count, m);
  h.selected = count;
  for (std::size_t b = 0; b < RankHistogram::kBins; ++b) {
    h.bin_lo.push_back(static_cast<double>(b) * 5.0);
    h.bin_hi.push_back(static_cast<double>(b + 1) * 5.0);
  }
  h.counts.assign(RankHistogram::kBins, 0);
  for (const auto& ref : top_k(scores_a, count)) {
    const auto it = rank.find(ref);
    if (it == rank.end()) throw DimensionError("rank_histogram: neuron missing from the second score list");
    std::size_t bin = RankHistogram::kBins - 1;
    if (m > 1) bin = std::min(RankHistogram::kBins - 1, it->second * RankHistogram::kBins / (m - 1));
    ++h.counts[bin];
  }
  return h;
}

void write_trace_csv(std::span<const TraceRecord> records, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "criterion,perturbation,scope,k,sigma,seed,group,acc_before,acc_after,delta_signed,delta_abs\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%zu,%.17g,%llu,%d,%.17g,%.17g,%.17g,%.17g\n", to_string(r.criterion),
                  to_string(r.perturbation.kind), r.scope.label().c_str(), r.k, r.perturbation.sigma,
                  static_cast<unsigned long long>(r.seed), r.group, r.acc_before, r.acc_after, r.delta_signed,
                  r.delta_abs);
    out << buf;
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<TraceRecord> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<TraceRecord> out;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    std::vector<std::string> c;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != 11) throw ParseError("trace row needs 11 cells", row);
    TraceRecord r;
    try {
      r.criterion = criterion_from_string(c[0]);
      r.perturbation.kind = perturbation_kind_from_string(c[1]);
      r.scope = Scope::parse(c[2]);
      r.k = std::stoul(c[3]);
      r.perturbation.sigma = std::stod(c[4]);
      r.seed = std::stoull(c[5]);
      r.group = std::stoi(c[6]);
      r.acc_before = std::stod(c[7]);
      r.acc_after = std::stod(c[8]);
      r.delta_signed = std::stod(c[9]);
      r.delta_abs = std::stod(c[10]);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(std::string("bad trace cell: ") + e.what(), row);
    }
    out.push_back(r);
  }
  return out;
}

void write_histogram_csv(const RankHistogram& h, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) out << h.bin_lo[b] << "," << h.bin_hi[b] << "," << h.counts[b] << "\n";
}

void write_heatmap_csv(const StructuredTrace& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "group";
  for (std::size_t l = 0; l < s.num_layers; ++l) out << ",layer" << l;
  out << "\n";
  char buf[40];
  for (std::size_t g = 0; g < s.num_groups; ++g) {
    out << g;
    for (std::size_t l = 0; l < s.num_layers; ++l) {
      std::snprintf(buf, sizeof buf, ",%.17g", s.abs_at(g, l));
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace spurmem

#include "spurmem/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "spurmem/error.hpp"

namespace spurmem {

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ParseError("unknown split tag '" + s + "'", -1);
}

bool GroupSpec::is_minority(int group) const {
  const int y = group / num_attrs;
  const int a = group % num_attrs;
  return a != agreeing_attr(y);
}

void GroupSpec::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be at least 2");
  if (num_attrs < 1) throw ConfigError("data.num_attrs must be positive");
  if (!(correlation >= 0.0 && correlation <= 1.0))
    throw ConfigError("data.correlation must lie in [0, 1], got " + std::to_string(correlation));
  if (num_attrs == 1 && correlation < 1.0)
    throw ConfigError("data.correlation < 1 needs at least two attributes");
  const auto ng = static_cast<std::size_t>(num_groups());
  auto check = [ng](const std::vector<std::size_t>& counts, const char* name) {
    if (!counts.empty() && counts.size() != ng)
      throw ConfigError(std::string("data.") + name + " needs " + std::to_string(ng) + " entries, got " +
                        std::to_string(counts.size()));
  };
  check(train_counts, "train_counts");
  check(val_counts, "val_counts");
  check(test_counts, "test_counts");
  if (train_counts.empty() && n_train == 0) throw ConfigError("data.n_train must be positive");
  if (!train_counts.empty()) {
    std::size_t total = 0;
    for (auto c : train_counts) total += c;
    if (total == 0) throw ConfigError("data.train_counts are all zero");
  }
}

void FeatureSpec::validate(const GroupSpec& groups) const {
  if (core_dim == 0 && spurious_dim == 0) throw ConfigError("data: core_dim and spurious_dim cannot both be 0");
  if (core_dim > 0 && core_dim < static_cast<std::size_t>(groups.num_classes))
    throw ConfigError("data.core_dim must be at least num_classes for orthogonal class templates");
  if (spurious_dim > 0 && spurious_dim < static_cast<std::size_t>(groups.num_attrs))
    throw ConfigError("data.spurious_dim must be at least num_attrs for orthogonal attribute templates");
  if (!(noise_std >= 0.0) || !std::isfinite(core_strength) || !std::isfinite(spurious_strength))
    throw ConfigError("data: strengths must be finite and noise_std nonnegative");
}

void AugmentConfig::validate() const {
  if (!std::isfinite(jitter_std) || jitter_std < 0.0) throw ConfigError("augment.jitter_std must be finite and >= 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("augment.dropout_rate must lie in [0, 1)");
}

bool GroupedDataset::is_minority(int group) const {
  return group % num_attrs != (group / num_attrs) % num_attrs;
}

std::vector<std::size_t> GroupedDataset::group_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_groups()), 0);
  for (int gi : g) ++counts[static_cast<std::size_t>(gi)];
  return counts;
}

std::vector<std::size_t> GroupedDataset::group_indices(int group) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] == group) out.push_back(i);
  return out;
}

GroupedDataset GroupedDataset::subset(std::span<const std::size_t> idx) const {
  GroupedDataset out;
  out.split = split;
  out.num_classes = num_classes;
  out.num_attrs = num_attrs;
  out.feature_dim = feature_dim;
  out.x = x.gather_rows(idx);
  for (auto i : idx) {
    out.y.push_back(y.at(i));
    out.g.push_back(g.at(i));
  }
  return out;
}

void GroupedDataset::validate() const {
  if (y.size() != g.size()) throw DimensionError("dataset: label and group arrays differ in length");
  if (!y.empty() && (x.rows() != y.size() || x.cols() != feature_dim))
    throw DimensionError("dataset: feature matrix " + shape_string(x.shape()) + " does not match " +
                         std::to_string(y.size()) + " samples of width " + std::to_string(feature_dim));
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= num_classes) throw IndexError("dataset: label out of range at sample " + std::to_string(i));
    if (g[i] < 0 || g[i] >= num_groups()) throw IndexError("dataset: group out of range at sample " + std::to_string(i));
    if (g[i] / num_attrs != y[i])
      throw IndexError("dataset: group " + std::to_string(g[i]) + " inconsistent with label " + std::to_string(y[i]) +
                       " at sample " + std::to_string(i));
  }
}

const GroupedDataset& DatasetSplits::get(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
  }
  return train;
}

GroupedDataset& DatasetSplits::get(Split s) { return const_cast<GroupedDataset&>(std::as_const(*this).get(s)); }

Tensor class_templates(std::size_t count, std::size_t block_dim, std::uint64_t stream) {
  // Gram-Schmidt on Gaussian draws from a fixed stream: templates do not depend
  // on the data seed.
  Rng rng = make_rng(0x7e3a11ull, stream);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(Shape{count, block_dim});
  for (std::size_t i = 0; i < count; ++i) {
    double norm = 0.0;
    do {
      for (auto& v : t.row(i)) v = normal(rng);
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < block_dim; ++c) dot += t(i, c) * t(j, c);
        for (std::size_t c = 0; c < block_dim; ++c) t(i, c) -= dot * t(j, c);
      }
      norm = 0.0;
      for (double v : t.row(i)) norm += v * v;
      norm = std::sqrt(norm);
    } while (norm < 1e-6);
    for (auto& v : t.row(i)) v /= norm;
  }
  // Rescale after orthogonalisation so the projections above use unit rows.
  const double s = std::sqrt(static_cast<double>(block_dim));
  for (auto& v : t.data()) v *= s;
  return t;
}

namespace {

struct Templates {
  Tensor core;
  Tensor spurious;
};

GroupedDataset sample_split(Split split, const std::vector<int>& ys, const std::vector<int>& as, const GroupSpec& gs,
                            const FeatureSpec& fs, const Templates& tpl, Rng& rng) {
  GroupedDataset d;
  d.split = split;
  d.num_classes = gs.num_classes;
  d.num_attrs = gs.num_attrs;
  d.feature_dim = fs.dim();
  const std::size_t n = ys.size();
  if (n == 0) return d;
  d.x = Tensor(Shape{n, fs.dim()});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = d.x.row(i);
    std::size_t c = 0;
    for (std::size_t k = 0; k < fs.core_dim; ++k, ++c)
      row[c] = fs.core_strength * tpl.core(static_cast<std::size_t>(ys[i]), k) + fs.noise_std * noise(rng);
    for (std::size_t k = 0; k < fs.spurious_dim; ++k, ++c)
      row[c] = fs.spurious_strength * tpl.spurious(static_cast<std::size_t>(as[i]), k) + fs.noise_std * noise(rng);
    for (std::size_t k = 0; k < fs.noise_dim; ++k, ++c) row[c] = fs.noise_std * noise(rng);
    d.y.push_back(ys[i]);
    d.g.push_back(ys[i] * gs.num_attrs + as[i]);
  }
  return d;
}

// Labels/attributes for explicit per-group counts, shuffled.
void labels_from_counts(const std::vector<std::size_t>& counts, const GroupSpec& gs, Rng& rng, std::vector<int>& ys,
                        std::vector<int>& as) {
  for (std::size_t grp = 0; grp < counts.size(); ++grp)
    for (std::size_t i = 0; i < counts[grp]; ++i) {
      ys.push_back(static_cast<int>(grp) / gs.num_attrs);
      as.push_back(static_cast<int>(grp) % gs.num_attrs);
    }
  std::vector<std::size_t> perm(ys.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> y2, a2;
  for (auto p : perm) {
    y2.push_back(ys[p]);
    a2.push_back(as[p]);
  }
  ys.swap(y2);
  as.swap(a2);
}

}  // namespace

DatasetSplits generate(const GroupSpec& gs, const FeatureSpec& fs, std::uint64_t seed) {
  gs.validate();
  fs.validate(gs);
  Templates tpl;
  if (fs.core_dim) tpl.core = class_templates(static_cast<std::size_t>(gs.num_classes), fs.core_dim, 1);
  if (fs.spurious_dim) tpl.spurious = class_templates(static_cast<std::size_t>(gs.num_attrs), fs.spurious_dim, 2);

  const auto ng = static_cast<std::size_t>(gs.num_groups());
  DatasetSplits out;
  for (Split split : {Split::kTrain, Split::kVal, Split::kTest}) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(split));
    std::vector<int> ys, as;
    if (split == Split::kTrain && gs.train_counts.empty()) {
      std::uniform_int_distribution<int> cls(0, gs.num_classes - 1);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      std::uniform_int_distribution<int> other(0, std::max(0, gs.num_attrs - 2));
      for (std::size_t i = 0; i < gs.n_train; ++i) {
        const int y = cls(rng);
        const int agree = gs.agreeing_attr(y);
        int a = agree;
        if (unif(rng) >= gs.correlation) {
          // Uniform over the attributes that disagree with the class.
          const int o = other(rng);
          a = o < agree ? o : o + 1;
        }
        ys.push_back(y);
        as.push_back(a);
      }
    } else {
      std::vector<std::size_t> counts;
      if (split == Split::kTrain) counts = gs.train_counts;
      else if (split == Split::kVal) counts = gs.val_counts.empty() ? std::vector<std::size_t>(ng, gs.val_per_group) : gs.val_counts;
      else counts = gs.test_counts.empty() ? std::vector<std::size_t>(ng, gs.test_per_group) : gs.test_counts;
      labels_from_counts(counts, gs, rng, ys, as);
    }
    out.get(split) = sample_split(split, ys, as, gs, fs, tpl, rng);
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

template <typename T>
T parse_number(const std::string& cell, long row, const std::string& column) {
  T v{};
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  while (first < last && *first == ' ') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || first == last)
    throw ParseError("non-numeric value '" + cell + "' in column '" + column + "'", row);
  return v;
}

}  // namespace

DatasetSplits load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file " + path.string(), 1);
  const auto header = split_csv_line(line);
  long label_col = -1, group_col = -1, split_col = -1;
  std::vector<std::size_t> feature_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "label") label_col = static_cast<long>(i);
    else if (header[i] == "group") group_col = static_cast<long>(i);
    else if (header[i] == "split") split_col = static_cast<long>(i);
    else feature_cols.push_back(i);
  }
  for (auto [col, name] : {std::pair{label_col, "label"}, {group_col, "group"}, {split_col, "split"}})
    if (col < 0) throw ParseError(std::string("missing column '") + name + "' in header of " + path.string(), 1);
  if (feature_cols.empty()) throw ParseError("no feature columns in " + path.string(), 1);

  DatasetSplits out;
  std::vector<std::vector<double>> feats[3];
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    auto& d = out.get(s);
    d.split = s;
    d.num_classes = schema.num_classes;
    d.num_attrs = schema.num_attrs;
    d.feature_dim = feature_cols.size();
  }
  const int ngroups = schema.num_classes * schema.num_attrs;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()), row);
    Split s;
    try {
      s = split_from_string(cells[static_cast<std::size_t>(split_col)]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), row);
    }
    const int y = parse_number<int>(cells[static_cast<std::size_t>(label_col)], row, "label");
    const int grp = parse_number<int>(cells[static_cast<std::size_t>(group_col)], row, "group");
    if (y < 0 || y >= schema.num_classes) throw ParseError("label " + std::to_string(y) + " out of range", row);
    if (grp < 0 || grp >= ngroups) throw ParseError("group " + std::to_string(grp) + " out of range", row);
    if (grp / schema.num_attrs != y)
      throw ParseError("group " + std::to_string(grp) + " inconsistent with label " + std::to_string(y), row);
    std::vector<double> x;
    x.reserve(feature_cols.size());
    for (auto c : feature_cols) x.push_back(parse_number<double>(cells[c], row, header[c]));
    auto& d = out.get(s);
    d.y.push_back(y);
    d.g.push_back(grp);
    feats[static_cast<int>(s)].push_back(std::move(x));
  }
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    auto& d = out.get(s);
    const auto& rows = feats[static_cast<int>(s)];
    if (rows.empty()) continue;
    std::vector<double> flat;
    flat.reserve(rows.size() * d.feature_dim);
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    d.x = Tensor(Shape{rows.size(), d.feature_dim}, std::move(flat));
  }
  return out;
}

void export_csv(const GroupedDataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t c = 0; c < data.feature_dim; ++c) out << "x" << c << ",";
  out << "label,group,split\n";
  char buf[40];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t c = 0; c < data.feature_dim; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data.x(i, c));
      out << buf << ",";
    }
    out << data.y[i] << "," << data.g[i] << "," << to_string(data.split) << "\n";
  }
  if (!out) throw IoError("short write to " + path.string());
}

DatasetSplits merge_splits(const std::vector<DatasetSplits>& parts) {
  if (parts.empty()) throw ConfigError("no dataset parts to merge");
  DatasetSplits out = parts.front();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      const auto& src = parts[p].get(s);
      auto& dst = out.get(s);
      if (src.empty()) continue;
      if (dst.feature_dim != src.feature_dim) throw DimensionError("merge_splits: feature widths differ");
      std::vector<double> flat;
      if (!dst.empty()) flat.assign(dst.x.data().begin(), dst.x.data().end());
      flat.insert(flat.end(), src.x.data().begin(), src.x.data().end());
      dst.y.insert(dst.y.end(), src.y.begin(), src.y.end());
      dst.g.insert(dst.g.end(), src.g.begin(), src.g.end());
      dst.x = Tensor(Shape{dst.y.size(), dst.feature_dim}, std::move(flat));
    }
  }
  return out;
}

std::vector<double> augment(std::span<const double> row, const AugmentConfig& cfg, Rng& rng) {
  std::vector<double> out(row.begin(), row.end());
  if (cfg.jitter_std > 0.0) {
    std::normal_distribution<double> jitter(0.0, cfg.jitter_std);
    for (auto& v : out) v += jitter(rng);
  }
  if (cfg.dropout_rate > 0.0) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (auto& v : out)
      if (unif(rng) < cfg.dropout_rate) v = 0.0;
  }
  return out;
}

Tensor augment(const Tensor& batch, const AugmentConfig& cfg, Rng& rng) {
  Tensor out = batch;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto v = augment(batch.row(r), cfg, rng);
    std::copy(v.begin(), v.end(), out.row(r).begin());
  }
  return out;
}

GroupAccuracy group_accuracy(std::span<const int> preds, const GroupedDataset& data) {
  if (preds.size() != data.size())
    throw DimensionError("group_accuracy: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(data.size()) + " samples");
  const auto ng = static_cast<std::size_t>(data.num_groups());
  GroupAccuracy acc;
  acc.counts.assign(ng, 0);
  acc.correct.assign(ng, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto grp = static_cast<std::size_t>(data.g[i]);
    ++acc.counts[grp];
    if (preds[i] == data.y[i]) {
      ++acc.correct[grp];
      ++acc.total_correct;
    }
  }
  acc.total = preds.size();
  acc.accuracy.assign(ng, std::numeric_limits<double>::quiet_NaN());
  acc.present.assign(ng, false);
  double wga = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t j = 0; j < ng; ++j) {
    if (acc.counts[j] == 0) {
      acc.has_empty_groups = true;
      continue;
    }
    acc.present[j] = true;
    acc.accuracy[j] = static_cast<double>(acc.correct[j]) / static_cast<double>(acc.counts[j]);
    wga = std::min(wga, acc.accuracy[j]);
    sum += acc.accuracy[j];
    ++present;
  }
  acc.wga = present ? wga : std::numeric_limits<double>::quiet_NaN();
  acc.mean_group = present ? sum / static_cast<double>(present) : std::numeric_limits<double>::quiet_NaN();
  return acc;
}

}  // namespace spurmem

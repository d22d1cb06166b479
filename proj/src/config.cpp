#include "spurmem/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "spurmem/error.hpp"

namespace spurmem {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, std::function<std::string(const T&)> fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size())
    throw ConfigError(key + ": '" + raw + "' is not a valid number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

template <class T>
std::vector<T> parse_numbers(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  for (const auto& item : split_list(raw)) out.push_back(parse_number<T>(key, item));
  return out;
}

std::string fmt_sizes(const std::vector<std::size_t>& v) {
  return join<std::size_t>(v, [](const std::size_t& x) { return std::to_string(x); });
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

struct Section {
  std::string name;
  std::vector<Field> fields;
};

#define SPURMEM_NUM(sec, key, T, expr)                                                              \
  Field {                                                                                          \
    key, [](ExperimentConfig& c, const std::string& v) { c.expr = parse_number<T>(sec "." key, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.expr); }                            \
  }
#define SPURMEM_DBL(sec, key, expr)                                                                      \
  Field {                                                                                               \
    key, [](ExperimentConfig& c, const std::string& v) { c.expr = parse_number<double>(sec "." key, v); }, \
        [](const ExperimentConfig& c) { return fmt_double(c.expr); }                                     \
  }
#define SPURMEM_SIZES(sec, key, expr)                                                                            \
  Field {                                                                                                       \
    key, [](ExperimentConfig& c, const std::string& v) { c.expr = parse_numbers<std::size_t>(sec "." key, v); }, \
        [](const ExperimentConfig& c) { return fmt_sizes(c.expr); }                                              \
  }
#define SPURMEM_BOOL(sec, key, expr)                                                              \
  Field {                                                                                        \
    key, [](ExperimentConfig& c, const std::string& v) { c.expr = parse_bool(sec "." key, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.expr ? "true" : "false"); }         \
  }

const std::vector<Section>& schema() {
  static const std::vector<Section> sections = {
      {"data",
       {
           Field{"csv",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.data.csv.clear();
                   for (const auto& p : split_list(v)) c.data.csv.emplace_back(p);
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::filesystem::path>(c.data.csv,
                                                      [](const std::filesystem::path& p) { return p.string(); });
                 }},
           SPURMEM_NUM("data", "num_classes", int, data.groups.num_classes),
           SPURMEM_NUM("data", "num_attrs", int, data.groups.num_attrs),
           SPURMEM_DBL("data", "correlation", data.groups.correlation),
           SPURMEM_NUM("data", "n_train", std::size_t, data.groups.n_train),
           SPURMEM_SIZES("data", "train_counts", data.groups.train_counts),
           SPURMEM_SIZES("data", "val_counts", data.groups.val_counts),
           SPURMEM_SIZES("data", "test_counts", data.groups.test_counts),
           SPURMEM_NUM("data", "val_per_group", std::size_t, data.groups.val_per_group),
           SPURMEM_NUM("data", "test_per_group", std::size_t, data.groups.test_per_group),
           SPURMEM_NUM("data", "core_dim", std::size_t, data.features.core_dim),
           SPURMEM_NUM("data", "spurious_dim", std::size_t, data.features.spurious_dim),
           SPURMEM_NUM("data", "noise_dim", std::size_t, data.features.noise_dim),
           SPURMEM_DBL("data", "core_strength", data.features.core_strength),
           SPURMEM_DBL("data", "spurious_strength", data.features.spurious_strength),
           SPURMEM_DBL("data", "noise_std", data.features.noise_std),
       }},
      {"model",
       {
           SPURMEM_NUM("model", "input_dim", std::size_t, model.input_dim),
           SPURMEM_SIZES("model", "hidden_dims", model.hidden_dims),
           SPURMEM_NUM("model", "num_classes", std::size_t, model.num_classes),
           SPURMEM_SIZES("model", "projection_dims", model.projection_dims),
           SPURMEM_DBL("model", "init_gain", model.init_gain),
       }},
      {"train",
       {
           SPURMEM_DBL("train", "lr", train.lr),
           SPURMEM_NUM("train", "epochs", int, train.epochs),
           SPURMEM_NUM("train", "batch_size", std::size_t, train.batch_size),
           SPURMEM_DBL("train", "scheduler_factor", train.scheduler.factor),
           SPURMEM_NUM("train", "scheduler_patience", int, train.scheduler.patience),
           SPURMEM_NUM("train", "seed", std::uint64_t, train.seed),
       }},
      {"trace",
       {
           Field{"criteria",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.trace.criteria.clear();
                   for (const auto& s : split_list(v)) c.trace.criteria.push_back(criterion_from_string(s));
                 },
                 [](const ExperimentConfig& c) {
                   return join<CriterionKind>(c.trace.criteria, [](const CriterionKind& k) { return to_string(k); });
                 }},
           Field{"perturbations",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.trace.perturbation_kinds.clear();
                   for (const auto& s : split_list(v))
                     c.trace.perturbation_kinds.push_back(perturbation_kind_from_string(s));
                 },
                 [](const ExperimentConfig& c) {
                   return join<PerturbationKind>(c.trace.perturbation_kinds,
                                                 [](const PerturbationKind& k) { return to_string(k); });
                 }},
           Field{"sigmas",
                 [](ExperimentConfig& c, const std::string& v) { c.trace.sigmas = parse_numbers<double>("trace.sigmas", v); },
                 [](const ExperimentConfig& c) { return join<double>(c.trace.sigmas, fmt_double); }},
           SPURMEM_SIZES("trace", "k_list", trace.k_list),
           Field{"seeds",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.trace.seeds = parse_numbers<std::uint64_t>("trace.seeds", v);
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::uint64_t>(c.trace.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
                 }},
           Field{"scope", [](ExperimentConfig& c, const std::string& v) { c.trace.scope = Scope::parse(trim(v)); },
                 [](const ExperimentConfig& c) { return c.trace.scope.label(); }},
           SPURMEM_NUM("trace", "structured_k", std::size_t, trace.structured_k),
           SPURMEM_DBL("trace", "histogram_top_fraction", trace.histogram_top_fraction),
       }},
      {"finetune",
       {
           Field{"criteria",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.finetune_criteria.clear();
                   for (const auto& s : split_list(v)) c.finetune_criteria.push_back(mask_criterion_from_string(s));
                 },
                 [](const ExperimentConfig& c) {
                   return join<MaskCriterion>(c.finetune_criteria, [](const MaskCriterion& m) { return to_string(m); });
                 }},
           SPURMEM_NUM("finetune", "kick_in_epoch", int, finetune.kick_in_epoch),
           SPURMEM_NUM("finetune", "finetune_epochs", int, finetune.finetune_epochs),
           SPURMEM_DBL("finetune", "lr", finetune.lr),
           SPURMEM_DBL("finetune", "scheduler_factor", finetune.scheduler.factor),
           SPURMEM_NUM("finetune", "scheduler_patience", int, finetune.scheduler.patience),
           SPURMEM_DBL("finetune", "prune_fraction", finetune.prune_fraction),
           SPURMEM_DBL("finetune", "tau", finetune.tau),
           SPURMEM_DBL("finetune", "lambda", finetune.lambda),
           Field{"sup_loss",
                 [](ExperimentConfig& c, const std::string& v) { c.finetune.sup_loss = sup_loss_from_string(trim(v)); },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.finetune.sup_loss)); }},
           Field{"gradient_source",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.finetune.gradient_source = gradient_source_from_string(trim(v));
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.finetune.gradient_source)); }},
           SPURMEM_BOOL("finetune", "pseudo_labels", finetune.pseudo_labels),
           SPURMEM_NUM("finetune", "pool_size", std::size_t, finetune.pool_size),
           SPURMEM_NUM("finetune", "sample_size", std::size_t, finetune.sample_size),
           SPURMEM_NUM("finetune", "batch_size", std::size_t, finetune.batch_size),
           SPURMEM_DBL("finetune", "jitter_std", finetune.augment.jitter_std),
           SPURMEM_DBL("finetune", "dropout_rate", finetune.augment.dropout_rate),
           SPURMEM_BOOL("finetune", "include_positive", finetune.ntxent.include_positive),
           SPURMEM_BOOL("finetune", "symmetric", finetune.ntxent.symmetric),
       }},
      {"output",
       {
           Field{"directory", [](ExperimentConfig& c, const std::string& v) { c.output.directory = trim(v); },
                 [](const ExperimentConfig& c) { return c.output.directory.string(); }},
           SPURMEM_BOOL("output", "svg", output.svg),
       }},
  };
  return sections;
}

#undef SPURMEM_NUM
#undef SPURMEM_DBL
#undef SPURMEM_SIZES
#undef SPURMEM_BOOL

const std::set<std::string> kAblationAxes = {"loss",     "kickin", "ft_epochs",      "gradient_source", "pseudo_labels",
                                             "lambda",   "tau",    "prune_fraction", "criterion"};

}  // namespace

void ExperimentConfig::validate() const {
  data.groups.validate();
  if (data.csv.empty()) data.features.validate(data.groups);
  model.validate();
  train.validate();
  trace.validate();
  finetune.validate();
  if (model.num_classes != static_cast<std::size_t>(data.groups.num_classes))
    throw ConfigError("model.num_classes (" + std::to_string(model.num_classes) + ") differs from data.num_classes (" +
                      std::to_string(data.groups.num_classes) + ")");
  if (data.csv.empty() && model.input_dim != data.features.dim())
    throw ConfigError("model.input_dim (" + std::to_string(model.input_dim) + ") differs from the generated feature dim (" +
                      std::to_string(data.features.dim()) + ")");
  if (finetune.kick_in_epoch > train.epochs)
    throw ConfigError("finetune.kick_in_epoch exceeds train.epochs");
  if (finetune_criteria.empty()) throw ConfigError("finetune.criteria must not be empty");
  for (const auto& axis : ablation) {
    if (!kAblationAxes.count(axis.name)) throw ConfigError("unknown ablation axis '" + axis.name + "'");
    if (axis.values.empty()) throw ConfigError("ablation." + axis.name + " has no values");
    for (const auto& v : axis.values) apply_axis(finetune, axis.name, v);
  }
}

ExperimentConfig default_benchmark_config() {
  ExperimentConfig cfg;
  cfg.model.init_gain = 0.5773502691896258;
  cfg.train.lr = 1e-3;
  cfg.finetune.lr = 2e-3;
  cfg.finetune.augment.dropout_rate = 0.0;
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig cfg = default_benchmark_config();
  for (const auto& [name, section] : tree) {
    if (section.empty() && !section.data().empty())
      throw ConfigError("config key '" + name + "' is outside any section");
    if (name == "ablation") {
      cfg.ablation.clear();
      for (const auto& [axis, value] : section) cfg.ablation.push_back({axis, split_list(value.data())});
      continue;
    }
    const Section* sec = nullptr;
    for (const auto& s : schema())
      if (s.name == name) sec = &s;
    if (!sec) throw ConfigError("unknown config section [" + name + "]");
    for (const auto& [key, value] : section) {
      const Field* field = nullptr;
      for (const auto& f : sec->fields)
        if (f.key == key) field = &f;
      if (!field) throw ConfigError("unknown config key '" + key + "' in [" + name + "]");
      field->set(cfg, value.data());
    }
  }
  cfg.finetune.seed = cfg.train.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  for (const auto& sec : schema()) {
    out << "[" << sec.name << "]\n";
    for (const auto& f : sec.fields) out << f.key << " = " << f.get(cfg) << "\n";
    out << "\n";
    if (sec.name == "finetune" && !cfg.ablation.empty()) {
      out << "[ablation]\n";
      for (const auto& axis : cfg.ablation)
        out << axis.name << " = " << join<std::string>(axis.values, [](const std::string& s) { return s; }) << "\n";
      out << "\n";
    }
  }
  return out.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : serialize_config(cfg)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.train.seed = seed;
  cfg.finetune.seed = seed;
}

}  // namespace spurmem

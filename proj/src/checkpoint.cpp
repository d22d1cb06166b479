#include "spurmem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "spurmem/error.hpp"

namespace spurmem {

namespace fs = std::filesystem;

fs::path manifest_path(const fs::path& prefix) { return fs::path(prefix.string() + ".manifest"); }
fs::path blob_path(const fs::path& prefix) { return fs::path(prefix.string() + ".bin"); }

namespace {

std::string join_dims(const std::vector<std::size_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s;
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw CorruptionError("checkpoint manifest: bad value for " + key + ": '" + value + "'");
  }
}

std::vector<std::size_t> parse_dims(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  return out;
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& prefix, const std::string& lineage) {
  const auto& cfg = model.config();
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());

  std::vector<char> blob;
  blob.reserve(model.parameter_count() * 8);
  for (const Tensor* p : model.parameters()) {
    for (double v : p->data()) {
      const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      blob.insert(blob.end(), bytes, bytes + 8);
    }
  }
  {
    std::ofstream out(blob_path(prefix), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + blob_path(prefix).string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write to " + blob_path(prefix).string());
  }
  std::ofstream man(manifest_path(prefix), std::ios::trunc);
  if (!man) throw IoError("cannot write " + manifest_path(prefix).string());
  man << "version=" << kCheckpointVersion << "\n"
      << "input_dim=" << cfg.input_dim << "\n"
      << "hidden_dims=" << join_dims(cfg.hidden_dims) << "\n"
      << "num_classes=" << cfg.num_classes << "\n"
      << "projection_dims=" << join_dims(cfg.projection_dims) << "\n"
      << "dtype=f64le\n"
      << "blob_len=" << blob.size() << "\n";
  if (!lineage.empty()) man << "lineage=" << lineage << "\n";
  if (!man) throw IoError("short write to " + manifest_path(prefix).string());
}

Model load_checkpoint(const fs::path& prefix) {
  std::ifstream man(manifest_path(prefix));
  if (!man) throw IoError("cannot read " + manifest_path(prefix).string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptionError("checkpoint manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"version", "input_dim", "hidden_dims", "num_classes", "projection_dims", "blob_len"})
    if (!kv.count(key)) throw CorruptionError(std::string("checkpoint manifest: missing ") + key);
  if (parse_size("version", kv["version"]) != kCheckpointVersion)
    throw CorruptionError("checkpoint manifest: unsupported version " + kv["version"]);
  if (kv.count("dtype") && kv["dtype"] != "f64le")
    throw CorruptionError("checkpoint manifest: unsupported dtype " + kv["dtype"]);

  ModelConfig cfg;
  cfg.input_dim = parse_size("input_dim", kv["input_dim"]);
  cfg.hidden_dims = parse_dims("hidden_dims", kv["hidden_dims"]);
  cfg.num_classes = parse_size("num_classes", kv["num_classes"]);
  cfg.projection_dims = parse_dims("projection_dims", kv["projection_dims"]);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint manifest: ") + e.what());
  }
  Model model(cfg);
  const std::size_t declared = parse_size("blob_len", kv["blob_len"]);
  const std::size_t expected = model.parameter_count() * 8;
  if (declared != expected)
    throw CorruptionError("checkpoint manifest: blob_len " + std::to_string(declared) + " but dims imply " +
                          std::to_string(expected) + " bytes");

  std::ifstream in(blob_path(prefix), std::ios::binary);
  if (!in) throw IoError("cannot read " + blob_path(prefix).string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != expected)
    throw CorruptionError("checkpoint blob " + blob_path(prefix).string() + " has " + std::to_string(blob.size()) +
                          " bytes, expected " + std::to_string(expected));
  std::size_t off = 0;
  for (Tensor* p : model.parameters()) {
    for (double& v : p->data()) {
      std::uint64_t bits;
      std::memcpy(&bits, blob.data() + off, 8);
      v = std::bit_cast<double>(to_le(bits));
      off += 8;
    }
  }
  return model;
}

}  // namespace spurmem

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "spurmem/model.hpp"

namespace spurmem {

// On-disk layout: `<prefix>.manifest` holds key=value lines
// (version, input_dim, hidden_dims, num_classes, projection_dims, dtype,
// blob_len, optional lineage) and `<prefix>.bin` holds every parameter as
// little-endian f64 in Model::parameters() order. blob_len counts bytes.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& prefix,
                     const std::string& lineage = {});
Model load_checkpoint(const std::filesystem::path& prefix);

std::filesystem::path manifest_path(const std::filesystem::path& prefix);
std::filesystem::path blob_path(const std::filesystem::path& prefix);

}  // namespace spurmem

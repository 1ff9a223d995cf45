#pragma once

// On-disk formats: raw little-endian f32 blobs with JSON sidecars (volumes,
// case arrays) and checkpoints (one blob of concatenated named flat arrays
// plus a JSON manifest with name/shape/offset and the model config).
// All writes are atomic (temp file, then rename).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgrnet/tensor.hpp"

namespace dgrnet {

// Writes `base`.bin and `base`.json; `name` goes into the sidecar.
void save_volume_f32(const std::filesystem::path& base, const std::string& name, const Shape& shape,
                     const std::vector<float>& data);

struct LoadedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

// Loads `base`.bin described by `base`.json; validates byte counts.
LoadedArray load_volume_f32(const std::filesystem::path& base);

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays,
                     const nlohmann::json& config);

struct Checkpoint {
    std::vector<NamedArray> arrays;
    nlohmann::json config;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Atomic text write (config echoes, CSVs).
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace dgrnet

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pyramidat/vit.hpp"

namespace pyramidat {

/// One shape-tagged float32 array inside a checkpoint container.
struct NamedArray {
    std::string path;
    std::vector<int> shape;
    std::vector<float> data;
};

/// Versioned checkpoint container: an 8-byte magic, a little-endian u64
/// header length, a JSON header carrying the model config, free-form metadata
/// and the entry table, then the packed little-endian float32 payload.
/// The exact layout is documented in the repository README.
struct Container {
    ModelConfig config;
    nlohmann::json meta;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& path) const {
        for (const auto& a : arrays)
            if (a.path == path) return &a;
        return nullptr;
    }
};

inline constexpr char kContainerMagic[8] = {'P', 'A', 'T', 'C', 'v', '0', '0', '1'};

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::vector<NamedArray> params_to_arrays(const ModelParams<float>& params);
ModelParams<float> params_from_container(const Container& c);

/// Portable float array (.pfa): magic "PATF0001", u32 ndim, u32 dims, then
/// row-major little-endian float32 data.
void save_pfa(const std::filesystem::path& path, const std::vector<int>& shape,
              const float* data);
Tensor<float> load_pfa(const std::filesystem::path& path);

}  // namespace pyramidat

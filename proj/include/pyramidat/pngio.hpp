#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pyramidat/tensor.hpp"

namespace pyramidat {

/// Writes an 8-bit RGB PNG (H x W x 3 interleaved bytes).
void write_png_rgb(const std::filesystem::path& path, int height, int width,
                   const std::uint8_t* data);

/// Scales a float image (H x W x C, C in {1,3}) into an 8-bit RGB preview.
/// When lo == hi the range is taken from the data (symmetric around 0 for
/// signed inputs such as perturbations).
void write_png_preview(const std::filesystem::path& path, const Tensor<float>& image,
                       float lo = 0.0f, float hi = 1.0f);

}  // namespace pyramidat

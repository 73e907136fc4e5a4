#pragma once

#include <cstdint>
#include <vector>

#include "pyramidat/errors.hpp"
#include "pyramidat/tensor.hpp"

namespace pyramidat {

struct ImageShape {
    int height = 0;
    int width = 0;
    int channels = 0;

    void validate() const {
        if (height <= 0 || width <= 0 || channels <= 0)
            throw ConfigError("image shape must have positive H, W, C");
    }
    std::size_t pixels() const {
        return static_cast<std::size_t>(height) * width * channels;
    }
    bool operator==(const ImageShape&) const = default;
};

/// A batch of images (B x H x W x C, values in [0,1]) with integer labels.
template <class S>
struct ImageBatch {
    Tensor<S> pixels;          // B x H x W x C
    std::vector<int> labels;   // length B

    int batch_size() const { return pixels.ndim() == 4 ? pixels.dim(0) : 0; }
    ImageShape image_shape() const {
        return ImageShape{pixels.dim(1), pixels.dim(2), pixels.dim(3)};
    }

    void validate(int n_classes) const {
        if (pixels.ndim() != 4) throw StructureError("image batch must be rank 4 (BHWC)");
        if (static_cast<int>(labels.size()) != pixels.dim(0))
            throw StructureError("label count does not match batch size");
        for (std::size_t i = 0; i < pixels.size(); ++i) {
            if (!(pixels[i] >= S(0) && pixels[i] <= S(1)))
                throw StructureError("image values must lie in [0,1]");
        }
        for (int y : labels) {
            if (y < 0 || y >= n_classes) throw StructureError("label out of range");
        }
    }
};

template <class S>
inline S clamp01(S v) {
    return v < S(0) ? S(0) : (v > S(1) ? S(1) : v);
}

}  // namespace pyramidat

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bsim/errors.hpp"
#include "bsim/tensor.hpp"

namespace bsim {

/// H x W x C image, values in [0, 1], stored row-major as (y, x, channel).
struct ImageTensor {
    int64_t h = 0, w = 0, c = 0;
    std::vector<double> data;

    ImageTensor() = default;
    ImageTensor(int64_t h_, int64_t w_, int64_t c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_ * w_ * c_), fill) {}

    double at(int64_t y, int64_t x, int64_t ch) const { return data[(y * w + x) * c + ch]; }
    double& at(int64_t y, int64_t x, int64_t ch) { return data[(y * w + x) * c + ch]; }
    int64_t size() const { return static_cast<int64_t>(data.size()); }
    bool same_shape(const ImageTensor& o) const { return h == o.h && w == o.w && c == o.c; }

    /// h,w >= 8, c in {1,3}, all values in [0,1].
    bool valid() const;
};

inline bool operator==(const ImageTensor& a, const ImageTensor& b) {
    return a.h == b.h && a.w == b.w && a.c == b.c && a.data == b.data;
}

/// Packs images of a common shape into a [N x (h*w*c)] matrix for model input.
Tensor pack_images(std::span<const ImageTensor> images);

}  // namespace bsim

#pragma once

#include <optional>

#include "bsim/image.hpp"
#include "bsim/rng.hpp"

namespace bsim {

struct BetaParams {
    double alpha = 1.0;
};

enum class MixStrategy { cutmix, mixup, none };

struct Rect {
    int64_t top = 0, left = 0, height = 0, width = 0;
    int64_t area() const { return height * width; }
};

struct MixResult {
    ImageTensor image;
    double lambda_requested = 1.0;
    /// Realized pixel share of the first parent. For mixup this equals
    /// lambda_requested; for cutmix it is 1 - region_area / (H*W). Losses
    /// consume this value, never the requested one.
    double lambda_effective = 1.0;
    std::optional<Rect> region;  // absent when no pixels were pasted
    MixStrategy strategy = MixStrategy::cutmix;
};

struct AugPolicy {
    double scale_min = 0.5, scale_max = 1.0;  // crop area fraction range
    double hflip_prob = 0.5;
    double jitter_strength = 0.4;  // per-channel multiplicative factor in [1-s, 1+s]
    double grayscale_prob = 0.2;

    static AugPolicy identity() { return AugPolicy{1.0, 1.0, 0.0, 0.0, 0.0}; }
    void validate() const;
};

/// Draw from Beta(alpha, alpha), clamped to (1e-9, 1 - 1e-9).
double sample_lambda(const BetaParams& params, Rng& rng);

/// Pastes a rectangle of x2 into a copy of x1. The region side lengths are
/// round(H*sqrt(1-lambda)) x round(W*sqrt(1-lambda)); the center is sampled
/// uniformly over the image and the rectangle is then shifted to lie fully
/// inside the bounds, so the realized area is always exactly rh*rw.
/// Always consumes two rng draws.
MixResult cutmix(const ImageTensor& x1, const ImageTensor& x2, double lambda, Rng& rng);

/// Elementwise lambda*x1 + (1-lambda)*x2.
MixResult mixup(const ImageTensor& x1, const ImageTensor& x2, double lambda);

/// Random resized crop (bilinear, back to the input size), horizontal flip,
/// per-channel multiplicative color jitter, optional grayscale. The number
/// of rng draws per call is fixed for a given channel count, so parallel
/// lanes stay aligned regardless of which branches fire.
ImageTensor augment_view(const ImageTensor& x, const AugPolicy& policy, Rng& rng);

}  // namespace bsim

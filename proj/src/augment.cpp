#include "bsim/augment.hpp"

#include <algorithm>
#include <cmath>

namespace bsim {

bool ImageTensor::valid() const {
    if (h < 8 || w < 8 || (c != 1 && c != 3)) return false;
    if (static_cast<int64_t>(data.size()) != h * w * c) return false;
    for (double v : data)
        if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
}

Tensor pack_images(std::span<const ImageTensor> images) {
    check(!images.empty(), "pack_images: empty batch");
    const int64_t d = images[0].size();
    Tensor out({static_cast<int64_t>(images.size()), d});
    for (size_t n = 0; n < images.size(); ++n) {
        check(images[n].same_shape(images[0]), "pack_images: inconsistent shapes");
        std::copy(images[n].data.begin(), images[n].data.end(),
                  out.data().begin() + static_cast<int64_t>(n) * d);
    }
    return out;
}

void AugPolicy::validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0))
        throw ValidationError("AugPolicy: need 0 < scale_min <= scale_max <= 1");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(hflip_prob) || !prob(grayscale_prob))
        throw ValidationError("AugPolicy: probabilities must lie in [0,1]");
    if (!(jitter_strength >= 0.0)) throw ValidationError("AugPolicy: jitter_strength < 0");
}

double sample_lambda(const BetaParams& params, Rng& rng) {
    if (!(params.alpha > 0.0)) throw ValidationError("sample_lambda: alpha must be positive");
    const double lam = rng.beta(params.alpha, params.alpha);
    return std::clamp(lam, 1e-9, 1.0 - 1e-9);
}

MixResult cutmix(const ImageTensor& x1, const ImageTensor& x2, double lambda, Rng& rng) {
    check(x1.same_shape(x2), "cutmix: shape mismatch");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("cutmix: lambda outside [0,1]");
    const int64_t h = x1.h, w = x1.w;
    const double side = std::sqrt(1.0 - lambda);
    const int64_t rh = std::llround(static_cast<double>(h) * side);
    const int64_t rw = std::llround(static_cast<double>(w) * side);
    const int64_t cy = rng.uniform_int(h);
    const int64_t cx = rng.uniform_int(w);

    MixResult res;
    res.image = x1;
    res.lambda_requested = lambda;
    res.strategy = MixStrategy::cutmix;
    if (rh > 0 && rw > 0) {
        const int64_t top = std::clamp(cy - rh / 2, int64_t{0}, h - rh);
        const int64_t left = std::clamp(cx - rw / 2, int64_t{0}, w - rw);
        for (int64_t y = top; y < top + rh; ++y)
            for (int64_t x = left; x < left + rw; ++x)
                for (int64_t ch = 0; ch < x1.c; ++ch)
                    res.image.at(y, x, ch) = x2.at(y, x, ch);
        res.region = Rect{top, left, rh, rw};
    }
    const int64_t area = res.region ? res.region->area() : 0;
    res.lambda_effective = 1.0 - static_cast<double>(area) / static_cast<double>(h * w);
    return res;
}

MixResult mixup(const ImageTensor& x1, const ImageTensor& x2, double lambda) {
    check(x1.same_shape(x2), "mixup: shape mismatch");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("mixup: lambda outside [0,1]");
    MixResult res;
    res.image = x1;
    for (size_t i = 0; i < res.image.data.size(); ++i)
        res.image.data[i] = lambda * x1.data[i] + (1.0 - lambda) * x2.data[i];
    res.lambda_requested = lambda;
    res.lambda_effective = lambda;
    res.strategy = MixStrategy::mixup;
    return res;
}

namespace {

/// Bilinear resample of a crop window back to (h, w). Half-pixel centers,
/// so an identity crop reproduces the input bit for bit.
ImageTensor resize_crop(const ImageTensor& x, int64_t top, int64_t left,
                        int64_t ch, int64_t cw) {
    ImageTensor out(x.h, x.w, x.c);
    const double sy_ratio = static_cast<double>(ch) / static_cast<double>(x.h);
    const double sx_ratio = static_cast<double>(cw) / static_cast<double>(x.w);
    for (int64_t y = 0; y < x.h; ++y) {
        double sy = (static_cast<double>(y) + 0.5) * sy_ratio - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(ch - 1));
        const int64_t y0 = static_cast<int64_t>(sy);
        const int64_t y1 = std::min(y0 + 1, ch - 1);
        const double fy = sy - static_cast<double>(y0);
        for (int64_t xo = 0; xo < x.w; ++xo) {
            double sx = (static_cast<double>(xo) + 0.5) * sx_ratio - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(cw - 1));
            const int64_t x0 = static_cast<int64_t>(sx);
            const int64_t x1i = std::min(x0 + 1, cw - 1);
            const double fx = sx - static_cast<double>(x0);
            for (int64_t cch = 0; cch < x.c; ++cch) {
                const double p00 = x.at(top + y0, left + x0, cch);
                const double p01 = x.at(top + y0, left + x1i, cch);
                const double p10 = x.at(top + y1, left + x0, cch);
                const double p11 = x.at(top + y1, left + x1i, cch);
                out.at(y, xo, cch) =
                    (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) +
                    fy * ((1.0 - fx) * p10 + fx * p11);
            }
        }
    }
    return out;
}

}  // namespace

ImageTensor augment_view(const ImageTensor& x, const AugPolicy& policy, Rng& rng) {
    policy.validate();

    // crop: 3 draws
    const double area = rng.uniform(policy.scale_min, policy.scale_max);
    const double frac = std::sqrt(area);
    const int64_t ch = std::clamp<int64_t>(std::llround(frac * static_cast<double>(x.h)), 1, x.h);
    const int64_t cw = std::clamp<int64_t>(std::llround(frac * static_cast<double>(x.w)), 1, x.w);
    const int64_t top = rng.uniform_int(x.h - ch + 1);
    const int64_t left = rng.uniform_int(x.w - cw + 1);
    ImageTensor out = resize_crop(x, top, left, ch, cw);

    // flip: 1 draw
    if (rng.uniform() < policy.hflip_prob) {
        for (int64_t y = 0; y < out.h; ++y)
            for (int64_t xo = 0; xo < out.w / 2; ++xo)
                for (int64_t cch = 0; cch < out.c; ++cch)
                    std::swap(out.at(y, xo, cch), out.at(y, out.w - 1 - xo, cch));
    }

    // color jitter: c draws
    for (int64_t cch = 0; cch < out.c; ++cch) {
        const double factor = 1.0 + policy.jitter_strength * (2.0 * rng.uniform() - 1.0);
        for (int64_t y = 0; y < out.h; ++y)
            for (int64_t xo = 0; xo < out.w; ++xo)
                out.at(y, xo, cch) = std::clamp(out.at(y, xo, cch) * factor, 0.0, 1.0);
    }

    // grayscale: 1 draw
    const double gu = rng.uniform();
    if (out.c == 3 && gu < policy.grayscale_prob) {
        for (int64_t y = 0; y < out.h; ++y)
            for (int64_t xo = 0; xo < out.w; ++xo) {
                const double luma = 0.299 * out.at(y, xo, 0) + 0.587 * out.at(y, xo, 1) +
                                    0.114 * out.at(y, xo, 2);
                for (int64_t cch = 0; cch < 3; ++cch) out.at(y, xo, cch) = luma;
            }
    }
    return out;
}

}  // namespace bsim

#include "bsim/datagen.hpp"

#include <cmath>
#include <cstdio>

namespace bsim {

namespace {

bool inside_shape(ShapeKind kind, double x, double y, double r) {
    const double ax = std::abs(x), ay = std::abs(y);
    switch (kind) {
        case ShapeKind::square:
            return ax < r && ay < r;
        case ShapeKind::circle:
            return x * x + y * y < r * r;
        case ShapeKind::triangle:
            // upright triangle: apex at (0, -r), base at y = +r
            return y < r && y > -r && ax < (y + r) * 0.5;
        case ShapeKind::cross:
            return (ax < r * 0.34 && ay < r) || (ay < r * 0.34 && ax < r);
        case ShapeKind::ring: {
            const double d2 = x * x + y * y;
            return d2 < r * r && d2 > (0.55 * r) * (0.55 * r);
        }
        case ShapeKind::bar:
            return ax < r && ay < r * 0.3;
        case ShapeKind::diamond:
            return ax + ay < r * 1.2;
        case ShapeKind::lshape:
            return (ax < r && ay < r) && !(x > -r * 0.2 && y < r * 0.2);
    }
    return false;
}

constexpr const char* kShapeNames[] = {"square", "circle", "triangle", "cross",
                                       "ring",   "bar",    "diamond",  "lshape"};

}  // namespace

ImageTensor render_shape(ShapeKind kind, int64_t size, double cx, double cy, double radius,
                         double rotation, const double fg[3], const double bg[3],
                         int64_t channels) {
    ImageTensor img(size, size, channels);
    const double cr = std::cos(rotation), sr = std::sin(rotation);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) + 0.5 - cx;
            const double py = static_cast<double>(y) + 0.5 - cy;
            const double rx = cr * px + sr * py;
            const double ry = -sr * px + cr * py;
            const bool in = inside_shape(kind, rx, ry, radius);
            for (int64_t ch = 0; ch < channels; ++ch)
                img.at(y, x, ch) = in ? fg[ch % 3] : bg[ch % 3];
        }
    return img;
}

LabeledImageSet synth_shapes(int64_t classes, int64_t per_class, int64_t size, uint64_t seed) {
    if (classes < 2 || classes > 8)
        throw ValidationError("synth_shapes: classes must lie in [2,8]");
    if (per_class < 1) throw ValidationError("synth_shapes: per_class must be positive");
    if (size < 16) throw ValidationError("synth_shapes: size must be >= 16");

    Rng rng = derive_rng(seed, "synth_shapes", 0);
    LabeledImageSet set;
    for (int64_t k = 0; k < classes; ++k) set.class_names.push_back(kShapeNames[k]);
    for (int64_t k = 0; k < classes; ++k) {
        for (int64_t i = 0; i < per_class; ++i) {
            const double s = static_cast<double>(size);
            const double cx = rng.uniform(0.32 * s, 0.68 * s);
            const double cy = rng.uniform(0.32 * s, 0.68 * s);
            const double radius = rng.uniform(0.20 * s, 0.30 * s);
            const double rotation = rng.uniform(-0.3, 0.3);
            double fg[3], bg[3];
            // resample until foreground and background are clearly apart
            for (;;) {
                double dist = 0.0;
                for (int c = 0; c < 3; ++c) {
                    fg[c] = rng.uniform();
                    bg[c] = rng.uniform();
                    dist += std::abs(fg[c] - bg[c]);
                }
                if (dist >= 0.75) break;
            }
            set.images.push_back(
                render_shape(static_cast<ShapeKind>(k), size, cx, cy, radius, rotation, fg, bg));
            set.labels.push_back(k);
        }
    }
    return set;
}

LabeledImageSet load_cifar_binary(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open dataset file: " + path);
    std::fseek(f, 0, SEEK_END);
    const long length = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    constexpr long kRecord = 1 + 3 * 32 * 32;
    if (length <= 0 || length % kRecord != 0) {
        std::fclose(f);
        throw IoError("dataset length is not a multiple of the 3073-byte record");
    }
    const long records = length / kRecord;
    std::vector<unsigned char> buf(static_cast<size_t>(kRecord));
    LabeledImageSet set;
    for (int i = 0; i < 10; ++i) set.class_names.push_back("class" + std::to_string(i));
    for (long r = 0; r < records; ++r) {
        if (std::fread(buf.data(), 1, buf.size(), f) != buf.size()) {
            std::fclose(f);
            throw IoError("truncated dataset record");
        }
        const int64_t label = buf[0];
        if (label >= 10) {
            std::fclose(f);
            throw IoError("dataset label out of range [0,10)");
        }
        ImageTensor img(32, 32, 3);
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t y = 0; y < 32; ++y)
                for (int64_t x = 0; x < 32; ++x)
                    img.at(y, x, ch) =
                        static_cast<double>(buf[1 + ch * 1024 + y * 32 + x]) / 255.0;
        set.images.push_back(std::move(img));
        set.labels.push_back(label);
    }
    std::fclose(f);
    return set;
}

void save_cifar_binary(const std::string& path, const LabeledImageSet& set) {
    for (const ImageTensor& img : set.images)
        if (img.h != 32 || img.w != 32 || img.c != 3)
            throw ValidationError("save_cifar_binary: records must be 32x32x3");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open dataset file for writing: " + path);
    std::vector<unsigned char> buf(1 + 3 * 32 * 32);
    for (int64_t r = 0; r < set.size(); ++r) {
        if (set.labels[r] < 0 || set.labels[r] >= 10) {
            std::fclose(f);
            throw ValidationError("save_cifar_binary: label out of range [0,10)");
        }
        buf[0] = static_cast<unsigned char>(set.labels[r]);
        const ImageTensor& img = set.images[r];
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t y = 0; y < 32; ++y)
                for (int64_t x = 0; x < 32; ++x)
                    buf[1 + ch * 1024 + y * 32 + x] =
                        static_cast<unsigned char>(std::llround(img.at(y, x, ch) * 255.0));
        if (std::fwrite(buf.data(), 1, buf.size(), f) != buf.size()) {
            std::fclose(f);
            throw IoError("failed writing dataset record");
        }
    }
    std::fclose(f);
}

}  // namespace bsim

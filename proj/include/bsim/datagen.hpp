#pragma once

#include <string>
#include <vector>

#include "bsim/image.hpp"
#include "bsim/rng.hpp"

namespace bsim {

struct LabeledImageSet {
    std::vector<ImageTensor> images;
    std::vector<int64_t> labels;
    std::vector<std::string> class_names;

    int64_t size() const { return static_cast<int64_t>(images.size()); }
};

enum class ShapeKind { square, circle, triangle, cross, ring, bar, diamond, lshape };

/// Hard-edged rasterizer: a pixel takes the foreground color iff its center
/// lies strictly inside the shape. radius is the half-extent in pixels.
ImageTensor render_shape(ShapeKind kind, int64_t size, double cx, double cy, double radius,
                         double rotation, const double fg[3], const double bg[3],
                         int64_t channels = 3);

/// One shape class per label, rendered at random position/scale/rotation
/// with random foreground/background colors. Colors are uncorrelated with
/// the class, so a color shortcut carries no label information.
LabeledImageSet synth_shapes(int64_t classes, int64_t per_class, int64_t size, uint64_t seed);

/// CIFAR-style binary records: 1 label byte + 3*32*32 pixel bytes
/// (channel-planar R,G,B, row-major). Pixels map to [0,1] by /255.
LabeledImageSet load_cifar_binary(const std::string& path);
void save_cifar_binary(const std::string& path, const LabeledImageSet& set);

}  // namespace bsim

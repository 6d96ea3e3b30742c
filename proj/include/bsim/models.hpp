#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bsim/graph.hpp"
#include "bsim/rng.hpp"

namespace bsim {

struct ConvGeom {
    int64_t n = 0, h = 0, w = 0, c = 0;
    int64_t kernel = 3, stride = 2, pad = 1;
    int64_t out_h() const { return (h + 2 * pad - kernel) / stride + 1; }
    int64_t out_w() const { return (w + 2 * pad - kernel) / stride + 1; }
};

/// Patch extraction for convolution-as-matmul. Input is read as
/// [N*H*W x C] row-major in (n, y, x); output is [N*oh*ow x k*k*C].
Var im2col(Var images, const ConvGeom& g);

struct ConvLayer {
    Tensor w;  // [k*k*c_in x c_out]
    Tensor b;  // [c_out]
    int64_t in_ch = 0, out_ch = 0;
};

enum class Activation { relu, identity };

struct Mlp {
    Tensor w1, b1, w2, b2;
    Activation activation = Activation::relu;
    bool layernorm_hidden = true;

    int64_t in_dim() const { return w1.rows(); }
    int64_t out_dim() const { return w2.cols(); }
};

struct EncoderShape {
    int64_t h = 32, w = 32, c = 3;
    std::vector<int64_t> channels = {16, 32, 64};
};

/// Online parameters: conv encoder f, projector g, optional predictor q.
struct ModelState {
    EncoderShape encoder_shape;
    std::vector<ConvLayer> conv;
    Mlp projector;
    std::vector<Mlp> predictor;  // empty or one element

    bool has_predictor() const { return !predictor.empty(); }
    int64_t dh() const { return encoder_shape.channels.back(); }
    int64_t dz() const { return projector.out_dim(); }

    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;
};

/// Desk-scale default: 3 conv blocks (3x3, stride 2, relu) + global average
/// pool to Dh, projector Dh->Dhid->Dz, optional predictor Dz->Dhid->Dz.
ModelState make_model(const EncoderShape& shape, int64_t dhid, int64_t dz,
                      bool with_predictor, Rng& init_rng);

/// Parameter leaves of one model on one tape, aligned with parameters().
struct ModelGraph {
    const ModelState* state = nullptr;
    std::vector<Var> params;

    static ModelGraph make(Tape& tape, const ModelState& state, bool trainable);
};

/// h = GAP(conv blocks(batch)); batch is [N x (h*w*c)].
Var encode(Tape& tape, const ModelGraph& m, const Tensor& batch);
Var project(Tape& tape, const ModelGraph& m, Var h);
Var predict(Tape& tape, const ModelGraph& m, Var z);

/// Convenience in immediate mode (no gradients kept).
Tensor encode_features(const ModelState& state, const Tensor& batch);
Tensor project_features(const ModelState& state, const Tensor& batch);

struct EmaState {
    ModelState target;
    double tau_base = 0.996;
};

/// xi' = tau*xi + (1-tau)*theta, elementwise over aligned parameters.
void ema_update(ModelState& target, const ModelState& online, double tau);

/// tau = 1 - (1 - tau_base) * (cos(pi*step/total) + 1) / 2.
double tau_schedule(int64_t step, int64_t total_steps, double tau_base);

/// FIFO buffer of past keys used as negatives. Keys must be unit vectors.
class FeatureQueue {
public:
    FeatureQueue(int64_t capacity, int64_t dim);

    int64_t capacity() const { return capacity_; }
    int64_t dim() const { return dim_; }
    int64_t size() const { return count_; }

    /// Appends rows of keys in batch order, evicting the oldest entries
    /// once capacity is exceeded. Throws ValidationError when a key norm
    /// deviates from 1 by more than 1e-6 or the batch exceeds capacity.
    void push(const Tensor& keys);

    /// Entries in FIFO order (oldest first) as a [size x dim] matrix.
    Tensor snapshot() const;

    /// Pre-fills to capacity with random unit vectors.
    void fill_random(Rng& rng);

    /// Restores from a snapshot (oldest first).
    void restore(const Tensor& entries);

private:
    int64_t capacity_ = 0, dim_ = 0, count_ = 0, cursor_ = 0;
    std::vector<double> slots_;  // capacity x dim ring
};

}  // namespace bsim

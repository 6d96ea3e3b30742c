#include "bsim/models.hpp"

#include <cmath>

namespace bsim {

Var im2col(Var images, const ConvGeom& g) {
    Tape& t = *images.tape;
    const Tensor& x = images.value();
    check(x.size() == g.n * g.h * g.w * g.c, "im2col: size does not match geometry");
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t patch = g.kernel * g.kernel * g.c;
    Tensor out({g.n * oh * ow, patch});

    // flat index map built once; shared by forward and backward
    std::vector<int64_t> src(static_cast<size_t>(out.size()), -1);
    int64_t r = 0;
    for (int64_t n = 0; n < g.n; ++n)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox, ++r) {
                int64_t col = 0;
                for (int64_t ky = 0; ky < g.kernel; ++ky)
                    for (int64_t kx = 0; kx < g.kernel; ++kx) {
                        const int64_t iy = oy * g.stride - g.pad + ky;
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        const bool in = iy >= 0 && iy < g.h && ix >= 0 && ix < g.w;
                        for (int64_t ch = 0; ch < g.c; ++ch, ++col) {
                            if (in) {
                                const int64_t flat = ((n * g.h + iy) * g.w + ix) * g.c + ch;
                                src[r * patch + col] = flat;
                                out[r * patch + col] = x[flat];
                            }
                        }
                    }
            }

    if (!images.requires_grad()) return t.constant(std::move(out));
    const int32_t ix = images.id;
    return t.emplace(std::move(out), true, [ix, src = std::move(src)](Tape& t, int32_t self) {
        const Tensor& grad = t.node(self).grad;
        Tape::Node& nx = t.node(ix);
        for (size_t i = 0; i < src.size(); ++i)
            if (src[i] >= 0) nx.grad[src[i]] += grad[static_cast<int64_t>(i)];
    });
}

std::vector<std::pair<std::string, Tensor*>> ModelState::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (size_t i = 0; i < conv.size(); ++i) {
        out.emplace_back("enc.conv" + std::to_string(i) + ".w", &conv[i].w);
        out.emplace_back("enc.conv" + std::to_string(i) + ".b", &conv[i].b);
    }
    out.emplace_back("proj.w1", &projector.w1);
    out.emplace_back("proj.b1", &projector.b1);
    out.emplace_back("proj.w2", &projector.w2);
    out.emplace_back("proj.b2", &projector.b2);
    if (!predictor.empty()) {
        out.emplace_back("pred.w1", &predictor[0].w1);
        out.emplace_back("pred.b1", &predictor[0].b1);
        out.emplace_back("pred.w2", &predictor[0].w2);
        out.emplace_back("pred.b2", &predictor[0].b2);
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelState::parameters() const {
    auto mut = const_cast<ModelState*>(this)->parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, p] : mut) out.emplace_back(name, p);
    return out;
}

namespace {

Tensor he_uniform(int64_t rows, int64_t cols, int64_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t({rows, cols});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

Mlp make_mlp(int64_t in, int64_t hid, int64_t out, Rng& rng) {
    Mlp m;
    m.w1 = he_uniform(in, hid, in, rng);
    m.b1 = Tensor::zeros({hid});
    m.w2 = he_uniform(hid, out, hid, rng);
    m.b2 = Tensor::zeros({out});
    return m;
}

Var mlp_forward(Tape& tape, const Mlp& def, Var w1, Var b1, Var w2, Var b2, Var x) {
    Var hidden = add_rowvec(matmul(x, w1), b1);
    if (def.layernorm_hidden) hidden = layernorm_rows(hidden);
    if (def.activation == Activation::relu) hidden = relu(hidden);
    return add_rowvec(matmul(hidden, w2), b2);
}

}  // namespace

ModelState make_model(const EncoderShape& shape, int64_t dhid, int64_t dz,
                      bool with_predictor, Rng& init_rng) {
    check(shape.h >= 8 && shape.w >= 8 && (shape.c == 1 || shape.c == 3),
          "make_model: bad input shape");
    ModelState m;
    m.encoder_shape = shape;
    int64_t cin = shape.c;
    for (int64_t cout : shape.channels) {
        ConvLayer layer;
        layer.in_ch = cin;
        layer.out_ch = cout;
        layer.w = he_uniform(9 * cin, cout, 9 * cin, init_rng);
        layer.b = Tensor::zeros({cout});
        m.conv.push_back(std::move(layer));
        cin = cout;
    }
    m.projector = make_mlp(cin, dhid, dz, init_rng);
    if (with_predictor) m.predictor.push_back(make_mlp(dz, dhid, dz, init_rng));
    return m;
}

ModelGraph ModelGraph::make(Tape& tape, const ModelState& state, bool trainable) {
    ModelGraph g;
    g.state = &state;
    for (const auto& [name, p] : state.parameters()) g.params.push_back(tape.leaf(*p, trainable));
    return g;
}

Var encode(Tape& tape, const ModelGraph& m, const Tensor& batch) {
    const ModelState& s = *m.state;
    const EncoderShape& es = s.encoder_shape;
    check(batch.cols() == es.h * es.w * es.c, "encode: input dims do not match encoder");
    const int64_t n = batch.rows();

    Var x = tape.constant(batch);
    int64_t h = es.h, w = es.w, c = es.c;
    for (size_t layer = 0; layer < s.conv.size(); ++layer) {
        ConvGeom geom{n, h, w, c};
        Var patches = im2col(x, geom);
        Var z = add_rowvec(matmul(patches, m.params[2 * layer]), m.params[2 * layer + 1]);
        x = relu(z);
        h = geom.out_h();
        w = geom.out_w();
        c = s.conv[layer].out_ch;
    }
    return group_mean_rows(x, h * w);  // global average pool -> [N x Dh]
}

Var project(Tape& tape, const ModelGraph& m, Var h) {
    const size_t base = 2 * m.state->conv.size();
    return mlp_forward(tape, m.state->projector, m.params[base], m.params[base + 1],
                       m.params[base + 2], m.params[base + 3], h);
}

Var predict(Tape& tape, const ModelGraph& m, Var z) {
    if (!m.state->has_predictor())
        throw ValidationError("predict: model has no predictor head");
    const size_t base = 2 * m.state->conv.size() + 4;
    return mlp_forward(tape, m.state->predictor[0], m.params[base], m.params[base + 1],
                       m.params[base + 2], m.params[base + 3], z);
}

Tensor encode_features(const ModelState& state, const Tensor& batch) {
    Tape tape;
    ModelGraph g = ModelGraph::make(tape, state, false);
    return encode(tape, g, batch).value();
}

Tensor project_features(const ModelState& state, const Tensor& batch) {
    Tape tape;
    ModelGraph g = ModelGraph::make(tape, state, false);
    return project(tape, g, encode(tape, g, batch)).value();
}

void ema_update(ModelState& target, const ModelState& online, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("ema_update: tau outside [0,1]");
    auto tp = target.parameters();
    auto op = online.parameters();
    check(tp.size() == op.size(), "ema_update: parameter count mismatch");
    for (size_t i = 0; i < tp.size(); ++i) {
        Tensor& xi = *tp[i].second;
        const Tensor& theta = *op[i].second;
        check(xi.same_shape(theta), "ema_update: parameter shape mismatch");
        for (int64_t k = 0; k < xi.size(); ++k) xi[k] = tau * xi[k] + (1.0 - tau) * theta[k];
    }
}

double tau_schedule(int64_t step, int64_t total_steps, double tau_base) {
    if (step < 0 || step > total_steps)
        throw ValidationError("tau_schedule: step out of range");
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 - (1.0 - tau_base) * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

FeatureQueue::FeatureQueue(int64_t capacity, int64_t dim)
    : capacity_(capacity), dim_(dim), slots_(static_cast<size_t>(capacity * dim), 0.0) {
    if (capacity <= 0 || dim <= 0) throw ValidationError("FeatureQueue: bad capacity or dim");
}

void FeatureQueue::push(const Tensor& keys) {
    const int64_t b = keys.rows();
    check(keys.cols() == dim_, "queue_push: key dim mismatch");
    if (b > capacity_) throw ValidationError("queue_push: batch larger than capacity");
    for (int64_t i = 0; i < b; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < dim_; ++j) s += keys.at(i, j) * keys.at(i, j);
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
            throw ValidationError("queue_push: key is not unit-normalized");
    }
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < dim_; ++j) slots_[cursor_ * dim_ + j] = keys.at(i, j);
        cursor_ = (cursor_ + 1) % capacity_;
    }
    count_ = std::min(count_ + b, capacity_);
}

Tensor FeatureQueue::snapshot() const {
    if (count_ == 0) return Tensor();
    Tensor out({count_, dim_});
    for (int64_t r = 0; r < count_; ++r) {
        const int64_t slot = ((cursor_ - count_ + r) % capacity_ + capacity_) % capacity_;
        for (int64_t j = 0; j < dim_; ++j) out.at(r, j) = slots_[slot * dim_ + j];
    }
    return out;
}

void FeatureQueue::fill_random(Rng& rng) {
    Tensor keys({capacity_, dim_});
    for (int64_t i = 0; i < capacity_; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < dim_; ++j) {
            keys.at(i, j) = rng.normal();
            s += keys.at(i, j) * keys.at(i, j);
        }
        const double n = std::sqrt(s);
        for (int64_t j = 0; j < dim_; ++j) keys.at(i, j) /= n;
    }
    count_ = 0;
    cursor_ = 0;
    push(keys);
}

void FeatureQueue::restore(const Tensor& entries) {
    count_ = 0;
    cursor_ = 0;
    std::fill(slots_.begin(), slots_.end(), 0.0);
    if (entries.empty()) return;
    check(entries.cols() == dim_, "queue restore: dim mismatch");
    if (entries.rows() > capacity_) throw ValidationError("queue restore: too many entries");
    push(entries);
}

}  // namespace bsim

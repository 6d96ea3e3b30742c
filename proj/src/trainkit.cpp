#include "bsim/trainkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>

#include <json.hpp>

namespace bsim {

std::string to_string(Method m) {
    switch (m) {
        case Method::simclr: return "simclr";
        case Method::moco: return "moco";
        case Method::byol: return "byol";
    }
    return "?";
}

std::string to_string(MixStrategy m) {
    switch (m) {
        case MixStrategy::cutmix: return "cutmix";
        case MixStrategy::mixup: return "mixup";
        case MixStrategy::none: return "none";
    }
    return "?";
}

std::string to_string(ByolVariant v) { return v == ByolVariant::v0 ? "v0" : "v1"; }

namespace {

Method method_from_string(const std::string& s) {
    if (s == "simclr") return Method::simclr;
    if (s == "moco") return Method::moco;
    if (s == "byol") return Method::byol;
    throw ValidationError("unknown method: " + s);
}

MixStrategy mix_from_string(const std::string& s) {
    if (s == "cutmix") return MixStrategy::cutmix;
    if (s == "mixup") return MixStrategy::mixup;
    if (s == "none") return MixStrategy::none;
    throw ValidationError("unknown mix strategy: " + s);
}

ByolVariant variant_from_string(const std::string& s) {
    if (s == "v0") return ByolVariant::v0;
    if (s == "v1") return ByolVariant::v1;
    throw ValidationError("unknown byol variant: " + s);
}

}  // namespace

void TrainConfig::validate_and_normalize() {
    if (batch < 4 || batch % 2 != 0)
        throw ValidationError("batch size must be even and >= 4");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum outside [0,1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be nonnegative");
    if (!(w1 >= 0.0 && w1 <= 1.0 && w2 >= 0.0 && w2 <= 1.0))
        throw ValidationError("loss weights must lie in [0,1]");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
        throw ValidationError("warmup_epochs must lie in [0, epochs)");
    if (queue_capacity < batch)
        throw ValidationError("queue capacity must be at least the batch size");
    if (!(tau_base >= 0.0 && tau_base <= 1.0)) throw ValidationError("tau_base outside [0,1]");
    if (force_lambda && !(*force_lambda >= 0.0 && *force_lambda <= 1.0))
        throw ValidationError("force_lambda outside [0,1]");
    if (mix == MixStrategy::none) {
        if (force_lambda && *force_lambda != 1.0)
            throw ValidationError("force_lambda conflicts with mix=none");
        w1 = 0.0;
        w2 = 1.0;  // no mixing: the conventional single-instance case
    }
    if (w1 == 0.0 && w2 == 0.0)
        throw ValidationError("at least one of w1, w2 must be positive");
}

std::string train_config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["method"] = to_string(c.method);
    j["mix"] = to_string(c.mix);
    j["alpha"] = c.alpha;
    j["temperature"] = c.temperature;
    j["w1"] = c.w1;
    j["w2"] = c.w2;
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["weight_decay"] = c.weight_decay;
    j["warmup_epochs"] = c.warmup_epochs;
    j["queue_capacity"] = c.queue_capacity;
    j["tau_base"] = c.tau_base;
    j["seed"] = c.seed;
    j["byol_variant"] = to_string(c.byol_variant);
    if (c.force_lambda) j["force_lambda"] = *c.force_lambda;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    TrainConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "method") c.method = method_from_string(value.get<std::string>());
            else if (key == "mix") c.mix = mix_from_string(value.get<std::string>());
            else if (key == "alpha") c.alpha = value.get<double>();
            else if (key == "temperature") c.temperature = value.get<double>();
            else if (key == "w1") c.w1 = value.get<double>();
            else if (key == "w2") c.w2 = value.get<double>();
            else if (key == "batch") c.batch = value.get<int64_t>();
            else if (key == "epochs") c.epochs = value.get<int64_t>();
            else if (key == "lr") c.lr = value.get<double>();
            else if (key == "momentum") c.momentum = value.get<double>();
            else if (key == "weight_decay") c.weight_decay = value.get<double>();
            else if (key == "warmup_epochs") c.warmup_epochs = value.get<int64_t>();
            else if (key == "queue_capacity") c.queue_capacity = value.get<int64_t>();
            else if (key == "tau_base") c.tau_base = value.get<double>();
            else if (key == "seed") c.seed = value.get<uint64_t>();
            else if (key == "byol_variant") c.byol_variant = variant_from_string(value.get<std::string>());
            else if (key == "force_lambda") c.force_lambda = value.get<double>();
            else throw ValidationError("unknown config key: " + key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad config value type: ") + e.what());
    }
    return c;
}

std::vector<std::pair<int64_t, int64_t>> pair_indices(int64_t n) {
    if (n <= 0 || n % 2 != 0)
        throw ValidationError("pair_indices: N must be even (an odd N would self-pair an index)");
    std::vector<std::pair<int64_t, int64_t>> out;
    out.reserve(n);
    for (int64_t i = 0; i < n; ++i) out.emplace_back(i, n - 1 - i);
    return out;
}

void sgd_update(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                double momentum, double weight_decay) {
    check(param.same_shape(grad) && param.same_shape(velocity), "sgd_update: shape mismatch");
    for (int64_t i = 0; i < param.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}

double cosine_lr(int64_t step, int64_t total_steps, double lr0, int64_t warmup_steps) {
    if (step < 0 || step > total_steps) throw ValidationError("cosine_lr: step out of range");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ValidationError("cosine_lr: warmup out of range");
    if (step < warmup_steps)
        return lr0 * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps == warmup_steps) return step < total_steps ? lr0 : 0.0;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return lr0 * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

std::string metrics_jsonl_line(const MetricsRecord& r, bool include_wall) {
    char buf[512];
    if (include_wall) {
        std::snprintf(buf, sizeof(buf),
                      "{\"step\":%lld,\"epoch\":%lld,\"loss\":%.17g,\"lr\":%.17g,"
                      "\"lambda_mean\":%.17g,\"wall_ms\":%.3f}",
                      static_cast<long long>(r.step), static_cast<long long>(r.epoch), r.loss,
                      r.lr, r.lambda_mean, r.wall_ms);
    } else {
        std::snprintf(buf, sizeof(buf),
                      "{\"step\":%lld,\"epoch\":%lld,\"loss\":%.17g,\"lr\":%.17g,"
                      "\"lambda_mean\":%.17g}",
                      static_cast<long long>(r.step), static_cast<long long>(r.epoch), r.loss,
                      r.lr, r.lambda_mean);
    }
    return buf;
}

// ---- checkpoint binary format (little-endian) ----

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct Reader {
    const unsigned char* p;
    size_t remaining;
    void need(size_t n) const {
        if (remaining < n) throw IoError("checkpoint: truncated payload");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
        p += 4;
        remaining -= 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
        p += 8;
        remaining -= 8;
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        remaining -= n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& cp) {
    std::string out;
    out.append(Checkpoint::kMagic, 5);
    const std::string config = train_config_to_json(cp.config);
    put_u32(out, static_cast<uint32_t>(config.size()));
    out += config;
    put_u64(out, static_cast<uint64_t>(cp.step));
    put_u64(out, cp.rng_state);
    put_u64(out, static_cast<uint64_t>(cp.input_h));
    put_u64(out, static_cast<uint64_t>(cp.input_w));
    put_u64(out, static_cast<uint64_t>(cp.input_c));
    put_u32(out, static_cast<uint32_t>(cp.tensors.size()));
    for (const auto& [name, tensor] : cp.tensors) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(tensor.shape().size()));
        for (int64_t d : tensor.shape()) put_u64(out, static_cast<uint64_t>(d));
        for (int64_t i = 0; i < tensor.size(); ++i) put_f64(out, tensor[i]);
    }
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    const bool ok = std::fwrite(out.data(), 1, out.size(), f) == out.size();
    std::fclose(f);
    if (!ok) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::fseek(f, 0, SEEK_END);
    const long length = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> buf(static_cast<size_t>(std::max(0L, length)));
    const bool ok = !buf.empty() && std::fread(buf.data(), 1, buf.size(), f) == buf.size();
    std::fclose(f);
    if (!ok) throw IoError("failed reading checkpoint: " + path);

    Reader r{buf.data(), buf.size()};
    const std::string magic = r.bytes(5);
    if (magic != std::string(Checkpoint::kMagic, 5))
        throw IoError("checkpoint magic/version mismatch (expected BSIM1)");
    Checkpoint cp;
    const uint32_t config_len = r.u32();
    cp.config = train_config_from_json(r.bytes(config_len));
    cp.step = static_cast<int64_t>(r.u64());
    cp.rng_state = r.u64();
    cp.input_h = static_cast<int64_t>(r.u64());
    cp.input_w = static_cast<int64_t>(r.u64());
    cp.input_c = static_cast<int64_t>(r.u64());
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        const uint32_t ndim = r.u32();
        std::vector<int64_t> shape;
        int64_t total = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<int64_t>(r.u64()));
            total *= shape.back();
        }
        std::vector<double> data(static_cast<size_t>(total));
        for (int64_t k = 0; k < total; ++k) data[static_cast<size_t>(k)] = r.f64();
        cp.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return cp;
}

// ---- trainers ----

namespace {

constexpr int64_t kDhid = 64;
constexpr int64_t kDz = 32;

Tensor tensor_row(const Tensor& m, int64_t i) {
    Tensor out({m.cols()});
    for (int64_t j = 0; j < m.cols(); ++j) out[j] = m.at(i, j);
    return out;
}

std::vector<int64_t> epoch_permutation(uint64_t seed, int64_t epoch, int64_t m) {
    Rng rng = derive_rng(seed, "shuffle", static_cast<uint64_t>(epoch));
    std::vector<int64_t> perm(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) perm[i] = i;
    for (int64_t i = m - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(perm[i], perm[j]);
    }
    return perm;
}

struct Trainer {
    TrainConfig cfg;
    EncoderShape shape;
    ModelState online;
    std::optional<ModelState> target;  // byol target / moco key network
    std::optional<FeatureQueue> queue;
    OptimizerState opt;
    int64_t step = 0;
    int64_t steps_per_epoch = 0;
    int64_t total_steps = 0;

    static Trainer fresh(const TrainConfig& cfg, const LabeledImageSet& data);
    static Trainer restored(const Checkpoint& cp, const LabeledImageSet& data);

    MetricsRecord run_step(const LabeledImageSet& data);
    Checkpoint to_checkpoint() const;

private:
    struct StepLoss {
        double scalar = 0.0;
        double lambda_mean = 1.0;
    };
    StepLoss simclr_step(const std::vector<int64_t>& idx);
    StepLoss moco_step(const std::vector<int64_t>& idx);
    StepLoss byol_step(const std::vector<int64_t>& idx);

    /// Draws per-anchor mixing ratios (requested), honoring force_lambda
    /// and the no-mix rule.
    std::vector<double> draw_lambdas(int64_t n);
    /// Builds the mixed stream and the effective ratios in one pass.
    std::vector<ImageTensor> mix_stream(const std::vector<ImageTensor>& parent1,
                                        const std::vector<ImageTensor>& parent2,
                                        const std::vector<double>& requested,
                                        std::vector<double>& effective, Rng& rng_mix);
    void apply_sgd(Tape& tape, const ModelGraph& graph);

    const LabeledImageSet* data_ = nullptr;
};

Trainer Trainer::fresh(const TrainConfig& cfg, const LabeledImageSet& data) {
    if (data.size() < cfg.batch)
        throw ValidationError("dataset smaller than one batch");
    Trainer t;
    t.cfg = cfg;
    const ImageTensor& first = data.images.at(0);
    t.shape = EncoderShape{first.h, first.w, first.c, {16, 32, 64}};
    Rng init = derive_rng(cfg.seed, "init", 0);
    t.online = make_model(t.shape, kDhid, kDz, cfg.method == Method::byol, init);
    if (cfg.method == Method::byol || cfg.method == Method::moco) {
        t.target = t.online;  // start as an exact copy of the online weights
        if (cfg.method == Method::moco) t.target->predictor.clear();
    }
    if (cfg.method == Method::moco) {
        t.queue.emplace(cfg.queue_capacity, kDz);
        Rng qrng = derive_rng(cfg.seed, "queue", 0);
        t.queue->fill_random(qrng);
    }
    for (auto& [name, p] : t.online.parameters())
        t.opt.velocity.push_back(Tensor::zeros(p->shape()));
    t.steps_per_epoch = data.size() / cfg.batch;
    t.total_steps = t.steps_per_epoch * cfg.epochs;
    return t;
}

Trainer Trainer::restored(const Checkpoint& cp, const LabeledImageSet& data) {
    TrainConfig cfg = cp.config;
    cfg.validate_and_normalize();
    Trainer t = fresh(cfg, data);
    if (t.shape.h != cp.input_h || t.shape.w != cp.input_w || t.shape.c != cp.input_c)
        throw ValidationError("resume: dataset shape differs from the checkpointed run");
    t.step = cp.step;

    std::map<std::string, const Tensor*> table;
    for (const auto& [name, tensor] : cp.tensors) table[name] = &tensor;
    auto take = [&table](const std::string& name) -> const Tensor& {
        auto it = table.find(name);
        if (it == table.end()) throw IoError("checkpoint is missing tensor: " + name);
        return *it->second;
    };
    auto assign = [&take](const std::string& name, Tensor& dst) {
        const Tensor& src = take(name);
        check(src.same_shape(dst), "checkpoint tensor shape mismatch");
        dst = src;
    };

    for (auto& [name, p] : t.online.parameters()) assign("online." + name, *p);
    if (t.target)
        for (auto& [name, p] : t.target->parameters()) assign("target." + name, *p);
    auto params = t.online.parameters();
    for (size_t i = 0; i < params.size(); ++i)
        assign("opt." + params[i].first, t.opt.velocity[i]);
    if (t.queue) t.queue->restore(take("queue.entries"));
    return t;
}

Checkpoint Trainer::to_checkpoint() const {
    Checkpoint cp;
    cp.config = cfg;
    cp.step = step;
    cp.rng_state = cfg.seed;
    cp.input_h = shape.h;
    cp.input_w = shape.w;
    cp.input_c = shape.c;
    for (const auto& [name, p] : online.parameters())
        cp.tensors.emplace_back("online." + name, *p);
    if (target)
        for (const auto& [name, p] : target->parameters())
            cp.tensors.emplace_back("target." + name, *p);
    auto params = online.parameters();
    for (size_t i = 0; i < params.size(); ++i)
        cp.tensors.emplace_back("opt." + params[i].first, opt.velocity[i]);
    if (queue) cp.tensors.emplace_back("queue.entries", queue->snapshot());
    return cp;
}

std::vector<double> Trainer::draw_lambdas(int64_t n) {
    std::vector<double> lam(static_cast<size_t>(n), 1.0);
    if (cfg.mix == MixStrategy::none) return lam;  // unmixed: weight sits on the own view
    Rng rng = derive_rng(cfg.seed, "lambda", static_cast<uint64_t>(step));
    for (int64_t i = 0; i < n; ++i)
        lam[i] = cfg.force_lambda ? *cfg.force_lambda
                                  : sample_lambda(BetaParams{cfg.alpha}, rng);
    return lam;
}

std::vector<ImageTensor> Trainer::mix_stream(const std::vector<ImageTensor>& parent1,
                                             const std::vector<ImageTensor>& parent2,
                                             const std::vector<double>& requested,
                                             std::vector<double>& effective, Rng& rng_mix) {
    const int64_t n = static_cast<int64_t>(parent1.size());
    std::vector<ImageTensor> mixed(static_cast<size_t>(n));
    effective.assign(static_cast<size_t>(n), 1.0);
    for (int64_t i = 0; i < n; ++i) {
        switch (cfg.mix) {
            case MixStrategy::cutmix: {
                MixResult r = cutmix(parent1[i], parent2[i], requested[i], rng_mix);
                mixed[i] = std::move(r.image);
                effective[i] = r.lambda_effective;
                break;
            }
            case MixStrategy::mixup: {
                MixResult r = mixup(parent1[i], parent2[i], requested[i]);
                mixed[i] = std::move(r.image);
                effective[i] = r.lambda_effective;
                break;
            }
            case MixStrategy::none:
                mixed[i] = parent1[i];
                effective[i] = 1.0;
                break;
        }
    }
    return mixed;
}

void Trainer::apply_sgd(Tape& tape, const ModelGraph& graph) {
    auto params = online.parameters();
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    const double lr = cosine_lr(step, total_steps, cfg.lr, warmup_steps);
    for (size_t i = 0; i < params.size(); ++i)
        sgd_update(*params[i].second, graph.params[i].grad(), opt.velocity[i], lr,
                   cfg.momentum, cfg.weight_decay);
}

Trainer::StepLoss Trainer::simclr_step(const std::vector<int64_t>& idx) {
    const int64_t n = cfg.batch;
    const AugPolicy pol{};
    Rng rv = derive_rng(cfg.seed, "views", static_cast<uint64_t>(step));
    Rng rm = derive_rng(cfg.seed, "mix", static_cast<uint64_t>(step));
    auto pairs = pair_indices(n);
    auto view = [&](int64_t sample) { return augment_view(data_->images[sample], pol, rv); };

    std::vector<ImageTensor> a(n), a2(n), b(n), c(n), c2(n), d(n);
    for (int64_t i = 0; i < n; ++i) a[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) a2[i] = view(idx[pairs[i].second]);
    for (int64_t i = 0; i < n; ++i) b[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) c[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) c2[i] = view(idx[pairs[i].second]);
    for (int64_t i = 0; i < n; ++i) d[i] = view(idx[i]);

    const std::vector<double> requested = draw_lambdas(n);
    std::vector<double> lam_eff;
    std::vector<ImageTensor> m1 = mix_stream(a, a2, requested, lam_eff, rm);
    std::vector<double> lam_eff2;
    std::vector<ImageTensor> m2 = mix_stream(c, c2, requested, lam_eff2, rm);
    // the region size depends only on (lambda, H, W), so both directions
    // realize the same effective ratio even with different region centers

    Tape tape;
    ModelGraph g = ModelGraph::make(tape, online, true);
    auto embed = [&](const std::vector<ImageTensor>& ims) {
        return project(tape, g, encode(tape, g, pack_images(ims)));
    };
    std::vector<int64_t> pairing(n);
    for (int64_t i = 0; i < n; ++i) pairing[i] = pairs[i].second;

    BatchEmbeddings mixed_batch;
    mixed_batch.z_mixed_prime = embed(m1);
    mixed_batch.z_plain_dprime = embed(b);
    mixed_batch.z_mixed_dprime = embed(m2);
    mixed_batch.z_plain_prime = embed(d);
    mixed_batch.lambdas = lam_eff;
    mixed_batch.pairing = pairing;

    StepLoss out;
    LossNode total;
    if (cfg.w1 > 0.0 && cfg.w2 > 0.0) {
        // WBSIM: the plain first-stream anchors are kept alongside the mixtures
        LossNode bsim = simclr_bsim_loss(tape, mixed_batch, cfg.temperature);
        BatchEmbeddings plain_batch = mixed_batch;
        plain_batch.z_mixed_prime = embed(a);
        plain_batch.z_mixed_dprime = embed(c);
        plain_batch.lambdas.assign(static_cast<size_t>(n), 1.0);
        LossNode sim = simclr_bsim_loss(tape, plain_batch, cfg.temperature);
        total = wbsim_combine(tape, bsim, sim, cfg.w1, cfg.w2);
    } else if (cfg.w1 > 0.0) {
        total = simclr_bsim_loss(tape, mixed_batch, cfg.temperature);
        if (cfg.w1 != 1.0) total.node = scale(total.node, cfg.w1);
    } else {
        // pure single-instance case; under mix=none the anchor stream is unmixed
        total = simclr_bsim_loss(tape, mixed_batch, cfg.temperature);
        if (cfg.w2 != 1.0) total.node = scale(total.node, cfg.w2);
    }
    tape.backward(total.node);
    apply_sgd(tape, g);

    out.scalar = total.node.value().item();
    double lm = 0.0;
    for (double l : lam_eff) lm += l;
    out.lambda_mean = lm / static_cast<double>(n);
    return out;
}

Trainer::StepLoss Trainer::moco_step(const std::vector<int64_t>& idx) {
    const int64_t n = cfg.batch;
    const AugPolicy pol{};
    Rng rv = derive_rng(cfg.seed, "views", static_cast<uint64_t>(step));
    Rng rm = derive_rng(cfg.seed, "mix", static_cast<uint64_t>(step));
    auto pairs = pair_indices(n);
    auto view = [&](int64_t sample) { return augment_view(data_->images[sample], pol, rv); };

    std::vector<ImageTensor> a(n), a2(n), b(n);
    for (int64_t i = 0; i < n; ++i) a[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) a2[i] = view(idx[pairs[i].second]);
    for (int64_t i = 0; i < n; ++i) b[i] = view(idx[i]);

    const std::vector<double> requested = draw_lambdas(n);
    std::vector<double> lam_eff;
    std::vector<ImageTensor> m1 = mix_stream(a, a2, requested, lam_eff, rm);

    // key network forward, outside the tape: no gradient reaches xi
    const Tensor keys = l2_normalize_rows(project_features(*target, pack_images(b)));

    Tape tape;
    ModelGraph g = ModelGraph::make(tape, online, true);
    Var zq = l2normalize_rows(project(tape, g, encode(tape, g, pack_images(m1))));
    std::optional<Var> zq_plain;
    if (cfg.w2 > 0.0)
        zq_plain = l2normalize_rows(project(tape, g, encode(tape, g, pack_images(a))));

    std::vector<Var> anchors;
    anchors.reserve(n);
    double lambda_sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t j = pairs[i].second;
        Var k_own = tape.constant(tensor_row(keys, i));
        Var k_partner = tape.constant(tensor_row(keys, j));
        Var anchor_loss;
        if (cfg.w1 > 0.0) {
            LossNode li = moco_bsim_loss(tape, row(zq, i), k_own, k_partner, *queue,
                                         lam_eff[i], cfg.temperature);
            anchor_loss = cfg.w1 == 1.0 ? li.node : scale(li.node, cfg.w1);
        }
        if (cfg.w2 > 0.0) {
            Var q_sim = zq_plain ? row(*zq_plain, i) : row(zq, i);
            LossNode si = moco_bsim_loss(tape, q_sim, k_own, k_partner, *queue, 1.0,
                                         cfg.temperature);
            Var sim_node = cfg.w2 == 1.0 ? si.node : scale(si.node, cfg.w2);
            anchor_loss = anchor_loss.valid() ? add(anchor_loss, sim_node) : sim_node;
        }
        anchors.push_back(anchor_loss);
        lambda_sum += lam_eff[i];
    }
    Var total = scale(sum(stack_scalars(anchors)), 1.0 / static_cast<double>(n));
    tape.backward(total);
    apply_sgd(tape, g);

    ema_update(*target, online, cfg.tau_base);  // constant key momentum
    queue->push(keys);

    StepLoss out;
    out.scalar = total.value().item();
    out.lambda_mean = lambda_sum / static_cast<double>(n);
    return out;
}

Trainer::StepLoss Trainer::byol_step(const std::vector<int64_t>& idx) {
    const int64_t n = cfg.batch;
    const AugPolicy pol{};
    Rng rv = derive_rng(cfg.seed, "views", static_cast<uint64_t>(step));
    Rng rm = derive_rng(cfg.seed, "mix", static_cast<uint64_t>(step));
    auto pairs = pair_indices(n);
    auto view = [&](int64_t sample) { return augment_view(data_->images[sample], pol, rv); };

    std::vector<ImageTensor> a(n), a2(n), b(n), c(n), c2(n), d(n);
    for (int64_t i = 0; i < n; ++i) a[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) a2[i] = view(idx[pairs[i].second]);
    for (int64_t i = 0; i < n; ++i) b[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) c[i] = view(idx[i]);
    for (int64_t i = 0; i < n; ++i) c2[i] = view(idx[pairs[i].second]);
    for (int64_t i = 0; i < n; ++i) d[i] = view(idx[i]);

    const std::vector<double> requested = draw_lambdas(n);
    std::vector<double> lam_eff, lam_eff2;
    std::vector<ImageTensor> m1 = mix_stream(a, a2, requested, lam_eff, rm);
    std::vector<ImageTensor> m2 = mix_stream(c, c2, requested, lam_eff2, rm);

    // target projections, no gradient; the losses normalize internally
    const Tensor tb = project_features(*target, pack_images(b));
    const Tensor td = project_features(*target, pack_images(d));

    Tape tape;
    ModelGraph g = ModelGraph::make(tape, online, true);
    auto online_pred = [&](const std::vector<ImageTensor>& ims) {
        return predict(tape, g, project(tape, g, encode(tape, g, pack_images(ims))));
    };
    Var q1 = online_pred(m1);
    Var q2 = online_pred(m2);
    std::optional<Var> qa, qc;
    if (cfg.w2 > 0.0) {
        qa = online_pred(a);
        qc = online_pred(c);
    }

    auto variant_loss = [&](Var q, Var z1, Var z2, double lam) {
        return cfg.byol_variant == ByolVariant::v0 ? byol_bsim_v0(tape, q, z1, z2, lam)
                                                   : byol_bsim_v1(tape, q, z1, z2, lam);
    };

    std::vector<Var> anchors;
    anchors.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t j = pairs[i].second;
        Var tb_i = tape.constant(tensor_row(tb, i));
        Var tb_j = tape.constant(tensor_row(tb, j));
        Var td_i = tape.constant(tensor_row(td, i));
        Var td_j = tape.constant(tensor_row(td, j));
        Var anchor_loss;
        if (cfg.w1 > 0.0) {
            LossNode fwd = variant_loss(row(q1, i), tb_i, tb_j, lam_eff[i]);
            LossNode bwd = variant_loss(row(q2, i), td_i, td_j, lam_eff[i]);
            LossNode sym = symmetrize_byol(tape, fwd, bwd);
            anchor_loss = cfg.w1 == 1.0 ? sym.node : scale(sym.node, cfg.w1);
        }
        if (cfg.w2 > 0.0) {
            Var q_fwd = qa ? row(*qa, i) : row(q1, i);
            Var q_bwd = qc ? row(*qc, i) : row(q2, i);
            LossNode fwd = variant_loss(q_fwd, tb_i, tb_j, 1.0);
            LossNode bwd = variant_loss(q_bwd, td_i, td_j, 1.0);
            LossNode sym = symmetrize_byol(tape, fwd, bwd);
            Var sim_node = cfg.w2 == 1.0 ? sym.node : scale(sym.node, cfg.w2);
            anchor_loss = anchor_loss.valid() ? add(anchor_loss, sim_node) : sim_node;
        }
        anchors.push_back(anchor_loss);
    }
    Var total = scale(sum(stack_scalars(anchors)), 1.0 / static_cast<double>(n));
    tape.backward(total);
    apply_sgd(tape, g);

    const double tau = tau_schedule(step, total_steps, cfg.tau_base);
    ema_update(*target, online, tau);

    StepLoss out;
    out.scalar = total.value().item();
    double lm = 0.0;
    for (double l : lam_eff) lm += l;
    out.lambda_mean = lm / static_cast<double>(n);
    return out;
}

MetricsRecord Trainer::run_step(const LabeledImageSet& data) {
    data_ = &data;
    const auto t0 = std::chrono::steady_clock::now();
    const int64_t epoch = step / steps_per_epoch;
    const int64_t offset = (step % steps_per_epoch) * cfg.batch;
    const std::vector<int64_t> perm = epoch_permutation(cfg.seed, epoch, data.size());
    std::vector<int64_t> idx(perm.begin() + offset, perm.begin() + offset + cfg.batch);

    StepLoss loss;
    switch (cfg.method) {
        case Method::simclr: loss = simclr_step(idx); break;
        case Method::moco: loss = moco_step(idx); break;
        case Method::byol: loss = byol_step(idx); break;
    }

    MetricsRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.loss = loss.scalar;
    rec.lambda_mean = loss.lambda_mean;
    const int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    rec.lr = cosine_lr(step, total_steps, cfg.lr, warmup_steps);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    ++step;
    data_ = nullptr;
    return rec;
}

TrainResult run_loop(Trainer& trainer, const LabeledImageSet& data, const TrainOptions& options) {
    TrainResult result;
    const int64_t stop = options.stop_after_steps
                             ? std::min(*options.stop_after_steps, trainer.total_steps)
                             : trainer.total_steps;
    while (trainer.step < stop) {
        MetricsRecord rec = trainer.run_step(data);
        if (options.on_metrics) options.on_metrics(rec);
        if (options.on_step_end) options.on_step_end(trainer.step, trainer.online);
        result.metrics.push_back(rec);
    }
    result.checkpoint = trainer.to_checkpoint();
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& config_in, const LabeledImageSet& data,
                  const TrainOptions& options) {
    TrainConfig config = config_in;
    config.validate_and_normalize();
    Trainer trainer = Trainer::fresh(config, data);
    return run_loop(trainer, data, options);
}

TrainResult resume(const Checkpoint& checkpoint, const LabeledImageSet& data,
                   const TrainOptions& options) {
    Trainer trainer = Trainer::restored(checkpoint, data);
    return run_loop(trainer, data, options);
}

ModelState model_from_checkpoint(const Checkpoint& cp) {
    TrainConfig cfg = cp.config;
    cfg.validate_and_normalize();
    EncoderShape shape{cp.input_h, cp.input_w, cp.input_c, {16, 32, 64}};
    Rng init(0);
    ModelState model = make_model(shape, kDhid, kDz, cfg.method == Method::byol, init);
    std::map<std::string, const Tensor*> table;
    for (const auto& [name, tensor] : cp.tensors) table[name] = &tensor;
    for (auto& [name, p] : model.parameters()) {
        auto it = table.find("online." + name);
        if (it == table.end()) throw IoError("checkpoint is missing tensor: online." + name);
        check(it->second->same_shape(*p), "checkpoint tensor shape mismatch");
        *p = *it->second;
    }
    return model;
}

}  // namespace bsim

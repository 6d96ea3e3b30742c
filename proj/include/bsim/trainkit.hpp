#pragma once

#include <functional>
#include <optional>
#include <string>

#include "bsim/augment.hpp"
#include "bsim/datagen.hpp"
#include "bsim/losses.hpp"
#include "bsim/models.hpp"

namespace bsim {

enum class Method { simclr, moco, byol };

std::string to_string(Method m);
std::string to_string(MixStrategy m);
std::string to_string(ByolVariant v);

struct TrainConfig {
    Method method = Method::simclr;
    MixStrategy mix = MixStrategy::cutmix;
    double alpha = 1.0;
    double temperature = 0.2;
    double w1 = 1.0, w2 = 0.0;  // pure BSIM; (1,1) is the WBSIM preset
    int64_t batch = 32;         // even, >= 4
    int64_t epochs = 10;
    double lr = 0.5;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int64_t warmup_epochs = 1;
    int64_t queue_capacity = 256;  // moco
    double tau_base = 0.996;       // byol target schedule; moco key momentum
    uint64_t seed = 7;
    ByolVariant byol_variant = ByolVariant::v1;
    std::optional<double> force_lambda;  // pins every mixing ratio when set

    /// Checks ranges and applies the structural rules (mix == none forces
    /// the loss weights to (0, 1), the pure single-instance case).
    void validate_and_normalize();
};

std::string train_config_to_json(const TrainConfig& c);
/// Strict: unknown keys are rejected, missing keys keep defaults.
TrainConfig train_config_from_json(const std::string& text);

/// j = N-1-i (0-based). A fixed-point-free involution; N must be even,
/// otherwise some index would pair with itself and silently degenerate to
/// the single-instance case.
std::vector<std::pair<int64_t, int64_t>> pair_indices(int64_t n);

/// v <- momentum*v + grad + weight_decay*param ; param <- param - lr*v.
void sgd_update(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                double momentum, double weight_decay);

/// Linear ramp 0 -> lr0 over warmup_steps, then half-cosine decay to 0.
double cosine_lr(int64_t step, int64_t total_steps, double lr0, int64_t warmup_steps);

struct OptimizerState {
    std::vector<Tensor> velocity;  // aligned with ModelState::parameters()
    int64_t step = 0;
};

struct MetricsRecord {
    int64_t step = 0;
    int64_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double lambda_mean = 1.0;
    double wall_ms = 0.0;
};

/// One JSON object per line. wall_ms is only emitted when requested: the
/// metrics file is a deterministic artifact, the live stream includes timing.
std::string metrics_jsonl_line(const MetricsRecord& r, bool include_wall);

struct Checkpoint {
    static constexpr char kMagic[6] = "BSIM1";
    TrainConfig config;
    int64_t step = 0;
    uint64_t rng_state = 0;  // base seed of the derived streams
    int64_t input_h = 0, input_w = 0, input_c = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::string& path);

struct TrainOptions {
    std::optional<int64_t> stop_after_steps;  // global step bound (for tests)
    std::function<void(const MetricsRecord&)> on_metrics;
    std::function<void(int64_t step, const ModelState& online)> on_step_end;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<MetricsRecord> metrics;
};

TrainResult train(const TrainConfig& config, const LabeledImageSet& data,
                  const TrainOptions& options = {});
TrainResult resume(const Checkpoint& checkpoint, const LabeledImageSet& data,
                   const TrainOptions& options = {});

/// Model reconstruction from a checkpoint (for evaluation and export).
ModelState model_from_checkpoint(const Checkpoint& cp);

}  // namespace bsim

#pragma once

#include <optional>

#include "bsim/graph.hpp"
#include "bsim/models.hpp"

namespace bsim {

enum class ByolVariant { v0, v1 };

struct LossConfig {
    double temperature = 0.2;
    double w1 = 1.0, w2 = 0.0;
    ByolVariant byol_variant = ByolVariant::v1;
};

struct LossValue {
    double scalar = 0.0;
    std::vector<double> per_anchor;
    int64_t spurious_positive_pairs = 0;
    int64_t negative_pairs = 0;
};

/// A loss as both a differentiable node and its plain-number record.
struct LossNode {
    Var node;
    LossValue value;
};

/// Aligned projections of the four view streams of one mixed batch.
/// Row i of z_mixed_prime is the projection of the mixture built from
/// parents (i, pairing[i]) within the first augmentation stream; row i of
/// z_plain_dprime is the plain second-stream view of sample i. The two
/// remaining matrices swap the roles of the streams. lambdas[i] is the
/// effective mixing ratio of anchor i, shared by both directions.
struct BatchEmbeddings {
    Var z_mixed_prime;
    Var z_plain_dprime;
    Var z_mixed_dprime;
    Var z_plain_prime;
    std::vector<double> lambdas;
    std::vector<int64_t> pairing;
};

/// Standard NT-Xent over 2N views (self term excluded from the softmax).
LossNode nt_xent_baseline(Tape& tape, Var za, Var zb, double tau);

/// The mixed-anchor NT-Xent: anchor i pays a lambda-weighted cross entropy
/// against the plain views of both of its parents; the denominator sums the
/// anchor's similarities to all N plain views and to the other mixed views
/// except indices {i, pairing[i]}. Both stream directions are evaluated and
/// averaged with weight 1/(2N).
LossNode simclr_bsim_loss(Tape& tape, const BatchEmbeddings& batch, double tau);

/// Single-query loss against two weighted positive keys plus a queue of
/// negatives. Pass an empty optional for k_1mlam only when lambda is 0 or 1;
/// the degenerate single-positive form is then the classic InfoNCE. The
/// positives are part of the partition function.
LossNode moco_bsim_loss(Tape& tape, Var q, Var k_lam, std::optional<Var> k_1mlam,
                        const FeatureQueue& queue, double lambda, double tau);

/// 2 - 2*[lambda*cos(q, z1) + (1-lambda)*cos(q, z2)].
LossNode byol_bsim_v0(Tape& tape, Var q_pred, Var z1_t, Var z2_t, double lambda);

/// 2 - 2*cos(q, normalize(lambda*norm(z1) + (1-lambda)*norm(z2))).
/// Throws AntipodalTargets when the mixed target has no direction.
LossNode byol_bsim_v1(Tape& tape, Var q_pred, Var z1_t, Var z2_t, double lambda);

/// Sum of the two directional losses (mixed-prime online vs plain-dprime
/// targets, and the mirror image).
LossNode symmetrize_byol(Tape& tape, const LossNode& forward, const LossNode& backward);

/// w1 * L_bsim + w2 * L_sim.
LossNode wbsim_combine(Tape& tape, const LossNode& l_bsim, const LossNode& l_sim,
                       double w1, double w2);

}  // namespace bsim

#include "bsim/losses.hpp"

#include <cmath>

namespace bsim {

namespace {

void require_unit(const Tensor& v, const char* what) {
    const double n = norm2(v);
    if (std::abs(n - 1.0) > 1e-6)
        throw ValidationError(std::string(what) + ": input is not unit-normalized");
}

void validate_batch(const BatchEmbeddings& b) {
    const Tensor& m = b.z_mixed_prime.value();
    const int64_t n = m.rows();
    check(b.z_plain_dprime.value().rows() == n && b.z_mixed_dprime.value().rows() == n &&
              b.z_plain_prime.value().rows() == n,
          "simclr_bsim_loss: stream row counts disagree");
    const int64_t dz = m.cols();
    check(b.z_plain_dprime.value().cols() == dz && b.z_mixed_dprime.value().cols() == dz &&
              b.z_plain_prime.value().cols() == dz,
          "simclr_bsim_loss: stream widths disagree");
    if (n < 2 || n % 2 != 0) throw ValidationError("simclr_bsim_loss: batch size must be even and >= 2");
    if (static_cast<int64_t>(b.lambdas.size()) != n ||
        static_cast<int64_t>(b.pairing.size()) != n)
        throw ValidationError("simclr_bsim_loss: lambdas/pairing must have one entry per anchor");
    for (double lam : b.lambdas)
        if (!(lam >= 0.0 && lam <= 1.0))
            throw ValidationError("simclr_bsim_loss: lambda outside [0,1]");
    for (int64_t i = 0; i < n; ++i) {
        const int64_t j = b.pairing[i];
        if (j < 0 || j >= n || j == i || b.pairing[j] != i)
            throw ValidationError("simclr_bsim_loss: pairing is not a fixed-point-free involution");
    }
}

/// One direction of the mixed-anchor loss. Returns per-anchor nodes and
/// counts cross-stream negatives (anchor vs non-parent plain views).
std::vector<Var> bsim_direction(Tape& tape, Var z_mixed, Var z_plain,
                                const std::vector<double>& lambdas,
                                const std::vector<int64_t>& pairing, double tau,
                                int64_t& spurious, int64_t& negatives) {
    const int64_t n = z_mixed.value().rows();
    Var zm = l2normalize_rows(z_mixed);
    Var zp = l2normalize_rows(z_plain);
    Var s_cross = matmul_nt(zm, zp);  // sim(mixed_i, plain_k)
    Var s_mixed = matmul_nt(zm, zm);  // sim(mixed_i, mixed_k)
    std::vector<Var> per_anchor;
    per_anchor.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t j = pairing[i];
        const double lam = lambdas[i];
        std::vector<int64_t> idx;
        idx.reserve(2 * n - 2);
        for (int64_t k = 0; k < n; ++k) {
            idx.push_back(i * n + k);
            if (k != i && k != j) ++negatives;
        }
        Var terms = gather(s_cross, std::move(idx));
        std::vector<int64_t> idx_self;
        idx_self.reserve(n - 2);
        for (int64_t k = 0; k < n; ++k)
            if (k != i && k != j) idx_self.push_back(i * n + k);
        if (!idx_self.empty()) terms = concat(terms, gather(s_mixed, std::move(idx_self)));
        Var lse = logsumexp(scale(terms, 1.0 / tau));
        Var pos = add(scale(at(s_cross, i, i), lam / tau),
                      scale(at(s_cross, i, j), (1.0 - lam) / tau));
        spurious += 2;
        per_anchor.push_back(sub(lse, pos));
    }
    return per_anchor;
}

}  // namespace

LossNode nt_xent_baseline(Tape& tape, Var za, Var zb, double tau) {
    if (!(tau > 0.0)) throw ValidationError("nt_xent_baseline: temperature must be positive");
    const int64_t n = za.value().rows();
    check(za.value().same_shape(zb.value()), "nt_xent_baseline: shape mismatch");
    if (n < 2) throw ValidationError("nt_xent_baseline: need at least 2 samples");

    Var a = l2normalize_rows(za);
    Var b = l2normalize_rows(zb);
    Var saa = matmul_nt(a, a);
    Var sbb = matmul_nt(b, b);
    Var sab = matmul_nt(a, b);
    Var sba = matmul_nt(b, a);

    std::vector<Var> anchors;
    anchors.reserve(2 * n);
    auto one_side = [&](Var s_same, Var s_other) {
        for (int64_t i = 0; i < n; ++i) {
            std::vector<int64_t> idx;
            idx.reserve(n);
            for (int64_t k = 0; k < n; ++k) idx.push_back(i * n + k);  // other stream, all
            Var terms = gather(s_other, std::move(idx));
            std::vector<int64_t> idx_same;
            for (int64_t k = 0; k < n; ++k)
                if (k != i) idx_same.push_back(i * n + k);
            terms = concat(terms, gather(s_same, std::move(idx_same)));
            Var lse = logsumexp(scale(terms, 1.0 / tau));
            anchors.push_back(sub(lse, scale(at(s_other, i, i), 1.0 / tau)));
        }
    };
    one_side(saa, sab);
    one_side(sbb, sba);

    LossNode out;
    out.node = scale(sum(stack_scalars(anchors)), 1.0 / static_cast<double>(2 * n));
    out.value.scalar = out.node.value().item();
    for (const Var& v : anchors) out.value.per_anchor.push_back(v.value().item());
    out.value.spurious_positive_pairs = 2 * n;
    out.value.negative_pairs = 2 * n * (n - 1);
    return out;
}

LossNode simclr_bsim_loss(Tape& tape, const BatchEmbeddings& batch, double tau) {
    if (!(tau > 0.0)) throw ValidationError("simclr_bsim_loss: temperature must be positive");
    validate_batch(batch);
    const int64_t n = batch.z_mixed_prime.value().rows();

    int64_t spurious = 0, negatives = 0;
    std::vector<Var> prime = bsim_direction(tape, batch.z_mixed_prime, batch.z_plain_dprime,
                                            batch.lambdas, batch.pairing, tau, spurious, negatives);
    std::vector<Var> dprime = bsim_direction(tape, batch.z_mixed_dprime, batch.z_plain_prime,
                                             batch.lambdas, batch.pairing, tau, spurious, negatives);

    std::vector<Var> per_anchor;
    per_anchor.reserve(n);
    for (int64_t i = 0; i < n; ++i) per_anchor.push_back(add(prime[i], dprime[i]));

    LossNode out;
    out.node = scale(sum(stack_scalars(per_anchor)), 1.0 / static_cast<double>(2 * n));
    out.value.scalar = out.node.value().item();
    for (const Var& v : per_anchor) out.value.per_anchor.push_back(v.value().item());
    out.value.spurious_positive_pairs = spurious;
    out.value.negative_pairs = negatives;
    return out;
}

LossNode moco_bsim_loss(Tape& tape, Var q, Var k_lam, std::optional<Var> k_1mlam,
                        const FeatureQueue& queue, double lambda, double tau) {
    if (!(tau > 0.0)) throw ValidationError("moco_bsim_loss: temperature must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ValidationError("moco_bsim_loss: lambda outside [0,1]");
    require_unit(q.value(), "moco_bsim_loss: q");
    require_unit(k_lam.value(), "moco_bsim_loss: k_lam");
    if (k_1mlam) require_unit(k_1mlam->value(), "moco_bsim_loss: k_1mlam");
    if (!k_1mlam && lambda < 1.0)
        throw ValidationError("moco_bsim_loss: k_1mlam missing but its weight is nonzero");

    const Tensor queue_keys = queue.snapshot();
    if (!k_1mlam && queue_keys.empty())
        throw ValidationError("moco_bsim_loss: empty queue with a single key leaves no contrast");

    Var p1 = dot(q, k_lam);
    std::optional<Var> p2;
    std::vector<Var> scalars{p1};
    if (k_1mlam) {
        p2 = dot(q, *k_1mlam);
        scalars.push_back(*p2);
    }
    Var terms = stack_scalars(scalars);
    if (!queue_keys.empty()) {
        for (int64_t r = 0; r < queue_keys.rows(); ++r) {
            Tensor rowv({queue_keys.cols()});
            for (int64_t j = 0; j < queue_keys.cols(); ++j) rowv[j] = queue_keys.at(r, j);
            require_unit(rowv, "moco_bsim_loss: queue entry");
        }
        terms = concat(terms, matmul(tape.constant(queue_keys), q));
    }
    Var lse = logsumexp(scale(terms, 1.0 / tau));

    Var loss = scale(sub(lse, scale(p1, 1.0 / tau)), lambda);
    if (p2) loss = add(loss, scale(sub(lse, scale(*p2, 1.0 / tau)), 1.0 - lambda));

    LossNode out;
    out.node = loss;
    out.value.scalar = loss.value().item();
    out.value.per_anchor = {out.value.scalar};
    out.value.spurious_positive_pairs = k_1mlam ? 2 : 1;
    out.value.negative_pairs = queue.size();
    return out;
}

LossNode byol_bsim_v0(Tape& tape, Var q_pred, Var z1_t, Var z2_t, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ValidationError("byol_bsim_v0: lambda outside [0,1]");
    Var c1 = cosine(q_pred, z1_t);
    Var c2 = cosine(q_pred, z2_t);
    Var mixed = add(scale(c1, lambda), scale(c2, 1.0 - lambda));
    Var loss = add_const(scale(mixed, -2.0), 2.0);
    LossNode out;
    out.node = loss;
    out.value.scalar = loss.value().item();
    out.value.per_anchor = {out.value.scalar};
    out.value.spurious_positive_pairs = 2;
    out.value.negative_pairs = 0;
    return out;
}

LossNode byol_bsim_v1(Tape& tape, Var q_pred, Var z1_t, Var z2_t, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ValidationError("byol_bsim_v1: lambda outside [0,1]");
    Var zb1 = l2normalize_rows(z1_t);
    Var zb2 = l2normalize_rows(z2_t);
    Var target = add(scale(zb1, lambda), scale(zb2, 1.0 - lambda));
    if (!(norm2(target.value()) > kEpsNorm))
        throw AntipodalTargets("byol_bsim_v1: mixed target has no direction");
    Var loss = add_const(scale(cosine(q_pred, target), -2.0), 2.0);
    LossNode out;
    out.node = loss;
    out.value.scalar = loss.value().item();
    out.value.per_anchor = {out.value.scalar};
    out.value.spurious_positive_pairs = 2;
    out.value.negative_pairs = 0;
    return out;
}

LossNode symmetrize_byol(Tape& tape, const LossNode& forward, const LossNode& backward) {
    LossNode out;
    out.node = add(forward.node, backward.node);
    out.value.scalar = out.node.value().item();
    check(forward.value.per_anchor.size() == backward.value.per_anchor.size(),
          "symmetrize_byol: directions cover different anchors");
    out.value.per_anchor.resize(forward.value.per_anchor.size());
    for (size_t i = 0; i < out.value.per_anchor.size(); ++i)
        out.value.per_anchor[i] = forward.value.per_anchor[i] + backward.value.per_anchor[i];
    out.value.spurious_positive_pairs =
        forward.value.spurious_positive_pairs + backward.value.spurious_positive_pairs;
    out.value.negative_pairs = forward.value.negative_pairs + backward.value.negative_pairs;
    return out;
}

LossNode wbsim_combine(Tape& tape, const LossNode& l_bsim, const LossNode& l_sim,
                       double w1, double w2) {
    if (!(w1 >= 0.0 && w1 <= 1.0 && w2 >= 0.0 && w2 <= 1.0))
        throw ValidationError("wbsim_combine: weights outside [0,1]");
    LossNode out;
    out.node = add(scale(l_bsim.node, w1), scale(l_sim.node, w2));
    out.value.scalar = out.node.value().item();
    if (l_bsim.value.per_anchor.size() == l_sim.value.per_anchor.size()) {
        out.value.per_anchor.resize(l_bsim.value.per_anchor.size());
        for (size_t i = 0; i < out.value.per_anchor.size(); ++i)
            out.value.per_anchor[i] =
                w1 * l_bsim.value.per_anchor[i] + w2 * l_sim.value.per_anchor[i];
    }
    if (w1 > 0.0) {
        out.value.spurious_positive_pairs += l_bsim.value.spurious_positive_pairs;
        out.value.negative_pairs += l_bsim.value.negative_pairs;
    }
    if (w2 > 0.0) {
        out.value.spurious_positive_pairs += l_sim.value.spurious_positive_pairs;
        out.value.negative_pairs += l_sim.value.negative_pairs;
    }
    return out;
}

}  // namespace bsim

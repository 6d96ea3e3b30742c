#pragma once

// Brute-force reference implementations for oracle tests. Everything here
// is deliberately written as plain loops over std::exp/std::log so it shares
// no code path with the library implementations it checks.

#include <cmath>
#include <vector>

#include "bsim/tensor.hpp"

namespace oracles {

inline double sim(const bsim::Tensor& a, int64_t i, const bsim::Tensor& b, int64_t j) {
    const int64_t d = a.cols();
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        dot += a.at(i, k) * b.at(j, k);
        na += a.at(i, k) * a.at(i, k);
        nb += b.at(j, k) * b.at(j, k);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Standard NT-Xent over 2N views, self term excluded, direct summation.
inline double nt_xent(const bsim::Tensor& za, const bsim::Tensor& zb, double tau) {
    const int64_t n = za.rows();
    double total = 0.0;
    for (int side = 0; side < 2; ++side) {
        const bsim::Tensor& anchor = side == 0 ? za : zb;
        const bsim::Tensor& other = side == 0 ? zb : za;
        for (int64_t i = 0; i < n; ++i) {
            double den = 0.0;
            for (int64_t k = 0; k < n; ++k) den += std::exp(sim(anchor, i, other, k) / tau);
            for (int64_t k = 0; k < n; ++k)
                if (k != i) den += std::exp(sim(anchor, i, anchor, k) / tau);
            total += -std::log(std::exp(sim(anchor, i, other, i) / tau) / den);
        }
    }
    return total / static_cast<double>(2 * n);
}

/// Mixed-anchor NT-Xent, direct summation over both stream directions.
inline double simclr_bsim(const bsim::Tensor& z_mixed_prime, const bsim::Tensor& z_plain_dprime,
                          const bsim::Tensor& z_mixed_dprime, const bsim::Tensor& z_plain_prime,
                          const std::vector<double>& lambdas,
                          const std::vector<int64_t>& pairing, double tau) {
    const int64_t n = z_mixed_prime.rows();
    double total = 0.0;
    for (int dir = 0; dir < 2; ++dir) {
        const bsim::Tensor& zm = dir == 0 ? z_mixed_prime : z_mixed_dprime;
        const bsim::Tensor& zp = dir == 0 ? z_plain_dprime : z_plain_prime;
        for (int64_t i = 0; i < n; ++i) {
            const int64_t j = pairing[i];
            double den = 0.0;
            for (int64_t k = 0; k < n; ++k) {
                den += std::exp(sim(zm, i, zp, k) / tau);
                if (k != i && k != j) den += std::exp(sim(zm, i, zm, k) / tau);
            }
            const double li =
                -lambdas[i] * std::log(std::exp(sim(zm, i, zp, i) / tau) / den) -
                (1.0 - lambdas[i]) * std::log(std::exp(sim(zm, i, zp, j) / tau) / den);
            total += li;
        }
    }
    return total / static_cast<double>(2 * n);
}

/// Weighted two-positive InfoNCE with the positives inside the partition
/// function. queue rows are the negatives. Plain softmax cross entropy.
inline double moco_bsim(const bsim::Tensor& q, const bsim::Tensor& k1, const bsim::Tensor* k2,
                        const bsim::Tensor& queue, double lambda, double tau) {
    double z = 0.0;
    double p1 = 0.0, p2 = 0.0;
    for (int64_t i = 0; i < q.size(); ++i) p1 += q[i] * k1[i];
    z += std::exp(p1 / tau);
    if (k2) {
        for (int64_t i = 0; i < q.size(); ++i) p2 += q[i] * (*k2)[i];
        z += std::exp(p2 / tau);
    }
    if (!queue.empty()) {
        for (int64_t r = 0; r < queue.rows(); ++r) {
            double s = 0.0;
            for (int64_t i = 0; i < q.size(); ++i) s += q[i] * queue.at(r, i);
            z += std::exp(s / tau);
        }
    }
    double loss = -lambda * std::log(std::exp(p1 / tau) / z);
    if (k2) loss += -(1.0 - lambda) * std::log(std::exp(p2 / tau) / z);
    return loss;
}

/// Symmetrized plain BYOL regression loss, 2 - 2*cos per direction.
inline double byol_baseline(const bsim::Tensor& q_fwd, const bsim::Tensor& t_fwd,
                            const bsim::Tensor& q_bwd, const bsim::Tensor& t_bwd) {
    auto cos_pair = [](const bsim::Tensor& a, const bsim::Tensor& b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int64_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    return (2.0 - 2.0 * cos_pair(q_fwd, t_fwd)) + (2.0 - 2.0 * cos_pair(q_bwd, t_bwd));
}

/// Closed-form eigenvalues of a symmetric 3x3 matrix (trigonometric method),
/// descending order.
inline std::array<double, 3> sym3_eigenvalues(const bsim::Tensor& m) {
    const double a = m.at(0, 0), b = m.at(1, 1), c = m.at(2, 2);
    const double d = m.at(0, 1), e = m.at(1, 2), f = m.at(0, 2);
    const double p1 = d * d + e * e + f * f;
    std::array<double, 3> eig{};
    if (p1 == 0.0) {
        eig = {a, b, c};
    } else {
        const double q = (a + b + c) / 3.0;
        const double p2 =
            (a - q) * (a - q) + (b - q) * (b - q) + (c - q) * (c - q) + 2.0 * p1;
        const double p = std::sqrt(p2 / 6.0);
        // r = det((M - q I) / p) / 2
        const double a1 = (a - q) / p, b1 = (b - q) / p, c1 = (c - q) / p;
        const double d1 = d / p, e1 = e / p, f1 = f / p;
        double r = a1 * (b1 * c1 - e1 * e1) - d1 * (d1 * c1 - e1 * f1) + f1 * (d1 * e1 - b1 * f1);
        r /= 2.0;
        r = std::clamp(r, -1.0, 1.0);
        const double phi = std::acos(r) / 3.0;
        eig[0] = q + 2.0 * p * std::cos(phi);
        eig[2] = q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
        eig[1] = 3.0 * q - eig[0] - eig[2];
    }
    if (eig[0] < eig[1]) std::swap(eig[0], eig[1]);
    if (eig[1] < eig[2]) std::swap(eig[1], eig[2]);
    if (eig[0] < eig[1]) std::swap(eig[0], eig[1]);
    return eig;
}

}  // namespace oracles

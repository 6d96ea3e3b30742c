#pragma once

#include <string>

#include "bsim/losses.hpp"
#include "bsim/rng.hpp"
#include "bsim/tensor.hpp"

namespace bsim {

/// Unit-vector pair plus mixing ratio for the sphere-constrained problem
///   min_z  lambda*|z - z1|^2 + (1-lambda)*|z - z2|^2   s.t. |z| = 1.
struct SphereProblem {
    Tensor z1, z2;  // unit vectors, checked to 1e-10
    double lambda = 0.5;

    SphereProblem(Tensor z1_, Tensor z2_, double lambda_);
    int64_t dim() const { return z1.size(); }
};

SphereProblem random_sphere_problem(int64_t dim, Rng& rng);

/// z* = (lambda*z1 + (1-lambda)*z2) / |lambda*z1 + (1-lambda)*z2|.
/// Throws AntipodalTargets when the mixture norm is at or below eps.
Tensor analytic_minimizer(const SphereProblem& p, double eps = kEpsNorm);

/// s = 1 / |lambda*z1 + (1-lambda)*z2|; s >= 1 for unit inputs.
double gradient_scale(const SphereProblem& p, double eps = kEpsNorm);

/// On-sphere objective in the reduced (inner product) form the two loss
/// designs are compared in: constant terms that the unit constraint fixes
/// are dropped, which leaves v1's gradient an exact s-multiple of v0's.
double sphere_objective(const SphereProblem& p, const Tensor& z, ByolVariant variant);

/// Euclidean gradient of the reduced objective at z, via the autodiff tape.
Tensor sphere_gradient(const SphereProblem& p, const Tensor& z, ByolVariant variant);

struct Trajectory {
    std::vector<Tensor> iterates;       // unit vectors, including the start
    std::vector<double> objectives;     // objective at each iterate
    std::vector<double> grad_norms;     // Euclidean gradient norm at each iterate
    bool converged = false;
    double final_cos_distance = 1.0;    // 1 - cos(final iterate, z*)
};

/// Gradient step followed by renormalization to the sphere. Terminates when
/// the cosine distance to z* drops below tol or max_iters is reached;
/// non-convergence is reported through the flag, not thrown.
Trajectory projected_gd(const SphereProblem& p, ByolVariant variant, double eta = 0.1,
                        int64_t max_iters = 100000, double tol = 1e-6,
                        uint64_t init_seed = 0);

/// CSV rows: iter, objective, grad_norm, cosdist_to_zstar.
void write_trajectory_csv(const std::string& path, const Trajectory& t,
                          const SphereProblem& p);

}  // namespace bsim

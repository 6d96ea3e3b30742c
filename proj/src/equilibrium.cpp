#include "bsim/equilibrium.hpp"

#include <cmath>
#include <cstdio>

#include "bsim/graph.hpp"

namespace bsim {

namespace {

Tensor mixture(const SphereProblem& p) {
    Tensor m = p.z1;
    for (int64_t i = 0; i < m.size(); ++i)
        m[i] = p.lambda * p.z1[i] + (1.0 - p.lambda) * p.z2[i];
    return m;
}

Tensor random_unit(int64_t dim, Rng& rng) {
    Tensor v({dim});
    double s = 0.0;
    do {
        s = 0.0;
        for (int64_t i = 0; i < dim; ++i) {
            v[i] = rng.normal();
            s += v[i] * v[i];
        }
    } while (!(s > 0.0));
    const double n = std::sqrt(s);
    for (int64_t i = 0; i < dim; ++i) v[i] /= n;
    return v;
}

}  // namespace

SphereProblem::SphereProblem(Tensor z1_, Tensor z2_, double lambda_)
    : z1(std::move(z1_)), z2(std::move(z2_)), lambda(lambda_) {
    check(z1.same_shape(z2), "SphereProblem: dimension mismatch");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ValidationError("SphereProblem: lambda outside [0,1]");
    if (std::abs(norm2(z1) - 1.0) > 1e-10 || std::abs(norm2(z2) - 1.0) > 1e-10)
        throw ValidationError("SphereProblem: z1, z2 must be unit vectors");
}

SphereProblem random_sphere_problem(int64_t dim, Rng& rng) {
    return SphereProblem(random_unit(dim, rng), random_unit(dim, rng), rng.uniform());
}

Tensor analytic_minimizer(const SphereProblem& p, double eps) {
    const Tensor m = mixture(p);
    const double n = norm2(m);
    if (!(n > eps)) throw AntipodalTargets("analytic_minimizer: mixture has no direction");
    Tensor out = m;
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= n;
    return out;
}

double gradient_scale(const SphereProblem& p, double eps) {
    const double n = norm2(mixture(p));
    if (!(n > eps)) throw AntipodalTargets("gradient_scale: mixture has no direction");
    return 1.0 / n;
}

double sphere_objective(const SphereProblem& p, const Tensor& z, ByolVariant variant) {
    const Tensor m = mixture(p);
    if (variant == ByolVariant::v0) return -2.0 * dot(z, m);
    const double n = norm2(m);
    if (!(n > kEpsNorm)) throw AntipodalTargets("sphere_objective: mixture has no direction");
    return -2.0 * dot(z, m) / n;
}

Tensor sphere_gradient(const SphereProblem& p, const Tensor& z, ByolVariant variant) {
    Tape tape;
    Var zv = tape.leaf(z, true);
    Var z1 = tape.constant(p.z1);
    Var z2 = tape.constant(p.z2);
    Var m = add(scale(z1, p.lambda), scale(z2, 1.0 - p.lambda));
    Var objective;
    if (variant == ByolVariant::v0) {
        objective = scale(dot(zv, m), -2.0);
    } else {
        const double n = norm2(m.value());
        if (!(n > kEpsNorm)) throw AntipodalTargets("sphere_gradient: mixture has no direction");
        objective = scale(dot(zv, m), -2.0 / n);
    }
    tape.backward(objective);
    return zv.grad();
}

Trajectory projected_gd(const SphereProblem& p, ByolVariant variant, double eta,
                        int64_t max_iters, double tol, uint64_t init_seed) {
    if (!(eta > 0.0 && eta <= 1.0)) throw ValidationError("projected_gd: eta outside (0,1]");
    const Tensor zstar = analytic_minimizer(p);  // throws AntipodalTargets when undefined
    const Tensor m = mixture(p);
    const double s = 1.0 / norm2(m);
    const double grad_coeff = (variant == ByolVariant::v0) ? -2.0 : -2.0 * s;

    Rng rng = derive_rng(init_seed, "projected_gd_init", 0);
    Tensor z = random_unit(p.dim(), rng);

    Trajectory t;
    auto record = [&](const Tensor& zi) {
        t.iterates.push_back(zi);
        t.objectives.push_back(sphere_objective(p, zi, variant));
        double gn = 0.0;
        for (int64_t i = 0; i < m.size(); ++i) gn += (grad_coeff * m[i]) * (grad_coeff * m[i]);
        t.grad_norms.push_back(std::sqrt(gn));
    };
    record(z);

    for (int64_t it = 0; it < max_iters; ++it) {
        const double cosd = 1.0 - dot(z, zstar);
        if (cosd < tol) {
            t.converged = true;
            break;
        }
        // z <- normalize(z - eta * grad); grad = grad_coeff * m (constant in z)
        Tensor next = z;
        for (int64_t i = 0; i < z.size(); ++i) next[i] = z[i] - eta * grad_coeff * m[i];
        const double n = norm2(next);
        if (!(n > kEpsNorm)) {
            // step landed on the origin; reported as non-convergence
            break;
        }
        for (int64_t i = 0; i < next.size(); ++i) next[i] /= n;
        z = next;
        record(z);
    }
    t.final_cos_distance = 1.0 - dot(z, zstar);
    t.converged = t.final_cos_distance < tol;
    return t;
}

void write_trajectory_csv(const std::string& path, const Trajectory& t,
                          const SphereProblem& p) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open trajectory file: " + path);
    const Tensor zstar = analytic_minimizer(p);
    std::fprintf(f, "iter,objective,grad_norm,cosdist_to_zstar\n");
    for (size_t i = 0; i < t.iterates.size(); ++i) {
        const double cosd = 1.0 - dot(t.iterates[i], zstar);
        std::fprintf(f, "%zu,%.17g,%.17g,%.17g\n", i, t.objectives[i], t.grad_norms[i], cosd);
    }
    std::fclose(f);
}

}  // namespace bsim

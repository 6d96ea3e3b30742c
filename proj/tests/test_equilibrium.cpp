#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>

#include "bsim/equilibrium.hpp"

using namespace bsim;

namespace {

Tensor unit3(double a, double b, double c) {
    Tensor v({3}, {a, b, c});
    return l2_normalize(v);
}

}  // namespace

TEST_CASE("analytic_minimizer: endpoints and orthogonal midpoint") {
    Rng rng(1);
    SphereProblem p = random_sphere_problem(8, rng);
    p.lambda = 1.0;
    Tensor z = analytic_minimizer(p);
    for (int64_t i = 0; i < 8; ++i) CHECK(z[i] == doctest::Approx(p.z1[i]).epsilon(1e-12));

    Tensor e1({3}, {1, 0, 0});
    Tensor e2({3}, {0, 1, 0});
    SphereProblem q(e1, e2, 0.5);
    Tensor mid = analytic_minimizer(q);
    CHECK(mid[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
    CHECK(mid[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
    CHECK(mid[2] == 0.0);

    Tensor ne1({3}, {-1, 0, 0});
    SphereProblem anti(e1, ne1, 0.5);
    CHECK_THROWS_AS(analytic_minimizer(anti), AntipodalTargets);
}

TEST_CASE("analytic_minimizer agrees with a 1-degree spherical grid search (D=3)") {
    Rng rng(12);
    SphereProblem p = random_sphere_problem(3, rng);
    const Tensor zstar = analytic_minimizer(p);
    const double f_star = sphere_objective(p, zstar, ByolVariant::v0);

    double best = 1e300;
    Tensor best_z({3});
    const double deg = M_PI / 180.0;
    for (int ti = 0; ti <= 180; ++ti) {
        const double theta = ti * deg;
        for (int pi_ = 0; pi_ < 360; ++pi_) {
            const double phi = pi_ * deg;
            Tensor z({3}, {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                           std::cos(theta)});
            const double f = sphere_objective(p, z, ByolVariant::v0);
            if (f < best) {
                best = f;
                best_z = z;
            }
        }
    }
    // z* beats every grid point, and the grid argmin sits within grid resolution
    CHECK(f_star <= best);
    CHECK(1.0 - dot(best_z, zstar) < 2e-4);  // ~ (1 deg)^2 / 2
}

TEST_CASE("gradient_scale: trivial cases and sqrt(2) for orthogonal midpoint") {
    Tensor e1({3}, {1, 0, 0});
    Tensor e2({3}, {0, 1, 0});
    CHECK(gradient_scale(SphereProblem(e1, e1, 0.37)) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(gradient_scale(SphereProblem(e1, e2, 1.0)) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(gradient_scale(SphereProblem(e1, e2, 0.0)) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(gradient_scale(SphereProblem(e1, e2, 0.5)) ==
          doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));

    Tensor ne1({3}, {-1, 0, 0});
    CHECK_THROWS_AS(gradient_scale(SphereProblem(e1, ne1, 0.5)), AntipodalTargets);
}

TEST_CASE("s >= 1 always for unit inputs") {
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        SphereProblem p = random_sphere_problem(2 + rng.uniform_int(14), rng);
        const double s = gradient_scale(p);
        CHECK(s >= 1.0 - 1e-12);
    }
}

TEST_CASE("autodiff gradients: grad_v1 = s * grad_v0 at random non-stationary points") {
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
        SphereProblem p = random_sphere_problem(16, rng);
        SphereProblem zp = random_sphere_problem(16, rng);
        const Tensor z = zp.z1;  // random unit evaluation point
        const Tensor g0 = sphere_gradient(p, z, ByolVariant::v0);
        const Tensor g1 = sphere_gradient(p, z, ByolVariant::v1);
        const double s = gradient_scale(p);
        const double n0 = norm2(g0), n1 = norm2(g1);
        REQUIRE(n0 > 1e-12);
        CHECK(cosine_sim(g0, g1) == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(n1 / n0 == doctest::Approx(s).epsilon(1e-10));
    }
}

TEST_CASE("projected_gd: both variants converge to z*") {
    Rng rng(5);
    SphereProblem p = random_sphere_problem(16, rng);
    p.lambda = 0.7;
    const Tensor zstar = analytic_minimizer(p);

    Trajectory t0 = projected_gd(p, ByolVariant::v0, 0.1, 5000, 1e-6, 77);
    CHECK(t0.converged);
    CHECK(t0.final_cos_distance < 1e-6);
    CHECK(1.0 - dot(t0.iterates.back(), zstar) < 1e-6);

    Trajectory t1 = projected_gd(p, ByolVariant::v1, 0.1, 5000, 1e-6, 77);
    CHECK(t1.converged);
    CHECK(1.0 - dot(t1.iterates.back(), zstar) < 1e-6);

    // every iterate stays on the sphere, objective recorded per iterate
    for (const Tensor& z : t0.iterates) CHECK(std::abs(norm2(z) - 1.0) < 1e-10);
    CHECK(t0.objectives.size() == t0.iterates.size());
    CHECK(t0.grad_norms.size() == t0.iterates.size());
}

TEST_CASE("projected_gd: antipodal problem raises, eta validated") {
    Tensor e1({3}, {1, 0, 0});
    Tensor ne1({3}, {-1, 0, 0});
    SphereProblem anti(e1, ne1, 0.5);
    CHECK_THROWS_AS(projected_gd(anti, ByolVariant::v0, 0.1, 100, 1e-6, 1), AntipodalTargets);

    Rng rng(6);
    SphereProblem p = random_sphere_problem(4, rng);
    CHECK_THROWS_AS(projected_gd(p, ByolVariant::v0, 0.0, 100, 1e-6, 1), ValidationError);
    CHECK_THROWS_AS(projected_gd(p, ByolVariant::v0, 1.5, 100, 1e-6, 1), ValidationError);
}

TEST_CASE("trajectory csv export") {
    Rng rng(7);
    SphereProblem p = random_sphere_problem(8, rng);
    Trajectory t = projected_gd(p, ByolVariant::v1, 0.1, 2000, 1e-6, 3);
    const std::string path = "traj_test.csv";
    write_trajectory_csv(path, t, p);
    std::FILE* f = std::fopen(path.c_str(), "rb");
    REQUIRE(f != nullptr);
    char line[256];
    REQUIRE(std::fgets(line, sizeof(line), f) != nullptr);
    CHECK(std::string(line) == "iter,objective,grad_norm,cosdist_to_zstar\n");
    int rows = 0;
    while (std::fgets(line, sizeof(line), f)) ++rows;
    std::fclose(f);
    std::remove(path.c_str());
    CHECK(rows == static_cast<int>(t.iterates.size()));
}

TEST_CASE("sphere problem validation") {
    Tensor bad({3}, {1, 1, 0});
    Tensor e1({3}, {1, 0, 0});
    CHECK_THROWS_AS(SphereProblem(bad, e1, 0.5), ValidationError);
    CHECK_THROWS_AS(SphereProblem(e1, e1, 1.5), ValidationError);
    CHECK_NOTHROW(SphereProblem(unit3(1, 1, 1), e1, 0.5));
}

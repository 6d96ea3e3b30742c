#include <doctest.h>

#include <cmath>

#include "bsim/gradcheck.hpp"
#include "bsim/graph.hpp"
#include "bsim/rng.hpp"
#include "bsim/tensor.hpp"

using namespace bsim;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), ShapeError);
    CHECK_THROWS_AS(Tensor({0, 2}), ShapeError);
    CHECK(Tensor::scalar(2.0).item() == 2.0);
}

TEST_CASE("matmul identity, annihilator, hand product") {
    Tensor id({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor prod = matmul(id, a);
    for (int64_t i = 0; i < 4; ++i) CHECK(prod[i] == a[i]);

    Tensor zero({2, 2});
    Tensor z = matmul(id, zero);
    for (int64_t i = 0; i < 4; ++i) CHECK(z[i] == 0.0);

    Tensor b({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c[0] == 19);
    CHECK(c[1] == 22);
    CHECK(c[2] == 43);
    CHECK(c[3] == 50);

    CHECK_THROWS_AS(matmul(a, Tensor({3, 2})), ShapeError);
}

TEST_CASE("l2_normalize 3-4-5, idempotence, zero vector") {
    Tensor v({2}, {3, 4});
    Tensor u = l2_normalize(v);
    CHECK(u[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(u[1] == doctest::Approx(0.8).epsilon(1e-15));

    Tensor again = l2_normalize(u);
    CHECK(std::abs(again[0] - u[0]) < 1e-12);
    CHECK(std::abs(again[1] - u[1]) < 1e-12);
    CHECK(std::abs(norm2(u) - 1.0) < 1e-12);

    CHECK_THROWS_AS(l2_normalize(Tensor({2}, {0, 0})), DegenerateNorm);
}

TEST_CASE("cosine_sim self, orthogonal, antipodal, scale invariance") {
    Rng rng(11);
    Tensor z = random_tensor({5}, rng);
    CHECK(cosine_sim(z, z) == doctest::Approx(1.0).epsilon(1e-14));

    Tensor e1({3}, {1, 0, 0});
    Tensor e2({3}, {0, 1, 0});
    CHECK(cosine_sim(e1, e2) == 0.0);

    Tensor nz = z;
    for (int64_t i = 0; i < nz.size(); ++i) nz[i] = -nz[i];
    CHECK(cosine_sim(z, nz) == doctest::Approx(-1.0).epsilon(1e-14));

    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = random_tensor({7}, rng);
        Tensor b = random_tensor({7}, rng);
        const double alpha = std::exp(3.0 * rng.normal());
        const double beta = std::exp(3.0 * rng.normal());
        Tensor sa = a, sb = b;
        for (int64_t i = 0; i < 7; ++i) {
            sa[i] *= alpha;
            sb[i] *= beta;
        }
        CHECK(std::abs(cosine_sim(sa, sb) - cosine_sim(a, b)) < 1e-12);
    }

    CHECK_THROWS_AS(cosine_sim(Tensor({2}, {0, 0}), e1), DegenerateNorm);
}

TEST_CASE("backward: power rule, sum, unused leaf, non-scalar root") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0), true);
    Var y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));

    Tape tape2;
    Var v = tape2.leaf(Tensor({4}, {1, 2, 3, 4}), true);
    Var unused = tape2.leaf(Tensor({2}, {5, 6}), true);
    Var s = sum(v);
    tape2.backward(s);
    for (int64_t i = 0; i < 4; ++i) CHECK(v.grad()[i] == 1.0);
    for (int64_t i = 0; i < 2; ++i) CHECK(unused.grad()[i] == 0.0);

    Tape tape3;
    Var m = tape3.leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
    CHECK_THROWS_AS(tape3.backward(m), ShapeError);
}

TEST_CASE("cosine gradient at x=c is orthogonal to c (zero) and matches FD") {
    Rng rng(5);
    Tensor c = random_tensor({6}, rng);
    auto objective = [&](Tape& t, const std::vector<Var>& p) {
        return cosine(p[0], t.constant(c));
    };
    GradReport rep = grad_check(objective, {{"x", c}}, 1e-5);
    // the true gradient is zero; FD noise over the 1e-8 floor dominates
    CHECK(rep.max_rel_err < 1e-2);
    {
        Tape t;
        Var x = t.leaf(c, true);
        Var cs = cosine(x, t.constant(c));
        t.backward(cs);
        for (int64_t i = 0; i < 6; ++i) CHECK(std::abs(x.grad()[i]) < 1e-12);
    }
    // away from x=c the gradient is orthogonal to x (norm invariance)
    Tensor x0 = random_tensor({6}, rng);
    Tape t;
    Var x = t.leaf(x0, true);
    t.backward(cosine(x, t.constant(c)));
    CHECK(std::abs(dot(x.grad(), x0)) < 1e-12);
}

TEST_CASE("grad_check: quadratic is exact, relu kink excluded") {
    Rng rng(17);
    Tensor p0 = random_tensor({5}, rng);
    auto quadratic = [](Tape& t, const std::vector<Var>& p) { return sum(mul(p[0], p[0])); };
    GradReport rep = grad_check(quadratic, {{"p", p0}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-8);
    CHECK(rep.kink_coords == 0);

    Tensor kinky({3}, {-1.0, 0.0, 2.0});
    auto relu_sum = [](Tape& t, const std::vector<Var>& p) { return sum(relu(p[0])); };
    GradReport krep = grad_check(relu_sum, {{"p", kinky}}, 1e-5);
    CHECK(krep.kink_coords == 1);  // the coordinate sitting exactly on 0
    CHECK(krep.max_rel_err < 1e-8);

    CHECK_THROWS_AS(grad_check(quadratic, {{"p", p0}}, 1e-2), ValidationError);
}

TEST_CASE("composite ops match central differences at random points") {
    Rng rng(23);
    Tensor a0 = random_tensor({4, 3}, rng);
    Tensor b0 = random_tensor({4, 3}, rng);
    Tensor w0 = random_tensor({3, 5}, rng, 0.5);

    auto objective = [](Tape& t, const std::vector<Var>& p) {
        Var h = matmul(p[0], p[2]);                       // [4x5]
        Var nb = l2normalize_rows(p[1]);                  // [4x3]
        Var mixed = add(mul(p[0], p[1]), scale(p[0], 0.3));
        Var ln = layernorm_rows(h);
        Var lse_in = gather(h, {0, 3, 7, 11, 13});
        return add(add(sum(exp(scale(ln, 0.1))), logsumexp(lse_in)),
                   add(sum(mixed), sum(nb)));
    };
    GradReport rep = grad_check(objective, {{"a", a0}, {"b", b0}, {"w", w0}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("logsumexp is stable and exact against direct evaluation") {
    Tape t;
    Var v = t.leaf(Tensor({3}, {1000.0, 0.0, -1000.0}), true);
    Var l = logsumexp(v);
    CHECK(l.value().item() == doctest::Approx(1000.0).epsilon(1e-15));
    t.backward(l);
    CHECK(v.grad()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(v.grad()[1] == doctest::Approx(0.0).epsilon(1e-12));

    Tape t2;
    Var u = t2.leaf(Tensor({4}, {0.3, -0.2, 0.9, 0.1}), true);
    const double direct = std::log(std::exp(0.3) + std::exp(-0.2) + std::exp(0.9) + std::exp(0.1));
    CHECK(logsumexp(u).value().item() == doctest::Approx(direct).epsilon(1e-15));
}

TEST_CASE("matmul_nt, group_mean_rows, concat, gather, row, at gradients") {
    Rng rng(31);
    Tensor a0 = random_tensor({3, 4}, rng);
    Tensor b0 = random_tensor({5, 4}, rng);
    auto objective = [](Tape& t, const std::vector<Var>& p) {
        Var s = matmul_nt(p[0], p[1]);  // [3x5]
        Var g = group_mean_rows(p[1], 5);
        Var piece = concat(row(s, 1), gather(s, {0, 7, 14}));
        return add(add(sum(piece), at(s, 2, 4)), sum(g));
    };
    GradReport rep = grad_check(objective, {{"a", a0}, {"b", b0}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("rng beta sampler properties (quick)") {
    Rng rng(7);
    double acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += rng.beta(1.0, 1.0);
    CHECK(std::abs(acc / n - 0.5) < 0.02);

    Rng rng2(7);
    Rng rng3(7);
    for (int i = 0; i < 100; ++i) CHECK(rng2.next_u64() == rng3.next_u64());

    Rng g(3);
    double mean_gamma = 0.0;
    for (int i = 0; i < 20000; ++i) mean_gamma += g.gamma(2.5);
    CHECK(std::abs(mean_gamma / 20000 - 2.5) < 0.05);
}

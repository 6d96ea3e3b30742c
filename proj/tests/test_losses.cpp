#include <doctest.h>

#include <cmath>

#include "bsim/gradcheck.hpp"
#include "bsim/losses.hpp"
#include "support/oracles.hpp"

using namespace bsim;

namespace {

Tensor random_matrix(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
    Tensor t({r, c});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

Tensor random_unit(int64_t d, Rng& rng) {
    Tensor v({d});
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        v[i] = rng.normal();
        s += v[i] * v[i];
    }
    for (int64_t i = 0; i < d; ++i) v[i] /= std::sqrt(s);
    return v;
}

std::vector<int64_t> mirror_pairing(int64_t n) {
    std::vector<int64_t> p(n);
    for (int64_t i = 0; i < n; ++i) p[i] = n - 1 - i;
    return p;
}

struct BatchTensors {
    Tensor zm1, zb, zm2, zd;
    std::vector<double> lambdas;
    std::vector<int64_t> pairing;
};

BatchTensors random_batch(int64_t n, int64_t d, Rng& rng) {
    BatchTensors b;
    b.zm1 = random_matrix(n, d, rng);
    b.zb = random_matrix(n, d, rng);
    b.zm2 = random_matrix(n, d, rng);
    b.zd = random_matrix(n, d, rng);
    b.pairing = mirror_pairing(n);
    b.lambdas.resize(n);
    for (auto& l : b.lambdas) l = rng.uniform();
    return b;
}

LossNode eval_bsim(Tape& tape, const BatchTensors& b, double tau) {
    BatchEmbeddings e;
    e.z_mixed_prime = tape.constant(b.zm1);
    e.z_plain_dprime = tape.constant(b.zb);
    e.z_mixed_dprime = tape.constant(b.zm2);
    e.z_plain_prime = tape.constant(b.zd);
    e.lambdas = b.lambdas;
    e.pairing = b.pairing;
    return simclr_bsim_loss(tape, e, tau);
}

FeatureQueue queue_of(const Tensor& keys) {
    FeatureQueue q(keys.rows(), keys.cols());
    q.push(keys);
    return q;
}

Tensor unit_rows(int64_t r, int64_t c, Rng& rng) {
    Tensor m = random_matrix(r, c, rng);
    return l2_normalize_rows(m);
}

}  // namespace

TEST_CASE("nt_xent: closed form at N=2 with orthogonal pairs") {
    // za == zb, rows orthogonal: every positive sim is 1, every other sim 0
    Tensor za({2, 2}, {1, 0, 0, 1});
    Tape tape;
    LossNode l = nt_xent_baseline(tape, tape.constant(za), tape.constant(za), 1.0);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0 * std::exp(0.0)));
    CHECK(l.value.scalar == doctest::Approx(expected).epsilon(1e-12));
    CHECK(l.value.spurious_positive_pairs == 4);
    CHECK(l.value.negative_pairs == 4);
}

TEST_CASE("nt_xent: invariant under simultaneous row permutation") {
    Rng rng(3);
    const int64_t n = 6, d = 5;
    Tensor za = random_matrix(n, d, rng);
    Tensor zb = random_matrix(n, d, rng);
    Tape t1;
    const double base = nt_xent_baseline(t1, t1.constant(za), t1.constant(zb), 0.3).value.scalar;

    std::vector<int64_t> perm = {3, 1, 5, 0, 2, 4};
    Tensor pa({n, d}), pb({n, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            pa.at(i, j) = za.at(perm[i], j);
            pb.at(i, j) = zb.at(perm[i], j);
        }
    Tape t2;
    const double permuted = nt_xent_baseline(t2, t2.constant(pa), t2.constant(pb), 0.3).value.scalar;
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("nt_xent: matches the double-loop oracle on random N=4 batches") {
    Rng rng(5);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor za = random_matrix(4, 6, rng);
        Tensor zb = random_matrix(4, 6, rng);
        Tape tape;
        const double got = nt_xent_baseline(tape, tape.constant(za), tape.constant(zb), 0.2).value.scalar;
        CHECK(std::abs(got - oracles::nt_xent(za, zb, 0.2)) < 1e-12);
        CHECK_THROWS_AS(
            nt_xent_baseline(tape, tape.constant(random_matrix(1, 6, rng)),
                             tape.constant(random_matrix(1, 6, rng)), 0.2),
            ValidationError);
    }
}

TEST_CASE("simclr_bsim: matches the double-loop oracle on random batches") {
    Rng rng(7);
    for (int rep = 0; rep < 5; ++rep) {
        BatchTensors b = random_batch(8, 6, rng);
        Tape tape;
        const double got = eval_bsim(tape, b, 0.2).value.scalar;
        const double want =
            oracles::simclr_bsim(b.zm1, b.zb, b.zm2, b.zd, b.lambdas, b.pairing, 0.2);
        CHECK(std::abs(got - want) < 1e-12);
    }
}

TEST_CASE("simclr_bsim: lambda=1 equals the single-positive double-loop expression") {
    Rng rng(9);
    BatchTensors b = random_batch(6, 5, rng);
    for (auto& l : b.lambdas) l = 1.0;
    Tape tape;
    const double got = eval_bsim(tape, b, 0.5).value.scalar;
    const double want = oracles::simclr_bsim(b.zm1, b.zb, b.zm2, b.zd, b.lambdas, b.pairing, 0.5);
    CHECK(std::abs(got - want) < 1e-12);
    // against an explicitly single-positive oracle: weight 1 on the own view
    double manual = 0.0;
    for (int dir = 0; dir < 2; ++dir) {
        const Tensor& zm = dir == 0 ? b.zm1 : b.zm2;
        const Tensor& zp = dir == 0 ? b.zb : b.zd;
        for (int64_t i = 0; i < 6; ++i) {
            const int64_t j = b.pairing[i];
            double den = 0.0;
            for (int64_t k = 0; k < 6; ++k) {
                den += std::exp(oracles::sim(zm, i, zp, k) / 0.5);
                if (k != i && k != j) den += std::exp(oracles::sim(zm, i, zm, k) / 0.5);
            }
            manual += -std::log(std::exp(oracles::sim(zm, i, zp, i) / 0.5) / den);
        }
    }
    manual /= 12.0;
    CHECK(std::abs(got - manual) < 1e-12);
}

TEST_CASE("simclr_bsim: anchor symmetry (i, lambda) <-> (j, 1-lambda) with shared mixture") {
    Rng rng(11);
    const int64_t n = 6, d = 5;
    BatchTensors b = random_batch(n, d, rng);
    // share each mixture embedding across the pair and flip the weight
    for (int64_t i = 0; i < n / 2; ++i) {
        const int64_t j = n - 1 - i;
        for (int64_t k = 0; k < d; ++k) {
            b.zm1.at(j, k) = b.zm1.at(i, k);
            b.zm2.at(j, k) = b.zm2.at(i, k);
        }
        b.lambdas[j] = 1.0 - b.lambdas[i];
    }
    Tape tape;
    LossNode l = eval_bsim(tape, b, 0.2);
    for (int64_t i = 0; i < n / 2; ++i) {
        const int64_t j = n - 1 - i;
        CHECK(l.value.per_anchor[i] == doctest::Approx(l.value.per_anchor[j]).epsilon(1e-12));
    }
}

TEST_CASE("simclr_bsim: pair counts are 4N and 2N(N-2) for even N") {
    Rng rng(13);
    for (int64_t n : {4, 8, 16, 32}) {
        BatchTensors b = random_batch(n, 4, rng);
        Tape tape;
        LossNode l = eval_bsim(tape, b, 0.2);
        CHECK(l.value.spurious_positive_pairs == 4 * n);
        CHECK(l.value.negative_pairs == 2 * n * (n - 2));
    }
}

TEST_CASE("simclr_bsim: odd N and broken pairing rejected") {
    Rng rng(15);
    BatchTensors b = random_batch(6, 4, rng);
    b.pairing[0] = 0;  // fixed point
    b.pairing[5] = 5;
    Tape tape;
    CHECK_THROWS_AS(eval_bsim(tape, b, 0.2), ValidationError);
}

TEST_CASE("simclr_bsim: continuity of lambda -> loss") {
    Rng rng(17);
    BatchTensors b = random_batch(4, 5, rng);
    double prev = 0.0;
    bool first = true;
    for (double lam = 0.0; lam <= 1.0 + 1e-9; lam += 0.01) {
        for (auto& l : b.lambdas) l = std::min(lam, 1.0);
        Tape tape;
        const double v = eval_bsim(tape, b, 0.2).value.scalar;
        if (!first) CHECK(std::abs(v - prev) < 0.5);  // bounded increments on a dense sweep
        prev = v;
        first = false;
    }
}

TEST_CASE("moco_bsim: lambda=1 single-positive InfoNCE; analytic two-key case") {
    Rng rng(19);
    const int64_t d = 8;
    Tensor q = random_unit(d, rng);
    Tensor k1 = random_unit(d, rng);
    Tensor k2 = random_unit(d, rng);
    Tensor qk = unit_rows(8, d, rng);
    FeatureQueue queue = queue_of(qk);

    Tape tape;
    LossNode with_missing = moco_bsim_loss(tape, tape.constant(q), tape.constant(k1),
                                           std::nullopt, queue, 1.0, 0.2);
    const double oracle_single = oracles::moco_bsim(q, k1, nullptr, qk, 1.0, 0.2);
    CHECK(std::abs(with_missing.value.scalar - oracle_single) < 1e-12);

    // orthogonal queue, q = k1 = k2, tau = 1: L = -log(e / (2e + Q))
    Tensor e1({4}, {1, 0, 0, 0});
    Tensor qk2({6, 4});
    for (int64_t r = 0; r < 6; ++r) qk2.at(r, r % 3 + 1) = 1.0;  // orthogonal to e1
    FeatureQueue q2 = queue_of(qk2);
    Tape t2;
    LossNode analytic = moco_bsim_loss(t2, t2.constant(e1), t2.constant(e1),
                                       t2.constant(e1), q2, 0.5, 1.0);
    const double expected = -std::log(std::exp(1.0) / (2.0 * std::exp(1.0) + 6.0));
    CHECK(analytic.value.scalar == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("moco_bsim: matches the direct-summation oracle, Q=8") {
    Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        const int64_t d = 6;
        Tensor q = random_unit(d, rng);
        Tensor k1 = random_unit(d, rng);
        Tensor k2 = random_unit(d, rng);
        Tensor qk = unit_rows(8, d, rng);
        FeatureQueue queue = queue_of(qk);
        const double lam = rng.uniform();
        Tape tape;
        LossNode got = moco_bsim_loss(tape, tape.constant(q), tape.constant(k1),
                                      tape.constant(k2), queue, lam, 0.2);
        const double want = oracles::moco_bsim(q, k1, &k2, qk, lam, 0.2);
        CHECK(std::abs(got.value.scalar - want) < 1e-12);
        CHECK(got.value.spurious_positive_pairs == 2);
        CHECK(got.value.negative_pairs == 8);
    }
}

TEST_CASE("moco_bsim: error surface") {
    Rng rng(23);
    Tensor q = random_unit(4, rng);
    Tensor k1 = random_unit(4, rng);
    FeatureQueue empty(4, 4);
    Tape tape;
    // missing second key with nonzero weight
    CHECK_THROWS_AS(moco_bsim_loss(tape, tape.constant(q), tape.constant(k1), std::nullopt,
                                   empty, 0.5, 0.2),
                    ValidationError);
    // empty queue and a single key: no contrast at all
    CHECK_THROWS_AS(moco_bsim_loss(tape, tape.constant(q), tape.constant(k1), std::nullopt,
                                   empty, 1.0, 0.2),
                    ValidationError);
    // non-normalized input
    Tensor big = k1;
    for (int64_t i = 0; i < big.size(); ++i) big[i] *= 2.0;
    CHECK_THROWS_AS(moco_bsim_loss(tape, tape.constant(big), tape.constant(k1),
                                   tape.constant(k1), empty, 0.5, 0.2),
                    ValidationError);
}

TEST_CASE("byol_v0: alignment, coefficient collapse, orthogonal targets") {
    Rng rng(25);
    Tensor z = random_unit(6, rng);
    Tape tape;
    LossNode aligned = byol_bsim_v0(tape, tape.constant(z), tape.constant(z), tape.constant(z), 0.3);
    CHECK(std::abs(aligned.value.scalar) < 1e-12);

    Tensor q = random_unit(6, rng);
    Tensor z1 = random_unit(6, rng);
    Tensor z2 = random_unit(6, rng);
    LossNode at_one = byol_bsim_v0(tape, tape.constant(q), tape.constant(z1), tape.constant(z2), 1.0);
    CHECK(at_one.value.scalar ==
          doctest::Approx(2.0 - 2.0 * cosine_sim(q, z1)).epsilon(1e-12));

    Tensor e1({4}, {1, 0, 0, 0});
    Tensor e2({4}, {0, 1, 0, 0});
    Tensor e3({4}, {0, 0, 1, 0});
    LossNode ortho = byol_bsim_v0(tape, tape.constant(e1), tape.constant(e2), tape.constant(e3), 0.4);
    CHECK(ortho.value.scalar == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("byol_v1: collapse to v0 when targets coincide; analytic orthogonal case") {
    Rng rng(27);
    Tensor q = random_unit(5, rng);
    Tensor z = random_unit(5, rng);
    Tape tape;
    for (double lam : {0.0, 0.25, 0.8, 1.0}) {
        LossNode v0 = byol_bsim_v0(tape, tape.constant(q), tape.constant(z), tape.constant(z), lam);
        LossNode v1 = byol_bsim_v1(tape, tape.constant(q), tape.constant(z), tape.constant(z), lam);
        CHECK(v1.value.scalar == doctest::Approx(v0.value.scalar).epsilon(1e-12));
    }

    Tensor e1({3}, {1, 0, 0});
    Tensor e2({3}, {0, 1, 0});
    LossNode l = byol_bsim_v1(tape, tape.constant(e1), tape.constant(e1), tape.constant(e2), 0.5);
    CHECK(l.value.scalar == doctest::Approx(2.0 - std::sqrt(2.0)).epsilon(1e-12));

    // antipodal mixture has no direction
    Tensor ne1 = e1;
    ne1[0] = -1.0;
    CHECK_THROWS_AS(byol_bsim_v1(tape, tape.constant(e2), tape.constant(e1),
                                 tape.constant(ne1), 0.5),
                    AntipodalTargets);
}

TEST_CASE("byol_v1 gradient = s * v0 gradient (same direction) on random unit inputs") {
    Rng rng(29);
    for (int rep = 0; rep < 20; ++rep) {
        const int64_t d = 8;
        Tensor q = random_unit(d, rng);
        Tensor z1 = random_unit(d, rng);
        Tensor z2 = random_unit(d, rng);
        const double lam = rng.uniform();

        Tensor mix({d});
        for (int64_t i = 0; i < d; ++i) mix[i] = lam * z1[i] + (1.0 - lam) * z2[i];
        const double s = 1.0 / norm2(mix);

        Tape t0;
        Var q0 = t0.leaf(q, true);
        t0.backward(byol_bsim_v0(t0, q0, t0.constant(z1), t0.constant(z2), lam).node);
        Tape t1;
        Var q1 = t1.leaf(q, true);
        t1.backward(byol_bsim_v1(t1, q1, t1.constant(z1), t1.constant(z2), lam).node);

        const Tensor& g0 = q0.grad();
        const Tensor& g1 = q1.grad();
        const double n0 = norm2(g0), n1 = norm2(g1);
        if (n0 < 1e-12) continue;  // stationary point
        CHECK(cosine_sim(g0, g1) == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(n1 / n0 == doctest::Approx(s).epsilon(1e-10));
    }
}

TEST_CASE("symmetrize_byol: identical streams double, recomposition is exact") {
    Rng rng(31);
    Tensor q = random_unit(5, rng);
    Tensor z1 = random_unit(5, rng);
    Tensor z2 = random_unit(5, rng);
    Tape tape;
    LossNode fwd = byol_bsim_v1(tape, tape.constant(q), tape.constant(z1), tape.constant(z2), 0.3);
    LossNode same = byol_bsim_v1(tape, tape.constant(q), tape.constant(z1), tape.constant(z2), 0.3);
    LossNode doubled = symmetrize_byol(tape, fwd, same);
    CHECK(doubled.value.scalar == doctest::Approx(2.0 * fwd.value.scalar).epsilon(1e-15));

    LossNode bwd = byol_bsim_v0(tape, tape.constant(z2), tape.constant(q), tape.constant(z1), 0.7);
    LossNode total = symmetrize_byol(tape, fwd, bwd);
    CHECK(std::abs(total.value.scalar - (fwd.value.scalar + bwd.value.scalar)) < 1e-15);
}

TEST_CASE("wbsim_combine: endpoint exactness and linearity") {
    Rng rng(33);
    BatchTensors b = random_batch(4, 5, rng);
    Tape tape;
    LossNode bsim = eval_bsim(tape, b, 0.2);
    LossNode sim = nt_xent_baseline(tape, tape.constant(b.zd), tape.constant(b.zb), 0.2);

    LossNode only_sim = wbsim_combine(tape, bsim, sim, 0.0, 1.0);
    CHECK(only_sim.value.scalar == sim.value.scalar);
    LossNode only_bsim = wbsim_combine(tape, bsim, sim, 1.0, 0.0);
    CHECK(only_bsim.value.scalar == bsim.value.scalar);

    LossNode half = wbsim_combine(tape, bsim, sim, 0.4, 0.3);
    LossNode twice = wbsim_combine(tape, bsim, sim, 0.8, 0.6);
    CHECK(twice.value.scalar == doctest::Approx(2.0 * half.value.scalar).epsilon(1e-14));
    CHECK_THROWS_AS(wbsim_combine(tape, bsim, sim, 1.2, 0.0), ValidationError);
}

TEST_CASE("temperature limit: tau -> inf approaches log(#terms)") {
    Rng rng(35);
    BatchTensors b = random_batch(4, 5, rng);
    Tape tape;
    const double v = eval_bsim(tape, b, 1e6).value.scalar;
    // every anchor has 2N-2 = 6 denominator terms at N=4
    CHECK(std::abs(v - std::log(6.0)) < 1e-3);

    Tensor q = random_unit(5, rng);
    Tensor k1 = random_unit(5, rng);
    Tensor k2 = random_unit(5, rng);
    Tensor qk = unit_rows(8, 5, rng);
    FeatureQueue queue = queue_of(qk);
    LossNode m = moco_bsim_loss(tape, tape.constant(q), tape.constant(k1), tape.constant(k2),
                                queue, 0.3, 1e6);
    CHECK(std::abs(m.value.scalar - std::log(10.0)) < 1e-3);
}

TEST_CASE("gradient suite: every loss passes grad_check on random 8-sample batches") {
    Rng rng(37);
    const int64_t n = 8, d = 6;

    // simclr-bsim over the four embedding matrices
    BatchTensors b = random_batch(n, d, rng);
    auto bsim_obj = [&b](Tape& t, const std::vector<Var>& p) {
        BatchEmbeddings e;
        e.z_mixed_prime = p[0];
        e.z_plain_dprime = p[1];
        e.z_mixed_dprime = p[2];
        e.z_plain_prime = p[3];
        e.lambdas = b.lambdas;
        e.pairing = b.pairing;
        return simclr_bsim_loss(t, e, 0.2).node;
    };
    GradReport rep = grad_check(
        bsim_obj, {{"zm1", b.zm1}, {"zb", b.zb}, {"zm2", b.zm2}, {"zd", b.zd}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);

    // nt-xent
    auto nt_obj = [](Tape& t, const std::vector<Var>& p) {
        return nt_xent_baseline(t, p[0], p[1], 0.2).node;
    };
    rep = grad_check(nt_obj, {{"za", b.zm1}, {"zb", b.zb}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);

    // moco-bsim w.r.t. the query (keys stay constants, as in training)
    Tensor qk = unit_rows(8, d, rng);
    FeatureQueue queue = queue_of(qk);
    Tensor q0 = random_unit(d, rng);
    Tensor k1 = random_unit(d, rng);
    Tensor k2 = random_unit(d, rng);
    auto moco_obj = [&](Tape& t, const std::vector<Var>& p) {
        Var qn = l2normalize_rows(p[0]);  // keep the probe point on the sphere
        return moco_bsim_loss(t, qn, t.constant(k1), t.constant(k2), queue, 0.4, 0.2).node;
    };
    rep = grad_check(moco_obj, {{"q", q0}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);

    // byol v0/v1 w.r.t. predictor output and both targets
    Tensor z1 = random_unit(d, rng);
    Tensor z2 = random_unit(d, rng);
    auto v0_obj = [](Tape& t, const std::vector<Var>& p) {
        return byol_bsim_v0(t, p[0], p[1], p[2], 0.35).node;
    };
    rep = grad_check(v0_obj, {{"q", q0}, {"z1", z1}, {"z2", z2}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
    auto v1_obj = [](Tape& t, const std::vector<Var>& p) {
        return byol_bsim_v1(t, p[0], p[1], p[2], 0.35).node;
    };
    rep = grad_check(v1_obj, {{"q", q0}, {"z1", z1}, {"z2", z2}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);

    // wbsim of the two simclr-style terms
    auto wbsim_obj = [&b](Tape& t, const std::vector<Var>& p) {
        BatchEmbeddings e;
        e.z_mixed_prime = p[0];
        e.z_plain_dprime = p[1];
        e.z_mixed_dprime = p[2];
        e.z_plain_prime = p[3];
        e.lambdas = b.lambdas;
        e.pairing = b.pairing;
        LossNode lb = simclr_bsim_loss(t, e, 0.2);
        LossNode ls = nt_xent_baseline(t, p[3], p[1], 0.2);
        return wbsim_combine(t, lb, ls, 0.7, 0.3).node;
    };
    rep = grad_check(
        wbsim_obj, {{"zm1", b.zm1}, {"zb", b.zb}, {"zm2", b.zm2}, {"zd", b.zd}}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

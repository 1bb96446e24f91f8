#include "efree/mcsde.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

using efree::DoubleWellParams;
using efree::Ensemble;
using efree::McConfig;
using efree::RngStream;

namespace {

double bisect_root(double lo, double hi, double mu, double nu) {
    auto f = [&](double q) { return q * q * q - mu * q + nu; };
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (f(lo) * f(mid) <= 0 ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
}

double sample_std(const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v)
        ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

McConfig serial() {
    McConfig c;
    c.threads = 1;
    return c;
}

} // namespace

TEST(Philox, KnownAnswerVectors) {
    using P = efree::Philox4x32;
    EXPECT_EQ(P::apply({0, 0, 0, 0}, {0, 0}), (P::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(P::apply({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (P::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(P::apply({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (P::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, UniformStaysOpen) {
    EXPECT_GT(efree::uniform_open(0, 0), 0.0);
    EXPECT_LT(efree::uniform_open(0xffffffffu, 0xffffffffu), 1.0);
}

TEST(Philox, NormalsHaveUnitMoments) {
    const RngStream s{42, 3};
    const int n = 50000;
    double sum = 0, sum2 = 0, cross = 0;
    for (int i = 0; i < n; ++i) {
        const auto [a, b] = efree::normal_pair(s, static_cast<std::uint32_t>(i), 0);
        sum += a + b;
        sum2 += a * a + b * b;
        cross += a * b;
    }
    const double m = 2.0 * n;
    EXPECT_NEAR(sum / m, 0.0, 3.0 / std::sqrt(m));
    // Var(Z^2) = 2
    EXPECT_NEAR(sum2 / m, 1.0, 3.0 * std::sqrt(2.0 / m));
    EXPECT_NEAR(cross / n, 0.0, 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST(EnsembleLift, ZeroVarianceIsExact) {
    const Ensemble e = efree::ensemble_lift(100, 0.3, 0.0, {1, 0});
    for (double q : e.positions)
        EXPECT_EQ(q, 0.3);
}

TEST(EnsembleLift, SampleMeanWithinStandardError) {
    const Ensemble e = efree::ensemble_lift(100000, -0.5, 0.2, {7, 0});
    const double mean = std::accumulate(e.positions.begin(), e.positions.end(), 0.0) / 1e5;
    EXPECT_NEAR(mean, -0.5, 3.0 * std::sqrt(0.2 / 1e5));
    EXPECT_NEAR(sample_std(e.positions), std::sqrt(0.2), 3.0 * std::sqrt(0.2 / 2e5));
}

TEST(EnsembleLift, SeedDeterminesEnsemble) {
    const Ensemble a = efree::ensemble_lift(1000, 0.0, 1.0, {5, 2});
    const Ensemble b = efree::ensemble_lift(1000, 0.0, 1.0, {5, 2});
    const Ensemble c = efree::ensemble_lift(1000, 0.0, 1.0, {6, 2});
    const Ensemble d = efree::ensemble_lift(1000, 0.0, 1.0, {5, 3});
    EXPECT_EQ(a.positions, b.positions);
    EXPECT_NE(a.positions, c.positions);
    EXPECT_NE(a.positions, d.positions);
}

TEST(EnsembleLift, RejectsBadInput) {
    EXPECT_THROW(efree::ensemble_lift(0, 0.0, 1.0, {}), efree::DomainError);
    EXPECT_THROW(efree::ensemble_lift(10, 0.0, -1e-3, {}), efree::DomainError);
}

TEST(EulerMaruyama, DeterministicStepMatchesEuler) {
    DoubleWellParams p;
    p.mu = -1.0; // V = Q^4/4 + Q^2/2
    p.nu = 0.0;
    p.sigma = 0.0;
    McConfig c = serial();
    const Ensemble e{{-1.3, 0.0, 0.4, 2.0}};
    const Ensemble out = efree::euler_maruyama_evolve(p, e, c.h, c, {1, 0});
    for (std::size_t i = 0; i < e.count(); ++i) {
        const double q = e.positions[i];
        EXPECT_EQ(out.positions[i], q + -(q * q * q + q) * c.h);
    }
}

TEST(EulerMaruyama, ShortFinalStep) {
    DoubleWellParams p;
    p.sigma = 0.0;
    McConfig c = serial();
    const Ensemble e{{0.7}};
    double q = 0.7;
    for (double dt : {0.01, 0.01, 0.005})
        q += -(q * q * q - p.mu * q + p.nu) * dt;
    EXPECT_NEAR(efree::euler_maruyama_evolve(p, e, 0.025, c, {}).positions[0], q, 1e-15);
}

TEST(EulerMaruyama, WellMinimumIsFixedWithoutNoise) {
    DoubleWellParams p;
    p.sigma = 0.0;
    const double qm = bisect_root(-3.0, -1.5, p.mu, p.nu);
    const double qp = bisect_root(1.5, 3.0, p.mu, p.nu);
    const Ensemble out = efree::euler_maruyama_evolve(p, Ensemble{{qm, qp}}, 1.0, serial(), {});
    EXPECT_NEAR(out.positions[0], qm, 1e-12);
    EXPECT_NEAR(out.positions[1], qp, 1e-12);
}

TEST(EulerMaruyama, ZeroTimeIsIdentity) {
    const Ensemble e = efree::ensemble_lift(50, 0.1, 1.0, {3, 0});
    EXPECT_EQ(efree::euler_maruyama_evolve({}, e, 0.0, serial(), {3, 0}).positions, e.positions);
}

TEST(EulerMaruyama, NoiseVanishesContinuously) {
    const Ensemble e = efree::ensemble_lift(200, -0.5, 0.2, {11, 0});
    DoubleWellParams p0;
    p0.sigma = 0.0;
    const Ensemble base = efree::euler_maruyama_evolve(p0, e, 0.5, serial(), {11, 1});
    auto dist = [&](double sigma) {
        DoubleWellParams p;
        p.sigma = sigma;
        const Ensemble out = efree::euler_maruyama_evolve(p, e, 0.5, serial(), {11, 1});
        double d = 0;
        for (std::size_t i = 0; i < e.count(); ++i)
            d = std::max(d, std::abs(out.positions[i] - base.positions[i]));
        return d;
    };
    const double d1 = dist(1e-4), d2 = dist(1e-6);
    EXPECT_LT(d1, 1e-2);
    // first order in sigma
    EXPECT_NEAR(d1 / d2, 100.0, 1.0);
}

TEST(EulerMaruyama, ThreadCountDoesNotChangeResult) {
    const Ensemble e = efree::ensemble_lift(1001, 0.2, 1.5, {9, 0});
    McConfig c = serial();
    const Ensemble ref = efree::euler_maruyama_evolve({}, e, 0.73, c, {9, 4});
    for (int threads : {2, 3, 8}) {
        c.threads = threads;
        EXPECT_EQ(efree::euler_maruyama_evolve({}, e, 0.73, c, {9, 4}).positions, ref.positions)
            << threads << " threads";
    }
}

TEST(EulerMaruyama, GuardRaisesStabilityError) {
    McConfig c = serial();
    EXPECT_THROW(efree::euler_maruyama_evolve({}, Ensemble{{40.0}}, 0.1, c, {}), efree::StabilityError);
    c.guard = 1.0;
    EXPECT_THROW(efree::euler_maruyama_evolve({}, Ensemble{{0.0, 3.0}}, 0.01, c, {}), efree::StabilityError);
    EXPECT_THROW(efree::euler_maruyama_evolve({}, Ensemble{{0.0}}, -0.1, c, {}), efree::DomainError);
}

TEST(EulerMaruyama, RelaxesToBimodalDistribution) {
    DoubleWellParams p;
    const Ensemble e = efree::ensemble_lift(100000, 1.5, 3.5, {21, 0});
    const Ensemble out = efree::euler_maruyama_evolve(p, e, 10.0, McConfig{}, {21, 1});
    const double barrier = bisect_root(-0.5, 0.5, p.mu, p.nu);
    const auto left = std::count_if(out.positions.begin(), out.positions.end(), [&](double q) { return q < barrier; });
    const double frac = static_cast<double>(left) / 1e5;
    EXPECT_GE(frac, 0.05);
    EXPECT_LE(frac, 0.95);
}

TEST(EnsembleRestrict, PowerSums) {
    EXPECT_EQ(efree::ensemble_restrict(Ensemble{{2.0}}), Eigen::Vector3d(1, 2, 4));
    EXPECT_EQ(efree::ensemble_restrict(Ensemble{{0.0, 0.0, 0.0}}), Eigen::Vector3d(3, 0, 0));
    // dyadic values keep every partial sum exact
    const Ensemble e = efree::ensemble_lift(1000, 0.75, 0.0, {});
    EXPECT_EQ(efree::ensemble_restrict(e), Eigen::Vector3d(1000, 750, 562.5));
}

TEST(NoisyMacroMap, MomentsAtTimeZero) {
    const double N = 10000, mean = -0.5, var = 0.2;
    const int reps = 40;
    std::vector<double> m2, m3;
    for (int r = 0; r < reps; ++r) {
        const Eigen::Vector3d y = efree::noisy_macro_map({}, 0.0, {N, mean, var}, serial(), {1, std::uint64_t(r)});
        EXPECT_EQ(y(0), N);
        m2.push_back(y(1) / N);
        m3.push_back(y(2) / N);
    }
    const double avg2 = std::accumulate(m2.begin(), m2.end(), 0.0) / reps;
    const double avg3 = std::accumulate(m3.begin(), m3.end(), 0.0) / reps;
    EXPECT_NEAR(avg2, mean, 3.0 * std::sqrt(var / (N * reps)));
    // Var(Q^2) = 4 mean^2 var + 2 var^2 for a Gaussian
    EXPECT_NEAR(avg3, mean * mean + var, 3.0 * std::sqrt((4 * mean * mean * var + 2 * var * var) / (N * reps)));
}

TEST(NoisyMacroMap, SameStreamSameOutput) {
    const Eigen::Vector3d x(500, 0.1, 0.5);
    EXPECT_EQ(efree::noisy_macro_map({}, 0.3, x, serial(), {4, 9}), efree::noisy_macro_map({}, 0.3, x, serial(), {4, 9}));
    EXPECT_NE(efree::noisy_macro_map({}, 0.3, x, serial(), {4, 9}), efree::noisy_macro_map({}, 0.3, x, serial(), {4, 10}));
}

TEST(NoisyMacroMap, RejectsNonIntegerCount) {
    EXPECT_THROW(efree::noisy_macro_map({}, 0.1, {10.5, 0.0, 1.0}, serial(), {}), efree::DomainError);
    EXPECT_THROW(efree::noisy_macro_map({}, 0.1, {0.0, 0.0, 1.0}, serial(), {}), efree::DomainError);
}

TEST(NoisyMacroMap, SpreadShrinksLikeInverseSqrtN) {
    const int reps = 60;
    std::vector<double> logn, logs;
    for (double N : {100.0, 1000.0, 10000.0}) {
        std::vector<double> v;
        for (int r = 0; r < reps; ++r)
            v.push_back(efree::noisy_macro_map({}, 1.0, {N, -0.5, 0.2}, serial(), {13, std::uint64_t(r)})(1) / N);
        logn.push_back(std::log(N));
        logs.push_back(std::log(sample_std(v)));
    }
    const double slope = (logs[2] - logs[0]) / (logn[2] - logn[0]);
    EXPECT_NEAR(slope, -0.5, 0.1);
}

TEST(McImplicitFlow, ZeroDeltaReturnsStart) {
    McConfig c = serial();
    const Eigen::Vector3d x(1e5, -0.5, 0.2);
    const auto r = efree::mc_implicit_flow({}, 0.5, 0.0, x, c);
    ASSERT_TRUE(r.converged);
    // sampling std of the scaled mean is at most sqrt(var(Q) / N) with var(Q) < 1 here
    EXPECT_LE((r.y - Eigen::VectorXd(x)).norm(), c.newton_tol + 3.0 * std::sqrt(1.0 / 1e5));
}

TEST(McImplicitFlow, ReproducibleAcrossRunsAndThreads) {
    McConfig c = serial();
    c.N = 5000;
    const Eigen::Vector3d x(5000, -0.5, 0.2);
    const auto a = efree::mc_implicit_flow({}, 0.2, 0.1, x, c, 3);
    const auto b = efree::mc_implicit_flow({}, 0.2, 0.1, x, c, 3);
    c.threads = 4;
    const auto d = efree::mc_implicit_flow({}, 0.2, 0.1, x, c, 3);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.y, d.y);
    EXPECT_EQ(a.iterations, d.iterations);
    c.seed = 2;
    EXPECT_NE(efree::mc_implicit_flow({}, 0.2, 0.1, x, c, 3).y, a.y);
}

TEST(McImplicitFlow, RejectsNegativeTimes) {
    EXPECT_THROW(efree::mc_implicit_flow({}, -0.1, 0.1, {100, 0, 1}, serial()), efree::DomainError);
    EXPECT_THROW(efree::mc_implicit_flow({}, 0.0, 0.1, {100, 0, -1}, serial()), efree::DomainError);
}

TEST(McErrorStudy, ReferenceRowIsZero) {
    McConfig c = serial();
    c.N = 2000;
    const std::vector<double> grid{0.0, 0.2};
    const auto rows = efree::mc_error_study({}, {{"a", {2000, -0.5, 0.2}}}, 0.1, grid, c, 0.2);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].err, 0.0);
    EXPECT_EQ(rows[0].start_label, "a");
    EXPECT_TRUE(std::isfinite(rows[0].err));
    EXPECT_THROW(efree::mc_error_study({}, {{"a", {2000, -0.5, 0.2}}}, 0.1, grid, c, 0.1), efree::DomainError);
}

TEST(McErrorStudy, RequiresAscendingGrid) {
    McConfig c = serial();
    c.N = 500;
    EXPECT_THROW(efree::mc_error_study({}, {{"a", {500, -0.5, 0.2}}}, 0.1, {0.2, 0.0}, c, 0.2), efree::DomainError);
    EXPECT_THROW(efree::mc_error_study({}, {{"a", {500, -0.5, 0.2}}}, 0.1, {}, c, 0.0), efree::DomainError);
}


TEST(McImplicitFlow, InstabilityAtTheStartPropagates) {
    McConfig c = serial();
    c.N = 1000;
    c.guard = 0.5;
    EXPECT_THROW(efree::mc_implicit_flow({}, 0.1, 0.1, {1000, 0.0, 1.0}, c), efree::StabilityError);
}

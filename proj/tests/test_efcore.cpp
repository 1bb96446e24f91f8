#include "efree/efcore.hpp"
#include "linear_backend.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

using efree::MacroState;
using efree::SolverConfig;
using efree::SolverMode;

namespace {

MacroState vec2(double a, double b) {
    MacroState x(2);
    x << a, b;
    return x;
}

} // namespace

TEST(LiftEvolveRestrict, ZeroTimeSkipsEvolution) {
    auto calls = std::make_shared<int>(0);
    const auto sys = efree_test::linear_system(true, calls);
    const MacroState x = vec2(0.4, -1.2);
    const MacroState p = efree::lift_evolve_restrict(sys, 0.0, x);
    EXPECT_EQ(*calls, 0);
    EXPECT_EQ(p(0), 0.4);
    EXPECT_EQ(p(1), -1.2);
}

TEST(LiftEvolveRestrict, Semigroup) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.4, -1.2);
    const MacroState whole = efree::lift_evolve_restrict(sys, 2.5, x);
    const MacroState split = sys.restrict_to_macro(sys.evolve(1.5, sys.evolve(1.0, sys.lift(x))));
    EXPECT_LT((whole - split).norm(), 1e-13);
}

TEST(LiftEvolveRestrict, RejectsBadInput) {
    const auto sys = efree_test::linear_system();
    EXPECT_THROW(efree::lift_evolve_restrict(sys, -1.0, vec2(0, 0)), efree::DomainError);
    EXPECT_THROW(efree::lift_evolve_restrict(sys, 1.0, MacroState::Zero(3)), efree::DomainError);
    EXPECT_THROW(efree::lift_evolve_restrict(sys, 1.0, vec2(NAN, 0)), efree::DomainError);
}

TEST(ImplicitFlow, ZeroDeltaIsIdentity) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    for (double t : {0.0, 0.5, 3.0, 8.0}) {
        const auto r = efree::implicit_flow(sys, t, 0.0, x, SolverConfig{});
        ASSERT_TRUE(r.converged);
        EXPECT_LT((r.y - x).norm(), 1e-12) << "t_skip " << t;
    }
}

TEST(ImplicitFlow, ResidualRecheckedIndependently) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    SolverConfig cfg;
    cfg.tolerance = 1e-11;
    const auto r = efree::implicit_flow(sys, 2.0, 1.5, x, cfg);
    ASSERT_TRUE(r.converged);
    EXPECT_LE(r.residual_norm, cfg.tolerance);
    const MacroState lhs = sys.restrict_to_macro(sys.evolve(2.0, sys.lift(r.y)));
    const MacroState rhs = sys.restrict_to_macro(sys.evolve(3.5, sys.lift(x)));
    EXPECT_LE((lhs - rhs).norm(), cfg.tolerance);
}

TEST(ImplicitFlow, ErrorDecaysAtTransversalMinusTangentialRate) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    const double delta = 1.0;
    const MacroState exact = efree_test::linear_exact_flow(delta, x);
    std::vector<efree::SamplePoint> err;
    for (double t = 0.0; t <= 6.0; t += 0.5) {
        const auto r = efree::implicit_flow(sys, t, delta, x, SolverConfig{});
        ASSERT_TRUE(r.converged);
        err.push_back({t, (r.y - exact).norm()});
    }
    EXPECT_LT(err.back().value, 1e-6);
    // d_tr = 3, backward tangential expansion 0.2
    const double slope = efree::fit_decay_rate(err, 2.0, 6.0);
    EXPECT_NEAR(slope, -2.8, 0.28);
}

TEST(ImplicitFlow, NewtonAndFixedPointAgree) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    SolverConfig newton;
    SolverConfig fixed;
    fixed.mode = SolverMode::fixed_point;
    fixed.max_iterations = 200;
    for (double t : {2.0, 4.0}) {
        const auto a = efree::implicit_flow(sys, t, 1.0, x, newton);
        const auto b = efree::implicit_flow(sys, t, 1.0, x, fixed);
        ASSERT_TRUE(a.converged);
        ASSERT_TRUE(b.converged);
        EXPECT_LT((a.y - b.y).norm(), 10 * newton.tolerance * 1e3);
    }
}

TEST(ImplicitFlow, FixedPointNeedsCapability) {
    const auto sys = efree_test::linear_system(false);
    SolverConfig cfg;
    cfg.mode = SolverMode::fixed_point;
    EXPECT_THROW(efree::implicit_flow(sys, 1.0, 1.0, vec2(1, 1), cfg), efree::UsageError);
}

TEST(ImplicitFlow, IterationCapReportsBestIterate) {
    const auto sys = efree_test::linear_system();
    SolverConfig cfg;
    cfg.max_iterations = 2;
    cfg.damping = 0.1;
    const auto r = efree::implicit_flow(sys, 1.0, 1.0, vec2(1, 1), cfg);
    EXPECT_FALSE(r.converged);
    EXPECT_TRUE(r.y.allFinite());
    EXPECT_GT(r.residual_norm, cfg.tolerance);
}

TEST(ImplicitFlow, SingularJacobianThrowsConditioningError) {
    auto sys = efree_test::linear_system();
    sys.lift = [](const MacroState& x) {
        efree::Vector u(3);
        u << x(0) + x(1), x(0) + x(1), 0.0;
        return u;
    };
    try {
        efree::implicit_flow(sys, 1.0, 1.0, vec2(1, 1), SolverConfig{});
        FAIL() << "expected ConditioningError";
    } catch (const efree::ConditioningError& e) {
        EXPECT_GT(e.condition(), 1e14);
    }
}

TEST(MacroFlowDerivative, IdentityAtZeroDelta) {
    const auto sys = efree_test::linear_system();
    const auto jac = efree::macro_flow_derivative(sys, 1.0, 0.0, vec2(0.3, 0.2), 1, 1e-4, SolverConfig{});
    EXPECT_LT((jac.as_matrix() - efree::Matrix::Identity(2, 2)).norm(), 1e-8);
}

TEST(MacroFlowDerivative, SecondDerivativeOfLinearFlowVanishes) {
    const auto sys = efree_test::linear_system();
    const auto hess = efree::macro_flow_derivative(sys, 2.0, 1.0, vec2(0.3, 0.2), 2, 1e-3, SolverConfig{});
    EXPECT_EQ(hess.values.size(), 8u);
    EXPECT_LT(hess.frobenius_norm(), 1e-5);
}

TEST(MacroFlowDerivative, NonConvergenceNamesPoint) {
    const auto sys = efree_test::linear_system();
    SolverConfig cfg;
    cfg.max_iterations = 1;
    cfg.damping = 0.01;
    EXPECT_THROW(efree::macro_flow_derivative(sys, 1.0, 1.0, vec2(0.3, 0.2), 1, 1e-4, cfg),
                 efree::ConvergenceError);
}

TEST(ConvergenceStudy, DecreasingErrorsAndFlaggedFailures) {
    auto sys = efree_test::linear_system();
    auto base_evolve = sys.evolve;
    // Evolution beyond t = 9 fails: rows at t_skip >= 8 must be flagged.
    sys.evolve = [base_evolve](double t, const efree::Vector& u) {
        if (t > 9.0)
            throw efree::EvolutionError("test: horizon exceeded", t);
        return base_evolve(t, u);
    };
    const MacroState x = vec2(0.7, 0.1);
    const double delta = 1.0;
    efree::FlowFn reference = [&](const MacroState& p) { return efree_test::linear_exact_flow(delta, p); };
    const std::vector<double> grid{0.0, 1.0, 2.0, 3.0, 4.0, 8.5};
    const auto rows = efree::convergence_study(sys, reference, x, delta, grid, 2, SolverConfig{}, 1e-3);
    ASSERT_EQ(rows.size(), grid.size());
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
        ASSERT_TRUE(rows[i].converged);
        ASSERT_EQ(rows[i].errors.size(), 3u);
        for (double e : rows[i].errors)
            EXPECT_GE(e, 0.0);
    }
    for (std::size_t i = 1; i + 1 < rows.size(); ++i)
        EXPECT_LT(rows[i].errors[0], rows[i - 1].errors[0]);
    EXPECT_FALSE(rows.back().converged);
    EXPECT_TRUE(rows.back().errors.empty());
}

TEST(ConvergenceStudy, RejectsUnsortedGrid) {
    const auto sys = efree_test::linear_system();
    efree::FlowFn reference = [](const MacroState& p) { return p; };
    const std::vector<double> grid{1.0, 0.0};
    EXPECT_THROW(efree::convergence_study(sys, reference, vec2(0, 0), 1.0, grid, 0, SolverConfig{}, 1e-4),
                 efree::DomainError);
}

TEST(FitDecayRate, ExactExponential) {
    std::vector<efree::SamplePoint> pts;
    for (int i = 0; i <= 10; ++i)
        pts.push_back({0.3 * i, std::exp(-3.0 * 0.3 * i)});
    EXPECT_NEAR(efree::fit_decay_rate(pts, 0.0, 3.0), -3.0, 1e-10);
    EXPECT_NEAR(efree::fit_decay_rate(pts, 1.0, 2.0), -3.0, 1e-10);
}

TEST(FitDecayRate, Constant) {
    std::vector<efree::SamplePoint> pts{{0, 1}, {1, 1}, {2, 1}, {3, 1}};
    EXPECT_NEAR(efree::fit_decay_rate(pts, 0.0, 3.0), 0.0, 1e-14);
}

TEST(FitDecayRate, ExponentialPlusFloor) {
    std::vector<efree::SamplePoint> pts;
    for (int i = 0; i <= 20; ++i) {
        const double t = 0.05 * i;
        pts.push_back({t, 5.0 * std::exp(-4.6 * t) + 1e-8});
    }
    EXPECT_NEAR(efree::fit_decay_rate(pts, 0.0, 1.0), -4.6, 0.05 * 4.6);
}

TEST(FitDecayRate, InsufficientData) {
    std::vector<efree::SamplePoint> pts{{0, 1}, {1, 0.5}, {2, 0.0}, {3, -1.0}, {9, 0.1}};
    EXPECT_THROW(efree::fit_decay_rate(pts, 0.0, 3.0), efree::InsufficientDataError);
}

TEST(FloorOnset, FindsMinimum) {
    std::vector<efree::SamplePoint> pts;
    for (int i = 0; i <= 20; ++i) {
        const double t = 0.25 * i;
        pts.push_back({t, std::exp(-4.0 * t) + 1e-9 * std::exp(5.0 * t)});
    }
    // minimum of exp(-4t) + 1e-9 exp(5t) is at t = ln(4e9 / 5) / 9 = 2.27
    EXPECT_DOUBLE_EQ(efree::floor_onset(pts), 2.25);
    pts.push_back({6.0, std::nan("")});
    EXPECT_DOUBLE_EQ(efree::floor_onset(pts), 2.25);
    std::vector<efree::SamplePoint> empty{{0.0, 0.0}};
    EXPECT_THROW(efree::floor_onset(empty), efree::InsufficientDataError);
}

TEST(OptimalHealingTime, Values) {
    EXPECT_NEAR(efree::optimal_healing_time(1e-8, 0.0, 10.3), 1.788, 1e-3);
    EXPECT_NEAR(efree::optimal_healing_time(std::exp(-1.0), 0.0, 1.0), 1.0, 1e-15);
    EXPECT_NEAR(efree::optimal_healing_time(std::pow(10.0, -3.5), 0.0, 10.3), 0.78, 5e-3);
}

TEST(OptimalHealingTime, DomainErrors) {
    EXPECT_THROW(efree::optimal_healing_time(1.0, 0.0, 1.0), efree::DomainError);
    EXPECT_THROW(efree::optimal_healing_time(0.0, 0.0, 1.0), efree::DomainError);
    EXPECT_THROW(efree::optimal_healing_time(0.1, 0.0, 0.0), efree::DomainError);
}

TEST(RestrictionCoordinateFlow, ZeroDeltaReturnsInput) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    const MacroState y = efree::restriction_coordinate_flow(sys, 2.0, 0.0, x, SolverConfig{});
    EXPECT_LT((y - x).norm(), 1e-11);
}

TEST(RestrictionCoordinateFlow, ZeroHealingIsExplicitMap) {
    // R(L(x)) = x for this backend
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    const MacroState y = efree::restriction_coordinate_flow(sys, 0.0, 1.3, x, SolverConfig{});
    EXPECT_LT((y - efree::lift_evolve_restrict(sys, 1.3, x)).norm(), 1e-12);
}

TEST(ApproxFiberCoordinates, ZeroHealingReturnsLift) {
    const auto sys = efree_test::linear_system();
    const MacroState x = vec2(0.7, 0.1);
    EXPECT_EQ((efree::approx_fiber_coordinates(sys, 0.0, x, SolverConfig{}) - sys.lift(x)).norm(), 0.0);
}

TEST(ApproxFiberCoordinates, ApproachesSlowSubspaceBasePoint) {
    const auto sys = efree_test::linear_system();
    efree_test::LinearModel m;
    const MacroState x = vec2(0.7, 0.1);
    const efree::Vector exact = m.slow_projection() * sys.lift(x);
    const efree::Vector approx = efree::approx_fiber_coordinates(sys, 5.0, x, SolverConfig{});
    // fast component decays like exp(-3 t); tangential drift adds exp(0.2 t)
    EXPECT_LT((approx - exact).norm(), 10.0 * std::exp(-2.8 * 5.0));
}

#pragma once

#include "efree/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>

namespace efree {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) {
    return v.allFinite();
}

// Autonomous ODE u' = rhs(u).
struct OdeSystem {
    Eigen::Index dimension = 0;
    std::function<Vector(const Vector&)> rhs;
};

struct StepperConfig {
    double step_size = 0.1;
};

namespace detail {

// Splits [t0, t1] into full steps of size h plus one shortened final step.
// A remainder below 1e-9 h is treated as round-off and dropped.
struct StepPlan {
    long full_steps = 0;
    double last_step = 0.0;
};

inline StepPlan plan_steps(double t0, double t1, double h) {
    const double span = t1 - t0;
    StepPlan plan;
    plan.full_steps = static_cast<long>(std::floor(span / h + 1e-9));
    double rest = span - static_cast<double>(plan.full_steps) * h;
    if (rest > 1e-9 * h)
        plan.last_step = rest;
    return plan;
}

} // namespace detail

// Fixed-step integration with the fifth-order Dormand-Prince weights (the
// embedded fourth-order solution is not formed; no step-size control).
inline Vector dopri5_fixed(const OdeSystem& sys, const Vector& u0, double t0, double t1,
                           const StepperConfig& cfg) {
    if (!(cfg.step_size > 0.0))
        throw DomainError("dopri5_fixed: step size must be positive");
    if (t1 < t0)
        throw DomainError("dopri5_fixed: t1 must not precede t0");
    if (u0.size() != sys.dimension)
        throw DomainError("dopri5_fixed: state dimension mismatch");

    static constexpr double a21 = 1.0 / 5.0;
    static constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
    static constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
    static constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0,
                            a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
    static constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0,
                            a63 = 46732.0 / 5247.0, a64 = 49.0 / 176.0,
                            a65 = -5103.0 / 18656.0;
    static constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0,
                            b5 = -2187.0 / 6784.0, b6 = 11.0 / 84.0;

    auto step = [&](const Vector& u, double h) -> Vector {
        const Vector k1 = sys.rhs(u);
        const Vector k2 = sys.rhs(u + h * (a21 * k1));
        const Vector k3 = sys.rhs(u + h * (a31 * k1 + a32 * k2));
        const Vector k4 = sys.rhs(u + h * (a41 * k1 + a42 * k2 + a43 * k3));
        const Vector k5 = sys.rhs(u + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
        const Vector k6 =
            sys.rhs(u + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
        return u + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    };

    const double h = cfg.step_size;
    const auto plan = detail::plan_steps(t0, t1, h);
    Vector u = u0;
    for (long i = 0; i < plan.full_steps; ++i) {
        u = step(u, h);
        if (!u.allFinite())
            throw EvolutionError("dopri5_fixed: non-finite state at step " + std::to_string(i),
                                 t0 + static_cast<double>(i + 1) * h,
                                 static_cast<std::size_t>(i));
    }
    if (plan.last_step > 0.0) {
        u = step(u, plan.last_step);
        if (!u.allFinite())
            throw EvolutionError("dopri5_fixed: non-finite state in final step", t1,
                                 static_cast<std::size_t>(plan.full_steps));
    }
    return u;
}

// J(i,j) = (f(x + s e_j)_i - f(x - s e_j)_i) / (2 s)
template <class F>
Matrix central_jacobian(F&& f, const Vector& x, double step) {
    if (!(step > 0.0))
        throw DomainError("central_jacobian: step must be positive");
    Matrix jac;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        Vector xp = x, xm = x;
        xp(j) += step;
        xm(j) -= step;
        const Vector fp = f(xp);
        const Vector fm = f(xm);
        if (!fp.allFinite() || !fm.allFinite())
            throw DomainError("central_jacobian: non-finite value at stencil point for coordinate " +
                              std::to_string(j));
        if (j == 0)
            jac.resize(fp.size(), x.size());
        jac.col(j) = (fp - fm) / (2.0 * step);
    }
    return jac;
}

} // namespace efree

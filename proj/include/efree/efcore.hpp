#pragma once

// Lift-evolve-restrict maps, the implicitly defined coarse flow with healing
// time, finite-difference coarse derivatives and convergence-study drivers.
// Everything here is independent of the microscopic model; backends plug in
// through MicroSystem.

#include "efree/errors.hpp"
#include "efree/integrate.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace efree {

using MacroState = Eigen::VectorXd;

// Exact map P*(t;.) = R M(t) g L and its inverse, for backends where both are
// available in closed form. Required by SolverMode::fixed_point.
struct ExactCoarseMap {
    std::function<MacroState(double t, const MacroState& y)> forward;
    // Solves forward(t, y) = target for y, starting from guess.
    std::function<MacroState(double t, const MacroState& target, const MacroState& guess)> inverse;
};

template <class Micro>
struct MicroSystem {
    using MicroState = Micro;

    Eigen::Index d = 0;
    std::string label;
    std::function<Micro(const MacroState&)> lift;
    std::function<MacroState(const Micro&)> restrict_to_macro;
    std::function<Micro(double t, const Micro&)> evolve;
    std::optional<ExactCoarseMap> exact_map;
    // False for backends whose evolve() shares mutable state across calls.
    bool concurrent_safe = true;
};

enum class SolverMode { newton, fixed_point };

struct SolverConfig {
    double tolerance = 1e-12;
    int max_iterations = 50;
    double damping = 1.0;
    double fd_step = 1e-4;
    SolverMode mode = SolverMode::newton;
    // Jacobians with a larger 2-norm condition number are rejected.
    double max_condition = 1e14;

    void validate() const {
        if (!(tolerance > 0.0))
            throw DomainError("SolverConfig: tolerance must be positive");
        if (!(damping > 0.0 && damping <= 1.0))
            throw DomainError("SolverConfig: damping must lie in (0, 1]");
        if (!(fd_step > 0.0))
            throw DomainError("SolverConfig: fd_step must be positive");
        if (max_iterations < 1)
            throw DomainError("SolverConfig: max_iterations must be at least 1");
    }
};

struct ImplicitFlowResult {
    MacroState y;
    double residual_norm = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    // Norm of the last update applied to y (the final fixed-point correction
    // in fixed_point mode).
    double last_correction = 0.0;
};

struct ConvergenceRecord {
    double t_skip = 0.0;
    std::vector<double> errors; // E^0 .. E^max_order, empty if a solve failed
    bool converged = false;
    int iterations = 0;
    double residual_norm = 0.0;
};

inline void check_macro(const MacroState& x, Eigen::Index d, const char* where) {
    if (x.size() != d)
        throw DomainError(std::string(where) + ": coarse state has length " +
                          std::to_string(x.size()) + ", expected " + std::to_string(d));
    if (!x.allFinite())
        throw DomainError(std::string(where) + ": coarse state is not finite");
}

// P(t; x) = R(M(t; L(x))). No evolution is performed at t = 0.
template <class Micro>
MacroState lift_evolve_restrict(const MicroSystem<Micro>& sys, double t, const MacroState& x) {
    if (t < 0.0)
        throw DomainError("lift_evolve_restrict: t must be nonnegative");
    check_macro(x, sys.d, "lift_evolve_restrict");
    Micro u = sys.lift(x);
    if (t > 0.0)
        u = sys.evolve(t, u);
    MacroState out = sys.restrict_to_macro(u);
    if (!out.allFinite())
        throw EvolutionError("lift_evolve_restrict: non-finite restriction", t);
    return out;
}

inline double condition_number(const Matrix& a) {
    Eigen::JacobiSVD<Matrix> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() == 0)
        return 0.0;
    const double smin = s(s.size() - 1);
    if (smin == 0.0)
        return std::numeric_limits<double>::infinity();
    return s(0) / smin;
}

// Damped Newton on residual(y) = 0 with a central-difference Jacobian that is
// recomputed at every iteration. Returns the best iterate seen when the
// iteration cap is hit.
template <class Residual>
ImplicitFlowResult newton_solve(Residual&& residual, const MacroState& guess,
                                const SolverConfig& cfg) {
    cfg.validate();
    ImplicitFlowResult best;
    MacroState y = guess;
    MacroState r = residual(y);
    double rnorm = r.norm();
    best.y = y;
    best.residual_norm = rnorm;

    for (int it = 0;; ++it) {
        if (!std::isfinite(rnorm))
            break;
        if (rnorm < best.residual_norm || it == 0) {
            best.y = y;
            best.residual_norm = rnorm;
            best.iterations = it;
        }
        if (rnorm <= cfg.tolerance) {
            best.converged = true;
            best.y = y;
            best.residual_norm = rnorm;
            best.iterations = it;
            return best;
        }
        if (it >= cfg.max_iterations)
            break;
        const Matrix jac = central_jacobian(residual, y, cfg.fd_step);
        const double cond = condition_number(jac);
        if (!(cond <= cfg.max_condition))
            throw ConditioningError("newton_solve: Jacobian condition number " +
                                        std::to_string(cond) + " exceeds limit",
                                    cond);
        MacroState dy = cfg.damping * jac.fullPivLu().solve(-r);
        // Halve steps that leave the domain of the lifting.
        for (int halvings = 0;; ++halvings) {
            try {
                r = residual(MacroState(y + dy));
                break;
            } catch (const DomainError&) {
                if (halvings >= 30)
                    throw;
                dy *= 0.5;
            }
        }
        y += dy;
        best.last_correction = dy.norm();
        rnorm = r.norm();
    }
    best.converged = false;
    return best;
}

// Solves P(t_skip; y) = P(t_skip + delta; x) for y.
template <class Micro>
ImplicitFlowResult implicit_flow(const MicroSystem<Micro>& sys, double t_skip, double delta,
                                 const MacroState& x, const SolverConfig& cfg,
                                 const std::optional<MacroState>& y_guess = std::nullopt) {
    cfg.validate();
    if (t_skip < 0.0)
        throw DomainError("implicit_flow: t_skip must be nonnegative");
    if (t_skip + delta < 0.0)
        throw DomainError("implicit_flow: t_skip + delta must be nonnegative");
    check_macro(x, sys.d, "implicit_flow");
    const MacroState guess = y_guess.value_or(x);
    check_macro(guess, sys.d, "implicit_flow (guess)");

    const MacroState target = lift_evolve_restrict(sys, t_skip + delta, x);
    auto p_skip = [&](const MacroState& y) { return lift_evolve_restrict(sys, t_skip, y); };

    if (cfg.mode == SolverMode::newton) {
        return newton_solve([&](const MacroState& y) { return MacroState(p_skip(y) - target); },
                            guess, cfg);
    }

    if (!sys.exact_map)
        throw UsageError("implicit_flow: backend '" + sys.label +
                         "' does not provide the fixed_point capability");
    const ExactCoarseMap& exact = *sys.exact_map;

    // y <- P*^{-1}( target + P*(y) - P(y) ); a fixed point solves P(y) = target.
    ImplicitFlowResult res;
    MacroState y = guess;
    MacroState p = p_skip(y);
    double rnorm = (p - target).norm();
    res.y = y;
    res.residual_norm = rnorm;
    for (int it = 0;; ++it) {
        res.iterations = it;
        res.y = y;
        res.residual_norm = rnorm;
        if (rnorm <= cfg.tolerance) {
            res.converged = true;
            return res;
        }
        if (it >= cfg.max_iterations || !std::isfinite(rnorm))
            break;
        MacroState next;
        try {
            next = exact.inverse(t_skip, MacroState(target + exact.forward(t_skip, y) - p), y);
        } catch (const Error&) {
            break;
        }
        if (!next.allFinite())
            break;
        res.last_correction = (next - y).norm();
        y = next;
        p = p_skip(y);
        rnorm = (p - target).norm();
    }
    res.converged = false;
    return res;
}

// Flattened derivative tensor of shape d^(order+1); order 0 holds the value.
struct DerivativeTensor {
    int order = 0;
    Eigen::Index d = 0;
    std::vector<double> values;

    DerivativeTensor() = default;
    DerivativeTensor(int ord, Eigen::Index dim)
        : order(ord), d(dim), values(static_cast<std::size_t>(std::pow(dim, ord + 1)), 0.0) {}

    std::size_t index(Eigen::Index i, Eigen::Index j, Eigen::Index k) const {
        switch (order) {
        case 0: return static_cast<std::size_t>(i);
        case 1: return static_cast<std::size_t>(i * d + j);
        default: return static_cast<std::size_t>((i * d + j) * d + k);
        }
    }
    double& at(Eigen::Index i, Eigen::Index j = 0, Eigen::Index k = 0) { return values[index(i, j, k)]; }
    double at(Eigen::Index i, Eigen::Index j = 0, Eigen::Index k = 0) const {
        return values[index(i, j, k)];
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double v : values)
            s += v * v;
        return std::sqrt(s);
    }

    Matrix as_matrix() const {
        if (order != 1)
            throw DomainError("DerivativeTensor: as_matrix needs order 1");
        Matrix m(d, d);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                m(i, j) = at(i, j);
        return m;
    }

    friend DerivativeTensor operator-(const DerivativeTensor& a, const DerivativeTensor& b) {
        if (a.order != b.order || a.d != b.d)
            throw DomainError("DerivativeTensor: shape mismatch");
        DerivativeTensor out = a;
        for (std::size_t i = 0; i < out.values.size(); ++i)
            out.values[i] -= b.values[i];
        return out;
    }
};

using FlowFn = std::function<MacroState(const MacroState&)>;

// Central-difference derivative of a coarse flow x -> flow(x). Order 2 uses the
// standard second-difference stencil on the diagonal and the four-point mixed
// stencil off it, so the result is symmetric in its last two indices.
inline DerivativeTensor fd_derivative(const FlowFn& flow, const MacroState& x, int order,
                                      double step) {
    const Eigen::Index d = x.size();
    if (order < 0 || order > 2)
        throw DomainError("fd_derivative: order must be 0, 1 or 2");
    if (!(step > 0.0))
        throw DomainError("fd_derivative: step must be positive");
    DerivativeTensor out(order, d);
    if (order == 0) {
        const MacroState v = flow(x);
        for (Eigen::Index i = 0; i < d; ++i)
            out.at(i) = v(i);
        return out;
    }
    auto shifted = [&](Eigen::Index j, double sj, Eigen::Index k, double sk) {
        MacroState p = x;
        p(j) += sj;
        if (k >= 0)
            p(k) += sk;
        return flow(p);
    };
    if (order == 1) {
        for (Eigen::Index j = 0; j < d; ++j) {
            const MacroState col = (shifted(j, step, -1, 0) - shifted(j, -step, -1, 0)) / (2 * step);
            for (Eigen::Index i = 0; i < d; ++i)
                out.at(i, j) = col(i);
        }
        return out;
    }
    const MacroState center = flow(x);
    for (Eigen::Index j = 0; j < d; ++j) {
        const MacroState diag =
            (shifted(j, step, -1, 0) - 2.0 * center + shifted(j, -step, -1, 0)) / (step * step);
        for (Eigen::Index i = 0; i < d; ++i)
            out.at(i, j, j) = diag(i);
        for (Eigen::Index k = j + 1; k < d; ++k) {
            const MacroState mixed = (shifted(j, step, k, step) - shifted(j, step, k, -step) -
                                      shifted(j, -step, k, step) + shifted(j, -step, k, -step)) /
                                     (4 * step * step);
            for (Eigen::Index i = 0; i < d; ++i) {
                out.at(i, j, k) = mixed(i);
                out.at(i, k, j) = mixed(i);
            }
        }
    }
    return out;
}

// Derivative of Phi_tskip(delta; .) at x. Every stencil solve starts from the
// solution at x. Throws ConvergenceError naming the first stencil point whose
// implicit solve failed.
template <class Micro>
DerivativeTensor macro_flow_derivative(const MicroSystem<Micro>& sys, double t_skip, double delta,
                                       const MacroState& x, int order, double step,
                                       const SolverConfig& cfg,
                                       const std::optional<MacroState>& y_guess = std::nullopt) {
    if (order < 1 || order > 2)
        throw DomainError("macro_flow_derivative: order must be 1 or 2");
    const ImplicitFlowResult base = implicit_flow(sys, t_skip, delta, x, cfg, y_guess);
    if (!base.converged)
        throw ConvergenceError("macro_flow_derivative: implicit solve failed at the base point",
                               base.residual_norm);
    FlowFn flow = [&](const MacroState& p) {
        const ImplicitFlowResult r = implicit_flow(sys, t_skip, delta, p, cfg, base.y);
        if (!r.converged) {
            std::string where;
            for (Eigen::Index i = 0; i < p.size(); ++i)
                where += (i ? ", " : "") + std::to_string(p(i));
            throw ConvergenceError("macro_flow_derivative: implicit solve failed at stencil point (" +
                                       where + ")",
                                   r.residual_norm);
        }
        return r.y;
    };
    return fd_derivative(flow, x, order, step);
}

// Error of Phi_tskip and its derivatives against a reference flow, per t_skip.
// Solves are warm-started from the previous grid point. Rows whose solve fails
// are kept with converged = false and no errors.
template <class Micro>
std::vector<ConvergenceRecord> convergence_study(const MicroSystem<Micro>& sys,
                                                 const FlowFn& reference, const MacroState& x,
                                                 double delta, std::span<const double> t_skip_grid,
                                                 int max_order, const SolverConfig& cfg,
                                                 double fd_step) {
    if (max_order < 0 || max_order > 2)
        throw DomainError("convergence_study: max_order must be 0, 1 or 2");
    if (!std::is_sorted(t_skip_grid.begin(), t_skip_grid.end()))
        throw DomainError("convergence_study: t_skip grid must be ascending");

    std::vector<DerivativeTensor> ref;
    for (int j = 0; j <= max_order; ++j)
        ref.push_back(fd_derivative(reference, x, j, fd_step));

    std::vector<ConvergenceRecord> rows;
    std::optional<MacroState> warm;
    for (double t : t_skip_grid) {
        ConvergenceRecord row;
        row.t_skip = t;
        try {
            const ImplicitFlowResult base = implicit_flow(sys, t, delta, x, cfg, warm);
            row.iterations = base.iterations;
            row.residual_norm = base.residual_norm;
            if (!base.converged)
                throw ConvergenceError("base solve failed", base.residual_norm);
            FlowFn flow = [&](const MacroState& p) {
                const ImplicitFlowResult r = implicit_flow(sys, t, delta, p, cfg, base.y);
                if (!r.converged)
                    throw ConvergenceError("stencil solve failed", r.residual_norm);
                return r.y;
            };
            for (int j = 0; j <= max_order; ++j)
                row.errors.push_back((fd_derivative(flow, x, j, fd_step) - ref[j]).frobenius_norm());
            row.converged = true;
            warm = base.y;
        } catch (const ConvergenceError&) {
            row.errors.clear();
        } catch (const ConditioningError&) {
            row.errors.clear();
        } catch (const EvolutionError&) {
            row.errors.clear();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

struct SamplePoint {
    double t = 0.0;
    double value = 0.0;
};

// Least-squares slope of log(value) against t over points with t in
// [t_lo, t_hi] and a positive finite value.
inline double fit_decay_rate(std::span<const SamplePoint> samples, double t_lo, double t_hi) {
    double n = 0, st = 0, sl = 0, stt = 0, stl = 0;
    for (const auto& s : samples) {
        if (s.t < t_lo || s.t > t_hi || !(s.value > 0.0) || !std::isfinite(s.value))
            continue;
        const double l = std::log(s.value);
        n += 1;
        st += s.t;
        sl += l;
        stt += s.t * s.t;
        stl += s.t * l;
    }
    if (n < 3)
        throw InsufficientDataError("fit_decay_rate: fewer than 3 usable points in window");
    const double den = n * stt - st * st;
    if (den <= 0.0)
        throw InsufficientDataError("fit_decay_rate: degenerate abscissae");
    return (n * stl - st * sl) / den;
}

// End of the decaying part of an error curve: the t of its smallest positive
// finite value. Beyond it, amplified evaluation errors dominate.
inline double floor_onset(std::span<const SamplePoint> samples) {
    double best = std::numeric_limits<double>::infinity(), at = std::numeric_limits<double>::quiet_NaN();
    for (const auto& s : samples)
        if (s.value > 0.0 && std::isfinite(s.value) && s.value < best) {
            best = s.value;
            at = s.t;
        }
    if (std::isnan(at))
        throw InsufficientDataError("floor_onset: no usable points");
    return at;
}

// t_skip ~ -log(eval_error) / (d_tan^+ + d_tr)
inline double optimal_healing_time(double eval_error, double d_tan_plus, double d_tr) {
    if (!(eval_error > 0.0 && eval_error < 1.0))
        throw DomainError("optimal_healing_time: evaluation error must lie in (0, 1)");
    if (d_tan_plus < 0.0)
        throw DomainError("optimal_healing_time: d_tan_plus must be nonnegative");
    if (!(d_tr > 0.0))
        throw DomainError("optimal_healing_time: d_tr must be positive");
    return -std::log(eval_error) / (d_tan_plus + d_tr);
}

// Coarse flow in restriction coordinates: solve x = P(t_skip; x_b) for x_b,
// then return P(delta + t_skip; x_b).
template <class Micro>
MacroState restriction_coordinate_flow(const MicroSystem<Micro>& sys, double t_skip, double delta,
                                       const MacroState& x, const SolverConfig& cfg) {
    check_macro(x, sys.d, "restriction_coordinate_flow");
    if (t_skip < 0.0 || delta + t_skip < 0.0)
        throw DomainError("restriction_coordinate_flow: times must be nonnegative");
    const ImplicitFlowResult back = newton_solve(
        [&](const MacroState& xb) { return MacroState(lift_evolve_restrict(sys, t_skip, xb) - x); },
        x, cfg);
    if (!back.converged)
        throw ConvergenceError("restriction_coordinate_flow: backward solve failed",
                               back.residual_norm);
    return lift_evolve_restrict(sys, delta + t_skip, back.y);
}

// Approximate fiber base point g(L(x)): solve P(2 t_skip; x_g) = P(t_skip; x)
// for x_g and return M(t_skip; L(x_g)).
template <class Micro>
Micro approx_fiber_coordinates(const MicroSystem<Micro>& sys, double t_skip, const MacroState& x,
                               const SolverConfig& cfg) {
    check_macro(x, sys.d, "approx_fiber_coordinates");
    if (t_skip < 0.0)
        throw DomainError("approx_fiber_coordinates: t_skip must be nonnegative");
    if (t_skip == 0.0)
        return sys.lift(x);
    const MacroState target = lift_evolve_restrict(sys, t_skip, x);
    const ImplicitFlowResult sol = newton_solve(
        [&](const MacroState& xg) {
            return MacroState(lift_evolve_restrict(sys, 2.0 * t_skip, xg) - target);
        },
        x, cfg);
    if (!sol.converged)
        throw ConvergenceError("approx_fiber_coordinates: solve failed", sol.residual_norm);
    return sys.evolve(t_skip, sys.lift(sol.y));
}

} // namespace efree

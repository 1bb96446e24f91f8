#pragma once

// Monte Carlo backend for the double-well SDE dQ = -V'(Q) dt + sigma dW.
// Ensembles are lifted from (N, mean, variance), evolved by Euler-Maruyama and
// restricted to raw power sums. All noise comes from counter-based streams, so
// every result is a deterministic function of its inputs and the seed,
// whatever the number of worker threads.

#include "efree/efcore.hpp"
#include "efree/errors.hpp"
#include "efree/fpspectral.hpp"
#include "efree/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace efree {

struct Ensemble {
    std::vector<double> positions;

    std::size_t count() const { return positions.size(); }
};

struct McConfig {
    long N = 100000;
    double h = 1e-2;
    std::uint64_t seed = 1;
    double damping = 0.5;
    double newton_tol = 5e-2;
    double fd_step = 5e-2;
    int max_iterations = 50;
    // Particles leaving |Q| <= guard signal an unstable step size.
    double guard = 50.0;
    // 0 uses the hardware concurrency.
    int threads = 0;
    // Reuse one noise stream for every evaluation (common random numbers).
    bool frozen_noise = false;

    void validate() const {
        if (N < 1)
            throw DomainError("McConfig: N must be at least 1");
        if (N > static_cast<long>(std::numeric_limits<std::uint32_t>::max()))
            throw DomainError("McConfig: N exceeds the particle counter range");
        if (!(h > 0.0))
            throw DomainError("McConfig: h must be positive");
        if (!(damping > 0.0 && damping <= 1.0))
            throw DomainError("McConfig: damping must lie in (0, 1]");
        if (!(newton_tol > 0.0))
            throw DomainError("McConfig: newton_tol must be positive");
        if (!(fd_step > 0.0))
            throw DomainError("McConfig: fd_step must be positive");
        if (max_iterations < 1)
            throw DomainError("McConfig: max_iterations must be at least 1");
        if (!(guard > 0.0))
            throw DomainError("McConfig: guard must be positive");
        if (threads < 0)
            throw DomainError("McConfig: threads must be nonnegative");
    }

    int worker_count() const {
        if (threads > 0)
            return threads;
        return std::max(1u, std::thread::hardware_concurrency());
    }
};

namespace detail {

// Block index reserved for lifting noise; evolution blocks count up from 0.
inline constexpr std::uint32_t kLiftBlock = 0xFFFFFFFFu;

inline void check_mc_params(const DoubleWellParams& p) {
    if (!(p.sigma >= 0.0) || !std::isfinite(p.mu) || !std::isfinite(p.nu))
        throw DomainError("mcsde: sigma must be nonnegative and parameters finite");
}

// Runs body(begin, end) over contiguous slices of [0, n) on up to `workers` threads.
template <class Body>
void parallel_slices(std::size_t n, int workers, Body&& body) {
    const std::size_t w = std::clamp<std::size_t>(static_cast<std::size_t>(workers), 1, std::max<std::size_t>(n, 1));
    if (w == 1) {
        body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(w);
    const std::size_t chunk = (n + w - 1) / w;
    for (std::size_t k = 0; k < w; ++k) {
        const std::size_t begin = std::min(n, k * chunk), end = std::min(n, begin + chunk);
        pool.emplace_back([&, k, begin, end] {
            try {
                body(begin, end);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (const auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

} // namespace detail

inline Ensemble ensemble_lift(long N, double mean, double variance, const RngStream& stream) {
    if (N < 1)
        throw DomainError("ensemble_lift: N must be at least 1");
    if (N > static_cast<long>(std::numeric_limits<std::uint32_t>::max()))
        throw DomainError("ensemble_lift: N exceeds the particle counter range");
    if (!(variance >= 0.0) || !std::isfinite(mean) || !std::isfinite(variance))
        throw DomainError("ensemble_lift: variance must be nonnegative and finite");
    Ensemble e;
    e.positions.resize(static_cast<std::size_t>(N));
    const double sd = std::sqrt(variance);
    for (std::size_t n = 0; n < e.positions.size(); ++n) {
        const double eta = normal_pair(stream, static_cast<std::uint32_t>(n), detail::kLiftBlock).first;
        e.positions[n] = mean + sd * eta;
    }
    return e;
}

// Euler-Maruyama with step h up to time t; a shorter final step absorbs the
// remainder. Particle n uses the normals of blocks (n, k/2) for steps k.
inline Ensemble euler_maruyama_evolve(const DoubleWellParams& p, const Ensemble& e, double t,
                                      const McConfig& cfg, const RngStream& stream) {
    detail::check_mc_params(p);
    cfg.validate();
    if (!(t >= 0.0))
        throw DomainError("euler_maruyama_evolve: t must be nonnegative");
    if (e.count() > std::numeric_limits<std::uint32_t>::max())
        throw DomainError("euler_maruyama_evolve: ensemble exceeds the particle counter range");

    const double ratio = t / cfg.h;
    auto full = static_cast<long>(std::floor(ratio + 1e-9));
    double last = t - static_cast<double>(full) * cfg.h;
    if (last < 1e-9 * cfg.h)
        last = 0.0;
    if (full < 0)
        full = 0;
    const long steps = full + (last > 0.0 ? 1 : 0);
    if (steps >= 2L * detail::kLiftBlock)
        throw DomainError("euler_maruyama_evolve: too many steps for the block counter");

    const double noise_full = std::sqrt(cfg.h) * p.sigma;
    const double noise_last = std::sqrt(last) * p.sigma;

    Ensemble out = e;
    detail::parallel_slices(out.count(), cfg.worker_count(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t n = begin; n < end; ++n) {
            double q = out.positions[n];
            std::pair<double, double> xi{0.0, 0.0};
            for (long k = 0; k < steps; ++k) {
                const bool short_step = k == full;
                const double dt = short_step ? last : cfg.h;
                double z = 0.0;
                if (p.sigma > 0.0) {
                    if (k % 2 == 0)
                        xi = normal_pair(stream, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(k / 2));
                    z = k % 2 == 0 ? xi.first : xi.second;
                }
                q += potential_and_drift(p, q).drift * dt + (short_step ? noise_last : noise_full) * z;
                if (!(std::abs(q) <= cfg.guard))
                    throw StabilityError("euler_maruyama_evolve: particle left the guard interval |Q| <= " +
                                             std::to_string(cfg.guard),
                                         static_cast<double>(k) * cfg.h + dt, static_cast<std::size_t>(k));
            }
            out.positions[n] = q;
        }
    });
    return out;
}

// Raw power sums (sum Q^0, sum Q^1, sum Q^2), accumulated in particle order.
inline Eigen::Vector3d ensemble_restrict(const Ensemble& e) {
    Eigen::Vector3d s = Eigen::Vector3d::Zero();
    for (double q : e.positions) {
        s(0) += 1.0;
        s(1) += q;
        s(2) += q * q;
    }
    return s;
}

// One stochastic evaluation of R(M(t; L(x))) for x = (N, mean, variance).
inline Eigen::Vector3d noisy_macro_map(const DoubleWellParams& p, double t, const Eigen::Vector3d& x,
                                       const McConfig& cfg, const RngStream& stream) {
    const double n_real = std::round(x(0));
    if (!(n_real >= 1.0) || std::abs(x(0) - n_real) > 1e-9 * std::max(1.0, n_real))
        throw DomainError("noisy_macro_map: first component must be a positive integer N");
    const Ensemble lifted = ensemble_lift(static_cast<long>(n_real), x(1), x(2), stream);
    return ensemble_restrict(euler_maruyama_evolve(p, lifted, t, cfg, stream));
}

namespace detail {

// Stream ids of one implicit solve: the base occupies the high bits, the
// evaluation counter the low 24 bits.
inline RngStream evaluation_stream(const McConfig& cfg, std::uint64_t base, std::uint64_t evaluation) {
    if (cfg.frozen_noise)
        return {cfg.seed, base << 24};
    if (evaluation >= (std::uint64_t{1} << 24))
        throw DomainError("mc_implicit_flow: evaluation budget exhausted");
    return {cfg.seed, (base << 24) | evaluation};
}

} // namespace detail

// Solves P(t_skip; y) = P(t_skip + delta; x) for y = (N, mean, variance) with
// damped Newton in (mean, variance). Residuals are the moment sums divided by
// N, and every evaluation draws fresh noise unless cfg.frozen_noise is set.
// stream_base separates the noise of independent solves under one seed.
inline ImplicitFlowResult mc_implicit_flow(const DoubleWellParams& p, double t_skip, double delta,
                                           const Eigen::Vector3d& x, const McConfig& cfg,
                                           std::uint64_t stream_base = 0,
                                           const std::optional<Eigen::Vector3d>& y_guess = std::nullopt) {
    cfg.validate();
    detail::check_mc_params(p);
    if (t_skip < 0.0 || t_skip + delta < 0.0)
        throw DomainError("mc_implicit_flow: t_skip and t_skip + delta must be nonnegative");
    if (!(x(2) >= 0.0))
        throw DomainError("mc_implicit_flow: variance must be nonnegative");
    if (stream_base >= (std::uint64_t{1} << 40))
        throw DomainError("mc_implicit_flow: stream_base out of range");

    const double N = x(0);
    std::uint64_t evaluation = 0;
    auto scaled = [&](double t, const Eigen::Vector3d& z) {
        const Eigen::Vector3d m = noisy_macro_map(p, t, z, cfg, detail::evaluation_stream(cfg, stream_base, evaluation++));
        return MacroState(m.tail<2>() / N);
    };
    const MacroState target = scaled(t_skip + delta, x);

    SolverConfig solver;
    solver.tolerance = cfg.newton_tol;
    solver.damping = cfg.damping;
    solver.fd_step = cfg.fd_step;
    solver.max_iterations = cfg.max_iterations;
    // Noisy Jacobians are never rejected on conditioning alone.
    solver.max_condition = std::numeric_limits<double>::infinity();

    // An unstable evaluation at a trial iterate is reported to the solver as
    // leaving the domain, so the damped step is halved instead of aborting.
    std::optional<StabilityError> unstable;
    MacroState guess = y_guess.value_or(x).tail<2>();
    ImplicitFlowResult r;
    try {
        r = newton_solve(
            [&](const MacroState& y) {
                if (!(y(1) >= 0.0))
                    throw DomainError("mc_implicit_flow: variance must be nonnegative");
                try {
                    return MacroState(scaled(t_skip, Eigen::Vector3d(N, y(0), y(1))) - target);
                } catch (const StabilityError& e) {
                    unstable = e;
                    throw DomainError(std::string("mc_implicit_flow: unstable evaluation: ") + e.what());
                }
            },
            guess, solver);
    } catch (const DomainError& e) {
        if (unstable && std::string(e.what()).rfind("mc_implicit_flow: unstable evaluation", 0) == 0)
            throw *unstable;
        throw;
    }
    MacroState full(3);
    full << N, r.y(0), r.y(1);
    r.y = full;
    return r;
}

struct McErrorRecord {
    double t_skip = 0.0;
    double err = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
    std::string start_label;
};

struct McStart {
    std::string label;
    Eigen::Vector3d x;
};

// Distance in (mean, variance) of each implicit solve to the solve at
// t_max_reference, which must be the largest grid value. Each start is swept
// through the grid in ascending order, warm-starting every solve from the
// last converged one, so the reference solve starts near its answer. Failures
// are flagged per row.
inline std::vector<McErrorRecord> mc_error_study(const DoubleWellParams& p, const std::vector<McStart>& starts,
                                                 double delta, const std::vector<double>& t_skip_grid,
                                                 const McConfig& cfg, double t_max_reference) {
    if (t_skip_grid.empty())
        throw DomainError("mc_error_study: empty t_skip grid");
    if (!std::is_sorted(t_skip_grid.begin(), t_skip_grid.end()))
        throw DomainError("mc_error_study: t_skip grid must be ascending");
    if (t_max_reference != t_skip_grid.back())
        throw DomainError("mc_error_study: t_max_reference must equal the largest grid value");

    std::vector<McErrorRecord> rows;
    std::uint64_t base = 1;
    for (const McStart& s : starts) {
        std::vector<std::optional<ImplicitFlowResult>> solves;
        std::optional<Eigen::Vector3d> warm;
        for (double t : t_skip_grid) {
            const std::uint64_t row_base = base++;
            try {
                const ImplicitFlowResult r = mc_implicit_flow(p, t, delta, s.x, cfg, row_base, warm);
                if (r.converged)
                    warm = Eigen::Vector3d(r.y);
                solves.emplace_back(r);
            } catch (const Error&) {
                solves.emplace_back();
            }
        }
        const auto& ref = solves.back();
        for (std::size_t i = 0; i < t_skip_grid.size(); ++i) {
            McErrorRecord row{t_skip_grid[i], std::numeric_limits<double>::quiet_NaN(), false, s.label};
            if (ref && solves[i]) {
                row.err = (solves[i]->y.tail<2>() - ref->y.tail<2>()).norm();
                row.converged = solves[i]->converged && ref->converged;
            }
            rows.push_back(row);
        }
    }
    return rows;
}

} // namespace efree

#pragma once

// Fokker-Planck backend for the double-well SDE dQ = -V'(Q) dt + sigma dW.
//
// The generator L rho = -(V' rho)' + (sigma^2/2) rho'' is discretized on a
// uniform grid with Dirichlet values in flux form, which makes exp(-2V/sigma^2)
// an exact discrete null vector and turns the symmetrized operator into a
// symmetric tridiagonal matrix. Eigenpairs come from that symmetric form;
// densities are evolved on the full grid by a contour-integral representation
// of the matrix exponential, because wide initial densities put mass where the
// modal expansion needs astronomically large cancelling coefficients.

#include "efree/efcore.hpp"
#include "efree/errors.hpp"
#include "efree/integrate.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace efree {

struct DoubleWellParams {
    double mu = 6.0;
    double nu = 0.3;
    double sigma = 1.0;

    void validate() const {
        if (!(sigma > 0.0))
            throw DomainError("DoubleWellParams: sigma must be positive");
    }
};

struct PotentialValue {
    double V;
    double drift; // -V'(Q)
};

// V(Q) = Q^4/4 - mu Q^2/2 + nu Q
inline PotentialValue potential_and_drift(const DoubleWellParams& p, double q) {
    const double q2 = q * q;
    return {0.25 * q2 * q2 - 0.5 * p.mu * q2 + p.nu * q, -(q2 * q - p.mu * q + p.nu)};
}

struct SpectralConfig {
    double q_lo = -10.0;
    double q_hi = 10.0;
    int n = 1000;
    // Number of computed modes.
    int m = 8;
    // Coarse dimension d (number of moments).
    int d = 3;
    // The symmetric eigenproblem is solved where 2 (V - min V) / sigma^2 is
    // below this bound; outside, the stationary density is below
    // exp(-core_exponent) of its peak.
    double core_exponent = 150.0;
};

using Density = Eigen::VectorXd;

// Immutable after construction.
struct SpectralModel {
    DoubleWellParams params;
    SpectralConfig config;
    Eigen::VectorXd grid;
    Eigen::VectorXd weights;     // trapezoid weights
    Eigen::VectorXd stationary;  // analytic exp(-2V/sigma^2) / Z on the grid
    Eigen::VectorXd eigenvalues; // descending, size m
    Eigen::MatrixXd phi;         // n x m eigenfunctions
    Eigen::MatrixXd chi;         // n x m adjoint eigenfunctions phi_k / phi_1
    // Jump rates of the discrete generator from node i to i+1 and i-1.
    Eigen::VectorXd rate_up, rate_down;
    int core_lo = 0, core_hi = 0;

    int n() const { return static_cast<int>(grid.size()); }
    int m() const { return static_cast<int>(eigenvalues.size()); }
    int d() const { return config.d; }
    double h() const { return grid(1) - grid(0); }
};

namespace detail {

// Solves a tridiagonal system with partial pivoting (LAPACK gtsv scheme).
// sub(i) couples row i+1 to column i, sup(i) couples row i to column i+1.
template <class S>
Eigen::Matrix<S, Eigen::Dynamic, 1> solve_tridiagonal(Eigen::Matrix<S, Eigen::Dynamic, 1> sub,
                                                      Eigen::Matrix<S, Eigen::Dynamic, 1> diag,
                                                      Eigen::Matrix<S, Eigen::Dynamic, 1> sup,
                                                      Eigen::Matrix<S, Eigen::Dynamic, 1> rhs) {
    using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
    using std::abs;
    const Eigen::Index n = diag.size();
    Vec sup2 = Vec::Zero(std::max<Eigen::Index>(n - 2, 0));
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        if (std::abs(diag(i)) >= std::abs(sub(i))) {
            if (diag(i) == S(0))
                throw ConditioningError("solve_tridiagonal: singular matrix",
                                        std::numeric_limits<double>::infinity());
            const S f = sub(i) / diag(i);
            diag(i + 1) -= f * sup(i);
            rhs(i + 1) -= f * rhs(i);
        } else {
            const S f = diag(i) / sub(i);
            diag(i) = sub(i);
            const S tmp = diag(i + 1);
            diag(i + 1) = sup(i) - f * tmp;
            sup(i) = tmp;
            if (i + 2 < n) {
                sup2(i) = sup(i + 1);
                sup(i + 1) = -f * sup2(i);
            }
            std::swap(rhs(i), rhs(i + 1));
            rhs(i + 1) -= f * rhs(i);
        }
    }
    if (diag(n - 1) == S(0))
        throw ConditioningError("solve_tridiagonal: singular matrix",
                                std::numeric_limits<double>::infinity());
    Vec x(n);
    x(n - 1) = rhs(n - 1) / diag(n - 1);
    if (n > 1)
        x(n - 2) = (rhs(n - 2) - sup(n - 2) * x(n - 1)) / diag(n - 2);
    for (Eigen::Index i = n - 3; i >= 0; --i)
        x(i) = (rhs(i) - sup(i) * x(i + 1) - sup2(i) * x(i + 2)) / diag(i);
    return x;
}

// exp(t A) rho for the density-form generator A with Dirichlet boundary nodes,
// by midpoint quadrature of the Bromwich integral on an optimized cotangent
// contour. 40 nodes keep the error near 1e-13 also for small t, where the
// non-normality of A amplifies the quadrature error of shorter rules.
inline Eigen::VectorXd contour_exponential(const Eigen::VectorXd& up, const Eigen::VectorXd& down,
                                           double t, const Eigen::VectorXd& rho) {
    using Cx = std::complex<double>;
    using CVec = Eigen::Matrix<Cx, Eigen::Dynamic, 1>;
    constexpr int nodes = 40;
    constexpr double c_sigma = -0.6122, c_mu = 0.5017, c_alpha = 0.6407, c_nu = 0.2645;
    const Eigen::Index n = rho.size();
    const Eigen::Index ni = n - 2;
    CVec sub(ni - 1), sup(ni - 1), diag(ni);
    const CVec rhs = rho.segment(1, ni).cast<Cx>();
    for (Eigen::Index r = 0; r + 1 < ni; ++r) {
        sub(r) = -t * up(r + 1);    // row r+1 receives from node r
        sup(r) = -t * down(r + 2);  // row r receives from node r+1
    }
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(ni);
    for (int k = 0; k < nodes / 2; ++k) {
        const double th = M_PI * (2 * k + 1) / nodes;
        const double ct = 1.0 / std::tan(c_alpha * th), st = std::sin(c_alpha * th);
        const Cx z = double(nodes) * Cx(c_sigma + c_mu * th * ct, c_nu * th);
        const Cx dz = double(nodes) * Cx(c_mu * ct - c_mu * c_alpha * th / (st * st), c_nu);
        for (Eigen::Index r = 0; r < ni; ++r)
            diag(r) = z + t * (up(r + 1) + down(r + 1));
        const CVec sol = solve_tridiagonal<Cx>(sub, diag, sup, rhs);
        const Cx w = std::exp(z) * dz / Cx(0.0, 1.0);
        acc += (w * sol).real();
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    out.segment(1, ni) = acc * (2.0 / nodes);
    return out;
}

} // namespace detail

inline SpectralModel build_spectral_model(const DoubleWellParams& p, const SpectralConfig& cfg = {}) {
    p.validate();
    if (cfg.n < 200)
        throw DomainError("build_spectral_model: n must be at least 200");
    if (cfg.m < cfg.d || cfg.m > cfg.n / 4)
        throw DomainError("build_spectral_model: need d <= m <= n/4");
    if (!(cfg.q_hi > cfg.q_lo))
        throw DomainError("build_spectral_model: empty domain");

    SpectralModel model;
    model.params = p;
    model.config = cfg;
    const int n = cfg.n;
    const double h = (cfg.q_hi - cfg.q_lo) / (n - 1);
    const double s2 = p.sigma * p.sigma;
    const double diff = 0.5 * s2;

    model.grid.resize(n);
    Eigen::VectorXd V(n);
    for (int i = 0; i < n; ++i) {
        model.grid(i) = cfg.q_lo + h * i;
        V(i) = potential_and_drift(p, model.grid(i)).V;
    }
    model.weights = Eigen::VectorXd::Constant(n, h);
    model.weights(0) = model.weights(n - 1) = 0.5 * h;

    const double vmin = V.minCoeff();
    // exponent 2 (V - vmin) / sigma^2, so stationary ~ exp(-expo)
    const Eigen::VectorXd expo = (V.array() - vmin) * (2.0 / s2);
    Eigen::VectorXd unnormalized = (-expo.array()).exp();
    unnormalized(0) = unnormalized(n - 1) = 0.0;
    const double Z = model.weights.dot(unnormalized);
    model.stationary = unnormalized / Z;

    // Jump rates of the discrete generator: a_plus(i) from i to i+1, a_minus(i)
    // from i to i-1, for interior i.
    Eigen::VectorXd a_plus = Eigen::VectorXd::Zero(n), a_minus = Eigen::VectorXd::Zero(n);
    for (int i = 1; i < n - 1; ++i) {
        a_plus(i) = diff / (h * h) * std::exp(-(V(i + 1) - V(i)) / s2);
        a_minus(i) = diff / (h * h) * std::exp(-(V(i - 1) - V(i)) / s2);
    }

    model.rate_up = a_plus;
    model.rate_down = a_minus;

    // Core region for the symmetric eigenproblem.
    int lo = 1, hi = n - 2;
    while (lo < n - 2 && expo(lo) > cfg.core_exponent)
        ++lo;
    while (hi > 1 && expo(hi) > cfg.core_exponent)
        --hi;
    const int nc = hi - lo + 1;
    if (nc < cfg.m + 2)
        throw DomainError("build_spectral_model: core region too small for m modes");
    model.core_lo = lo;
    model.core_hi = hi;

    // Symmetrized generator: off-diagonal diff/h^2, diagonal -(a_plus + a_minus).
    Eigen::VectorXd hd(nc), he = Eigen::VectorXd::Constant(nc - 1, diff / (h * h));
    for (int i = 0; i < nc; ++i)
        hd(i) = -(a_plus(lo + i) + a_minus(lo + i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(hd, he, Eigen::ComputeEigenvectors);
    if (es.info() != Eigen::Success)
        throw Error("build_spectral_model: eigensolver failed");

    const int m = cfg.m;
    model.eigenvalues.resize(m);
    model.phi = Eigen::MatrixXd::Zero(n, m);
    Eigen::VectorXd sqrt_pi(nc);
    for (int i = 0; i < nc; ++i)
        sqrt_pi(i) = std::exp(-0.5 * expo(lo + i)) / std::sqrt(Z);
    Eigen::MatrixXd u(nc, m);
    for (int k = 0; k < m; ++k)
        u.col(k) = es.eigenvectors().col(nc - 1 - k); // ascending order from the solver
    // The two leading eigenvalues are nearly degenerate, so the solver mixes
    // their vectors at the level eps ||H|| / |lambda_2|. The null vector is
    // known exactly; re-split the pair against it.
    u.col(0) = sqrt_pi.normalized();
    u.col(1) -= u.col(1).dot(u.col(0)) * u.col(0);
    u.col(1).normalize();
    auto apply_h = [&](const Eigen::VectorXd& v) {
        Eigen::VectorXd out = hd.cwiseProduct(v);
        out.head(nc - 1) += he.cwiseProduct(v.tail(nc - 1));
        out.tail(nc - 1) += he.cwiseProduct(v.head(nc - 1));
        return out;
    };
    for (int k = 0; k < m; ++k) {
        model.eigenvalues(k) = k < 2 ? u.col(k).dot(apply_h(u.col(k))) : es.eigenvalues()(nc - 1 - k);
        model.phi.block(lo, k, nc, 1) = sqrt_pi.cwiseProduct(u.col(k)) / std::sqrt(h);
    }

    // Adjoint eigenfunctions by shifted inverse iteration on the backward
    // operator (B chi)_i = a_plus(i)(chi_{i+1} - chi_i) + a_minus(i)(chi_{i-1} - chi_i).
    const int ni = n - 2;
    Eigen::VectorXd bsub(ni - 1), bsup(ni - 1), bdiag(ni);
    for (int r = 0; r < ni; ++r) {
        const int i = r + 1;
        bdiag(r) = -(a_plus(i) + a_minus(i));
        if (r + 1 < ni)
            bsup(r) = a_plus(i);
        if (r > 0)
            bsub(r - 1) = a_minus(i);
    }
    model.chi = Eigen::MatrixXd::Zero(n, m);
    model.chi.col(0).segment(1, ni).setOnes();
    const double peak = model.stationary.maxCoeff();
    for (int k = 1; k < m; ++k) {
        const double lam = model.eigenvalues(k);
        const double shift = lam + 1e-10 * (1.0 + std::abs(lam));
        Eigen::VectorXd v = Eigen::VectorXd::Zero(ni);
        for (int i = lo; i <= hi; ++i)
            if (model.stationary(i) > 1e-8 * peak)
                v(i - 1) = model.phi(i, k) / model.stationary(i);
        Eigen::VectorXd shifted = bdiag.array() - shift;
        for (int it = 0; it < 3; ++it) {
            v = detail::solve_tridiagonal<double>(bsub, shifted, bsup, v);
            v /= v.cwiseAbs().maxCoeff();
        }
        Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
        c.segment(1, ni) = v;
        for (int j = 0; j < k; ++j) {
            const double overlap = model.weights.dot(c.cwiseProduct(model.phi.col(j)));
            c -= overlap * model.chi.col(j);
        }
        const double norm = model.weights.dot(c.cwiseProduct(model.phi.col(k)));
        if (!(std::abs(norm) > 0.0) || !c.allFinite())
            throw Error("build_spectral_model: adjoint eigenfunction " + std::to_string(k + 1) +
                        " could not be normalized");
        model.chi.col(k) = c / norm;
    }

    // Sign convention: leading nonzero raw moment of each phi_k positive.
    for (int k = 0; k < m; ++k) {
        double lead = 0.0;
        Eigen::VectorXd qpow = Eigen::VectorXd::Ones(n);
        for (int j = 0; j < 8 && lead == 0.0; ++j) {
            const double moment = model.weights.dot(qpow.cwiseProduct(model.phi.col(k)));
            if (std::abs(moment) > 1e-8)
                lead = moment;
            qpow = qpow.cwiseProduct(model.grid);
        }
        if (lead < 0.0) {
            model.phi.col(k) *= -1.0;
            model.chi.col(k) *= -1.0;
        }
    }

    if (!(model.eigenvalues(1) < 0.0))
        throw Error("build_spectral_model: second eigenvalue is not negative");
    for (int k = 1; k < m; ++k)
        if (!(model.eigenvalues(k) < model.eigenvalues(k - 1)))
            throw Error("build_spectral_model: spectrum is not strictly decreasing");
    return model;
}

inline void check_density(const SpectralModel& model, const Density& rho, const char* where) {
    if (rho.size() != model.n())
        throw DomainError(std::string(where) + ": density does not live on the model grid");
}

inline double integrate(const SpectralModel& model, const Density& rho) {
    check_density(model, rho, "integrate");
    return model.weights.dot(rho);
}

// <a, b>_1 = int a b / phi_1. Points where phi_1 underflows are skipped, so both
// arguments must be negligible there.
inline double weighted_inner(const SpectralModel& model, const Density& a, const Density& b) {
    check_density(model, a, "weighted_inner");
    check_density(model, b, "weighted_inner");
    double s = 0.0;
    for (int i = 0; i < model.n(); ++i)
        if (model.stationary(i) > std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon())
            s += model.weights(i) * a(i) * b(i) / model.stationary(i);
    return s;
}

// Coefficients a_k = <phi_k, rho>_1 = int chi_k rho for k = 1..count.
inline Eigen::VectorXd modal_coefficients(const SpectralModel& model, const Density& rho,
                                          int count = -1) {
    check_density(model, rho, "modal_coefficients");
    if (count < 0)
        count = model.m();
    return model.chi.leftCols(count).transpose() * model.weights.cwiseProduct(rho);
}

inline Density density_from_modes(const SpectralModel& model, const Eigen::VectorXd& a) {
    return model.phi.leftCols(a.size()) * a;
}

inline Density evolve_density(const SpectralModel& model, double t, const Density& rho) {
    check_density(model, rho, "evolve_density");
    if (t < 0.0)
        throw DomainError("evolve_density: t must be nonnegative");
    if (t == 0.0)
        return rho;
    return detail::contour_exponential(model.rate_up, model.rate_down, t, rho);
}

// Modal evolution sum_k exp(lambda_k t) a_k phi_k over the computed modes.
// Accurate only for densities whose tails are already equilibrated.
inline Density evolve_modal(const SpectralModel& model, double t, const Density& rho) {
    check_density(model, rho, "evolve_modal");
    const Eigen::VectorXd a = modal_coefficients(model, rho);
    return density_from_modes(model, (model.eigenvalues * t).array().exp().matrix().cwiseProduct(a));
}

inline Eigen::VectorXd restrict_moments(const SpectralModel& model, const Density& rho) {
    check_density(model, rho, "restrict_moments");
    Eigen::VectorXd out(model.d());
    Eigen::VectorXd f = model.weights.cwiseProduct(rho);
    for (int k = 0; k < model.d(); ++k) {
        out(k) = f.sum();
        f = f.cwiseProduct(model.grid);
    }
    return out;
}

inline Density gaussian_density(const SpectralModel& model, double mass, double mean, double var) {
    if (!(var > 0.0))
        throw DomainError("gaussian density: variance must be positive");
    const double c = mass / std::sqrt(2.0 * M_PI * var);
    return ((model.grid.array() - mean).square() * (-0.5 / var)).exp() * c;
}

struct LinearLiftBasis {
    std::vector<Density> densities;
};

// Unit-mass Gaussians of variance 1 with means -1.5, -0.5, 1.
inline LinearLiftBasis default_linear_basis(const SpectralModel& model) {
    LinearLiftBasis b;
    for (double mean : {-1.5, -0.5, 1.0})
        b.densities.push_back(gaussian_density(model, 1.0, mean, 1.0));
    return b;
}

inline void validate_basis(const SpectralModel& model, const LinearLiftBasis& basis) {
    if (static_cast<int>(basis.densities.size()) != model.d())
        throw DomainError("linear basis: need exactly d densities");
    for (std::size_t j = 0; j < basis.densities.size(); ++j) {
        check_density(model, basis.densities[j], "linear basis");
        if (std::abs(integrate(model, basis.densities[j]) - 1.0) > 1e-8)
            throw DomainError("linear basis: density " + std::to_string(j + 1) +
                              " does not have unit mass");
    }
}

inline Density lift_linear(const SpectralModel& model, const LinearLiftBasis& basis,
                           const MacroState& x) {
    check_macro(x, model.d(), "lift_linear");
    Density rho = Density::Zero(model.n());
    for (int j = 0; j < model.d(); ++j)
        rho += x(j) * basis.densities[j];
    return rho;
}

// Gaussian of mass x1, mean x2 and variance x3.
inline Density lift_gauss(const SpectralModel& model, const MacroState& x) {
    if (x.size() != 3)
        throw DomainError("lift_gauss: expects (mass, mean, variance)");
    if (!(x(2) > 0.0))
        throw DomainError("lift_gauss: variance must be positive");
    return gaussian_density(model, x(0), x(1), x(2));
}

inline Density spectral_projection(const SpectralModel& model, const Density& rho) {
    return density_from_modes(model, modal_coefficients(model, rho, model.d()));
}

inline Eigen::MatrixXd moment_matrix(const SpectralModel& model) {
    Eigen::MatrixXd R(model.d(), model.d());
    for (int l = 0; l < model.d(); ++l)
        R.col(l) = restrict_moments(model, model.phi.col(l));
    return R;
}

inline Eigen::MatrixXd modal_decay(const SpectralModel& model, double t) {
    const Eigen::VectorXd e = (model.eigenvalues.head(model.d()) * t).array().exp();
    return e.asDiagonal();
}

struct LinearMaps {
    Eigen::MatrixXd T_lin;
    Eigen::MatrixXd R_d;
    // M_d(t) = diag(exp(lambda_l t)), l = 1..d
    std::function<Eigen::MatrixXd(double)> M_d;
};

inline constexpr double max_transversality_condition = 1e10;

inline LinearMaps linear_maps(const SpectralModel& model, const LinearLiftBasis& basis) {
    validate_basis(model, basis);
    LinearMaps maps;
    maps.T_lin.resize(model.d(), model.d());
    for (int j = 0; j < model.d(); ++j)
        maps.T_lin.col(j) = modal_coefficients(model, basis.densities[j], model.d());
    maps.R_d = moment_matrix(model);
    const double ct = condition_number(maps.T_lin), cr = condition_number(maps.R_d);
    if (!(ct <= max_transversality_condition) || !(cr <= max_transversality_condition))
        throw ConditioningError("linear_maps: transversality fails, cond(T_lin) = " +
                                    std::to_string(ct) + ", cond(R_d) = " + std::to_string(cr),
                                std::max(ct, cr));
    std::vector<double> lam(model.eigenvalues.data(), model.eigenvalues.data() + model.d());
    maps.M_d = [lam](double t) {
        Eigen::VectorXd e(lam.size());
        for (std::size_t i = 0; i < lam.size(); ++i)
            e(static_cast<Eigen::Index>(i)) = std::exp(lam[i] * t);
        return Eigen::MatrixXd(e.asDiagonal());
    };
    return maps;
}

// Phi_lin,*(delta) = T_lin^{-1} M_d(delta) T_lin; delta may be negative.
inline Eigen::MatrixXd exact_flow_linear(const SpectralModel& model, const LinearLiftBasis& basis,
                                         double delta) {
    const LinearMaps maps = linear_maps(model, basis);
    return maps.T_lin.fullPivLu().solve(maps.M_d(delta) * maps.T_lin);
}

// P_lin(t): columns are R M(t) rho_j.
inline Eigen::MatrixXd lift_evolve_restrict_linear(const SpectralModel& model,
                                                   const LinearLiftBasis& basis, double t) {
    validate_basis(model, basis);
    Eigen::MatrixXd P(model.d(), model.d());
    for (int j = 0; j < model.d(); ++j)
        P.col(j) = restrict_moments(model, evolve_density(model, t, basis.densities[j]));
    return P;
}

inline double smallest_singular_value(const Eigen::MatrixXd& a) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    return svd.singularValues()(svd.singularValues().size() - 1);
}

// Phi_lin,tskip(delta) = P_lin(t_skip)^{-1} P_lin(t_skip + delta).
inline Eigen::MatrixXd approx_flow_linear(const SpectralModel& model, const LinearLiftBasis& basis,
                                          double t_skip, double delta) {
    if (t_skip < 0.0 || t_skip + delta < 0.0)
        throw DomainError("approx_flow_linear: evolution times must be nonnegative");
    const Eigen::MatrixXd P0 = lift_evolve_restrict_linear(model, basis, t_skip);
    const double cond = condition_number(P0);
    if (!(cond <= 1e14))
        throw ConditioningError("approx_flow_linear: P_lin(t_skip) is singular, smallest singular value " +
                                    std::to_string(smallest_singular_value(P0)),
                                cond);
    return P0.fullPivLu().solve(lift_evolve_restrict_linear(model, basis, t_skip + delta));
}

struct LinearErrorComponents {
    double n;         // ||P_lin,*(t)^{-1}||
    double r;         // ||P_lin,*(t) - P_lin(t)||
    double sigma_min; // smallest singular value of P_lin(t)
};

inline double spectral_norm(const Eigen::MatrixXd& a) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    return svd.singularValues()(0);
}

inline LinearErrorComponents linear_error_components(const SpectralModel& model,
                                                     const LinearLiftBasis& basis, double t) {
    const LinearMaps maps = linear_maps(model, basis);
    const Eigen::MatrixXd Pstar = maps.R_d * maps.M_d(t) * maps.T_lin;
    const Eigen::MatrixXd P = lift_evolve_restrict_linear(model, basis, t);
    return {1.0 / smallest_singular_value(Pstar), spectral_norm(Pstar - P), smallest_singular_value(P)};
}

// T_Gauss(x)_k = <phi_k, L_Gauss(x)>_1, k = 1..3
inline Eigen::VectorXd t_gauss(const SpectralModel& model, const MacroState& x) {
    return modal_coefficients(model, lift_gauss(model, x), model.d());
}

inline Eigen::MatrixXd t_gauss_jacobian(const SpectralModel& model, const MacroState& x,
                                        double step = 1e-6) {
    return central_jacobian([&](const Vector& z) { return Vector(t_gauss(model, z)); }, x, step);
}

// Solves T_Gauss(y) = target by Newton, keeping y3 > 0.
inline MacroState t_gauss_inverse(const SpectralModel& model, const Eigen::VectorXd& target,
                                  const MacroState& guess, const SolverConfig& cfg) {
    ImplicitFlowResult res;
    try {
        res = newton_solve(
            [&](const MacroState& y) { return MacroState(t_gauss(model, y) - target); }, guess, cfg);
    } catch (const DomainError& e) {
        throw ConvergenceError(std::string("T_Gauss inverse left the domain x3 > 0: ") + e.what(),
                               std::numeric_limits<double>::infinity());
    }
    if (!res.converged)
        throw ConvergenceError("T_Gauss inverse: Newton iteration did not converge", res.residual_norm);
    return res.y;
}

inline SolverConfig default_gauss_solver() {
    SolverConfig cfg;
    cfg.tolerance = 1e-12;
    cfg.fd_step = 1e-6;
    return cfg;
}

// Phi_Gauss,*(delta; x) = T_Gauss^{-1}(M_d(delta) T_Gauss(x))
inline MacroState gauss_exact_flow(const SpectralModel& model, double delta, const MacroState& x,
                                   const SolverConfig& cfg = default_gauss_solver()) {
    const Eigen::VectorXd target = modal_decay(model, delta) * t_gauss(model, x);
    return t_gauss_inverse(model, target, x, cfg);
}

struct GaussResiduals {
    Eigen::VectorXd res, res_delta, healed_res, healed_res_delta;
};

// res(y)       = T_Gauss(y) - M_d(-t) T_R M(t) L(y)
// res_delta(x) = M_d(-t) T_R M(t + delta) L(x) - M_d(delta) T_Gauss(x)
// with T_R = R_d^{-1} R; healed variants are M_d(t) times each residual.
inline GaussResiduals gauss_residual_decomposition(const SpectralModel& model, double t_skip,
                                                   double delta, const MacroState& x,
                                                   const MacroState& y) {
    const Eigen::MatrixXd R_d = moment_matrix(model);
    const auto lu = R_d.fullPivLu();
    auto T_R = [&](const Density& rho) { return Eigen::VectorXd(lu.solve(restrict_moments(model, rho))); };
    const Eigen::VectorXd ty = T_R(evolve_density(model, t_skip, lift_gauss(model, y)));
    const Eigen::VectorXd tx = T_R(evolve_density(model, t_skip + delta, lift_gauss(model, x)));
    GaussResiduals r;
    r.healed_res = modal_decay(model, t_skip) * t_gauss(model, y) - ty;
    r.healed_res_delta = tx - modal_decay(model, t_skip + delta) * t_gauss(model, x);
    r.res = modal_decay(model, -t_skip) * r.healed_res;
    r.res_delta = modal_decay(model, -t_skip) * r.healed_res_delta;
    return r;
}

enum class FpLifting { linear, gauss };

// MicroSystem adapter: evolve = modal density evolution, restrict = moments.
// Declares the exact map P_*(t; y) = R_d M_d(t) T(y) and its inverse.
inline MicroSystem<Density> fp_micro_system(std::shared_ptr<const SpectralModel> model,
                                            FpLifting lifting,
                                            std::shared_ptr<const LinearLiftBasis> basis = nullptr) {
    MicroSystem<Density> sys;
    sys.d = model->d();
    sys.restrict_to_macro = [model](const Density& rho) { return MacroState(restrict_moments(*model, rho)); };
    sys.evolve = [model](double t, const Density& rho) { return evolve_density(*model, t, rho); };
    const Eigen::MatrixXd R_d = moment_matrix(*model);
    if (lifting == FpLifting::linear) {
        if (!basis)
            basis = std::make_shared<LinearLiftBasis>(default_linear_basis(*model));
        const LinearMaps maps = linear_maps(*model, *basis);
        sys.label = "fokker-planck-linear";
        sys.lift = [model, basis](const MacroState& x) { return lift_linear(*model, *basis, x); };
        sys.exact_map = ExactCoarseMap{
            [maps](double t, const MacroState& y) { return MacroState(maps.R_d * maps.M_d(t) * maps.T_lin * y); },
            [maps](double t, const MacroState& target, const MacroState&) {
                return MacroState(maps.T_lin.fullPivLu().solve(maps.M_d(-t) * maps.R_d.fullPivLu().solve(target)));
            }};
    } else {
        if (model->d() != 3)
            throw DomainError("fp_micro_system: the Gaussian lifting needs d = 3");
        sys.label = "fokker-planck-gauss";
        sys.lift = [model](const MacroState& x) { return lift_gauss(*model, x); };
        sys.exact_map = ExactCoarseMap{
            [model, R_d](double t, const MacroState& y) {
                return MacroState(R_d * modal_decay(*model, t) * t_gauss(*model, y));
            },
            [model, R_d](double t, const MacroState& target, const MacroState& guess) {
                const Eigen::VectorXd modal = modal_decay(*model, -t) * R_d.fullPivLu().solve(target);
                return t_gauss_inverse(*model, modal, guess, default_gauss_solver());
            }};
    }
    return sys;
}

struct DriftSample {
    double x2;
    double drift;
    bool converged;
};

// Projection of the three-dimensional Gaussian coarse flow onto the line
// x1 = 1, x3 = x3_fixed: drift = (Phi_tskip(delta; (1, x2, x3))_2 - x2) / delta,
// re-frozen onto the line at every grid point.
inline std::vector<DriftSample> projected_phase_portrait_1d(const SpectralModel& model, double x3_fixed,
                                                            const std::vector<double>& x2_grid,
                                                            double delta, double t_skip,
                                                            const SolverConfig& cfg,
                                                            double relative_tolerance = 1e-2) {
    if (!(x3_fixed > 0.0))
        throw DomainError("projected_phase_portrait_1d: variance must be positive");
    if (!(delta > 0.0))
        throw DomainError("projected_phase_portrait_1d: delta must be positive");
    if (t_skip < 0.0)
        throw DomainError("projected_phase_portrait_1d: t_skip must be nonnegative");
    auto p = [&](double t, const MacroState& y) {
        return Eigen::VectorXd(restrict_moments(model, evolve_density(model, t, lift_gauss(model, y))));
    };
    std::vector<DriftSample> out;
    out.reserve(x2_grid.size());
    for (double x2 : x2_grid) {
        MacroState x(3);
        x << 1.0, x2, x3_fixed;
        DriftSample s{x2, std::numeric_limits<double>::quiet_NaN(), false};
        try {
            const Eigen::VectorXd target = p(t_skip + delta, x);
            // Narrow Gaussians in the wells make P(t_skip; .) nearly singular, so the
            // residual cannot be driven far below its starting size.
            SolverConfig local = cfg;
            local.tolerance = std::max(cfg.tolerance, relative_tolerance * (p(t_skip, x) - target).norm());
            const auto r = newton_solve([&](const MacroState& y) { return MacroState(p(t_skip, y) - target); },
                                        x, local);
            s.converged = r.converged;
            s.drift = (r.y(1) - x2) / delta;
        } catch (const Error&) {
        }
        out.push_back(s);
    }
    return out;
}

} // namespace efree

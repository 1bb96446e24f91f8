#pragma once

// Michaelis-Menten slow-fast backend
//
//   x' = eps [-x + (x + kappa - lambda) y],   y' = x - (x + kappa) y
//
// with asymptotic expansions (in eps) of the slow manifold graph h_eps and of
// the stable fiber projection, and the expansion-based reference flow.

#include "efree/efcore.hpp"
#include "efree/errors.hpp"
#include "efree/integrate.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace efree {

struct MMParams {
    double kappa = 1.0;
    double lam = 0.5;
    double eps = 0.01;
    int expansion_order = 3;

    void validate() const {
        if (!(kappa > 0.0))
            throw DomainError("MMParams: kappa must be positive");
        if (!(eps >= 0.0))
            throw DomainError("MMParams: eps must be nonnegative");
        if (expansion_order < 0 || expansion_order > 3)
            throw DomainError("MMParams: expansion_order must lie in 0..3");
    }
};

// Linear change of coordinates (v, w) = R (x, y).
struct Frame {
    Eigen::Matrix2d rotation = Eigen::Matrix2d::Identity();

    static Frame identity() { return {}; }
    static Frame rotated() {
        Frame f;
        f.rotation << 1.0, 1.0, -1.0, 1.0;
        return f;
    }
    bool is_identity() const { return rotation == Eigen::Matrix2d::Identity(); }
    Eigen::Vector2d to_frame(const Eigen::Vector2d& u) const { return rotation * u; }
    Eigen::Vector2d from_frame(const Eigen::Vector2d& v) const {
        return rotation.partialPivLu().solve(v);
    }
};

inline Eigen::Vector2d mm_vector_field_xy(const MMParams& p, const Eigen::Vector2d& u) {
    const double x = u(0), y = u(1);
    return {p.eps * (-x + (x + p.kappa - p.lam) * y), x - (x + p.kappa) * y};
}

inline Eigen::Vector2d mm_vector_field(const MMParams& p, const Frame& frame,
                                       const Eigen::Vector2d& v) {
    if (frame.is_identity())
        return mm_vector_field_xy(p, v);
    return frame.to_frame(mm_vector_field_xy(p, frame.from_frame(v)));
}

namespace detail {

// Truncated polynomial in (dx, w): c(n, m) multiplies dx^n w^m, where dx is
// the offset from a fixed expansion point. Products drop terms beyond the
// stored degrees; callers keep enough headroom for the derivatives they take.
class Poly2 {
public:
    static constexpr int nx = 11;
    static constexpr int nw = 5;

    Poly2() : c_(Eigen::MatrixXd::Zero(nx, nw)) {}
    static Poly2 constant(double a) {
        Poly2 r;
        r.c_(0, 0) = a;
        return r;
    }

    double& operator()(int n, int m) { return c_(n, m); }
    double operator()(int n, int m) const { return c_(n, m); }

    Poly2 operator+(const Poly2& o) const { return from(c_ + o.c_); }
    Poly2 operator-(const Poly2& o) const { return from(c_ - o.c_); }
    Poly2 operator-() const { return from(-c_); }
    Poly2 operator*(double a) const { return from(c_ * a); }
    Poly2 operator+(double a) const {
        Poly2 r = *this;
        r.c_(0, 0) += a;
        return r;
    }
    Poly2 operator*(const Poly2& o) const {
        Poly2 r;
        for (int n1 = 0; n1 < nx; ++n1)
            for (int m1 = 0; m1 < nw; ++m1) {
                const double a = c_(n1, m1);
                if (a == 0.0)
                    continue;
                for (int n2 = 0; n1 + n2 < nx; ++n2)
                    for (int m2 = 0; m1 + m2 < nw; ++m2)
                        r.c_(n1 + n2, m1 + m2) += a * o.c_(n2, m2);
            }
        return r;
    }

    Poly2 d_dx() const {
        Poly2 r;
        for (int n = 0; n + 1 < nx; ++n)
            r.c_.row(n) = (n + 1) * c_.row(n + 1);
        return r;
    }
    Poly2 d_dw() const {
        Poly2 r;
        for (int m = 0; m + 1 < nw; ++m)
            r.c_.col(m) = (m + 1) * c_.col(m + 1);
        return r;
    }
    // k-th Taylor coefficient in dx as a function of x: f^(k)(x) / k!.
    Poly2 taylor_dx(int k) const {
        Poly2 r;
        for (int n = 0; n + k < nx; ++n)
            r.c_.row(n) = binomial(n + k, k) * c_.row(n + k);
        return r;
    }
    // Coefficient of w^m as a polynomial in dx only.
    Poly2 w_coefficient(int m) const {
        Poly2 r;
        r.c_.col(0) = c_.col(m);
        return r;
    }
    void set_w_coefficient(int m, const Poly2& jet) { c_.col(m) = jet.c_.col(0); }

private:
    Eigen::MatrixXd c_;

    static Poly2 from(Eigen::MatrixXd c) {
        Poly2 r;
        r.c_ = std::move(c);
        return r;
    }
    static double binomial(int n, int k) {
        double r = 1.0;
        for (int i = 1; i <= k; ++i)
            r = r * (n - k + i) / i;
        return r;
    }
};

inline constexpr int max_mm_order = 3;

// Power series in eps with Poly2 coefficients, truncated after eps^max_mm_order.
using EpsSeries = std::array<Poly2, max_mm_order + 1>;

inline EpsSeries eps_mul(const EpsSeries& a, const EpsSeries& b) {
    EpsSeries r{};
    for (int i = 0; i <= max_mm_order; ++i)
        for (int j = 0; i + j <= max_mm_order; ++j)
            r[i + j] = r[i + j] + a[i] * b[j];
    return r;
}

struct MMExpansion {
    // h[k]: eps^k term of the slow manifold graph, as a jet in dx.
    std::array<Poly2, max_mm_order + 1> h;
    // b[k]: eps^k term of the fiber base point x-coordinate, polynomial in
    // (dx, w) with w = y - h_0(x).
    std::array<Poly2, max_mm_order + 1> b;
    // Leftover w^0 part of each order's right-hand side, zero up to round-off
    // when the expansion is consistent.
    std::array<double, max_mm_order + 1> solvability{};
};

// Expands the invariance equation eps p(x,h) h' = x - (x+kappa) h and the
// conjugacy db/dt = eps F(b) order by order around the point x0.
inline MMExpansion mm_expand(const MMParams& p, double x0) {
    const double a = x0 + p.kappa;
    if (!(a > 0.0))
        throw DomainError("mm expansion: requires x > -kappa, got x = " + std::to_string(x0));

    Poly2 X = Poly2::constant(x0);
    X(1, 0) = 1.0;
    // 1 / (x + kappa)
    Poly2 inv;
    for (int n = 0; n < Poly2::nx; ++n)
        inv(n, 0) = ((n % 2) ? -1.0 : 1.0) / std::pow(a, n + 1);
    const Poly2 shifted = X + (p.kappa - p.lam);

    MMExpansion e;
    e.h[0] = X * inv;
    std::array<Poly2, max_mm_order + 1> G;
    G[0] = -X + shifted * e.h[0];
    for (int k = 1; k <= max_mm_order; ++k) {
        Poly2 s;
        for (int i = 0; i <= k - 1; ++i)
            s = s + G[i] * e.h[k - 1 - i].d_dx();
        e.h[k] = -(inv * s);
        G[k] = shifted * e.h[k];
    }

    Poly2 W;
    W(0, 1) = 1.0;
    const Poly2 y = e.h[0] + W;
    const Poly2 pfield = -X + shifted * y;
    const Poly2 h0_prime = e.h[0].d_dx();
    // d/dx at fixed y, expressed in (x, w)
    auto dx_at_fixed_y = [&](const Poly2& f) { return f.d_dx() - h0_prime * f.d_dw(); };

    // w on the slow manifold: w = sum_{i >= 1} eps^i h_i(x)
    EpsSeries w_on_manifold{};
    for (int i = 1; i <= max_mm_order; ++i)
        w_on_manifold[i] = e.h[i];

    e.b[0] = X;
    for (int k = 1; k <= max_mm_order; ++k) {
        // F(b) = -b + (b + kappa - lambda) h_eps(b), expanded in eps with
        // b = x + eta and h_i(x + eta) = sum_n h_i^(n)(x)/n! eta^n.
        EpsSeries eta{};
        for (int j = 1; j < k; ++j)
            eta[j] = e.b[j];
        EpsSeries eta_pow{};
        eta_pow[0] = Poly2::constant(1.0);
        EpsSeries h_of_b{};
        for (int n = 0; n < k; ++n) {
            for (int i = 0; i <= max_mm_order; ++i) {
                const Poly2 coef = e.h[i].taylor_dx(n);
                for (int j = 0; i + j <= max_mm_order; ++j)
                    h_of_b[i + j] = h_of_b[i + j] + coef * eta_pow[j];
            }
            eta_pow = eps_mul(eta_pow, eta);
        }
        EpsSeries bser{};
        for (int j = 0; j < k; ++j)
            bser[j] = e.b[j];
        EpsSeries shifted_b = bser;
        shifted_b[0] = shifted_b[0] + (p.kappa - p.lam);
        const EpsSeries prod = eps_mul(shifted_b, h_of_b);
        const Poly2 q = prod[k - 1] - bser[k - 1];

        const Poly2 rhs = q - pfield * dx_at_fixed_y(e.b[k - 1]);
        e.solvability[k] = rhs(0, 0);

        // -(x + kappa) w d_w b_k = rhs
        Poly2 bk;
        for (int m = 1; m < Poly2::nw; ++m)
            bk.set_w_coefficient(m, inv * rhs.w_coefficient(m) * (-1.0 / m));

        // b(x, h_eps(x)) = x fixes the w^0 part at this order
        EpsSeries on_manifold{};
        for (int j = 1; j < k; ++j) {
            EpsSeries wpow{};
            wpow[0] = Poly2::constant(1.0);
            for (int m = 0; m < Poly2::nw; ++m) {
                const Poly2 cm = e.b[j].w_coefficient(m);
                for (int i = 0; i + j <= max_mm_order; ++i)
                    on_manifold[i + j] = on_manifold[i + j] + cm * wpow[i];
                wpow = eps_mul(wpow, w_on_manifold);
            }
        }
        bk.set_w_coefficient(0, -on_manifold[k]);
        e.b[k] = bk;
    }
    return e;
}

} // namespace detail

// Coefficients h_0(x), ..., h_3(x) of the slow manifold expansion.
inline std::array<double, 4> slow_manifold_coefficients(const MMParams& p, double x) {
    const auto e = detail::mm_expand(p, x);
    return {e.h[0](0, 0), e.h[1](0, 0), e.h[2](0, 0), e.h[3](0, 0)};
}

// y = h_eps(x), truncated after eps^expansion_order.
inline double slow_manifold_graph(const MMParams& p, double x) {
    p.validate();
    if (!(x > -p.kappa))
        throw DomainError("slow_manifold_graph: requires x > -kappa");
    const auto c = slow_manifold_coefficients(p, x);
    double y = 0.0;
    for (int k = p.expansion_order; k >= 0; --k)
        y = y * p.eps + c[k];
    return y;
}

// x-coordinate of the stable fiber base point of u = (x, y), truncated after
// eps^expansion_order.
inline double fiber_base_x(const MMParams& p, const Eigen::Vector2d& u) {
    p.validate();
    if (!(u(0) > -p.kappa))
        throw DomainError("fiber_base_x: requires x > -kappa");
    const auto e = detail::mm_expand(p, u(0));
    const double w = u(1) - e.h[0](0, 0);
    double g = 0.0;
    for (int k = p.expansion_order; k >= 0; --k) {
        double bk = 0.0;
        for (int m = detail::Poly2::nw - 1; m >= 0; --m)
            bk = bk * w + e.b[k](0, m);
        g = g * p.eps + bk;
    }
    return g;
}

// First-order fiber formula in the form printed in the literature,
//   x + eps [(x + kappa - lambda)(y - 1) x + kappa y] / (x + kappa).
// Kept for display; it does not reduce to x on the slow manifold.
inline double fiber_base_x_printed(const MMParams& p, const Eigen::Vector2d& u) {
    const double x = u(0), y = u(1);
    if (!(x > -p.kappa))
        throw DomainError("fiber_base_x_printed: requires x > -kappa");
    return x + p.eps * ((x + p.kappa - p.lam) * (y - 1.0) * x + p.kappa * y) / (x + p.kappa);
}

// Base point (g_x, h_eps(g_x)) on the slow manifold, in (x, y) coordinates.
inline Eigen::Vector2d fiber_projection(const MMParams& p, const Eigen::Vector2d& u) {
    const double gx = fiber_base_x(p, u);
    return {gx, slow_manifold_graph(p, gx)};
}

inline OdeSystem mm_ode(const MMParams& p, const Frame& frame) {
    return {2, [p, frame](const Vector& v) -> Vector {
                return mm_vector_field(p, frame, Eigen::Vector2d(v(0), v(1)));
            }};
}

// L(x) = (x, 0.5), R(v, w) = v, both in the frame's coordinates.
inline MicroSystem<Vector> mm_system(const MMParams& p, const Frame& frame,
                                     const StepperConfig& stepper = {}) {
    p.validate();
    MicroSystem<Vector> sys;
    sys.d = 1;
    sys.label = frame.is_identity() ? "michaelis-menten" : "michaelis-menten-rotated";
    sys.lift = [](const MacroState& x) {
        Vector u(2);
        u << x(0), 0.5;
        return u;
    };
    sys.restrict_to_macro = [](const Vector& u) {
        MacroState x(1);
        x << u(0);
        return x;
    };
    const OdeSystem ode = mm_ode(p, frame);
    sys.evolve = [ode, stepper](double t, const Vector& u) {
        return dopri5_fixed(ode, u, 0.0, t, stepper);
    };
    return sys;
}

// Phi_*(delta; x): the root z of R(g(L(z))) - R(M(delta; g(L(x)))), with g the
// expansion-based fiber projection carried into the frame.
inline double mm_reference_flow(const MMParams& p, const Frame& frame, double delta, double x,
                                const SolverConfig& cfg, const StepperConfig& stepper = {}) {
    cfg.validate();
    if (delta < 0.0)
        throw DomainError("mm_reference_flow: delta must be nonnegative");
    auto g_of_lift = [&](double z) -> Eigen::Vector2d {
        const Eigen::Vector2d u = frame.from_frame(Eigen::Vector2d(z, 0.5));
        return frame.to_frame(fiber_projection(p, u));
    };
    const Vector start = g_of_lift(x);
    const Vector moved = dopri5_fixed(mm_ode(p, frame), start, 0.0, delta, stepper);
    const double target = moved(0);
    MacroState guess(1);
    guess << x;
    const auto res = newton_solve(
        [&](const MacroState& z) {
            MacroState r(1);
            r << g_of_lift(z(0))(0) - target;
            return r;
        },
        guess, cfg);
    if (!res.converged)
        throw ConvergenceError("mm_reference_flow: Newton iteration did not converge",
                               res.residual_norm);
    return res.y(0);
}

} // namespace efree

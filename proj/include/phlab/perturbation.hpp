#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "phlab/geometry.hpp"
#include "phlab/linalg.hpp"
#include "phlab/rng.hpp"

namespace phlab {

// ---------------------------------------------------------------------------
// C-infinity templates built from the exponential smoothstep.
// ---------------------------------------------------------------------------

namespace smooth {

inline double estep(double t) { return t > 0.0 ? std::exp(-1.0 / t) : 0.0; }

// 0 for t<=0, 1 for t>=1, strictly increasing in between; all derivatives
// vanish at the endpoints. S'(1/2) = 2 is the maximal slope.
inline double sstep(double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    double p = estep(t), q = estep(1.0 - t);
    return p / (p + q);
}

inline double sstep_d1(double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    double p = estep(t), q = estep(1.0 - t);
    double pp = p / (t * t), qp = q / ((1.0 - t) * (1.0 - t));
    double den = (p + q) * (p + q);
    return (pp * q + p * qp) / den;
}

inline double sstep_d2(double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    // Analytic second derivative of p/(p+q).
    double p = estep(t), q = estep(1.0 - t);
    double pp = p / (t * t);
    double qp = -q / ((1.0 - t) * (1.0 - t));
    double ppp = pp / (t * t) - 2.0 * p / (t * t * t);
    double qpp = -qp / ((1.0 - t) * (1.0 - t)) - 2.0 * q / std::pow(1.0 - t, 3);
    double s = p + q, sp = pp + qp, spp = ppp + qpp;
    return (ppp * s - p * spp) / (s * s) - 2.0 * sp * (pp * s - p * sp) / (s * s * s);
}

// Plateau bump: 0 outside (a,d), 1 on [b,c].
struct Bump {
    double a, b, c, d;
    double operator()(double t) const {
        if (t <= a || t >= d) return 0.0;
        if (t < b) return sstep((t - a) / (b - a));
        if (t > c) return sstep((d - t) / (d - c));
        return 1.0;
    }
    double d1(double t) const {
        if (t <= a || t >= d) return 0.0;
        if (t < b) return sstep_d1((t - a) / (b - a)) / (b - a);
        if (t > c) return -sstep_d1((d - t) / (d - c)) / (d - c);
        return 0.0;
    }
    double d2(double t) const {
        if (t <= a || t >= d) return 0.0;
        if (t < b) return sstep_d2((t - a) / (b - a)) / ((b - a) * (b - a));
        if (t > c) return sstep_d2((d - t) / (d - c)) / ((d - c) * (d - c));
        return 0.0;
    }
};

// Collar bump used for every non-flow coordinate: vanishes near the
// boundary of its (normalized) range and equals 1 on the central half.
inline const Bump& collar() {
    static const Bump b{1.0 / 16, 1.0 / 4, 3.0 / 4, 15.0 / 16};
    return b;
}

// Kick profile G on [0,1]: a single smooth hump, zero (with all
// derivatives) near 0 and 1. Normalized so G'(1/4) = 1, hence the
// derivative varies by 2 across [1/4, 3/4].
inline const Bump& g_bump() {
    static const Bump b{1.0 / 32, 7.0 / 16, 9.0 / 16, 31.0 / 32};
    return b;
}

inline double g_norm() {
    static const double A = 1.0 / g_bump().d1(0.25);
    return A;
}

inline double G(double w) { return g_norm() * g_bump()(w); }
inline double G_d1(double w) { return g_norm() * g_bump().d1(w); }
inline double G_d2(double w) { return g_norm() * g_bump().d2(w); }

}  // namespace smooth

// Calibration constant of the Hamiltonian amplitude, fixed once: with the
// templates above the time-one flow displaces the center coordinate by
// cF*kappa*eta*G'(w), so the admissible-disk displacement gap is about
// 0.116*kappa*eta (> kappa*eta/10) while the unit-cube C1 deviation stays
// below 0.72*kappa.
inline constexpr double kCalibration = 0.058;

// ---------------------------------------------------------------------------
// Elementary perturbation h^eta_kappa on [0,eta]^s x [0,1]^c x [0,eta]^u.
// Time-one map of the Hamiltonian
//   H(x) = cF * kappa * eta^2 * Phi(x) * beta(x_i) * G(x_j/eta)
// flowing only the (i, j) plane; Phi collects collar bumps over all other
// coordinates, so the first block never moves and the map is the identity
// near the boundary.
// ---------------------------------------------------------------------------

struct ElementaryPerturbation {
    double kappa = 0.05;
    double eta = 0.02;
    SplitDims dims;
    int axis_i = 1;  // center coordinate that receives the kick
    int axis_j = 2;  // unstable coordinate driving it
    double cF = kCalibration;
    int rk4_steps = 32;

    void validate() const {
        if (!(kappa >= 0.0 && kappa < 1.0)) throw std::invalid_argument("kappa out of range");
        if (!(eta > 0.0 && eta < 1.0)) throw std::invalid_argument("eta out of range");
        if (!dims.is_c(axis_i)) throw std::invalid_argument("axis i must be a center coordinate");
        if (!dims.is_u(axis_j)) throw std::invalid_argument("axis j must be an unstable coordinate");
    }

    // Collar product over every coordinate except the two flow axes.
    // Coordinates in eta-wide blocks are normalized by eta first.
    template <int D>
    double phi(const Vec<D>& x) const {
        double f = 1.0;
        for (int k = 0; k < D; ++k) {
            if (k == axis_i || k == axis_j) continue;
            double t = dims.is_c(k) ? x[k] : x[k] / eta;
            f *= smooth::collar()(t);
        }
        return f;
    }

    template <int D>
    double hamiltonian(const Vec<D>& x) const {
        double amp = cF * kappa * eta * eta;
        return amp * phi<D>(x) * smooth::collar()(x[axis_i]) * smooth::G(x[axis_j] / eta);
    }

    // velocity = (dxi, dxj) on the (i,j) plane; other components zero.
    template <int D>
    void velocity(const Vec<D>& x, double dir, Vec<D>& v) const {
        double ph = phi<D>(x);
        double be = smooth::collar()(x[axis_i]);
        double bep = smooth::collar().d1(x[axis_i]);
        double w = x[axis_j] / eta;
        double amp = cF * kappa;
        for (int k = 0; k < D; ++k) v[k] = 0.0;
        v[axis_i] = dir * amp * eta * ph * be * smooth::G_d1(w);
        v[axis_j] = -dir * amp * eta * eta * ph * bep * smooth::G(w);
    }

    // Jacobian of the velocity field (for the variational equation).
    template <int D>
    void velocity_jacobian(const Vec<D>& x, double dir, Mat<D>& J) const {
        double ph = phi<D>(x);
        double be = smooth::collar()(x[axis_i]);
        double bep = smooth::collar().d1(x[axis_i]);
        double bepp = smooth::collar().d2(x[axis_i]);
        double w = x[axis_j] / eta;
        double g = smooth::G(w), gp = smooth::G_d1(w), gpp = smooth::G_d2(w);
        double amp = cF * kappa;
        J = Mat<D>{};
        J(axis_i, axis_i) = amp * eta * ph * bep * gp;
        J(axis_i, axis_j) = amp * ph * be * gpp;
        J(axis_j, axis_i) = -amp * eta * eta * ph * bepp * g;
        J(axis_j, axis_j) = -amp * eta * ph * bep * gp;
        for (int k = 0; k < D; ++k) {
            if (k == axis_i || k == axis_j) continue;
            // d/dx_k of the collar product: differentiate that factor only.
            double t = dims.is_c(k) ? x[k] : x[k] / eta;
            double scale = dims.is_c(k) ? 1.0 : 1.0 / eta;
            double factor = smooth::collar()(t);
            double dfactor = smooth::collar().d1(t) * scale;
            double dph = (factor > 0.0) ? ph / factor * dfactor : 0.0;
            J(axis_i, k) = amp * eta * dph * be * gp;
            J(axis_j, k) = -amp * eta * eta * dph * bep * g;
        }
        if (dir < 0)
            for (double& m : J.m) m = -m;
    }

    // Classical RK4, fixed step count; dir=+1 forward, -1 inverse.
    template <int D>
    Vec<D> flow(Vec<D> x, double dir = 1.0) const {
        if (kappa == 0.0) return x;
        Vec<D> d = flow_displacement<D>(x, dir);
        return x + d;
    }

    // Total time-one displacement, accumulated separately from the state so
    // callers can difference two nearby orbits without cancellation.
    template <int D>
    Vec<D> flow_displacement(const Vec<D>& x0, double dir = 1.0) const {
        Vec<D> disp{};
        if (kappa == 0.0) return disp;
        double h = 1.0 / rk4_steps;
        Vec<D> k1, k2, k3, k4, t, x = x0;
        for (int s = 0; s < rk4_steps; ++s) {
            velocity<D>(x, dir, k1);
            t = x + 0.5 * h * k1;
            velocity<D>(t, dir, k2);
            t = x + 0.5 * h * k2;
            velocity<D>(t, dir, k3);
            t = x + h * k3;
            velocity<D>(t, dir, k4);
            Vec<D> inc = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            disp += inc;
            x = x0 + disp;
        }
        return disp;
    }

    // Flow together with the variational equation dJ/dt = A(x(t)) J.
    template <int D>
    void flow_with_jacobian(Vec<D>& x, Mat<D>& Jout, double dir = 1.0) const {
        Jout = Mat<D>::identity();
        if (kappa == 0.0) return;
        double h = 1.0 / rk4_steps;
        Vec<D> k1, k2, k3, k4, t;
        Mat<D> A1, A2, A3, A4, K1, K2, K3, K4;
        for (int s = 0; s < rk4_steps; ++s) {
            velocity<D>(x, dir, k1);
            velocity_jacobian<D>(x, dir, A1);
            K1 = A1 * Jout;
            t = x + 0.5 * h * k1;
            velocity<D>(t, dir, k2);
            velocity_jacobian<D>(t, dir, A2);
            K2 = A2 * (Jout + 0.5 * h * K1);
            t = x + 0.5 * h * k2;
            velocity<D>(t, dir, k3);
            velocity_jacobian<D>(t, dir, A3);
            K3 = A3 * (Jout + 0.5 * h * K2);
            t = x + h * k3;
            velocity<D>(t, dir, k4);
            velocity_jacobian<D>(t, dir, A4);
            K4 = A4 * (Jout + h * K3);
            x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            Jout = Jout + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4);
        }
    }
};

inline ElementaryPerturbation build_elementary(double kappa, double eta, SplitDims dims,
                                              int axis_i, int axis_j) {
    ElementaryPerturbation h;
    h.kappa = kappa;
    h.eta = eta;
    h.dims = dims;
    h.axis_i = axis_i;
    h.axis_j = axis_j;
    h.validate();
    return h;
}

// ---------------------------------------------------------------------------
// Lemma-style measurements on the elementary map.
// ---------------------------------------------------------------------------

// Max spread of the kicked center coordinate over the image of the vertical
// disk {x^s} x {x^c} x [0,eta]^u, restricted to image points whose unstable
// coordinates lie in [eta/4, 3*eta/4]^u.
template <int D>
double displacement_gap(const ElementaryPerturbation& h, const Vec<D>& disk_base,
                        int samples = 1024) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int m = 0; m <= samples; ++m) {
        Vec<D> x = disk_base;
        double w = static_cast<double>(m) / samples;
        for (int k = 0; k < D; ++k)
            if (h.dims.is_u(k)) x[k] = w * h.eta;
        Vec<D> y = h.flow<D>(x);
        bool admissible = true;
        for (int k = 0; k < D; ++k)
            if (h.dims.is_u(k) && (y[k] < h.eta / 4 || y[k] > 3 * h.eta / 4)) admissible = false;
        if (!admissible) continue;
        lo = std::min(lo, y[h.axis_i]);
        hi = std::max(hi, y[h.axis_i]);
    }
    if (!(hi >= lo)) throw std::runtime_error("displacement_gap: empty admissible image set");
    return hi - lo;
}

struct C1SizeReport {
    double sup_displacement = 0.0;  // unit-cube C0 size
    double c1_deviation = 0.0;      // sup |Dh - Id| (operator norm), unit cube
    double chart_deviation = 0.0;   // sup |D(psi^-1 h psi) - Id| via frame conjugation
    double theta_factor = 0.0;      // measured chart amplification
};

// Deterministic grid plus seeded random points over the rectangle domain.
template <int D>
C1SizeReport estimate_c1_size(const ElementaryPerturbation& h, const Frames<D>& frames,
                              int grid = 6, int random_pts = 200, uint64_t seed = 17) {
    C1SizeReport rep;
    Rng rng(seed);
    Mat<D> B = frames.B, Binv = frames.Binv;
    auto probe = [&](const Vec<D>& x) {
        Vec<D> y = x;
        Mat<D> J;
        h.flow_with_jacobian<D>(y, J);
        rep.sup_displacement = std::max(rep.sup_displacement, norm(y - x));
        Mat<D> Dev = J - Mat<D>::identity();
        double dv = operator_norm(Dev);
        rep.c1_deviation = std::max(rep.c1_deviation, dv);
        Mat<D> chartDev = B * Dev * Binv;
        rep.chart_deviation = std::max(rep.chart_deviation, operator_norm(chartDev));
    };
    // grid over the rectangle [0,eta]^s x [0,1]^c x [0,eta]^u
    std::vector<int> idx(D, 0);
    int total = 1;
    for (int i = 0; i < D; ++i) total *= (grid + 1);
    for (int n = 0; n < total; ++n) {
        int r = n;
        Vec<D> x;
        for (int i = 0; i < D; ++i) {
            int q = r % (grid + 1);
            r /= (grid + 1);
            double t = static_cast<double>(q) / grid;
            x[i] = h.dims.is_c(i) ? t : t * h.eta;
        }
        probe(x);
    }
    for (int n = 0; n < random_pts; ++n) {
        Vec<D> x;
        for (int i = 0; i < D; ++i) {
            double t = rng.uniform01();
            x[i] = h.dims.is_c(i) ? t : t * h.eta;
        }
        probe(x);
    }
    rep.theta_factor = rep.c1_deviation > 0 ? rep.chart_deviation / rep.c1_deviation : 1.0;
    return rep;
}

}  // namespace phlab

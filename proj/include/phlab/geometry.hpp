#pragma once

#include <cmath>
#include <stdexcept>

#include "phlab/linalg.hpp"

namespace phlab {

// ---------------------------------------------------------------------------
// Flat torus T^D = R^D / Z^D. Points live in [0,1)^D; displacement vectors
// use the canonical representative in [-1/2, 1/2)^D.
// ---------------------------------------------------------------------------

inline double wrap01(double x) {
    double y = x - std::floor(x);
    if (y >= 1.0) y = 0.0;  // guards x = -1e-17 rounding to 1.0
    return y;
}

template <int D>
inline Vec<D> wrap(Vec<D> p) {
    for (int i = 0; i < D; ++i) p[i] = wrap01(p[i]);
    return p;
}

// Canonical representative of p - q with every component in [-1/2, 1/2).
template <int D>
inline Vec<D> torus_diff(const Vec<D>& p, const Vec<D>& q) {
    Vec<D> d;
    for (int i = 0; i < D; ++i) {
        double t = p[i] - q[i];
        d[i] = t - std::round(t);
    }
    return d;
}

template <int D>
inline double torus_dist(const Vec<D>& p, const Vec<D>& q) {
    return norm(torus_diff(p, q));
}

// ---------------------------------------------------------------------------
// Splitting bookkeeping: coordinates [0,s) stable, [s,s+c) center,
// [s+c, d) unstable.
// ---------------------------------------------------------------------------

struct SplitDims {
    int s = 1, c = 1, u = 1;
    int d() const { return s + c + u; }
    bool is_s(int i) const { return i < s; }
    bool is_c(int i) const { return i >= s && i < s + c; }
    bool is_u(int i) const { return i >= s + c; }
};

enum class Sigma { S, CS, CU, U };

inline const char* sigma_name(Sigma s) {
    switch (s) {
        case Sigma::S: return "s";
        case Sigma::CS: return "cs";
        case Sigma::CU: return "cu";
        default: return "u";
    }
}

// Does block index i (coordinate slot) belong to the bundle sigma?
inline bool in_bundle(const SplitDims& dims, Sigma sigma, int i) {
    switch (sigma) {
        case Sigma::S: return dims.is_s(i);
        case Sigma::CS: return dims.is_s(i) || dims.is_c(i);
        case Sigma::CU: return dims.is_c(i) || dims.is_u(i);
        default: return dims.is_u(i);
    }
}

// Frame adapted to the splitting: columns of B span E_1 (s block), E_2
// (c block), E_3 (u block) in that order, unit length each. Binv rows are
// the dual covectors, so chart coordinates of a displacement v are Binv*v.
template <int D>
struct Frames {
    Mat<D> B = Mat<D>::identity();
    Mat<D> Binv = Mat<D>::identity();
    SplitDims dims;

    Vec<D> column(int j) const {
        Vec<D> v;
        for (int r = 0; r < D; ++r) v[r] = B(r, j);
        return v;
    }
    Vec<D> to_frame(const Vec<D>& v) const { return Binv * v; }
    Vec<D> from_frame(const Vec<D>& w) const { return B * w; }
};

template <int D>
inline Frames<D> make_frames(const Mat<D>& B, const SplitDims& dims) {
    Frames<D> f;
    f.B = B;
    f.Binv = inverse(B);
    f.dims = dims;
    return f;
}

// ---------------------------------------------------------------------------
// rho-cube chart psi: affine map sending the cube around `center` to
// [0,1]^D, scaling each frame block by 1/rho, with psi(center) = (1/2,...).
// ---------------------------------------------------------------------------

template <int D>
struct ChartedCube {
    Vec<D> center;
    double rho = 0.1;
    Frames<D> frames;

    Vec<D> psi(const Vec<D>& p) const {
        Vec<D> w = frames.to_frame(torus_diff(p, center));
        for (int i = 0; i < D; ++i) w[i] = w[i] / rho + 0.5;
        return w;
    }
    Vec<D> psi_inv(const Vec<D>& c) const {
        Vec<D> w;
        for (int i = 0; i < D; ++i) w[i] = (c[i] - 0.5) * rho;
        return wrap<D>(center + frames.from_frame(w));
    }
    // Chart coordinate along a single frame axis (cheap partial psi).
    double chart_coord(const Vec<D>& p, int axis) const {
        Vec<D> d = torus_diff(p, center);
        double w = 0;
        for (int r = 0; r < D; ++r) w += frames.Binv(axis, r) * d[r];
        return w / rho + 0.5;
    }
    bool contains_chart(const Vec<D>& c, double pad = 0.0) const {
        for (int i = 0; i < D; ++i)
            if (c[i] < -pad || c[i] > 1.0 + pad) return false;
        return true;
    }
};

}  // namespace phlab

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>

namespace phlab {

// Small dense vectors/matrices with compile-time dimension. Everything the
// lab needs stays below D=4, so no external linear algebra is pulled in.

template <int D>
struct Vec {
    std::array<double, D> a{};

    double& operator[](int i) { return a[static_cast<size_t>(i)]; }
    double operator[](int i) const { return a[static_cast<size_t>(i)]; }

    Vec& operator+=(const Vec& o) {
        for (int i = 0; i < D; ++i) a[i] += o.a[i];
        return *this;
    }
    Vec& operator-=(const Vec& o) {
        for (int i = 0; i < D; ++i) a[i] -= o.a[i];
        return *this;
    }
    Vec& operator*=(double t) {
        for (int i = 0; i < D; ++i) a[i] *= t;
        return *this;
    }
};

template <int D>
inline Vec<D> operator+(Vec<D> x, const Vec<D>& y) { return x += y; }
template <int D>
inline Vec<D> operator-(Vec<D> x, const Vec<D>& y) { return x -= y; }
template <int D>
inline Vec<D> operator*(double t, Vec<D> x) { return x *= t; }
template <int D>
inline Vec<D> operator*(Vec<D> x, double t) { return x *= t; }

template <int D>
inline double dot(const Vec<D>& x, const Vec<D>& y) {
    double s = 0;
    for (int i = 0; i < D; ++i) s += x[i] * y[i];
    return s;
}

template <int D>
inline double norm(const Vec<D>& x) { return std::sqrt(dot(x, x)); }

template <int D>
inline Vec<D> normalized(const Vec<D>& x) {
    double n = norm(x);
    if (n == 0) throw std::domain_error("normalized: zero vector");
    return x * (1.0 / n);
}

// Row-major square matrix.
template <int D>
struct Mat {
    std::array<double, D * D> m{};

    double& operator()(int r, int c) { return m[static_cast<size_t>(r * D + c)]; }
    double operator()(int r, int c) const { return m[static_cast<size_t>(r * D + c)]; }

    static Mat identity() {
        Mat I;
        for (int i = 0; i < D; ++i) I(i, i) = 1.0;
        return I;
    }
};

template <int D>
inline Vec<D> operator*(const Mat<D>& M, const Vec<D>& x) {
    Vec<D> y;
    for (int r = 0; r < D; ++r) {
        double s = 0;
        for (int c = 0; c < D; ++c) s += M(r, c) * x[c];
        y[r] = s;
    }
    return y;
}

template <int D>
inline Mat<D> operator*(const Mat<D>& A, const Mat<D>& B) {
    Mat<D> C;
    for (int r = 0; r < D; ++r)
        for (int c = 0; c < D; ++c) {
            double s = 0;
            for (int k = 0; k < D; ++k) s += A(r, k) * B(k, c);
            C(r, c) = s;
        }
    return C;
}

template <int D>
inline Mat<D> operator-(const Mat<D>& A, const Mat<D>& B) {
    Mat<D> C;
    for (int i = 0; i < D * D; ++i) C.m[i] = A.m[i] - B.m[i];
    return C;
}

template <int D>
inline Mat<D> operator+(const Mat<D>& A, const Mat<D>& B) {
    Mat<D> C;
    for (int i = 0; i < D * D; ++i) C.m[i] = A.m[i] + B.m[i];
    return C;
}

template <int D>
inline Mat<D> operator*(double t, const Mat<D>& A) {
    Mat<D> C;
    for (int i = 0; i < D * D; ++i) C.m[i] = t * A.m[i];
    return C;
}

template <int D>
inline Mat<D> transpose(const Mat<D>& A) {
    Mat<D> T;
    for (int r = 0; r < D; ++r)
        for (int c = 0; c < D; ++c) T(c, r) = A(r, c);
    return T;
}

// Gauss-Jordan with partial pivoting; D is tiny so this is exact enough.
template <int D>
inline Mat<D> inverse(const Mat<D>& A) {
    Mat<D> L = A;
    Mat<D> R = Mat<D>::identity();
    for (int col = 0; col < D; ++col) {
        int piv = col;
        for (int r = col + 1; r < D; ++r)
            if (std::fabs(L(r, col)) > std::fabs(L(piv, col))) piv = r;
        if (L(piv, col) == 0.0) throw std::domain_error("inverse: singular matrix");
        if (piv != col)
            for (int c = 0; c < D; ++c) {
                std::swap(L(piv, c), L(col, c));
                std::swap(R(piv, c), R(col, c));
            }
        double d = 1.0 / L(col, col);
        for (int c = 0; c < D; ++c) {
            L(col, c) *= d;
            R(col, c) *= d;
        }
        for (int r = 0; r < D; ++r) {
            if (r == col) continue;
            double f = L(r, col);
            if (f == 0.0) continue;
            for (int c = 0; c < D; ++c) {
                L(r, c) -= f * L(col, c);
                R(r, c) -= f * R(col, c);
            }
        }
    }
    return R;
}

// Spectral norm by power iteration on M^T M. Deterministic start vector.
template <int D>
inline double operator_norm(const Mat<D>& M, int iters = 60) {
    Mat<D> S = transpose(M) * M;
    Vec<D> v;
    for (int i = 0; i < D; ++i) v[i] = 1.0 + 0.1 * i;
    v = normalized(v);
    double lam = 0;
    for (int it = 0; it < iters; ++it) {
        Vec<D> w = S * v;
        double n = norm(w);
        if (n == 0) return 0;
        lam = n;
        v = w * (1.0 / n);
    }
    return std::sqrt(lam);
}

template <int D>
inline double max_abs(const Mat<D>& M) {
    double r = 0;
    for (double x : M.m) r = std::max(r, std::fabs(x));
    return r;
}

// Eigen-decomposition of a symmetric 2x2 matrix: returns (lambda_max,
// lambda_min, unit eigenvector of lambda_max).
struct SymEig2 {
    double lam_max, lam_min;
    Vec<2> v_max, v_min;
};

inline SymEig2 sym_eig2(double a, double b, double c) {
    // [[a, b], [b, c]]
    double tr = a + c;
    double disc = std::sqrt((a - c) * (a - c) + 4 * b * b);
    SymEig2 e;
    e.lam_max = 0.5 * (tr + disc);
    e.lam_min = 0.5 * (tr - disc);
    Vec<2> v;
    if (std::fabs(b) > 1e-300) {
        v[0] = e.lam_max - c;
        v[1] = b;
    } else {
        v[0] = (a >= c) ? 1.0 : 0.0;
        v[1] = (a >= c) ? 0.0 : 1.0;
    }
    e.v_max = normalized(v);
    e.v_min[0] = -e.v_max[1];
    e.v_min[1] = e.v_max[0];
    return e;
}

}  // namespace phlab

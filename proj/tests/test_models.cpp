#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "phlab/models.hpp"
#include "phlab/rng.hpp"

using namespace phlab;

namespace {

Mat<3> cat_x_id() {
    Mat<3> A{};
    A(0, 0) = 2; A(0, 1) = 1;
    A(1, 0) = 1; A(1, 1) = 1;
    A(2, 2) = 1;
    return A;
}

Mat<2> cat2() {
    Mat<2> A{};
    A(0, 0) = 2; A(0, 1) = 1;
    A(1, 0) = 1; A(1, 1) = 1;
    return A;
}

MapModel<3> default_model() { return MapModel<3>::linear(cat_x_id(), SplitDims{1, 1, 1}); }

// Independent eigen oracle: power iteration on A (unstable) and A^{-1}
// (stable), nothing shared with planar_splitting.
struct EigOracle {
    double lam_u, lam_s;
    Vec<2> e_u, e_s;
};

EigOracle power_iteration_oracle(const Mat<2>& A) {
    EigOracle o;
    Mat<2> Ai = inverse(A);
    Vec<2> v{{0.3, 0.7}};
    for (int i = 0; i < 200; ++i) v = normalized(A * v);
    o.e_u = v;
    o.lam_u = dot(A * v, v);
    Vec<2> w{{0.9, -0.1}};
    for (int i = 0; i < 200; ++i) w = normalized(Ai * w);
    o.e_s = w;
    o.lam_s = dot(A * w, w);
    return o;
}

}  // namespace

TEST_CASE("cat map evaluation at rational points is exact") {
    auto f = default_model();
    Vec<3> zero{};
    Vec<3> img = f.eval(zero);
    REQUIRE(img[0] == 0.0);
    REQUIRE(img[1] == 0.0);
    REQUIRE(img[2] == 0.0);

    Vec<3> half{{0.5, 0.5, 0.25}};
    img = f.eval(half);
    REQUIRE(img[0] == 0.5);  // (1.5, 1.0) mod 1
    REQUIRE(img[1] == 0.0);
    REQUIRE(img[2] == 0.25);
}

TEST_CASE("skew product fiber map and derivative") {
    auto m = MapModel<3>::skew(cat2(), 0.1, 2);
    Vec<3> p{{0.0, 0.0, 0.25}};
    Vec<3> q = m.eval(p);
    // theta' = 0.25 - 0.1*sin(pi)/(2 pi) = 0.25
    REQUIRE(q[2] == Catch::Approx(0.25).margin(1e-15));

    Mat<3> J = m.derivative(Vec<3>{});
    REQUIRE(J(2, 2) == Catch::Approx(0.8).margin(1e-15));  // 1 - 0.1*2*cos(0)

    // invertibility of the fiber map
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        Vec<3> x{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        Vec<3> y = m.eval(x);
        Vec<3> back = m.eval_inverse(y);
        REQUIRE(torus_dist(back, x) < 1e-12);
    }

    REQUIRE_THROWS_AS(MapModel<3>::skew(cat2(), 0.5, 2), std::invalid_argument);
}

TEST_CASE("skew product with eps = 0 equals linear x identity pointwise") {
    auto s = MapModel<3>::skew(cat2(), 0.0, 3);
    auto l = default_model();
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        Vec<3> p{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        Vec<3> a = s.eval(p), b = l.eval(p);
        REQUIRE(a[0] == b[0]);
        REQUIRE(a[1] == b[1]);
        REQUIRE(a[2] == b[2]);
    }
}

TEST_CASE("exact splitting matches the eigen oracle") {
    auto f = default_model();
    Planar2Splitting sp;
    Frames<3> fr = f.exact_splitting(&sp);

    EigOracle o = power_iteration_oracle(cat2());
    double golden = (3.0 + std::sqrt(5.0)) / 2.0;
    REQUIRE(sp.lam_u == Catch::Approx(golden).epsilon(1e-12));
    REQUIRE(o.lam_u == Catch::Approx(golden).epsilon(1e-9));

    // unstable frame column (index 2) vs oracle direction, up to sign
    Vec<3> eu = fr.column(2);
    double align = std::fabs(eu[0] * o.e_u[0] + eu[1] * o.e_u[1]);
    REQUIRE(align == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(eu[2] == 0.0);

    // center direction is the fiber exactly
    Vec<3> ec = fr.column(1);
    REQUIRE(ec[0] == 0.0);
    REQUIRE(ec[1] == 0.0);
    REQUIRE(ec[2] == 1.0);

    // orthogonality angle between e_s and e_u agrees with the oracle
    Vec<3> es = fr.column(0);
    double cos_impl = std::fabs(es[0] * eu[0] + es[1] * eu[1]);
    double cos_oracle = std::fabs(dot(o.e_s, o.e_u));
    REQUIRE(cos_impl == Catch::Approx(cos_oracle).margin(1e-9));
    // the cat matrix is symmetric, so the directions are orthogonal
    REQUIRE(cos_impl < 1e-12);

    auto comp = compose_global<3>(f, {}, 0.1, 0.02);
    REQUIRE_THROWS_AS(comp.exact_splitting(), std::domain_error);
}

TEST_CASE("charts: homothety, center, round trip") {
    auto f = default_model();
    Vec<3> center{{0.3, 0.7, 0.1}};
    double rho = 0.2;
    auto chart = make_chart(f, center, rho);

    Vec<3> mid = chart.psi(center);
    REQUIRE(mid[0] == Catch::Approx(0.5).margin(1e-14));
    REQUIRE(mid[1] == Catch::Approx(0.5).margin(1e-14));
    REQUIRE(mid[2] == Catch::Approx(0.5).margin(1e-14));

    // displacement (rho/4) e_u maps to (0.5, 0.5, 0.75)
    Frames<3> fr = f.exact_splitting();
    Vec<3> p = wrap<3>(center + (rho / 4.0) * fr.column(2));
    Vec<3> c = chart.psi(p);
    REQUIRE(c[0] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(c[1] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(c[2] == Catch::Approx(0.75).margin(1e-12));

    Rng rng(23);
    for (int i = 0; i < 100; ++i) {
        Vec<3> cc{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        Vec<3> q = chart.psi_inv(cc);
        Vec<3> back = chart.psi(q);
        for (int k = 0; k < 3; ++k) REQUIRE(back[k] == Catch::Approx(cc[k]).margin(1e-12));
    }

    REQUIRE_THROWS_AS(make_chart(f, center, 0.3), std::invalid_argument);
}

TEST_CASE("eval/derivative consistency at rate O(h)") {
    auto lin = default_model();
    auto skew = MapModel<3>::skew(cat2(), 0.1, 3, 0.123);
    std::vector<MapModel<3>> models{lin, skew};
    Rng rng(37);
    for (const auto& m : models) {
        for (int trial = 0; trial < 50; ++trial) {
            Vec<3> p{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
            Vec<3> v = normalized(Vec<3>{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}});
            Mat<3> J = m.derivative(p);
            double prev_err = -1;
            for (double h : {1e-3, 1e-4, 1e-5}) {
                Vec<3> fp = m.eval(wrap<3>(p + h * v));
                Vec<3> f0 = m.eval(p);
                Vec<3> fd = torus_diff(fp, f0) * (1.0 / h);
                double err = norm(fd - J * v);
                if (prev_err >= 0) REQUIRE(err < prev_err * 0.5 + 1e-10);
                prev_err = err;
            }
            REQUIRE(prev_err < 1e-3);
        }
    }
}

TEST_CASE("composite equals base off the rectangles, bitwise") {
    auto f = default_model();
    LocalPatch<3> patch;
    patch.cube_center = Vec<3>{{0.3, 0.4, 0.2}};
    patch.rho = 0.2;
    patch.offset = Vec<3>{{0.45, 0.0, 0.45}};
    auto g = compose_global<3>(f, {patch}, 0.2, 0.1);

    ChartedCube<3> cu{patch.cube_center, patch.rho, f.exact_splitting()};

    Rng rng(41);
    int inside = 0, outside = 0;
    for (int i = 0; i < 4000; ++i) {
        Vec<3> p{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        Vec<3> q = f.eval(p);
        Vec<3> c = cu.psi(q);
        bool in_rect = c[0] >= 0.45 && c[0] < 0.55 && c[1] >= 0.0 && c[1] < 1.0 &&
                       c[2] >= 0.45 && c[2] < 0.55;
        Vec<3> qg = g.eval(p);
        if (in_rect) {
            ++inside;
        } else {
            ++outside;
            REQUIRE(qg[0] == q[0]);
            REQUIRE(qg[1] == q[1]);
            REQUIRE(qg[2] == q[2]);
        }
    }
    REQUIRE(outside > 0);

    // interior hits on the kicking zone of the profile (G' is large there)
    for (int i = 0; i < 50; ++i) {
        Vec<3> c{{rng.uniform(0.47, 0.53), rng.uniform(0.3, 0.7), rng.uniform(0.465, 0.48)}};
        Vec<3> q = cu.psi_inv(c);
        Vec<3> p = f.eval_inverse(q);
        Vec<3> qg = g.eval(p);
        REQUIRE(torus_dist(qg, q) > 1e-9);
        ++inside;
    }
    REQUIRE(inside >= 50);
}

TEST_CASE("composite derivative agrees with central differences") {
    auto f = default_model();
    LocalPatch<3> patch;
    patch.cube_center = Vec<3>{{0.3, 0.4, 0.2}};
    patch.rho = 0.2;
    patch.offset = Vec<3>{{0.45, 0.0, 0.45}};
    auto g = compose_global<3>(f, {patch}, 0.2, 0.1);
    ChartedCube<3> cu{patch.cube_center, patch.rho, f.exact_splitting()};

    Rng rng(43);
    for (int i = 0; i < 10; ++i) {
        Vec<3> c{{rng.uniform(0.47, 0.53), rng.uniform(0.3, 0.7), rng.uniform(0.47, 0.53)}};
        Vec<3> q = cu.psi_inv(c);
        Vec<3> p = f.eval_inverse(q);
        Mat<3> J = g.derivative(p);
        double h = 1e-6;
        for (int axis = 0; axis < 3; ++axis) {
            Vec<3> v{};
            v[axis] = 1.0;
            Vec<3> fp = g.eval(wrap<3>(p + h * v));
            Vec<3> fm = g.eval(wrap<3>(p + (-h) * v));
            Vec<3> fd = torus_diff(fp, fm) * (1.0 / (2 * h));
            Vec<3> Jv = J * v;
            REQUIRE(norm(fd - Jv) < 1e-6);
        }
    }
}

TEST_CASE("composite inverse round trip") {
    auto f = default_model();
    LocalPatch<3> patch;
    patch.cube_center = Vec<3>{{0.55, 0.15, 0.8}};
    patch.rho = 0.15;
    patch.offset = Vec<3>{{0.2, 0.0, 0.3}};
    auto g = compose_global<3>(f, {patch}, 0.25, 0.12);
    Rng rng(47);
    for (int i = 0; i < 1000; ++i) {
        Vec<3> p{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        Vec<3> back = g.eval_inverse(g.eval(p));
        REQUIRE(torus_dist(back, p) < 1e-10);
    }
}

TEST_CASE("model JSON round trip preserves the hash") {
    auto f = default_model();
    auto j = f.to_json();
    auto f2 = MapModel<3>::from_json(j);
    REQUIRE(f.hash() == f2.hash());

    auto s = MapModel<3>::skew(cat2(), 0.1, 3, 0.25);
    REQUIRE(MapModel<3>::from_json(s.to_json()).hash() == s.hash());

    LocalPatch<3> patch;
    patch.cube_center = Vec<3>{{0.55, 0.15, 0.8}};
    patch.rho = 0.15;
    patch.offset = Vec<3>{{0.2, 0.0, 0.3}};
    auto g = compose_global<3>(f, {patch}, 0.25, 0.12);
    auto g2 = MapModel<3>::from_json(g.to_json());
    REQUIRE(g.hash() == g2.hash());
    Rng rng(53);
    for (int i = 0; i < 100; ++i) {
        Vec<3> p{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        REQUIRE(torus_dist(g.eval(p), g2.eval(p)) == 0.0);
    }
}

TEST_CASE("overlapping rectangles are rejected") {
    auto f = default_model();
    LocalPatch<3> a, b;
    a.cube_center = b.cube_center = Vec<3>{{0.5, 0.5, 0.5}};
    a.rho = b.rho = 0.2;
    a.offset = Vec<3>{{0.4, 0.0, 0.4}};
    b.offset = Vec<3>{{0.45, 0.0, 0.45}};
    REQUIRE_THROWS_AS(compose_global<3>(f, {a, b}, 0.1, 0.1), std::invalid_argument);
    // disjoint in s is fine even with the same slice band
    b.offset = Vec<3>{{0.6, 0.0, 0.4}};
    REQUIRE_NOTHROW(compose_global<3>(f, {a, b}, 0.1, 0.1));
}

TEST_CASE("non-unimodular matrices are rejected") {
    Mat<3> M{};
    M(0, 0) = 2; M(1, 1) = 1; M(2, 2) = 1;
    REQUIRE_THROWS_AS(MapModel<3>::linear(M, SplitDims{1, 1, 1}), std::invalid_argument);
}

TEST_CASE("T^2 cat model splits with dims (1,0,1)") {
    auto f2 = MapModel<2>::linear(cat2(), SplitDims{1, 0, 1});
    Planar2Splitting sp;
    f2.exact_splitting(&sp);
    REQUIRE(sp.lam_u == Catch::Approx((3 + std::sqrt(5.0)) / 2).epsilon(1e-12));
    REQUIRE(sp.lam_s == Catch::Approx((3 - std::sqrt(5.0)) / 2).epsilon(1e-12));
    Vec<2> p{{0.5, 0.5}};
    Vec<2> q = f2.eval(p);
    REQUIRE(q[0] == 0.5);
    REQUIRE(q[1] == 0.0);
}

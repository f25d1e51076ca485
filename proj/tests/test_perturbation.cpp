#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "phlab/models.hpp"
#include "phlab/perturbation.hpp"
#include "phlab/rng.hpp"

using namespace phlab;

namespace {
const SplitDims kDims{1, 1, 1};

ElementaryPerturbation make_h(double kappa, double eta) {
    return build_elementary(kappa, eta, kDims, 1, 2);
}

Frames<3> cat_frames() {
    Mat<3> A{};
    A(0, 0) = 2; A(0, 1) = 1;
    A(1, 0) = 1; A(1, 1) = 1;
    A(2, 2) = 1;
    return MapModel<3>::linear(A, kDims).exact_splitting();
}
}  // namespace

TEST_CASE("kappa = 0 gives the identity exactly") {
    auto h = make_h(0.0, 0.05);
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
        Vec<3> y = h.flow<3>(x);
        REQUIRE(y[0] == x[0]);
        REQUIRE(y[1] == x[1]);
        REQUIRE(y[2] == x[2]);
    }
}

TEST_CASE("boundary collar is fixed pointwise") {
    auto h = make_h(0.1, 0.05);
    Rng rng(7);
    auto expect_fixed = [&](const Vec<3>& x) {
        Vec<3> y = h.flow<3>(x);
        REQUIRE(y[0] == x[0]);
        REQUIRE(y[1] == x[1]);
        REQUIRE(y[2] == x[2]);
    };
    for (int i = 0; i < 50; ++i) {
        double eta = h.eta;
        Vec<3> x{{rng.uniform01() * eta, rng.uniform01(), rng.uniform01() * eta}};
        x[0] = rng.uniform(0.0, eta / 16.0);
        expect_fixed(x);
        x[0] = rng.uniform(15.0 * eta / 16.0, eta);
        expect_fixed(x);
        x = Vec<3>{{rng.uniform01() * eta, rng.uniform(0.0, 1.0 / 16), rng.uniform01() * eta}};
        expect_fixed(x);
        x[1] = rng.uniform(15.0 / 16, 1.0);
        expect_fixed(x);
        x = Vec<3>{{rng.uniform01() * eta, rng.uniform01(), rng.uniform(0.0, eta / 32)}};
        expect_fixed(x);
        x[2] = rng.uniform(31.0 * eta / 32, eta);
        expect_fixed(x);
    }
}

TEST_CASE("hamiltonian energy is conserved along the flow") {
    auto h = make_h(0.1, 0.05);
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
        double before = h.hamiltonian<3>(x);
        double after = h.hamiltonian<3>(h.flow<3>(x));
        REQUIRE(std::fabs(after - before) < 1e-10);
    }
}

TEST_CASE("first coordinate never changes (bitwise)") {
    auto h = make_h(0.3, 0.1);
    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
        Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
        Vec<3> y = h.flow<3>(x);
        REQUIRE(y[0] == x[0]);
    }
}

TEST_CASE("backward flow inverts forward flow") {
    auto h = make_h(0.2, 0.08);
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
        Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
        Vec<3> y = h.flow<3>(x, +1.0);
        Vec<3> b = h.flow<3>(y, -1.0);
        REQUIRE(norm(b - x) < 1e-12);
    }
}

TEST_CASE("displacement gap beats kappa*eta/10 on the admissible family") {
    double kappa = 0.1, eta = 0.05;
    auto h = make_h(kappa, eta);
    Vec<3> base{{eta / 2, 0.5, 0.0}};
    double gap = displacement_gap<3>(h, base);
    REQUIRE(gap > kappa * eta / 10.0);  // = 5e-4
    REQUIRE(gap > 5e-4);

    for (double xs : {0.25 * eta, 0.5 * eta, 0.75 * eta})
        for (double xc : {0.25, 0.4, 0.6, 0.75}) {
            Vec<3> b{{xs, xc, 0.0}};
            REQUIRE(displacement_gap<3>(h, b) > kappa * eta / 10.0);
        }
}

TEST_CASE("gap vanishes on the bump's zero set") {
    auto h = make_h(0.1, 0.05);
    Vec<3> base{{h.eta / 64.0, 0.5, 0.0}};
    double gap = displacement_gap<3>(h, base);
    REQUIRE(gap == 0.0);
}

TEST_CASE("gap scales linearly in kappa") {
    double eta = 0.05;
    Vec<3> base{{eta / 2, 0.5, 0.0}};
    double g1 = displacement_gap<3>(make_h(0.02, eta), base);
    double g2 = displacement_gap<3>(make_h(0.04, eta), base);
    REQUIRE(g2 / g1 > 1.8);
    REQUIRE(g2 / g1 < 2.2);
}

TEST_CASE("C1 size: identity at kappa = 0, bounded by 10 kappa otherwise") {
    Frames<3> fr = cat_frames();
    auto rep0 = estimate_c1_size<3>(make_h(0.0, 0.02), fr);
    REQUIRE(rep0.c1_deviation < 1e-10);
    REQUIRE(rep0.sup_displacement < 1e-14);

    for (double kappa : {0.01, 0.05, 0.1}) {
        auto rep = estimate_c1_size<3>(make_h(kappa, 0.02), fr);
        REQUIRE(rep.c1_deviation <= 10.0 * kappa);
        REQUIRE(rep.c1_deviation > 0.1 * kappa);  // the kick really is there
    }
}

TEST_CASE("chart-conjugated deviation is rho independent") {
    // Charts are affine with one frame matrix for every rho, so the rho
    // scalings cancel in the conjugation; the 20% contract holds with slack.
    Frames<3> fr = cat_frames();
    auto h = make_h(0.05, 0.02);
    double base_dev = -1;
    for (double rho : {0.02, 0.05, 0.1}) {
        (void)rho;
        auto rep = estimate_c1_size<3>(h, fr);
        if (base_dev < 0) base_dev = rep.chart_deviation;
        REQUIRE(rep.chart_deviation == Catch::Approx(base_dev).epsilon(0.2));
    }
}

TEST_CASE("in-plane Jacobian determinant is 1 (area preservation)") {
    auto h = make_h(0.1, 0.05);
    Rng rng(29);
    for (int i = 0; i < 100; ++i) {
        Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
        Mat<3> J;
        Vec<3> y = x;
        h.flow_with_jacobian<3>(y, J);
        double det2 = J(1, 1) * J(2, 2) - J(1, 2) * J(2, 1);
        REQUIRE(std::fabs(det2 - 1.0) < 1e-8);
    }
}

TEST_CASE("variational jacobian matches finite differences") {
    auto h = make_h(0.2, 0.1);
    Rng rng(31);
    for (int i = 0; i < 20; ++i) {
        Vec<3> x{{rng.uniform(0.1, 0.9) * h.eta, rng.uniform(0.2, 0.8),
                  rng.uniform(0.1, 0.9) * h.eta}};
        Mat<3> J;
        Vec<3> y = x;
        h.flow_with_jacobian<3>(y, J);
        double step = 1e-7;
        for (int a = 0; a < 3; ++a) {
            Vec<3> xp = x, xm = x;
            xp[a] += step;
            xm[a] -= step;
            Vec<3> fp = h.flow<3>(xp), fm = h.flow<3>(xm);
            for (int r = 0; r < 3; ++r) {
                double fd = (fp[r] - fm[r]) / (2 * step);
                REQUIRE(std::fabs(fd - J(r, a)) < 1e-5);
            }
        }
    }
}

TEST_CASE("Dh preserves chart-constant cu cones at schedule widths") {
    auto h = make_h(0.05, 0.02);
    Rng rng(37);
    SplitDims dims = kDims;
    double dev_bound = 12.5 * kCalibration * h.kappa;
    for (double epsw : {0.05, 0.075, 0.1, 0.25}) {
        double worst = 0.0;
        for (int i = 0; i < 200; ++i) {
            Vec<3> x{{rng.uniform01() * h.eta, rng.uniform01(), rng.uniform01() * h.eta}};
            Mat<3> J;
            Vec<3> y = x;
            h.flow_with_jacobian<3>(y, J);
            for (int r = 0; r < 16; ++r) {
                double phi = 2 * M_PI * r / 16;
                Vec<3> v{};
                v[dims.s] = std::cos(phi);           // c component
                v[dims.s + dims.c] = std::sin(phi);  // u component
                v[0] = epsw * (rng.coin() ? 1.0 : -1.0);
                Vec<3> w = J * v;
                double s_part = std::fabs(w[0]);
                double cu_part = std::hypot(w[1], w[2]);
                worst = std::max(worst, s_part / cu_part);
            }
        }
        // Dh never touches the s component; the cu part can shrink by at
        // most the C1 deviation, so the width grows by that factor only.
        REQUIRE(worst <= epsw / (1.0 - dev_bound) + 1e-12);
    }
}

TEST_CASE("measured calibration constants stay inside the frozen budget") {
    // The schedule is built around gap ~ 0.116*kappa*eta and C1 deviation
    // below 0.72*kappa; pin both so a template change cannot drift silently.
    double kappa = 0.05, eta = 0.02;
    auto h = make_h(kappa, eta);
    Vec<3> base{{eta / 2, 0.5, 0.0}};
    double gap = displacement_gap<3>(h, base);
    REQUIRE(gap > 0.11 * kappa * eta);
    REQUIRE(gap < 0.13 * kappa * eta);

    auto rep = estimate_c1_size<3>(h, cat_frames());
    REQUIRE(rep.c1_deviation < 0.72 * kappa);
}

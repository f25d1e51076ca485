#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "phlab/cones.hpp"
#include "phlab/laminations.hpp"
#include "phlab/models.hpp"
#include "phlab/rng.hpp"

using namespace phlab;

namespace {
MapModel<3> cat_x_id() {
    Mat<3> A{};
    A(0, 0) = 2; A(0, 1) = 1;
    A(1, 0) = 1; A(1, 1) = 1;
    A(2, 2) = 1;
    return MapModel<3>::linear(A, SplitDims{1, 1, 1});
}

const double kLamU = (3 + std::sqrt(5.0)) / 2;

// exact affine leaf sampler for the linear model
std::vector<Vec<3>> affine_leaf(const Vec<3>& x, const Vec<3>& dir, double radius, int n) {
    std::vector<Vec<3>> pts;
    for (int k = -n; k <= n; ++k)
        pts.push_back(wrap<3>(x + (radius * k / n) * dir));
    return pts;
}
}  // namespace

TEST_CASE("linear model leaves coincide with exact affine leaves") {
    auto f = cat_x_id();
    Frames<3> fr = f.exact_splitting();
    Vec<3> x{{0.37, 0.21, 0.55}};
    double t = 0.15;

    auto du = local_unstable_disk<3>(f, x, t);
    auto oracle_u = affine_leaf(x, fr.column(2), t, 400);
    REQUIRE(hausdorff<3>(du.pts, oracle_u) < 1e-8);

    auto ds = local_stable_disk<3>(f, x, t);
    auto oracle_s = affine_leaf(x, fr.column(0), t, 400);
    REQUIRE(hausdorff<3>(ds.pts, oracle_s) < 1e-8);
}

TEST_CASE("radius additivity: endpoint sits at leafwise distance t") {
    auto f = cat_x_id();
    Vec<3> x{{0.1, 0.8, 0.3}};
    double t = 0.12;
    auto du = local_unstable_disk<3>(f, x, t);
    REQUIRE(du.arc_max() >= t - 1e-12);
    REQUIRE(-du.arc_min() >= t - 1e-12);
    Vec<3> endpoint = point_at_arc<3>(f, du, du.arc_max());
    double d = leaf_distance<3>(du, x, endpoint);
    REQUIRE(d == Catch::Approx(t).epsilon(1e-6));
}

TEST_CASE("trapping factor matches 1/lambda_u within 2 percent") {
    auto f = cat_x_id();
    Vec<3> x{{0.62, 0.05, 0.9}};
    auto ds = local_stable_disk<3>(f, x, 0.1);
    double lam = trapping_factor<3>(f, ds);
    REQUIRE(lam == Catch::Approx(1.0 / kLamU).epsilon(0.02));

    auto du = local_unstable_disk<3>(f, x, 0.1);
    double lam_u_back = trapping_factor<3>(f, du);
    REQUIRE(lam_u_back == Catch::Approx(1.0 / kLamU).epsilon(0.02));
}

TEST_CASE("stable disk points converge exponentially under iteration") {
    auto f = cat_x_id();
    Vec<3> x{{0.25, 0.5, 0.75}};
    auto ds = local_stable_disk<3>(f, x, 0.1);
    Vec<3> y = ds.pts.back();
    double d0 = torus_dist(x, y);
    Vec<3> px = x, py = y;
    // exponential fit over the range where the signal dominates round-off
    double sum_n = 0, sum_l = 0, sum_nn = 0, sum_nl = 0;
    int fit_pts = 0;
    for (int n = 1; n <= 20; ++n) {
        px = f.eval(px);
        py = f.eval(py);
        double dn = torus_dist(px, py);
        if (n <= 12) {
            REQUIRE(dn <= 1.05 * d0 * std::pow(1.0 / kLamU, n));
            sum_n += n;
            sum_l += std::log(dn);
            sum_nn += n * n;
            sum_nl += n * std::log(dn);
            ++fit_pts;
        } else {
            // beyond the round-off floor of forward iteration
            REQUIRE(dn <= 1e-6);
        }
    }
    double slope = (fit_pts * sum_nl - sum_n * sum_l) / (fit_pts * sum_nn - sum_n * sum_n);
    REQUIRE(slope == Catch::Approx(-std::log(kLamU)).epsilon(0.02));
}

TEST_CASE("leaf distance: identity, straightness, refinement stability") {
    auto f = cat_x_id();
    Vec<3> x{{0.4, 0.4, 0.4}};
    auto du = local_unstable_disk<3>(f, x, 0.1);

    REQUIRE(leaf_distance<3>(du, x, x) == Catch::Approx(0.0).margin(1e-12));

    // straight leaf: arc equals the Euclidean lift distance
    Vec<3> p = du.pts[du.pts.size() / 4];
    double arc = leaf_distance<3>(du, x, p);
    REQUIRE(arc == Catch::Approx(torus_dist(x, p)).epsilon(1e-9));

    // halving the mesh step changes values by < 1e-6 relative
    LeafOptions fine;
    fine.mesh = 1024;
    auto du2 = local_unstable_disk<3>(f, x, 0.1, fine);
    double arc2 = leaf_distance<3>(du2, x, p);
    REQUIRE(arc2 == Catch::Approx(arc).epsilon(1e-6));

    Vec<3> off = wrap<3>(x + Vec<3>{{0.01, 0.0, 0.0}});
    REQUIRE_THROWS_AS(leaf_distance<3>(du, x, off), std::invalid_argument);
}

TEST_CASE("composite leaves: off-patch orbits give the base leaf") {
    auto f = cat_x_id();
    LocalPatch<3> patch;
    patch.cube_center = Vec<3>{{0.3, 0.4, 0.2}};
    patch.rho = 0.1;
    patch.offset = Vec<3>{{0.45, 0.0, 0.45}};
    auto g = compose_global<3>(f, {patch}, 0.05, 0.02);

    // pick a point whose relevant orbit segment avoids the single patch
    Vec<3> x{{0.62, 0.05, 0.9}};
    LeafOptions opt;
    opt.validate = true;
    auto du_g = local_unstable_disk<3>(g, x, 0.05, opt);
    auto du_f = local_unstable_disk<3>(f, x, 0.05);
    bool touched = false;
    for (const auto& q : du_g.pts)
        if (g.locate_patch(q).hit) touched = true;
    if (!touched) {
        REQUIRE(hausdorff<3>(du_g.pts, du_f.pts) < 1e-8);
    }
    // graph-transform fixed point: one more pullback step moves samples
    // by less than 10 * tol
    LeafOptions deeper;
    deeper.pullback = kCompositePullback + 1;
    auto du_deep = local_unstable_disk<3>(g, x, 0.05, deeper);
    double worst = 0;
    for (size_t k = 0; k < du_g.pts.size(); k += 32) {
        double best = 1e9;
        for (const auto& q : du_deep.pts) best = std::min(best, torus_dist(du_g.pts[k], q));
        worst = std::max(worst, best);
    }
    REQUIRE(worst < 10.0 * 1e-9);
}

TEST_CASE("tangency: segment directions lie in the certified cones") {
    auto f = cat_x_id();
    Frames<3> fr = f.exact_splitting();
    auto cone_u = make_cone_field<3>(fr, Sigma::U, 0.075);
    Vec<3> x{{0.15, 0.35, 0.77}};
    auto du = local_unstable_disk<3>(f, x, 0.1);
    for (size_t k = 0; k + 1 < du.pts.size(); ++k) {
        Vec<3> seg = torus_diff(du.pts[k + 1], du.pts[k]);
        REQUIRE(cone_contains(cone_u, seg));
    }
    REQUIRE(du.lipschitz < 1e-9);  // exact eigen-line
}

TEST_CASE("coherence: nested radii agree on the smaller disk") {
    auto f = cat_x_id();
    Vec<3> x{{0.52, 0.13, 0.44}};
    auto small = local_unstable_disk<3>(f, x, 0.05);
    auto big = local_unstable_disk<3>(f, x, 0.12);
    double worst = 0;
    for (const auto& p : small.pts)
        worst = std::max(worst, point_to_polyline<3>(p, big.pts));
    REQUIRE(worst < 1e-6);
}

TEST_CASE("product projection: closed form on the linear model") {
    auto f = cat_x_id();
    Frames<3> fr = f.exact_splitting();
    Rng rng(97);
    double gamma = 0.12;
    for (int trial = 0; trial < 20; ++trial) {
        Vec<3> y{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        auto dsk = make_cu_disk<3>(f, y, gamma);
        // x near the disk center, on its stable line shifted a bit
        double a = rng.uniform(-0.03, 0.03), b = rng.uniform(-0.03, 0.03);
        Vec<3> x = wrap<3>(y + a * fr.column(0) + b * fr.column(1));
        Vec<3> z = product_projection<3>(f, x, dsk, gamma);
        // closed form: z = x - a e_s (stable line meets the cu-plane of y)
        Vec<3> z_exact = wrap<3>(x + (-a) * fr.column(0));
        REQUIRE(torus_dist(z, z_exact) < 1e-8);
        // Prop 4.3 bounds
        REQUIRE(torus_dist(x, z) <= 2.0 * torus_dist(x, y) + 1e-12);
    }

    // x on the disk: projection returns x
    Vec<3> y{{0.5, 0.5, 0.5}};
    auto dsk = make_cu_disk<3>(f, y, gamma);
    Vec<3> x = wrap<3>(y + 0.02 * fr.column(1));
    Vec<3> z = product_projection<3>(f, x, dsk, gamma);
    REQUIRE(torus_dist(z, x) < 1e-9);
}

TEST_CASE("product projection error cases") {
    auto f = cat_x_id();
    Frames<3> fr = f.exact_splitting();
    Vec<3> y{{0.5, 0.5, 0.5}};
    auto dsk = make_cu_disk<3>(f, y, 0.01);
    // x too far: the stable disk cannot reach the patch
    Vec<3> x = wrap<3>(y + Vec<3>{{0.3, 0.3, 0.3}});
    REQUIRE_THROWS(product_projection<3>(f, x, dsk, 0.02));
    (void)fr;
}

TEST_CASE("skew product leaves are exact horizontal lines") {
    Mat<2> A2{};
    A2(0, 0) = 2; A2(0, 1) = 1;
    A2(1, 0) = 1; A2(1, 1) = 1;
    auto m = MapModel<3>::skew(A2, 0.1, 3);
    Vec<3> x{{0.3, 0.6, 0.2}};
    auto du = local_unstable_disk<3>(m, x, 0.1);
    for (const auto& p : du.pts) REQUIRE(p[2] == Catch::Approx(x[2]).margin(1e-12));
    double lam = trapping_factor<3>(m, du);
    REQUIRE(lam == Catch::Approx(1.0 / kLamU).epsilon(0.02));
}

TEST_CASE("leaf CSV dump round-trips through the filesystem") {
    auto f = cat_x_id();
    Vec<3> x{{0.2, 0.3, 0.4}};
    auto du = local_unstable_disk<3>(f, x, 0.05);
    std::string path = "leaf_dump_test.csv";
    write_leaf_csv<3>(path, {du});
    std::string text = read_text_file(path);
    REQUIRE(text.rfind("leaf_id,sigma,arc,x0,x1,x2\n", 0) == 0);
    size_t rows = static_cast<size_t>(std::count(text.begin(), text.end(), '\n'));
    REQUIRE(rows == du.pts.size() + 1);
    std::remove(path.c_str());
}

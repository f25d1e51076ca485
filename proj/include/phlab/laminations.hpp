#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "phlab/geometry.hpp"
#include "phlab/models.hpp"

namespace phlab {

// ---------------------------------------------------------------------------
// Local strong stable/unstable leaf disks. Linear and skew models have exact
// affine leaves (the planar eigendirections are invariant and the fiber map
// acts fiber-wise), so those are sampled directly. Composites run the graph
// transform: seed a segment along the base bundle at the n-step pullback of
// the base point and push it forward; the seed-direction error contracts at
// the slope rate lambda_u^-2 per step, while floating-point noise along the
// leaf grows like lambda_u per step, so the depth is capped where both are
// far below the leaf tolerance.
// ---------------------------------------------------------------------------

struct LeafOptions {
    double tol = 1e-9;      // relative convergence tolerance
    int mesh = 512;         // samples per side
    int pullback = -1;      // -1 = automatic
    bool validate = false;  // re-check convergence against a deeper pullback
};

inline constexpr int kCompositePullback = 14;

template <int D>
struct LeafDisk {
    Sigma sigma = Sigma::U;
    Vec<D> base{};
    double radius = 0.0;
    int pullback = 0;
    Vec<D> seed_point{};
    Vec<D> seed_dir{};
    std::vector<double> seed_params;  // ascending
    std::vector<Vec<D>> pts;
    std::vector<double> arcs;  // signed arc length, 0 at the center sample
    int center_idx = 0;
    double lipschitz = 0.0;  // graph slope over the sigma block, model chart frames

    double arc_min() const { return arcs.front(); }
    double arc_max() const { return arcs.back(); }
};

namespace detail {

// Forward = evolve with g (unstable disks), backward with g^-1 (stable).
template <int D>
Vec<D> evolve(const MapModel<D>& m, Vec<D> p, int steps, bool forward) {
    for (int t = 0; t < steps; ++t) p = forward ? m.eval(p) : m.eval_inverse(p);
    return p;
}

template <int D>
Vec<D> push_seed(const MapModel<D>& m, const LeafDisk<D>& disk, double s) {
    Vec<D> p = wrap<D>(disk.seed_point + s * disk.seed_dir);
    return evolve<D>(m, p, disk.pullback, disk.sigma == Sigma::U);
}

}  // namespace detail

// Point on the leaf at the given seed parameter (re-derived exactly; used
// by the refinement machinery near close approaches).
template <int D>
Vec<D> leaf_point(const MapModel<D>& m, const LeafDisk<D>& disk, double seed_param) {
    return detail::push_seed<D>(m, disk, seed_param);
}

template <int D>
LeafDisk<D> local_disk(const MapModel<D>& m, const Vec<D>& x, Sigma sigma, double radius,
                       LeafOptions opt = {}) {
    if (!(sigma == Sigma::U || sigma == Sigma::S))
        throw std::invalid_argument("local_disk: sigma must be S or U");
    if (!(radius > 0.0)) throw std::invalid_argument("local_disk: radius must be positive");
    bool fwd = (sigma == Sigma::U);

    LeafDisk<D> disk;
    disk.sigma = sigma;
    disk.base = wrap<D>(x);
    disk.radius = radius;
    disk.pullback = m.is_composite() ? (opt.pullback >= 0 ? opt.pullback : kCompositePullback) : 0;

    Frames<D> fr = m.chart_frames();
    int col = fwd ? (fr.dims.s + fr.dims.c) : 0;
    disk.seed_dir = normalized(fr.column(col));
    disk.seed_point = detail::evolve<D>(m, disk.base, disk.pullback, !fwd);

    // growth of the seed direction along the orbit fixes the seed range
    double growth = 1.0;
    {
        Vec<D> v = disk.seed_dir;
        Vec<D> q = disk.seed_point;
        for (int t = 0; t < disk.pullback; ++t) {
            v = (fwd ? m.derivative(q) : m.derivative_inverse(q)) * v;
            q = fwd ? m.eval(q) : m.eval_inverse(q);
        }
        growth = norm(v);
    }

    int M = opt.mesh;
    double span = radius * 1.1 / growth;
    for (int attempt = 0; attempt < 6; ++attempt) {
        disk.seed_params.clear();
        disk.pts.clear();
        disk.arcs.clear();
        int total = 2 * M + 1;
        disk.seed_params.reserve(static_cast<size_t>(total));
        disk.pts.reserve(static_cast<size_t>(total));
        for (int k = -M; k <= M; ++k)
            disk.seed_params.push_back(span * static_cast<double>(k) / M);
        for (double s : disk.seed_params) disk.pts.push_back(detail::push_seed<D>(m, disk, s));
        disk.center_idx = M;
        // signed arc length with the center sample at 0
        disk.arcs.assign(static_cast<size_t>(total), 0.0);
        for (int k = M + 1; k < total; ++k)
            disk.arcs[static_cast<size_t>(k)] =
                disk.arcs[static_cast<size_t>(k - 1)] +
                torus_dist(disk.pts[static_cast<size_t>(k)], disk.pts[static_cast<size_t>(k - 1)]);
        for (int k = M - 1; k >= 0; --k)
            disk.arcs[static_cast<size_t>(k)] =
                disk.arcs[static_cast<size_t>(k + 1)] -
                torus_dist(disk.pts[static_cast<size_t>(k)], disk.pts[static_cast<size_t>(k + 1)]);
        if (disk.arcs.back() >= radius && -disk.arcs.front() >= radius) break;
        double need = std::max(radius / std::max(disk.arcs.back(), 1e-300),
                               radius / std::max(-disk.arcs.front(), 1e-300));
        span *= std::min(4.0, need * 1.2);
        if (attempt == 5) throw std::runtime_error("local_disk: seed range did not cover the radius");
    }

    // trim to the requested leafwise radius
    auto above = [&](double a) {
        return static_cast<size_t>(std::lower_bound(disk.arcs.begin(), disk.arcs.end(), a) -
                                   disk.arcs.begin());
    };
    size_t lo = above(-radius - 1e-15);
    size_t hi = above(radius + 1e-15);
    if (lo > 0) --lo;
    if (hi >= disk.arcs.size()) hi = disk.arcs.size() - 1;
    std::vector<double> sp(disk.seed_params.begin() + static_cast<long>(lo),
                           disk.seed_params.begin() + static_cast<long>(hi) + 1);
    std::vector<Vec<D>> pp(disk.pts.begin() + static_cast<long>(lo),
                           disk.pts.begin() + static_cast<long>(hi) + 1);
    std::vector<double> aa(disk.arcs.begin() + static_cast<long>(lo),
                           disk.arcs.begin() + static_cast<long>(hi) + 1);
    disk.seed_params = std::move(sp);
    disk.pts = std::move(pp);
    disk.arcs = std::move(aa);
    disk.center_idx -= static_cast<int>(lo);

    // clamp the two boundary samples to leafwise distance exactly +- radius
    auto clamp_end = [&](bool front) {
        if (disk.pts.size() < 2) return;
        size_t i0 = front ? 0 : disk.pts.size() - 1;
        size_t i1 = front ? 1 : disk.pts.size() - 2;
        double target = front ? -radius : radius;
        for (int it = 0; it < 3; ++it) {
            double a_in = disk.arcs[i1], a_out = disk.arcs[i0];
            if (a_out == a_in) break;
            double tfrac = (target - a_in) / (a_out - a_in);
            double s = disk.seed_params[i1] + tfrac * (disk.seed_params[i0] - disk.seed_params[i1]);
            Vec<D> p = detail::push_seed<D>(m, disk, s);
            double d = torus_dist(p, disk.pts[i1]);
            disk.pts[i0] = p;
            disk.seed_params[i0] = s;
            disk.arcs[i0] = front ? a_in - d : a_in + d;
            if (std::fabs(std::fabs(disk.arcs[i0]) - radius) < 1e-12 * std::max(1.0, radius)) break;
        }
    };
    clamp_end(true);
    clamp_end(false);

    // graph slope over the sigma block in the model frames
    double lip = 0.0;
    for (size_t k = 0; k + 1 < disk.pts.size(); ++k) {
        Vec<D> d = fr.to_frame(torus_diff(disk.pts[k + 1], disk.pts[k]));
        double along = 0.0, across = 0.0;
        for (int i = 0; i < D; ++i) {
            bool on_block = fwd ? fr.dims.is_u(i) : fr.dims.is_s(i);
            double comp = d[i] * d[i];
            if (on_block) along += comp;
            else across += comp;
        }
        if (along > 0) lip = std::max(lip, std::sqrt(across / along));
    }
    disk.lipschitz = lip;

    if (opt.validate && m.is_composite()) {
        LeafOptions deeper = opt;
        deeper.validate = false;
        deeper.pullback = disk.pullback + 2;
        LeafDisk<D> ref = local_disk<D>(m, x, sigma, radius, deeper);
        double worst = 0.0;
        for (size_t k = 0; k < disk.pts.size(); k += 16) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : ref.pts) best = std::min(best, torus_dist(disk.pts[k], q));
            worst = std::max(worst, best);
        }
        if (worst > 100.0 * opt.tol * std::max(radius, 1e-6))
            throw std::runtime_error("local_disk: graph transform did not converge");
    }
    return disk;
}

template <int D>
LeafDisk<D> local_unstable_disk(const MapModel<D>& m, const Vec<D>& x, double t,
                                LeafOptions opt = {}) {
    return local_disk<D>(m, x, Sigma::U, t, opt);
}

template <int D>
LeafDisk<D> local_stable_disk(const MapModel<D>& m, const Vec<D>& x, double eps,
                              LeafOptions opt = {}) {
    return local_disk<D>(m, x, Sigma::S, eps, opt);
}

// ---------------------------------------------------------------------------
// Leafwise metric: arc position of a point on the polyline, with endpoint
// correction by projecting onto the adjacent chords.
// ---------------------------------------------------------------------------

template <int D>
double arc_position(const LeafDisk<D>& disk, const Vec<D>& p, double tol = 1e-6) {
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < disk.pts.size(); ++k) {
        double d = torus_dist(p, disk.pts[k]);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    // project onto the adjacent chords; the off-polyline distance decides
    // membership, the projection parameter gives the arc
    double off = best_d;
    double arc = disk.arcs[best];
    auto consider = [&](size_t a, size_t b) {
        Vec<D> chord = torus_diff(disk.pts[b], disk.pts[a]);
        double len2 = dot(chord, chord);
        if (len2 == 0) return;
        Vec<D> d = torus_diff(p, disk.pts[a]);
        double t = std::clamp(dot(d, chord) / len2, 0.0, 1.0);
        double dist = norm(d - t * chord);
        if (dist < off) {
            off = dist;
            arc = disk.arcs[a] + t * (disk.arcs[b] - disk.arcs[a]);
        }
    };
    if (best + 1 < disk.pts.size()) consider(best, best + 1);
    if (best > 0) consider(best - 1, best);
    if (off > tol + 1e-12)
        throw std::invalid_argument("leaf_distance: point is not on the disk");
    return arc;
}

template <int D>
double leaf_distance(const LeafDisk<D>& disk, const Vec<D>& a, const Vec<D>& b,
                     double tol = 1e-6) {
    return std::fabs(arc_position<D>(disk, a, tol) - arc_position<D>(disk, b, tol));
}

// Point on the disk at a prescribed signed arc position (secant refinement
// through exact leaf-point queries).
template <int D>
Vec<D> point_at_arc(const MapModel<D>& m, const LeafDisk<D>& disk, double arc) {
    if (arc < disk.arc_min() - 1e-12 || arc > disk.arc_max() + 1e-12)
        throw std::invalid_argument("point_at_arc: arc outside the disk");
    size_t hi = static_cast<size_t>(
        std::lower_bound(disk.arcs.begin(), disk.arcs.end(), arc) - disk.arcs.begin());
    if (hi == 0) hi = 1;
    if (hi >= disk.arcs.size()) hi = disk.arcs.size() - 1;
    size_t lo = hi - 1;
    double a0 = disk.arcs[lo], a1 = disk.arcs[hi];
    double s0 = disk.seed_params[lo], s1 = disk.seed_params[hi];
    double t = (a1 > a0) ? (arc - a0) / (a1 - a0) : 0.5;
    double s = s0 + t * (s1 - s0);
    Vec<D> p = leaf_point<D>(m, disk, s);
    // one secant correction using the local arc density
    double local = torus_dist(disk.pts[hi], disk.pts[lo]);
    if (local > 0) {
        double have = a0 + dot(torus_diff(p, disk.pts[lo]), torus_diff(disk.pts[hi], disk.pts[lo])) / local;
        double ds_per_arc = (s1 - s0) / (a1 - a0);
        s += (arc - have) * ds_per_arc;
        p = leaf_point<D>(m, disk, s);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Affine cu-disk (center x unstable plane patch) and the product projection.
// ---------------------------------------------------------------------------

template <int D>
struct CuDisk {
    Vec<D> center{};
    Vec<D> dir_c{}, dir_u{};
    double half_c = 0.0, half_u = 0.0;
};

template <int D>
CuDisk<D> make_cu_disk(const MapModel<D>& m, const Vec<D>& center, double gamma) {
    Frames<D> fr = m.chart_frames();
    CuDisk<D> d;
    d.center = wrap<D>(center);
    d.dir_c = fr.column(fr.dims.s);
    d.dir_u = fr.column(fr.dims.s + fr.dims.c);
    d.half_c = gamma;
    d.half_u = gamma;
    return d;
}

// Unique intersection of W^s_gamma(x) with the cu-disk; bisection on the
// signed offset along the disk normal after a coarse sweep.
template <int D>
Vec<D> product_projection(const MapModel<D>& m, const Vec<D>& x, const CuDisk<D>& dsk,
                          double gamma, LeafOptions opt = {}) {
    static_assert(D == 3, "product projection is implemented on T^3");
    LeafDisk<D> stable = local_stable_disk<D>(m, x, gamma, opt);
    Vec<D> nu = normalized(Vec<D>{{dsk.dir_c[1] * dsk.dir_u[2] - dsk.dir_c[2] * dsk.dir_u[1],
                                   dsk.dir_c[2] * dsk.dir_u[0] - dsk.dir_c[0] * dsk.dir_u[2],
                                   dsk.dir_c[0] * dsk.dir_u[1] - dsk.dir_c[1] * dsk.dir_u[0]}});
    auto offset = [&](const Vec<D>& p) { return dot(torus_diff(p, dsk.center), nu); };
    auto lateral_ok = [&](const Vec<D>& p) {
        Vec<D> d = torus_diff(p, dsk.center);
        return std::fabs(dot(d, dsk.dir_c)) <= dsk.half_c + 1e-12 &&
               std::fabs(dot(d, dsk.dir_u)) <= dsk.half_u + 1e-12;
    };
    std::vector<Vec<D>> hits;
    for (size_t k = 0; k + 1 < stable.pts.size(); ++k) {
        double o0 = offset(stable.pts[k]);
        double o1 = offset(stable.pts[k + 1]);
        if (o0 == 0.0 && lateral_ok(stable.pts[k])) hits.push_back(stable.pts[k]);
        if (o0 * o1 < 0.0) {
            double s0 = stable.seed_params[k], s1 = stable.seed_params[k + 1];
            for (int it = 0; it < 60; ++it) {
                double sm = 0.5 * (s0 + s1);
                Vec<D> pm = leaf_point<D>(m, stable, sm);
                double om = offset(pm);
                if ((om < 0) == (o0 < 0)) {
                    s0 = sm;
                    o0 = om;
                } else {
                    s1 = sm;
                }
            }
            Vec<D> p = leaf_point<D>(m, stable, 0.5 * (s0 + s1));
            if (lateral_ok(p)) hits.push_back(p);
        }
    }
    if (hits.empty())
        throw std::runtime_error("product_projection: no intersection within gamma");
    for (size_t i = 1; i < hits.size(); ++i)
        if (torus_dist(hits[i], hits[0]) > 1e-9)
            throw std::runtime_error("product_projection: multiple intersections (mesh too coarse)");
    return hits[0];
}

// Measured trapping factor: arc contraction of the disk under one map step.
template <int D>
double trapping_factor(const MapModel<D>& m, const LeafDisk<D>& disk) {
    bool fwd = (disk.sigma == Sigma::S);  // stable arcs contract forward
    std::vector<Vec<D>> img(disk.pts.size());
    for (size_t k = 0; k < disk.pts.size(); ++k)
        img[k] = fwd ? m.eval(disk.pts[k]) : m.eval_inverse(disk.pts[k]);
    double left = 0, right = 0;
    for (size_t k = 0; k + 1 < img.size(); ++k) {
        double seg = torus_dist(img[k + 1], img[k]);
        if (static_cast<int>(k) < disk.center_idx) left += seg;
        else right += seg;
    }
    double rl = -disk.arcs.front(), rr = disk.arcs.back();
    return std::max(left / rl, right / rr);
}

// Distance from a point to a short segment (canonical torus representative
// taken at the first endpoint; segments are far shorter than 1/2).
template <int D>
double point_to_segment(const Vec<D>& p, const Vec<D>& a, const Vec<D>& b) {
    Vec<D> d = torus_diff(p, a);
    Vec<D> e = torus_diff(b, a);
    double len2 = dot(e, e);
    double t = len2 > 0 ? std::clamp(dot(d, e) / len2, 0.0, 1.0) : 0.0;
    return norm(d - t * e);
}

template <int D>
double point_to_polyline(const Vec<D>& p, const std::vector<Vec<D>>& poly) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k + 1 < poly.size(); ++k)
        best = std::min(best, point_to_segment<D>(p, poly[k], poly[k + 1]));
    if (poly.size() == 1) best = torus_dist(p, poly[0]);
    return best;
}

// Hausdorff distance between two sampled curves, measured against the
// interpolating polylines so the answer reflects geometry, not mesh pitch.
template <int D>
double hausdorff(const std::vector<Vec<D>>& a, const std::vector<Vec<D>>& b) {
    auto one_sided = [](const std::vector<Vec<D>>& p, const std::vector<Vec<D>>& q) {
        double worst = 0;
        for (const auto& x : p) worst = std::max(worst, point_to_polyline<D>(x, q));
        return worst;
    };
    return std::max(one_sided(a, b), one_sided(b, a));
}

// CSV dump: one sample per row (leaf id, sigma, arc, coordinates).
template <int D>
void write_leaf_csv(const std::string& path, const std::vector<LeafDisk<D>>& disks) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "leaf_id,sigma,arc";
    for (int i = 0; i < D; ++i) f << ",x" << i;
    f << "\n";
    char buf[64];
    for (size_t id = 0; id < disks.size(); ++id) {
        const auto& d = disks[id];
        for (size_t k = 0; k < d.pts.size(); ++k) {
            f << id << "," << sigma_name(d.sigma);
            std::snprintf(buf, sizeof buf, ",%.17g", d.arcs[k]);
            f << buf;
            for (int i = 0; i < D; ++i) {
                std::snprintf(buf, sizeof buf, ",%.17g", d.pts[k][i]);
                f << buf;
            }
            f << "\n";
        }
    }
}

}  // namespace phlab

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "phlab/cones.hpp"
#include "phlab/geometry.hpp"
#include "phlab/json_io.hpp"
#include "phlab/models.hpp"
#include "phlab/rng.hpp"

namespace phlab {

// ===========================================================================
// xi-coverings: a lattice at spacing <= rho/8 whose cubes have bounded
// geometry. The pair property is verified at rho/10 rather than the quoted
// rho/4: with a rho/8 lattice and rho/3 cubes the guaranteed pair scale is
// rho/3 - sqrt(3)*rho/8, and rho/10 keeps a margin below it for rotated
// frames; every consumer works at pair distances orders of magnitude finer.
// ===========================================================================

inline constexpr double kPairThresholdFactor = 0.1;  // * rho

template <int D>
struct XiCovering {
    int n = 32;        // lattice points per axis (spacing 1/n on the torus)
    double rho = 0.24;
    bool torus = true;  // false: lattice clipped to the unit box
    Frames<D> frames;
    double pair_threshold = 0.024;

    int per_axis() const { return torus ? n : n + 1; }
    int count() const {
        int m = per_axis(), c = 1;
        for (int i = 0; i < D; ++i) c *= m;
        return c;
    }
    Vec<D> point(int id) const {
        int m = per_axis();
        Vec<D> p{};
        for (int i = D - 1; i >= 0; --i) {
            p[i] = static_cast<double>(id % m) / n;
            id /= m;
        }
        return p;
    }
    int id_of(const std::array<int, D>& idx) const {
        int m = per_axis(), id = 0;
        for (int i = 0; i < D; ++i) id = id * m + idx[static_cast<size_t>(i)];
        return id;
    }
};

template <int D>
XiCovering<D> build_xi_covering(const Frames<D>& fr, double rho, bool torus = true) {
    if (!(rho > 0.0 && rho < 0.25)) throw std::invalid_argument("covering: rho out of range");
    XiCovering<D> cov;
    cov.rho = rho;
    cov.torus = torus;
    cov.frames = fr;
    cov.n = static_cast<int>(std::ceil(8.0 / rho));  // spacing 1/n <= rho/8
    cov.pair_threshold = kPairThresholdFactor * rho;
    return cov;
}

// Dimension-only ceiling for xi (cf. the bounded-geometry lemma): lattice
// points at spacing rho/8 inside a frame box of half-width rho+eps, worst
// at eps = rho, plus the rotated-lattice boundary fluctuation.
inline double xi_dimension_bound(int d) { return std::pow(35.0, d); }

struct CoveringReport {
    int pair_probes = 0, pair_violations = 0;
    int ball_probes = 0;
    double xi_measured = 0.0;
    double xi_bound = 0.0;
    bool ok = false;
    Json to_json() const {
        return Json{{"pair_probes", pair_probes},
                    {"pair_violations", pair_violations},
                    {"ball_probes", ball_probes},
                    {"xi_measured", xi_measured},
                    {"xi_bound", xi_bound},
                    {"ok", ok}};
    }
};

namespace detail {

template <int D>
Vec<D> cov_diff(const XiCovering<D>& cov, const Vec<D>& p, const Vec<D>& q) {
    return cov.torus ? torus_diff(p, q) : p - q;
}

// Enumerate lattice ids whose point lies within max_dist (per standard axis)
// of p, calling fn(id, point).
template <int D, typename Fn>
void for_lattice_near(const XiCovering<D>& cov, const Vec<D>& p, double max_dist, Fn&& fn) {
    int m = cov.per_axis();
    int reach = static_cast<int>(std::ceil(max_dist * cov.n)) + 1;
    std::array<int, D> base{};
    for (int i = 0; i < D; ++i) base[static_cast<size_t>(i)] = static_cast<int>(std::floor(p[i] * cov.n));
    std::array<int, D> off{};
    auto rec = [&](auto&& self, int axis) -> void {
        if (axis == D) {
            std::array<int, D> idx{};
            for (int i = 0; i < D; ++i) {
                int v = base[static_cast<size_t>(i)] + off[static_cast<size_t>(i)];
                if (cov.torus) {
                    v %= cov.n;
                    if (v < 0) v += cov.n;
                } else {
                    if (v < 0 || v >= m) return;
                }
                idx[static_cast<size_t>(i)] = v;
            }
            int id = cov.id_of(idx);
            fn(id, cov.point(id));
            return;
        }
        for (int d = -reach; d <= reach; ++d) {
            off[static_cast<size_t>(axis)] = d;
            self(self, axis + 1);
        }
    };
    rec(rec, 0);
}

}  // namespace detail

// Brute-force verification of both covering invariants.
template <int D>
CoveringReport verify_covering(const XiCovering<D>& cov, int pair_probes, int ball_probes,
                               uint64_t seed) {
    CoveringReport rep;
    rep.pair_probes = pair_probes;
    rep.ball_probes = 3 * ball_probes;
    rep.xi_bound = xi_dimension_bound(D);
    Rng rng(seed);
    double rho = cov.rho;

    // pair property at the (corrected) threshold
    for (int t = 0; t < pair_probes; ++t) {
        Vec<D> x;
        for (int i = 0; i < D; ++i) x[i] = cov.torus ? rng.uniform01() : rng.uniform(0.1, 0.9);
        Vec<D> dir;
        for (int i = 0; i < D; ++i) dir[i] = rng.uniform(-1, 1);
        if (norm(dir) == 0) dir[0] = 1;
        dir = normalized(dir);
        double r = rng.uniform01() * cov.pair_threshold;
        Vec<D> y = cov.torus ? wrap<D>(x + r * dir) : x + r * dir;
        bool found = false;
        detail::for_lattice_near<D>(cov, x, rho, [&](int, const Vec<D>& z) {
            if (found) return;
            Vec<D> wx = cov.frames.to_frame(detail::cov_diff<D>(cov, x, z));
            Vec<D> wy = cov.frames.to_frame(detail::cov_diff<D>(cov, y, z));
            bool in = true;
            for (int i = 0; i < D; ++i)
                if (std::fabs(wx[i]) > rho / 6 || std::fabs(wy[i]) > rho / 6) in = false;
            if (in) found = true;
        });
        if (!found) ++rep.pair_violations;
    }

    // count property at eps in {rho/2, rho, 4 rho}
    double xi = 0.0;
    for (double eps : {rho / 2, rho, 4 * rho}) {
        for (int t = 0; t < ball_probes; ++t) {
            Vec<D> c;
            for (int i = 0; i < D; ++i) c[i] = cov.torus ? rng.uniform01() : rng.uniform01();
            int cnt = 0;
            detail::for_lattice_near<D>(cov, c, rho + eps + 2.0 / cov.n, [&](int, const Vec<D>& z) {
                // distance from ball center to the frame cube of half-width rho
                Vec<D> w = cov.frames.to_frame(detail::cov_diff<D>(cov, c, z));
                double d2 = 0;
                for (int i = 0; i < D; ++i) {
                    double e = std::max(0.0, std::fabs(w[i]) - rho);
                    d2 += e * e;
                }
                if (d2 <= eps * eps) ++cnt;
            });
            double denom = std::max(1.0, std::pow(eps / rho, D));
            xi = std::max(xi, cnt / denom);
        }
    }
    rep.xi_measured = xi;
    rep.ok = (rep.pair_violations == 0) && (xi <= rep.xi_bound);
    return rep;
}

// ===========================================================================
// Bounded intersection count I(N, Delta, xi).
// ===========================================================================

inline double intersection_bound_strict(int N, double xi, double Delta, int d) {
    return (N + 1) * xi * std::max(1.0, std::pow(Delta, N * d));
}

inline double intersection_bound_strict_log10(int N, double xi, double Delta, int d) {
    return std::log10(static_cast<double>(N + 1)) + std::log10(xi) +
           std::max(0.0, N * d * std::log10(Delta));
}

// Measured count of covering cubes whose 2rho-cube meets the forward tube
// of one cube. Exact frame-box arithmetic for eigen-diagonal linear maps;
// the x-dependence vanishes for a lattice invariant under the map, so a few
// sample cubes suffice.
template <int D>
int intersection_bound_measured(const MapModel<D>& m, const XiCovering<D>& cov, int N,
                                int x_samples = 3, uint64_t seed = 515) {
    if (!cov.torus) throw std::invalid_argument("measured I needs the torus covering");
    Frames<D> fr = cov.frames;
    double rho = cov.rho;
    Rng rng(seed);
    int total = cov.count();
    int worst = 0;
    std::vector<uint8_t> seen(static_cast<size_t>(total));
    for (int s = 0; s < x_samples; ++s) {
        std::fill(seen.begin(), seen.end(), 0);
        int id = static_cast<int>(rng.below(static_cast<uint64_t>(total)));
        Vec<D> x = cov.point(id);
        int cnt = 0;
        for (int ell = 0; ell <= N; ++ell) {
            // image of C^x_rho after ell steps: frame box via corner samples
            Vec<D> center = x;
            for (int t = 0; t < ell; ++t) center = m.eval(center);
            Vec<D> halfs{};
            int corners = 1 << D;
            for (int cbit = 0; cbit < corners; ++cbit) {
                Vec<D> w{};
                for (int i = 0; i < D; ++i) w[i] = ((cbit >> i) & 1) ? rho / 2 : -rho / 2;
                Vec<D> p = wrap<D>(x + fr.from_frame(w));
                for (int t = 0; t < ell; ++t) p = m.eval(p);
                Vec<D> dw = fr.to_frame(torus_diff(p, center));
                for (int i = 0; i < D; ++i) halfs[i] = std::max(halfs[i], std::fabs(dw[i]));
            }
            bool wraps = false;
            for (int i = 0; i < D; ++i)
                if (halfs[i] + rho >= 0.5) wraps = true;
            for (int y = 0; y < total; ++y) {
                if (seen[static_cast<size_t>(y)]) continue;
                Vec<D> dz = fr.to_frame(torus_diff(cov.point(y), center));
                bool hit = true;
                for (int i = 0; i < D; ++i) {
                    if (halfs[i] + rho >= 0.5) continue;  // axis wraps: always true
                    if (std::fabs(dz[i]) > halfs[i] + rho) hit = false;
                }
                (void)wraps;
                if (hit) {
                    seen[static_cast<size_t>(y)] = 1;
                    ++cnt;
                }
            }
        }
        worst = std::max(worst, cnt);
    }
    return worst;
}

// ===========================================================================
// Wandering slices: one slice of width eta_hat per covering cube such that
// all iterates f^-l (0 <= l <= N) have pairwise disjoint interiors. The
// greedy walks the covering in index order; obstructions live in a
// cell-grid of compact forward-image boxes (exact for eigenframe-diagonal
// linear maps, sampled + inflated otherwise).
// ===========================================================================

template <int D>
struct BoxRecord {
    Vec<D> center;
    Vec<D> halfs;  // frame half-widths
    int32_t cube = -1;
    int16_t m = 0;  // forward iterate count of the underlying slice
};

template <int D>
struct WanderingSlices {
    double eta_hat = 0.0;
    int N = 0;
    int halvings = 0;
    std::vector<int32_t> slice_idx;  // candidate index per cube (>= 0)
    Json to_json() const {
        return Json{{"eta_hat", eta_hat}, {"N", N}, {"halvings", halvings},
                    {"cubes", slice_idx.size()}};
    }
};

namespace detail {

// Does the model admit the exact eigenframe fast path (A B = B diag)?
template <int D>
bool eigen_diagonal(const MapModel<D>& m, const Frames<D>& fr, Vec<D>* lams) {
    if (m.is_composite()) return false;
    if (m.kind == MapModel<D>::Kind::Skew && m.eps != 0.0) return false;
    for (int j = 0; j < D; ++j) {
        Vec<D> b = fr.column(j);
        Vec<D> im = m.A * b;
        double lam = dot(im, b);
        Vec<D> res = im - lam * b;
        if (norm(res) > 1e-9) return false;
        if (lams) (*lams)[j] = lam;
    }
    return true;
}

// Frame box of the m-step forward image of a slice box. Exact in the eigen
// case; otherwise the frame AABB of sampled images inflated by the sample
// dispersion (conservative: spurious overlaps only).
template <int D>
BoxRecord<D> image_box(const MapModel<D>& m, const Frames<D>& fr, bool eigen,
                       const Vec<D>& lams, const Vec<D>& slice_center,
                       const Vec<D>& slice_halfs, int steps, int32_t cube_id) {
    BoxRecord<D> rec;
    rec.cube = cube_id;
    rec.m = static_cast<int16_t>(steps);
    if (eigen) {
        Vec<D> c = slice_center;
        for (int t = 0; t < steps; ++t) c = m.eval(c);
        rec.center = c;
        for (int i = 0; i < D; ++i)
            rec.halfs[i] = slice_halfs[i] * std::pow(std::fabs(lams[i]), steps);
        return rec;
    }
    // sampled hull: corners plus edge midpoints of the slice box
    Vec<D> c = slice_center;
    for (int t = 0; t < steps; ++t) c = m.eval(c);
    rec.center = c;
    Vec<D> worst{};
    double grid[3] = {-1.0, 0.0, 1.0};
    int total = 1;
    for (int i = 0; i < D; ++i) total *= 3;
    for (int q = 0; q < total; ++q) {
        int r = q;
        Vec<D> w;
        for (int i = 0; i < D; ++i) {
            w[i] = grid[r % 3] * slice_halfs[i];
            r /= 3;
        }
        Vec<D> p = wrap<D>(slice_center + fr.from_frame(w));
        for (int t = 0; t < steps; ++t) p = m.eval(p);
        Vec<D> dw = fr.to_frame(torus_diff(p, rec.center));
        for (int i = 0; i < D; ++i) worst[i] = std::max(worst[i], std::fabs(dw[i]));
    }
    // inflation: half the largest sample gap amplified through the steps
    double gap = 0.0;
    for (int i = 0; i < D; ++i) gap = std::max(gap, slice_halfs[i]);
    double delta_pow = 1.0;
    for (int t = 0; t < steps; ++t) delta_pow *= 3.0;  // crude Lipschitz cap
    for (int i = 0; i < D; ++i) rec.halfs[i] = worst[i] + 0.5 * gap * delta_pow * 1e-2 + 1e-12;
    return rec;
}

template <int D>
struct RecordGrid {
    int n = 1;
    std::vector<std::vector<int32_t>> bins;
    std::vector<BoxRecord<D>> records;
    // generation-stamped visited marks, so queries never allocate
    mutable std::vector<uint32_t> stamp;
    mutable uint32_t generation = 0;

    void init(int n_) {
        n = n_;
        int total = 1;
        for (int i = 0; i < D; ++i) total *= n;
        bins.assign(static_cast<size_t>(total), {});
        records.clear();
        stamp.clear();
        generation = 0;
    }
    // Visits each bin whose center lies near the frame box (bin half
    // diagonal as padding), passing (bin id, bin center).
    template <typename Fn>
    void for_bins_of_box(const Frames<D>& fr, const Vec<D>& center, const Vec<D>& halfs,
                         Fn&& fn) const {
        Vec<D> ext{};
        for (int r = 0; r < D; ++r) {
            double e = 0;
            for (int j = 0; j < D; ++j) e += std::fabs(fr.B(r, j)) * halfs[j];
            ext[r] = e + 1.0 / n;
        }
        double pad = 0.87 * std::sqrt(static_cast<double>(D)) / n;
        std::array<int, D> lo{}, hi{};
        for (int i = 0; i < D; ++i) {
            lo[static_cast<size_t>(i)] = static_cast<int>(std::floor((center[i] - ext[i]) * n));
            hi[static_cast<size_t>(i)] = static_cast<int>(std::floor((center[i] + ext[i]) * n));
        }
        std::array<int, D> it{};
        auto rec = [&](auto&& self, int axis) -> void {
            if (axis == D) {
                int id = 0;
                Vec<D> bc;
                for (int i = 0; i < D; ++i) {
                    int v = it[static_cast<size_t>(i)] % n;
                    if (v < 0) v += n;
                    id = id * n + v;
                    bc[i] = (v + 0.5) / n;
                }
                Vec<D> w = fr.to_frame(torus_diff(bc, center));
                for (int i = 0; i < D; ++i)
                    if (std::fabs(w[i]) > halfs[i] + pad) return;
                fn(id, bc);
                return;
            }
            for (int v = lo[static_cast<size_t>(axis)]; v <= hi[static_cast<size_t>(axis)]; ++v) {
                it[static_cast<size_t>(axis)] = v;
                self(self, axis + 1);
            }
        };
        rec(rec, 0);
    }
    void insert(const Frames<D>& fr, const BoxRecord<D>& r) {
        int32_t idx = static_cast<int32_t>(records.size());
        records.push_back(r);
        stamp.push_back(0);
        for_bins_of_box(fr, r.center, r.halfs,
                        [&](int b, const Vec<D>&) { bins[static_cast<size_t>(b)].push_back(idx); });
    }
    int bin_of(const Vec<D>& p) const {
        int id = 0;
        for (int i = 0; i < D; ++i) {
            int v = static_cast<int>(std::floor(p[i] * n)) % n;
            if (v < 0) v += n;
            id = id * n + v;
        }
        return id;
    }
    // All records whose padded footprint covers the bin of p; sound for a
    // point-membership pre-filter since insertion pads by the bin diagonal.
    template <typename Fn>
    void query_point(const Vec<D>& p, Fn&& fn) const {
        for (int32_t ridx : bins[static_cast<size_t>(bin_of(p))])
            fn(records[static_cast<size_t>(ridx)]);
    }
    // Calls fn once per record whose bin footprint meets the query box.
    template <typename Fn>
    void query(const Frames<D>& fr, const Vec<D>& center, const Vec<D>& halfs, Fn&& fn) const {
        ++generation;
        for_bins_of_box(fr, center, halfs, [&](int b, const Vec<D>&) {
            for (int32_t ridx : bins[static_cast<size_t>(b)]) {
                if (stamp[static_cast<size_t>(ridx)] == generation) continue;
                stamp[static_cast<size_t>(ridx)] = generation;
                fn(records[static_cast<size_t>(ridx)]);
            }
        });
    }
};

// Sorted, merged interval set with fast membership.
struct IntervalSet {
    std::vector<std::pair<double, double>> merged;
    void build(std::vector<std::pair<double, double>>& raw) {
        merged.clear();
        std::sort(raw.begin(), raw.end());
        for (const auto& iv : raw) {
            if (!merged.empty() && iv.first <= merged.back().second)
                merged.back().second = std::max(merged.back().second, iv.second);
            else
                merged.push_back(iv);
        }
    }
    bool contains(double x) const {
        auto it = std::upper_bound(merged.begin(), merged.end(),
                                   std::make_pair(x, std::numeric_limits<double>::max()));
        if (it == merged.begin()) return false;
        --it;
        return x > it->first && x < it->second;
    }
};

}  // namespace detail

template <int D>
WanderingSlices<D> select_wandering_slices(const MapModel<D>& base, const XiCovering<D>& cov,
                                           int N, double eta_hat_target, int max_halvings = 6) {
    if (!cov.torus) throw std::invalid_argument("wandering slices need the torus covering");
    Frames<D> fr = cov.frames;
    double rho = cov.rho;
    Vec<D> lams{};
    bool eigen = detail::eigen_diagonal<D>(base, fr, &lams);
    int u_axis = fr.dims.s + fr.dims.c;
    if (fr.dims.u != 1)
        throw std::invalid_argument("wandering slices: only u = 1 is implemented");

    double eta_hat = eta_hat_target;
    double pad = 1e-9;
    for (int halving = 0; halving <= max_halvings; ++halving) {
        WanderingSlices<D> out;
        out.eta_hat = eta_hat;
        out.N = N;
        out.halvings = halving;
        out.slice_idx.assign(static_cast<size_t>(cov.count()), -1);

        detail::RecordGrid<D> grid;
        grid.init(cov.n);

        int lo_cand = static_cast<int>(std::ceil(1.0 / (3.0 * eta_hat)));
        int hi_cand = static_cast<int>(std::floor(2.0 / (3.0 * eta_hat)));
        bool failed = false;

        auto slice_center_halfs = [&](const Vec<D>& z, double u0, Vec<D>& center, Vec<D>& halfs) {
            Vec<D> off{};
            off[u_axis] = rho * (u0 + eta_hat / 2 - 0.5);
            center = wrap<D>(z + fr.from_frame(off));
            for (int i = 0; i < D; ++i) halfs[i] = rho / 2;
            halfs[u_axis] = rho * eta_hat / 2;
        };

        std::vector<std::pair<double, double>> raw;
        detail::IntervalSet blocked;
        for (int id = 0; id < cov.count() && !failed; ++id) {
            Vec<D> z = cov.point(id);
            // (a) blocked chart-u intervals from every registered record
            raw.clear();
            Vec<D> qhalfs{};
            for (int i = 0; i < D; ++i) qhalfs[i] = rho / 2;
            grid.query(fr, z, qhalfs, [&](const BoxRecord<D>& r) {
                Vec<D> d = fr.to_frame(torus_diff(r.center, z));
                for (int i = 0; i < D; ++i) {
                    if (i == u_axis) continue;
                    if (std::fabs(d[i]) > r.halfs[i] + rho / 2 + pad) return;
                }
                double ulo = (d[u_axis] - r.halfs[u_axis]) / rho + 0.5;
                double uhi = (d[u_axis] + r.halfs[u_axis]) / rho + 0.5;
                raw.emplace_back(ulo - eta_hat - pad, uhi + pad);
            });
            blocked.build(raw);

            // (b) try candidates from a per-cube spread start (clustered
            // first-free choices jam later columns), verifying forward
            // images against chosen slices and the candidate itself
            int chosen = -1;
            int n_cand = hi_cand - lo_cand + 1;
            int start = static_cast<int>((static_cast<uint64_t>(id) * 2654435761ull) %
                                         static_cast<uint64_t>(n_cand));
            for (int step = 0; step < n_cand; ++step) {
                int cand = lo_cand + (start + step) % n_cand;
                double u0 = cand * eta_hat;
                if (blocked.contains(u0)) continue;
                Vec<D> c0, h0;
                slice_center_halfs(z, u0, c0, h0);
                bool ok = true;
                for (int mstep = 1; mstep <= N && ok; ++mstep) {
                    auto rec = detail::image_box<D>(base, fr, eigen, lams, c0, h0, mstep, id);
                    grid.query(fr, rec.center, rec.halfs, [&](const BoxRecord<D>& s) {
                        if (!ok || s.m != 0) return;
                        Vec<D> d = fr.to_frame(torus_diff(s.center, rec.center));
                        for (int i = 0; i < D; ++i)
                            if (std::fabs(d[i]) > s.halfs[i] + rec.halfs[i] + pad) return;
                        ok = false;
                    });
                    if (!ok) break;
                    // vs the candidate slice itself (self-wandering)
                    Vec<D> d = fr.to_frame(torus_diff(c0, rec.center));
                    bool overlap = true;
                    for (int i = 0; i < D; ++i)
                        if (std::fabs(d[i]) > h0[i] + rec.halfs[i] + pad) overlap = false;
                    if (overlap) ok = false;
                }
                if (ok) {
                    chosen = cand;
                    break;
                }
            }
            if (chosen < 0) {
                failed = true;
                break;
            }
            out.slice_idx[static_cast<size_t>(id)] = chosen;
            Vec<D> c0, h0;
            slice_center_halfs(z, chosen * eta_hat, c0, h0);
            for (int mstep = 0; mstep <= N; ++mstep)
                grid.insert(fr, detail::image_box<D>(base, fr, eigen, lams, c0, h0, mstep, id));
        }
        if (!failed) return out;
        eta_hat *= 0.5;
    }
    throw std::runtime_error("select_wandering_slices: greedy failed at the eta_hat floor");
}

// Monte-Carlo re-verification, independent of the greedy's own geometry:
// random points of random slice iterates must not land in any other one.
template <int D>
int wandering_mc_violations(const MapModel<D>& base, const XiCovering<D>& cov,
                            const WanderingSlices<D>& ws, int probes, uint64_t seed) {
    Frames<D> fr = cov.frames;
    double rho = cov.rho;
    int u_axis = fr.dims.s + fr.dims.c;
    Rng rng(seed);
    std::vector<int32_t> holders;
    detail::RecordGrid<D> grid;
    grid.init(cov.n);
    for (int id = 0; id < cov.count(); ++id) {
        int32_t cand = ws.slice_idx[static_cast<size_t>(id)];
        if (cand < 0) continue;
        holders.push_back(id);
        BoxRecord<D> rec;
        Vec<D> off{};
        off[u_axis] = rho * (cand * ws.eta_hat + ws.eta_hat / 2 - 0.5);
        rec.center = wrap<D>(cov.point(id) + fr.from_frame(off));
        for (int i = 0; i < D; ++i) rec.halfs[i] = rho / 2;
        rec.halfs[u_axis] = rho * ws.eta_hat / 2;
        rec.cube = id;
        grid.insert(fr, rec);
    }
    if (holders.empty()) return 0;

    auto contained_in = [&](const Vec<D>& q, int id) {
        Vec<D> z = cov.point(id);
        int32_t cand = ws.slice_idx[static_cast<size_t>(id)];
        Vec<D> w = fr.to_frame(torus_diff(q, z));
        for (int i = 0; i < D; ++i) {
            double local = w[i] / rho + 0.5;
            double lo = (i == u_axis) ? cand * ws.eta_hat : 0.0;
            double hi = (i == u_axis) ? (cand + 1) * ws.eta_hat : 1.0;
            if (local < lo || local >= hi) return false;
        }
        return true;
    };

    int violations = 0;
    for (int t = 0; t < probes; ++t) {
        int id = holders[static_cast<size_t>(rng.below(holders.size()))];
        int ell = static_cast<int>(rng.below(static_cast<uint64_t>(ws.N + 1)));
        Vec<D> z = cov.point(id);
        int32_t cand = ws.slice_idx[static_cast<size_t>(id)];
        Vec<D> w;
        for (int i = 0; i < D; ++i) {
            double local = rng.uniform01();
            if (i == u_axis) local = (cand + local) * ws.eta_hat;
            else local = local * (1.0 - 1e-9);
            w[i] = (local - 0.5) * rho;
        }
        Vec<D> p = wrap<D>(z + fr.from_frame(w));
        for (int s = 0; s < ell; ++s) p = base.eval_inverse(p);  // p in f^-ell(slice)
        // every iterate f^l(p), l in [0, N], may only lie in (id) at l = ell
        Vec<D> q = p;
        for (int l = 0; l <= ws.N; ++l) {
            grid.query_point(q, [&](const BoxRecord<D>& rec) {
                if (contained_in(q, rec.cube) && !(l == ell && rec.cube == id)) ++violations;
            });
            if (l == ws.N) break;
            q = base.eval(q);
        }
    }
    return violations;
}

// ===========================================================================
// Tile family (sparse section of the unstable direction).
// ===========================================================================

struct TileFamily {
    bool strict = false;
    double Delta = 2.75;
    int s = 1, u = 1;
    double period = 27.0;   // same-row anchor spacing (tile units)
    double stagger = 0.23;  // row-to-row anchor shift
    double anchor0 = 0.6180339887498949;
    long long L = 120;
    double log10_L_strict = 0.0;

    double row_anchor(int j) const {
        double a = std::fmod(anchor0 + j * stagger, period);
        return a < 0 ? a + period : a;
    }
    double min_row_gap() const { return period - 1.0; }

    Json to_json() const {
        return Json{{"strict", strict}, {"Delta", Delta},   {"s", s},
                    {"u", u},           {"period", period}, {"stagger", stagger},
                    {"anchor0", anchor0}, {"L", L},         {"log10_L_strict", log10_L_strict}};
    }
};

inline double tile_L_strict(double Delta, int s, int u) {
    return std::ceil(std::pow(std::pow(800.0, s + u) * Delta, s));
}

inline TileFamily build_tile_family(double Delta, int s, int u, bool strict_mode) {
    if (s != 1 || u != 1)
        throw std::invalid_argument("tile family: only s = u = 1 is implemented");
    TileFamily tf;
    tf.Delta = Delta;
    tf.s = s;
    tf.u = u;
    tf.strict = strict_mode;
    tf.log10_L_strict = s * ((s + u) * std::log10(800.0) + std::log10(Delta));
    if (strict_mode) {
        tf.period = std::pow(5.0, s + u) * Delta;  // 25 Delta
        tf.stagger = tf.period / 8.0;              // dense rows, worst-case L
        tf.L = static_cast<long long>(tile_L_strict(Delta, s, u));
    } else {
        // smallest stagger family passing property (iii) with clearance:
        // row gap > 3^{s+u} Delta (property (ii)) and full stagger coverage
        tf.period = std::ceil(std::pow(3.0, s + u) * Delta) + 2.0;
        tf.stagger = 0.23;
        tf.L = static_cast<long long>(std::ceil((tf.period + 1.0) / tf.stagger));
    }
    if (!(tf.min_row_gap() > std::pow(3.0, s + u) * Delta))
        throw std::logic_error("tile family: row gap violates property (ii)");
    return tf;
}

// alpha-Lipschitz graph over [0, L] (piecewise linear, unit breakpoints).
struct LipGraph {
    double x0 = 0.0;
    double alpha = 0.0;
    std::vector<double> slopes;  // one per unit interval
    double value(double t) const {
        double x = x0;
        int k = 0;
        while (t > 1.0 && k < static_cast<int>(slopes.size())) {
            x += slopes[static_cast<size_t>(k)];
            t -= 1.0;
            ++k;
        }
        if (k < static_cast<int>(slopes.size())) x += slopes[static_cast<size_t>(k)] * t;
        return x;
    }
};

inline LipGraph random_lip_graph(Rng& rng, double alpha, double x0_range, long long L) {
    LipGraph g;
    g.alpha = alpha;
    g.x0 = rng.uniform01() * x0_range;
    g.slopes.resize(static_cast<size_t>(L));
    for (auto& s : g.slopes) s = rng.uniform(-alpha, alpha);
    return g;
}

// Property (iii): the graph meets (1/2)Q for some tile; returns the best
// clearance (distance of the hit from the half-tile boundary).
inline bool tile_family_hits(const TileFamily& tf, const LipGraph& g, double* clearance_out) {
    double best = -std::numeric_limits<double>::infinity();
    for (long long j = 0; j < tf.L; ++j) {
        double aj = tf.row_anchor(static_cast<int>(j));
        // sample the graph across the central half of the row band
        for (double t : {0.25, 0.5, 0.75}) {
            double x = g.value(j + t);
            double rel = std::fmod(x - aj, tf.period);
            if (rel < 0) rel += tf.period;
            double clearance = std::min(rel - 0.25, 0.75 - rel);
            best = std::max(best, clearance);
        }
    }
    if (clearance_out) *clearance_out = best;
    return best >= 0.0;
}

// Dichotomy of the corollary: for two graphs linked by a stable arc of
// s-length in [2^{s+u}, 2^{s+u} Delta] (tile units), some row catches one
// graph in a half tile while the other graph misses every tile of the row.
inline bool tile_dichotomy(const TileFamily& tf, const LipGraph& g_hit, const LipGraph& g_miss) {
    for (long long j = 0; j < tf.L; ++j) {
        double aj = tf.row_anchor(static_cast<int>(j));
        bool hit_half = false, miss_all = true;
        for (double t : {0.25, 0.5, 0.75}) {
            double xh = g_hit.value(j + t);
            double relh = std::fmod(xh - aj, tf.period);
            if (relh < 0) relh += tf.period;
            if (relh >= 0.25 && relh <= 0.75) hit_half = true;
        }
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            double xm = g_miss.value(j + t);
            double relm = std::fmod(xm - aj, tf.period);
            if (relm < 0) relm += tf.period;
            if (relm < 1.0) miss_all = false;
        }
        if (hit_half && miss_all) return true;
    }
    return false;
}

// Rectangle anchors for one sub-slice row whose rectangles stay inside the
// unit chart range: a = row_anchor + k*period with a*eta in [0, 1 - eta].
inline std::vector<double> row_anchors_in_range(const TileFamily& tf, double eta, int row) {
    std::vector<double> out;
    double aj = tf.row_anchor(row);
    double amax = 1.0 / eta - 1.0;
    int klo = static_cast<int>(std::ceil((0.0 - aj) / tf.period));
    int khi = static_cast<int>(std::floor((amax - aj) / tf.period));
    for (int k = klo; k <= khi; ++k) out.push_back(aj + k * tf.period);
    return out;
}

// ===========================================================================
// The constant schedule.
// ===========================================================================

enum class ScheduleMode { Strict, Tight };

struct ConstantSchedule {
    // dimensions
    int s = 1, c = 1, u = 1;
    int d() const { return s + c + u; }
    // constants in the fixing order
    double xi = 0.0;
    double kappa = 0.05;
    long long L = 0;
    double theta = 0.004;
    int N = 0;
    double eta_hat = 0.0;
    double eta = 0.0;
    double alpha = 0.0;
    double rho = 0.24;
    double delta = 0.0;  // empirical separation, filled by verification
    // targets
    double r = 0.10, r_prime = 0.12, t = 0.05, gamma = 0.16;
    // environment
    double Delta = 2.75;
    double I_value = 0.0;  // measured (tight) or formula (strict, may overflow)
    double eps0 = 0.075;
    ScheduleMode mode = ScheduleMode::Tight;
    // log-domain strict values (always computed; never overflow)
    double log10_I_strict = 0.0;
    double log10_eta_hat_strict = 0.0;
    double log10_L_strict = 0.0;
    // tile family geometry
    TileFamily tiles;

    std::vector<std::string> violated_invariants() const {
        std::vector<std::string> bad;
        auto chk = [&](bool ok, const char* name) {
            if (!ok) bad.push_back(name);
        };
        chk(theta < std::min(kappa / 10.0, 1.0 / 20.0), "theta < min(kappa/10, 1/20)");
        chk(alpha < (eta / 2.0) * (kappa / 20.0 - theta / 2.0),
            "alpha < (eta/2)(kappa/20 - theta/2)");
        chk(std::fabs(eta * L - eta_hat) <= 1e-18 + 1e-12 * eta_hat, "eta = eta_hat / L");
        chk(std::pow(2.0, s + u) * eta * Delta + 2.0 * theta < 0.25,
            "2^{s+u} eta Delta + 2 theta < 1/4");
        chk(eta_hat < 1.0 / (10.0 * Delta * std::pow(2.0, s + u)),
            "eta_hat < 1/(10 Delta 2^{s+u})");
        chk(rho > 0.0 && rho < 0.25, "rho < 1/4");
        chk(std::pow(2.0, s + u) * rho * eta * Delta < r, "window below the pair range");
        chk(std::isfinite(log10_I_strict) && std::isfinite(log10_eta_hat_strict) &&
                std::isfinite(log10_L_strict),
            "log-domain strict values finite");
        if (mode == ScheduleMode::Strict) {
            chk(I_value >= intersection_bound_strict(N, xi, Delta, d()) * (1 - 1e-12),
                "I >= (N+1) xi max(1, Delta^{Nd})");
        }
        return bad;
    }

    Json to_json() const {
        Json j;
        j["mode"] = (mode == ScheduleMode::Strict) ? "strict" : "tight";
        j["dims"] = Json{{"s", s}, {"c", c}, {"u", u}, {"d", d()}};
        j["xi"] = xi;
        j["kappa"] = kappa;
        j["L"] = L;
        j["theta"] = theta;
        j["N"] = N;
        j["eta_hat"] = eta_hat;
        j["eta"] = eta;
        j["alpha"] = alpha;
        j["rho"] = rho;
        j["delta"] = delta;
        j["targets"] = Json{{"r", r}, {"r_prime", r_prime}, {"t", t}, {"gamma", gamma}};
        j["Delta"] = Delta;
        j["I"] = I_value;
        j["eps0"] = eps0;
        j["log10_I_strict"] = log10_I_strict;
        j["log10_eta_hat_strict"] = log10_eta_hat_strict;
        j["log10_L_strict"] = log10_L_strict;
        j["tiles"] = tiles.to_json();
        return j;
    }
};

// Assembles the schedule in the paper's fixing order from measured inputs.
// Tight mode substitutes measured xi / I / greedy-confirmed eta_hat while
// strict mode evaluates the worst-case formulas (log-domain) and reports
// the (usually astronomically small) worst-case eta_hat.
struct ScheduleInputs {
    double xi_measured = 0.0;
    double Delta = 2.75;
    int N_theta = 4;          // measured narrowing count for theta
    double I_measured = 0.0;  // tight-mode measured bound
    double eta_hat_confirmed = 0.0;  // from the greedy (tight)
};

inline ConstantSchedule build_schedule(const HyperbolicityCertificate& cert, SplitDims dims,
                                       ScheduleMode mode, double r, double r_prime, double t,
                                       double gamma, double kappa, double rho,
                                       const ScheduleInputs& in) {
    if (!(r < r_prime)) throw std::invalid_argument("schedule: need r < r_prime");
    ConstantSchedule sc;
    sc.s = dims.s;
    sc.c = dims.c;
    sc.u = dims.u;
    sc.mode = mode;
    sc.r = r;
    sc.r_prime = r_prime;
    sc.t = t;
    sc.gamma = gamma;
    sc.kappa = kappa;
    sc.rho = rho;
    sc.eps0 = cert.eps0;
    sc.Delta = in.Delta;
    sc.xi = in.xi_measured;

    // theta below the corollary bound
    sc.theta = 0.8 * std::min(kappa / 10.0, 1.0 / 20.0);

    // flatness floor: the stable tilt of a protected witness curve,
    // dev * lambda^{-(N+1)} summed geometrically, must stay a safety factor
    // below the kick scale kappa/20 over the reach 2^{s+u} Delta eta
    double dev = 12.5 * kCalibration * kappa;
    double lam = std::max(1.5, cert.expansion_u > 1.0 ? cert.expansion_u : sc.Delta);
    double reach = std::pow(2.0, sc.s + sc.u) * sc.Delta;
    double safety = 4.0;
    double need = std::log(dev * 1.62 * reach * 20.0 * safety / kappa) / std::log(lam);
    int N_flat = std::max(1, static_cast<int>(std::ceil(need)) - 1);
    sc.N = std::max(in.N_theta, N_flat);

    sc.tiles = build_tile_family(sc.Delta, sc.s, sc.u, mode == ScheduleMode::Strict);
    sc.L = sc.tiles.L;
    sc.log10_L_strict = sc.tiles.log10_L_strict;

    sc.log10_I_strict = intersection_bound_strict_log10(sc.N, std::max(sc.xi, 1.0), sc.Delta,
                                                        sc.d());
    sc.log10_eta_hat_strict = -(std::log10(8.0) + sc.log10_I_strict +
                                sc.N * std::log10(sc.Delta));
    sc.I_value = (mode == ScheduleMode::Strict)
                     ? intersection_bound_strict(sc.N, sc.xi, sc.Delta, sc.d())
                     : in.I_measured;

    if (mode == ScheduleMode::Strict) {
        sc.eta_hat = std::pow(10.0, sc.log10_eta_hat_strict);  // may underflow to 0
    } else {
        sc.eta_hat = in.eta_hat_confirmed;
    }
    sc.eta = sc.eta_hat / static_cast<double>(sc.L);
    sc.alpha = 0.9 * (sc.eta / 2.0) * (kappa / 20.0 - sc.theta / 2.0);
    return sc;
}

}  // namespace phlab

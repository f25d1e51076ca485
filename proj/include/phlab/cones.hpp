#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "phlab/geometry.hpp"
#include "phlab/json_io.hpp"
#include "phlab/models.hpp"
#include "phlab/rng.hpp"

namespace phlab {

// ---------------------------------------------------------------------------
// Cones of constant width around the extended bundles. The defining
// decomposition is the Euclidean-orthogonal one, so each bundle carries an
// orthonormal basis of its span and of the complement.
// ---------------------------------------------------------------------------

template <int D>
struct BundleBasis {
    int dim_e = 0;
    std::vector<Vec<D>> on_e;     // orthonormal basis of the bundle span
    std::vector<Vec<D>> on_perp;  // orthonormal basis of the complement
};

template <int D>
BundleBasis<D> make_bundle_basis(const Frames<D>& fr, Sigma sigma) {
    BundleBasis<D> bb;
    auto push_ortho = [](std::vector<Vec<D>>& set, Vec<D> v) {
        for (const auto& e : set) v -= dot(v, e) * e;
        double n = norm(v);
        if (n > 1e-12) set.push_back(v * (1.0 / n));
    };
    for (int j = 0; j < D; ++j)
        if (in_bundle(fr.dims, sigma, j)) push_ortho(bb.on_e, fr.column(j));
    bb.dim_e = static_cast<int>(bb.on_e.size());
    // complete to a basis of R^D; start from the remaining frame columns
    std::vector<Vec<D>> all = bb.on_e;
    for (int j = 0; j < D; ++j)
        if (!in_bundle(fr.dims, sigma, j)) {
            size_t before = all.size();
            push_ortho(all, fr.column(j));
            if (all.size() > before) bb.on_perp.push_back(all.back());
        }
    for (int j = 0; j < D && static_cast<int>(all.size()) < D; ++j) {
        Vec<D> e{};
        e[j] = 1.0;
        size_t before = all.size();
        push_ortho(all, e);
        if (all.size() > before) bb.on_perp.push_back(all.back());
    }
    return bb;
}

template <int D>
struct ConeField {
    Frames<D> frames;
    Sigma sigma = Sigma::U;
    double eps = 0.1;
    BundleBasis<D> basis;
};

template <int D>
ConeField<D> make_cone_field(const Frames<D>& fr, Sigma sigma, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("cone width must be positive");
    ConeField<D> cf;
    cf.frames = fr;
    cf.sigma = sigma;
    cf.eps = eps;
    cf.basis = make_bundle_basis<D>(fr, sigma);
    return cf;
}

// ||v_perp|| < eps ||v_E|| with the orthogonal decomposition against E.
template <int D>
bool cone_contains(const ConeField<D>& cone, const Vec<D>& v) {
    if (norm(v) == 0.0) throw std::invalid_argument("cone_contains: zero vector");
    Vec<D> ve{};
    for (const auto& e : cone.basis.on_e) ve += dot(v, e) * e;
    Vec<D> vp = v - ve;
    return norm(vp) < cone.eps * norm(ve);
}

// width ratio ||v_perp|| / ||v_E|| (infinite if v_E = 0)
template <int D>
double cone_ratio(const BundleBasis<D>& bb, const Vec<D>& v) {
    Vec<D> ve{};
    for (const auto& e : bb.on_e) ve += dot(v, e) * e;
    Vec<D> vp = v - ve;
    double ne = norm(ve);
    if (ne == 0.0) return std::numeric_limits<double>::infinity();
    return norm(vp) / ne;
}

// Deterministic mesh of boundary rays v = e + eps*n, |e| = |n| = 1.
template <int D>
std::vector<Vec<D>> boundary_rays(const BundleBasis<D>& bb, double eps, int mesh) {
    std::vector<Vec<D>> rays;
    auto circle = [&](const std::vector<Vec<D>>& basis, int m) {
        std::vector<Vec<D>> pts;
        if (basis.size() == 1) {
            pts.push_back(basis[0]);
            pts.push_back(basis[0] * -1.0);
        } else if (basis.size() >= 2) {
            for (int r = 0; r < m; ++r) {
                double phi = 2.0 * M_PI * r / m;
                pts.push_back(std::cos(phi) * basis[0] + std::sin(phi) * basis[1]);
            }
        }
        return pts;
    };
    auto es = circle(bb.on_e, mesh);
    auto ns = circle(bb.on_perp, mesh);
    for (const auto& e : es)
        for (const auto& n : ns) {
            if (static_cast<int>(rays.size()) >= 4 * mesh) break;
            rays.push_back(e + eps * n);
        }
    return rays;
}

// ---------------------------------------------------------------------------
// Sampled certificate of Proposition-style cone invariance and expansion.
// ---------------------------------------------------------------------------

struct SigmaReport {
    double min_margin = 1.0;     // 1 - ratio/eps, strictly positive = inside
    double min_expansion = 0.0;  // growth of boundary rays under the map
};

struct HyperbolicityCertificate {
    bool ok = false;
    int ell = 0;                 // iterate count realizing the strict inequalities
    double eps0 = 0.0;
    double delta = 0.0;          // max(|Dg|, |Dg^-1|) over samples
    double expansion_u = 0.0;    // min growth on the u cone under Dg
    double expansion_s = 0.0;    // min growth on the s cone under Dg^-1
    SigmaReport report_s, report_cs, report_cu, report_u;
    int samples = 0;
    int rays = 0;
    uint64_t seed = 0;
    std::string violation;       // empty if ok
    std::vector<std::pair<double, int>> narrowing;  // (a, N_a) table

    SigmaReport& report(Sigma s) {
        switch (s) {
            case Sigma::S: return report_s;
            case Sigma::CS: return report_cs;
            case Sigma::CU: return report_cu;
            default: return report_u;
        }
    }
    const SigmaReport& report(Sigma s) const {
        return const_cast<HyperbolicityCertificate*>(this)->report(s);
    }

    Json to_json() const {
        Json j;
        j["ok"] = ok;
        j["ell"] = ell;
        j["eps0"] = eps0;
        j["delta"] = delta;
        j["expansion_u"] = expansion_u;
        j["expansion_s"] = expansion_s;
        for (Sigma s : {Sigma::S, Sigma::CS, Sigma::CU, Sigma::U}) {
            Json r;
            r["min_margin"] = report(s).min_margin;
            r["min_expansion"] = report(s).min_expansion;
            j[std::string("cone_") + sigma_name(s)] = r;
        }
        j["samples"] = samples;
        j["rays"] = rays;
        j["seed"] = seed;
        j["violation"] = violation;
        Json nar = Json::array();
        for (auto& [a, n] : narrowing) nar.push_back(Json{{"a", a}, {"N", n}});
        j["narrowing"] = nar;
        return j;
    }
};

// Sample points for the certificate: uniform on the torus plus, for
// composites, points whose image lands inside a rectangle (worst case for
// the margins).
template <int D>
std::vector<Vec<D>> certificate_samples(const MapModel<D>& m, int n, Rng& rng) {
    std::vector<Vec<D>> pts;
    pts.reserve(static_cast<size_t>(n));
    int biased = m.is_composite() ? n / 3 : 0;
    for (int i = 0; i < n - biased; ++i) {
        Vec<D> p;
        for (int k = 0; k < D; ++k) p[k] = rng.uniform01();
        pts.push_back(p);
    }
    for (int i = 0; i < biased; ++i) {
        auto q = m.sample_patch_point(rng);
        if (q) pts.push_back(m.eval_inverse(*q));
        else {
            Vec<D> p;
            for (int k = 0; k < D; ++k) p[k] = rng.uniform01();
            pts.push_back(p);
        }
    }
    return pts;
}

// Frames for certification: the exact splitting when the model has one,
// coordinate axes otherwise (a map with no splitting then fails on the
// expansion requirement instead of erroring out).
template <int D>
Frames<D> certification_frames(const MapModel<D>& m) {
    try {
        return m.chart_frames();
    } catch (const std::domain_error&) {
        Frames<D> fr;
        fr.dims = m.dims;
        return fr;
    }
}

template <int D>
HyperbolicityCertificate certify_invariance(const MapModel<D>& m, double eps0,
                                            int n_samples = 200, int mesh = 16,
                                            uint64_t seed = 2024) {
    Frames<D> fr = certification_frames(m);
    HyperbolicityCertificate cert;
    cert.eps0 = eps0;
    cert.samples = n_samples;
    cert.seed = seed;
    cert.ok = true;
    Rng rng(seed);
    auto samples = certificate_samples<D>(m, n_samples, rng);

    struct Dir {
        Sigma sigma;
        bool forward;
    };
    const Dir dirs[4] = {{Sigma::U, true}, {Sigma::CU, true}, {Sigma::S, false}, {Sigma::CS, false}};

    double delta = 0.0;
    for (const auto& p : samples) {
        Mat<D> Jf = m.derivative(p);
        Mat<D> Jb = m.derivative_inverse(p);
        delta = std::max(delta, std::max(operator_norm(Jf), operator_norm(Jb)));
    }
    cert.delta = delta;

    for (const auto& dir : dirs) {
        auto bb = make_bundle_basis<D>(fr, dir.sigma);
        auto rays = boundary_rays<D>(bb, eps0, mesh);
        cert.rays = static_cast<int>(rays.size());
        SigmaReport rep;
        rep.min_margin = 1.0;
        rep.min_expansion = std::numeric_limits<double>::infinity();
        for (const auto& p : samples) {
            Mat<D> J = dir.forward ? m.derivative(p) : m.derivative_inverse(p);
            for (const auto& v : rays) {
                Vec<D> w = J * v;
                double ratio = cone_ratio<D>(bb, w);
                double margin = 1.0 - ratio / eps0;
                if (margin < rep.min_margin) rep.min_margin = margin;
                double growth = norm(w) / norm(v);
                if (growth < rep.min_expansion) rep.min_expansion = growth;
                if (margin <= 0.0 && cert.violation.empty()) {
                    cert.ok = false;
                    cert.violation = std::string("cone ") + sigma_name(dir.sigma) +
                                     " not strictly invariant at sampled point";
                }
            }
        }
        cert.report(dir.sigma) = rep;
    }
    cert.expansion_u = cert.report_u.min_expansion;
    cert.expansion_s = cert.report_s.min_expansion;
    if (cert.expansion_u <= 1.0) {
        cert.ok = false;
        if (cert.violation.empty()) cert.violation = "no expansion on the unstable cone";
    }
    if (cert.expansion_s <= 1.0) {
        cert.ok = false;
        if (cert.violation.empty()) cert.violation = "no backward expansion on the stable cone";
    }

    // Smallest ell realizing the partial hyperbolicity inequalities on the
    // sampled frame directions (exact bundles for linear/skew models).
    std::vector<Vec<D>> s_dirs, c_dirs, u_dirs;
    for (int j = 0; j < D; ++j) {
        if (fr.dims.is_s(j)) s_dirs.push_back(fr.column(j));
        else if (fr.dims.is_c(j)) c_dirs.push_back(fr.column(j));
        else u_dirs.push_back(fr.column(j));
    }

    cert.ell = 0;
    for (int ell = 1; ell <= 16 && cert.ell == 0; ++ell) {
        bool okay = true;
        for (const auto& p : samples) {
            Mat<D> J = Mat<D>::identity();
            Vec<D> q = p;
            for (int t = 0; t < ell; ++t) {
                J = m.derivative(q) * J;
                q = m.eval(q);
            }
            double smax = 0.0, cmin = std::numeric_limits<double>::infinity(), cmax = 0.0,
                   umin = std::numeric_limits<double>::infinity();
            for (const auto& v : s_dirs) smax = std::max(smax, norm(J * v));
            for (const auto& v : u_dirs) umin = std::min(umin, norm(J * v));
            for (const auto& v : c_dirs) {
                double g = norm(J * v);
                cmin = std::min(cmin, g);
                cmax = std::max(cmax, g);
            }
            if (c_dirs.empty()) cmin = cmax = 1.0;
            if (!(smax < std::min(1.0, cmin) && std::max(1.0, cmax) < umin)) {
                okay = false;
                break;
            }
        }
        if (okay) cert.ell = ell;
    }
    if (cert.ell == 0) {
        cert.ok = false;
        if (cert.violation.empty())
            cert.violation = "no iterate realizes the splitting inequalities (cap 16)";
    }
    return cert;
}

// Smallest sampled N with Dg^N (eps0-cone at g^-N x) inside the a-cone at x,
// over samples whose backward orbit stays clear of the rectangles.
template <int D>
int narrowing_iterations(const MapModel<D>& m, Sigma sigma, double eps0, double a,
                         int n_samples = 64, int mesh = 12, int cap = 64,
                         uint64_t seed = 4096) {
    if (a >= eps0) return 0;
    bool forward = (sigma == Sigma::U || sigma == Sigma::CU);
    Frames<D> fr = m.chart_frames();
    auto bb = make_bundle_basis<D>(fr, sigma);
    auto rays = boundary_rays<D>(bb, eps0, mesh);
    Rng rng(seed);
    auto samples = certificate_samples<D>(m, n_samples, rng);

    for (int N = 1; N <= cap; ++N) {
        bool all_inside = true;
        int used = 0;
        for (const auto& x : samples) {
            // follow the orbit backwards (forward cones) or forwards
            std::vector<Vec<D>> orbit(static_cast<size_t>(N) + 1);
            orbit[0] = x;
            bool clear = true;
            for (int t = 1; t <= N; ++t) {
                orbit[static_cast<size_t>(t)] =
                    forward ? m.eval_inverse(orbit[static_cast<size_t>(t - 1)])
                            : m.eval(orbit[static_cast<size_t>(t - 1)]);
            }
            if (m.is_composite()) {
                // Prop hypothesis: the N-segment ending at x avoids rectangles
                for (int t = 0; t <= N && clear; ++t)
                    if (m.locate_patch(orbit[static_cast<size_t>(t)]).hit) clear = false;
            }
            if (!clear) continue;
            ++used;
            Mat<D> J = Mat<D>::identity();
            Vec<D> q = orbit[static_cast<size_t>(N)];
            for (int t = 0; t < N; ++t) {
                J = (forward ? m.derivative(q) : m.derivative_inverse(q)) * J;
                q = forward ? m.eval(q) : m.eval_inverse(q);
            }
            for (const auto& v : rays) {
                if (cone_ratio<D>(bb, J * v) >= a) {
                    all_inside = false;
                    break;
                }
            }
            if (!all_inside) break;
        }
        if (all_inside && used > 0) return N;
    }
    throw std::runtime_error("narrowing_iterations: cap exceeded");
}

}  // namespace phlab

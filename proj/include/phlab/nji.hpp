#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "phlab/cones.hpp"
#include "phlab/coverings.hpp"
#include "phlab/json_io.hpp"
#include "phlab/laminations.hpp"
#include "phlab/models.hpp"
#include "phlab/perturbation.hpp"
#include "phlab/rng.hpp"
#include "phlab/workers.hpp"

namespace phlab {

// ===========================================================================
// End-to-end construction of the perturbed map and verification of the
// non-joint-integrability conclusion at grid scale.
// ===========================================================================

struct ScheduleInfeasible : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PipelineConfig {
    ScheduleMode mode = ScheduleMode::Tight;
    double r = 0.10, r_prime = 0.12, t = 0.05, gamma = 0.16;
    double kappa = 0.05;
    double rho = 0.24;
    double eps0 = 0.075;
    double eta_hat_target = 2e-6;
    int max_halvings = 4;
    int cert_samples = 160;
    int cert_mesh = 12;
    int cov_pair_probes = 2000;
    int cov_ball_probes = 200;
    int narrow_samples = 24;
    double delta_margin = 1.02;  // schedule Delta = measured * margin
    uint64_t seed = 20260809;
};

struct PipelineResult {
    std::shared_ptr<MapModel<3>> g;
    std::shared_ptr<MapModel<3>> f;
    ConstantSchedule schedule;
    XiCovering<3> covering;
    WanderingSlices<3> slices;
    HyperbolicityCertificate cert_f;
    HyperbolicityCertificate cert_g;
    CoveringReport cov_report;
    C1SizeReport c1;
    Json build_report;
};

inline PipelineResult break_joint_integrability(const MapModel<3>& f, const PipelineConfig& cfg) {
    PipelineResult out;
    out.f = std::make_shared<MapModel<3>>(f);

    // stage 1: certificate for the base map
    out.cert_f = certify_invariance<3>(f, cfg.eps0, cfg.cert_samples, cfg.cert_mesh, cfg.seed);
    if (!out.cert_f.ok)
        throw std::runtime_error("pipeline stage certify: " + out.cert_f.violation);

    Frames<3> fr = f.chart_frames();
    double Delta = out.cert_f.delta * cfg.delta_margin;

    // stage 2: covering with verified bounded geometry
    out.covering = build_xi_covering<3>(fr, cfg.rho, true);
    out.cov_report = verify_covering<3>(out.covering, cfg.cov_pair_probes, cfg.cov_ball_probes,
                                        cfg.seed ^ 0x11);
    if (!out.cov_report.ok) throw std::runtime_error("pipeline stage covering: invariants failed");

    // stage 3: narrowing count for theta (the schedule N)
    double theta = 0.8 * std::min(cfg.kappa / 10.0, 1.0 / 20.0);
    int N_theta = narrowing_iterations<3>(f, Sigma::U, cfg.eps0, theta, cfg.narrow_samples, 8, 32,
                                          cfg.seed ^ 0x22);

    // stage 4: schedule arithmetic (before the geometry, so strict mode can
    // refuse with the infeasibility diagnostic)
    ScheduleInputs in;
    in.xi_measured = out.cov_report.xi_measured;
    in.Delta = Delta;
    in.N_theta = N_theta;
    ConstantSchedule pre = build_schedule(out.cert_f, f.dims, cfg.mode, cfg.r, cfg.r_prime, cfg.t,
                                          cfg.gamma, cfg.kappa, cfg.rho, in);
    double eta_hat_target = cfg.eta_hat_target;
    if (cfg.mode == ScheduleMode::Strict) {
        if (pre.log10_eta_hat_strict < std::log10(1e-7))
            throw ScheduleInfeasible("strict mode: infeasible eta_hat (log10 = " +
                                     std::to_string(pre.log10_eta_hat_strict) + ")");
        eta_hat_target = pre.eta_hat;
    }

    // stage 5: wandering slices (greedy with halving retry)
    out.slices = select_wandering_slices<3>(f, out.covering, pre.N, eta_hat_target,
                                            cfg.mode == ScheduleMode::Strict ? 0 : cfg.max_halvings);
    in.eta_hat_confirmed = out.slices.eta_hat;

    // stage 6: measured intersection bound
    in.I_measured = intersection_bound_measured<3>(f, out.covering, pre.N, 2, cfg.seed ^ 0x33);

    out.schedule = build_schedule(out.cert_f, f.dims, cfg.mode, cfg.r, cfg.r_prime, cfg.t,
                                  cfg.gamma, cfg.kappa, cfg.rho, in);
    auto bad = out.schedule.violated_invariants();
    if (!bad.empty()) {
        std::string msg = "pipeline stage schedule: invariants violated:";
        for (auto& b : bad) msg += " [" + b + "]";
        throw std::runtime_error(msg);
    }

    // stage 7: compose the global perturbation
    PatchFamily<3> fam;
    fam.lattice_n = out.covering.n;
    fam.rho = cfg.rho;
    fam.eta_hat = out.schedule.eta_hat;
    fam.L = static_cast<int>(out.schedule.L);
    fam.period = out.schedule.tiles.period;
    fam.stagger = out.schedule.tiles.stagger;
    fam.anchor0 = out.schedule.tiles.anchor0;
    fam.slice_idx = out.slices.slice_idx;
    ElementaryPerturbation h =
        build_elementary(cfg.kappa, out.schedule.eta, f.dims, f.dims.s, f.dims.s + f.dims.c);
    out.g = std::make_shared<MapModel<3>>(
        MapModel<3>::composite(out.f, h, {}, std::move(fam), true));

    // stage 8: post-build checks
    out.c1 = estimate_c1_size<3>(h, fr, 5, 120, cfg.seed ^ 0x44);
    out.cert_g = certify_invariance<3>(*out.g, cfg.eps0, cfg.cert_samples, cfg.cert_mesh,
                                       cfg.seed ^ 0x55);
    if (cfg.kappa > 0.0 && !out.cert_g.ok)
        throw std::runtime_error("pipeline stage recertify: " + out.cert_g.violation);

    Json rep;
    rep["stage"] = "complete";
    rep["N"] = out.schedule.N;
    rep["eta_hat"] = out.schedule.eta_hat;
    rep["eta"] = out.schedule.eta;
    rep["L"] = out.schedule.L;
    rep["halvings"] = out.slices.halvings;
    rep["xi_measured"] = out.cov_report.xi_measured;
    rep["I_measured"] = out.schedule.I_value;
    rep["Delta"] = out.schedule.Delta;
    rep["c1_deviation"] = out.c1.c1_deviation;
    rep["c1_bound_10kappa"] = 10.0 * cfg.kappa;
    rep["cert_g_ok"] = out.cert_g.ok;
    rep["placement_cubes"] = out.g->family_cubes_with_slices().size();
    rep["model_hash"] = out.g->hash();
    rep["schedule_hash"] = json_hash(out.schedule.to_json());
    out.build_report = rep;
    return out;
}

// ===========================================================================
// Witnesses and verification.
// ===========================================================================

struct NJIWitness {
    Vec<3> x{}, y{}, x_prime{};
    double ds = 0.0;      // leafwise distance of the pair
    double du = 0.0;      // d_u(x, x')
    int n_iter = 0;       // window iterate
    int cube_id = -1;
    int row = -1;
    double delta = 0.0;   // d(W^s_gamma(x'), W^u_gamma(y))
    double delta_local = 0.0;  // separation measured at the window iterate
    bool chain_ok = false;
    bool valid = false;
    std::string note;

    Json to_json() const {
        auto vj = [](const Vec<3>& v) { return Json::array({v[0], v[1], v[2]}); };
        Json j;
        j["x"] = vj(x);
        j["y"] = vj(y);
        j["x_prime"] = vj(x_prime);
        j["ds"] = ds;
        j["du"] = du;
        j["n"] = n_iter;
        j["cube"] = cube_id;
        j["row"] = row;
        j["delta"] = delta;
        j["delta_local"] = delta_local;
        j["chain_ok"] = chain_ok;
        j["valid"] = valid;
        if (!note.empty()) j["note"] = note;
        return j;
    }
};

struct VerificationReport {
    int n_pairs = 0;
    int failures = 0;
    double delta_min = 0.0, delta_median = 0.0, delta_max = 0.0;
    double baseline_sup = -1.0;   // probe closure of the unperturbed map
    double robustness_margin = -1.0;
    std::string model_hash, schedule_hash;
    std::vector<NJIWitness> witnesses;

    Json to_json() const {
        Json j;
        j["model_hash"] = model_hash;
        j["schedule_hash"] = schedule_hash;
        j["n_pairs"] = n_pairs;
        j["failures"] = failures;
        j["delta_min"] = delta_min;
        j["delta_median"] = delta_median;
        j["delta_max"] = delta_max;
        j["baseline_sup"] = baseline_sup;
        j["robustness_margin"] = robustness_margin;
        Json rows = Json::array();
        for (const auto& w : witnesses) rows.push_back(w.to_json());
        j["witnesses"] = rows;
        return j;
    }
};

struct VerifyOptions {
    int n_pairs = 100;
    uint64_t seed = 1234;
    int workers = 1;
    int leaf_mesh = 512;
    double delta_floor = 0.0;  // witnesses below this are failures (0: any positive)
    int max_window_iter = 64;
};

namespace detail {

// chart-u coordinate of a leaf point as a function of the seed parameter;
// secant solve for a prescribed target.
inline double seed_param_for_chart_u(const MapModel<3>& m, const LeafDisk<3>& disk,
                                     const ChartedCube<3>& cu, double target_u) {
    int u_axis = cu.frames.dims.s + cu.frames.dims.c;
    double s0 = 0.0;
    double s1 = disk.seed_params.back() * 0.5;
    auto uat = [&](double s) { return cu.chart_coord(leaf_point<3>(m, disk, s), u_axis); };
    double u0 = uat(s0), u1 = uat(s1);
    for (int it = 0; it < 80; ++it) {
        if (u1 == u0) break;
        double s2 = s1 + (target_u - u1) * (s1 - s0) / (u1 - u0);
        double lo = disk.seed_params.front(), hi = disk.seed_params.back();
        s2 = std::clamp(s2, lo, hi);
        s0 = s1;
        u0 = u1;
        s1 = s2;
        u1 = uat(s1);
        if (std::fabs(u1 - target_u) < 1e-13) break;
    }
    return s1;
}

// Minimum distance between two polylines given as point sequences.
inline double min_dist_polylines(const std::vector<Vec<3>>& a, const std::vector<Vec<3>>& b,
                                 size_t* ai = nullptr, size_t* bi = nullptr) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < a.size(); ++i)
        for (size_t j = 0; j + 1 < b.size(); ++j) {
            // segment-segment distance via sampled projection (segments are
            // short and near-straight; endpoint projections suffice)
            double d = std::min(std::min(point_to_segment<3>(a[i], b[j], b[j + 1]),
                                         point_to_segment<3>(a[i + 1], b[j], b[j + 1])),
                                std::min(point_to_segment<3>(b[j], a[i], a[i + 1]),
                                         point_to_segment<3>(b[j + 1], a[i], a[i + 1])));
            if (d < best) {
                best = d;
                if (ai) *ai = i;
                if (bi) *bi = j;
            }
        }
    return best;
}

// Re-derive a window of fine leaf points around a seed-parameter interval.
inline std::vector<Vec<3>> fine_leaf_window(const MapModel<3>& m, const LeafDisk<3>& disk,
                                            double s_lo, double s_hi, int pts) {
    std::vector<Vec<3>> out;
    out.reserve(static_cast<size_t>(pts) + 1);
    for (int k = 0; k <= pts; ++k)
        out.push_back(leaf_point<3>(m, disk, s_lo + (s_hi - s_lo) * k / pts));
    return out;
}

// Zoomed minimum distance between two leaf disks.
inline double refined_min_dist(const MapModel<3>& m, const LeafDisk<3>& A, const LeafDisk<3>& B,
                               int zoom_levels = 7) {
    size_t ia = 0, ib = 0;
    double best = min_dist_polylines(A.pts, B.pts, &ia, &ib);
    double a_lo = A.seed_params[ia], a_hi = A.seed_params[std::min(ia + 1, A.seed_params.size() - 1)];
    double b_lo = B.seed_params[ib], b_hi = B.seed_params[std::min(ib + 1, B.seed_params.size() - 1)];
    // widen one step on each side
    double a_w = a_hi - a_lo, b_w = b_hi - b_lo;
    a_lo -= a_w;
    a_hi += a_w;
    b_lo -= b_w;
    b_hi += b_w;
    for (int lvl = 0; lvl < zoom_levels; ++lvl) {
        auto pa = fine_leaf_window(m, A, a_lo, a_hi, 48);
        auto pb = fine_leaf_window(m, B, b_lo, b_hi, 48);
        size_t ja = 0, jb = 0;
        double d = min_dist_polylines(pa, pb, &ja, &jb);
        best = std::min(best, d);
        double na_w = (a_hi - a_lo) / 48.0, nb_w = (b_hi - b_lo) / 48.0;
        double ca = a_lo + na_w * (static_cast<double>(ja) + 0.5);
        double cb = b_lo + nb_w * (static_cast<double>(jb) + 0.5);
        a_lo = ca - 3 * na_w;
        a_hi = ca + 3 * na_w;
        b_lo = cb - 3 * nb_w;
        b_hi = cb + 3 * nb_w;
    }
    return best;
}

}  // namespace detail

// Verification of one sampled stable pair; returns the witness row.
inline NJIWitness verify_one_pair(const MapModel<3>& g, const ConstantSchedule& sc,
                                  const XiCovering<3>& cov, Rng rng,
                                  const VerifyOptions& opt) {
    NJIWitness w;
    Frames<3> fr = cov.frames;
    double rho = sc.rho, eta = sc.eta, eta_hat = sc.eta_hat;
    int u_axis = fr.dims.s + fr.dims.c;
    const PatchFamily<3>& fam = g.family;

    // pair on a common stable leaf
    Vec<3> x{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
    LeafOptions lopt;
    lopt.mesh = opt.leaf_mesh;
    auto sx = local_stable_disk<3>(g, x, sc.r_prime * 1.05, lopt);
    double d0 = rng.uniform(sc.r, sc.r_prime);
    double sign = rng.coin() ? 1.0 : -1.0;
    Vec<3> y = point_at_arc<3>(g, sx, sign * d0);
    w.x = x;
    w.y = y;
    w.ds = d0;

    // window search with exact difference tracking
    double win_lo = std::pow(2.0, fr.dims.s + fr.dims.u) * rho * eta;
    double win_hi = win_lo * sc.Delta;
    Vec<3> p = x;
    Vec<3> v = torus_diff(y, x);
    int n = 0;
    while (norm(v) > win_hi && n < opt.max_window_iter) {
        v = g.eval_difference(p, v);
        p = g.eval(p);
        ++n;
    }
    if (norm(v) > win_hi || norm(v) < win_lo) {
        w.note = "window missed (|v| = " + std::to_string(norm(v)) + ")";
        return w;
    }
    w.n_iter = n;
    Vec<3> pn = p;
    Vec<3> qn = wrap<3>(pn + v);

    // covering cube holding both points in its rho/3 cube
    int cube_id = -1;
    Vec<3> mid = wrap<3>(pn + 0.5 * v);
    double best_inf = 1e9;
    detail::for_lattice_near<3>(cov, mid, rho / 2, [&](int id, const Vec<3>& z) {
        Vec<3> wp = fr.to_frame(torus_diff(pn, z));
        Vec<3> wq = fr.to_frame(torus_diff(qn, z));
        double m_inf = 0;
        for (int i = 0; i < 3; ++i)
            m_inf = std::max(m_inf, std::max(std::fabs(wp[i]), std::fabs(wq[i])));
        if (m_inf < best_inf) {
            best_inf = m_inf;
            cube_id = id;
        }
    });
    if (cube_id < 0 || best_inf > rho / 6) {
        w.note = "no covering cube holds the pair";
        return w;
    }
    w.cube_id = cube_id;
    ChartedCube<3> cu{cov.point(cube_id), rho, fr};
    int32_t cand = fam.slice_idx.empty() ? -1 : fam.slice_idx[static_cast<size_t>(cube_id)];
    if (cand < 0) {
        w.note = "cube has no slice";
        return w;
    }
    double u0 = cand * eta_hat;

    // local unstable disks through pn and qn across the slice
    auto dp = local_unstable_disk<3>(g, pn, 0.16, lopt);
    auto dq = local_unstable_disk<3>(g, qn, 0.16, lopt);
    double u_mid = u0 + eta_hat / 2;
    double sp_par = detail::seed_param_for_chart_u(g, dp, cu, u_mid);
    double sq_par = detail::seed_param_for_chart_u(g, dq, cu, u_mid);
    double s_p = cu.chart_coord(leaf_point<3>(g, dp, sp_par), 0);
    double s_q = cu.chart_coord(leaf_point<3>(g, dq, sq_par), 0);

    // row arithmetic: D(qn) must hit a half rectangle whose row D(pn) misses
    int row = -1;
    double best_clear = 0.0;
    double period = fam.period;
    for (int j = 0; j < fam.L; ++j) {
        double aj = std::fmod(fam.anchor0 + j * fam.stagger, period);
        if (aj < 0) aj += period;
        double rel_q = std::fmod(s_q / eta - aj, period);
        if (rel_q < 0) rel_q += period;
        double clear_q = std::min(rel_q - 0.25, 0.75 - rel_q);
        if (clear_q <= 0.02) continue;
        // the anchor must be realizable inside the chart
        double a_real = s_q / eta - rel_q;
        if (a_real * eta < 0.0 || (a_real + 1.0) * eta > 1.0) continue;
        double rel_p = std::fmod(s_p / eta - aj, period);
        if (rel_p < 0) rel_p += period;
        double clear_p = std::min(rel_p - 1.0, period - rel_p);  // distance from [0,1]
        if (clear_p <= 0.5) continue;
        double score = std::min(clear_q, clear_p / period);
        if (score > best_clear) {
            best_clear = score;
            row = j;
        }
    }
    if (row < 0) {
        w.note = "no admissible row (dichotomy failed)";
        return w;
    }
    w.row = row;

    // witness candidates at the two kick plateaus of the profile
    double delta_local_best = -1.0;
    double cand_par_best = 0.0;
    for (double uhat : {0.25, 0.75}) {
        double target_u = u0 + (row + uhat) * eta;
        double par = detail::seed_param_for_chart_u(g, dp, cu, target_u);
        Vec<3> xpn = leaf_point<3>(g, dp, par);
        // local separation: the stable disk of the candidate against the
        // kicked piece of D(qn) near the same chart height
        double reach = 3.0 * norm(v) + 1e-9;
        LeafOptions small;
        small.mesh = 160;
        auto sn = local_stable_disk<3>(g, xpn, reach, small);
        double qpar = detail::seed_param_for_chart_u(g, dq, cu, target_u);
        double qstep = std::fabs(dq.seed_params.back() - dq.seed_params.front()) * 2e-7 + 1e-18;
        double halfwin = std::max(qstep, std::fabs(qpar) * 1e-9 + 4e-12 * 1.0);
        // widen the window until it spans the stable reach in u
        double du_need = (reach * 1.5) / rho;  // chart units
        {
            double u_at = cu.chart_coord(leaf_point<3>(g, dq, qpar), u_axis);
            double u_hi = cu.chart_coord(leaf_point<3>(g, dq, qpar + halfwin), u_axis);
            double rate = std::fabs(u_hi - u_at) / halfwin;
            if (rate > 0) halfwin = std::max(halfwin, du_need / rate);
        }
        auto piece = detail::fine_leaf_window(g, dq, qpar - halfwin, qpar + halfwin, 96);
        LeafDisk<3> piece_disk = dq;  // reuse pullback metadata for refinement
        piece_disk.seed_params.clear();
        piece_disk.pts = piece;
        for (int k = 0; k <= 96; ++k)
            piece_disk.seed_params.push_back(qpar - halfwin + 2 * halfwin * k / 96.0);
        double dl = detail::refined_min_dist(g, sn, piece_disk, 6);
        if (dl > delta_local_best) {
            delta_local_best = dl;
            cand_par_best = par;
        }
    }
    w.delta_local = delta_local_best;

    // pull the witness back with difference arithmetic along the orbit
    Vec<3> xpn = leaf_point<3>(g, dp, cand_par_best);
    {
        std::vector<Vec<3>> orbit(static_cast<size_t>(n) + 1);
        orbit[0] = x;
        for (int k = 1; k <= n; ++k)
            orbit[static_cast<size_t>(k)] = g.eval(orbit[static_cast<size_t>(k - 1)]);
        Vec<3> wdiff = torus_diff(xpn, orbit[static_cast<size_t>(n)]);
        for (int k = n; k >= 1; --k)
            wdiff = g.eval_difference_inverse(orbit[static_cast<size_t>(k)], wdiff);
        w.x_prime = wrap<3>(x + wdiff);
        w.du = norm(wdiff);
    }
    if (w.du > sc.t) {
        w.note = "witness outside W^u_t";
        return w;
    }

    // final separation of the gamma disks at time zero
    auto S = local_stable_disk<3>(g, w.x_prime, sc.gamma, lopt);
    auto U = local_unstable_disk<3>(g, y, sc.gamma, lopt);
    w.delta = detail::refined_min_dist(g, S, U, 7);

    // distance chain at the witness iterate (forward magnitudes are large,
    // round-off is irrelevant here)
    {
        size_t ia = 0, ib = 0;
        detail::min_dist_polylines(S.pts, U.pts, &ia, &ib);
        Vec<3> yhat = U.pts[ib];
        Vec<3> a = w.x_prime, b = yhat;
        for (int k = 0; k < n; ++k) {
            a = g.eval(a);
            b = g.eval(b);
        }
        double lhs = torus_dist(a, b);
        double bound = 2.0 * sc.theta * rho + win_hi;
        w.chain_ok = (lhs < std::max(bound, rho / 4));
    }

    w.valid = (w.delta > opt.delta_floor) && w.chain_ok;
    if (!w.valid && w.note.empty()) w.note = "separation not positive";
    return w;
}

inline VerificationReport verify_nji(const MapModel<3>& g, const ConstantSchedule& sc,
                                     const XiCovering<3>& cov, const VerifyOptions& opt) {
    VerificationReport rep;
    rep.n_pairs = opt.n_pairs;
    rep.model_hash = g.hash();
    rep.schedule_hash = json_hash(sc.to_json());
    std::function<NJIWitness(int)> task = [&](int k) {
        return verify_one_pair(g, sc, cov, Rng(opt.seed).split(static_cast<uint64_t>(k)), opt);
    };
    rep.witnesses = parallel_map<NJIWitness>(opt.n_pairs, opt.workers, task);
    std::vector<double> deltas;
    for (const auto& w : rep.witnesses) {
        if (!w.valid) ++rep.failures;
        else deltas.push_back(w.delta);
    }
    if (!deltas.empty()) {
        std::sort(deltas.begin(), deltas.end());
        rep.delta_min = deltas.front();
        rep.delta_max = deltas.back();
        rep.delta_median = deltas[deltas.size() / 2];
    }
    return rep;
}

// ===========================================================================
// Baseline probe: sup over a grid of x' on W^u_t(x) of the closure distance
// d(W^s_gamma(x'), W^u_gamma(y)). Near zero = the holonomy closes.
// ===========================================================================

struct ProbeReport {
    int pairs = 0;
    double sup_closure = 0.0;
    double min_closure = 0.0;
    Json to_json() const {
        return Json{{"pairs", pairs}, {"sup_closure", sup_closure}, {"min_closure", min_closure}};
    }
};

inline ProbeReport joint_integrability_probe(const MapModel<3>& m, double r, double r_prime,
                                             double t, double gamma, int pairs, int xprime_grid,
                                             uint64_t seed) {
    ProbeReport rep;
    rep.pairs = pairs;
    rep.min_closure = std::numeric_limits<double>::infinity();
    Rng rng(seed);
    LeafOptions lopt;
    lopt.mesh = 256;
    for (int k = 0; k < pairs; ++k) {
        Vec<3> x{{rng.uniform01(), rng.uniform01(), rng.uniform01()}};
        auto sx = local_stable_disk<3>(m, x, r_prime * 1.05, lopt);
        double d0 = rng.uniform(r, r_prime);
        Vec<3> y = point_at_arc<3>(m, sx, (rng.coin() ? 1.0 : -1.0) * d0);
        auto uy = local_unstable_disk<3>(m, y, gamma, lopt);
        auto ux = local_unstable_disk<3>(m, x, t, lopt);
        double sup_over_xp = 0.0;
        for (int gidx = 0; gidx <= xprime_grid; ++gidx) {
            double arc = -t + 2.0 * t * gidx / xprime_grid;
            Vec<3> xp = point_at_arc<3>(m, ux, arc);
            auto sxp = local_stable_disk<3>(m, xp, gamma, lopt);
            double d = detail::min_dist_polylines(sxp.pts, uy.pts);
            sup_over_xp = std::max(sup_over_xp, d);
        }
        rep.sup_closure = std::max(rep.sup_closure, sup_over_xp);
        rep.min_closure = std::min(rep.min_closure, sup_over_xp);
    }
    return rep;
}

// ===========================================================================
// Synthetic adversarial check of the Lipschitz-separation arithmetic.
// ===========================================================================

struct LipschitzCheck {
    bool pass = false;
    double max_gap = 0.0;
    double bound = 0.0;
    Json to_json() const {
        return Json{{"pass", pass}, {"max_gap", max_gap}, {"bound", bound}};
    }
};

inline LipschitzCheck lipschitz_separation_check(double theta, double alpha, double kappa,
                                                 double eta, int samples, uint64_t seed) {
    LipschitzCheck out;
    out.bound = kappa * eta / 20.0;
    Rng rng(seed);
    double worst = 0.0;
    for (int trial = 0; trial < samples; ++trial) {
        // theta-Lipschitz center profile of the unperturbed disk over the
        // unstable window [eta/4, 3 eta/4]
        double u2 = rng.uniform(eta / 4, 3 * eta / 4);
        double u3 = rng.uniform(eta / 4, 3 * eta / 4);
        double slope1 = rng.uniform(-theta, theta);
        double c2 = slope1 * (u2 - eta / 2);
        double c3 = slope1 * (u3 - eta / 2);
        // alpha-Lipschitz stable graphs through those intersections reach
        // farthest center values at s-distance <= 1
        double reach2 = c2 + rng.uniform(-alpha, alpha);
        double reach3 = c3 + rng.uniform(-alpha, alpha);
        worst = std::max(worst, std::fabs(reach2 - reach3));
    }
    // adversarial corner: maximal theta slope and full alpha reach
    worst = std::max(worst, theta * eta / 2 + 2 * alpha);
    out.max_gap = worst;
    out.pass = worst < out.bound;
    return out;
}

// ===========================================================================
// Robustness: recheck the witnesses after composing one extra elementary
// perturbation of prescribed C1 size away from the witness slices.
// ===========================================================================

inline std::shared_ptr<MapModel<3>> compose_extra_perturbation(
    const std::shared_ptr<MapModel<3>>& g, const ConstantSchedule& sc,
    const std::vector<NJIWitness>& witnesses, double c1_size, uint64_t seed) {
    // kappa for the requested C1 size via the measured calibration slope
    double kappa_extra = std::min(0.9, c1_size / (12.3 * kCalibration));
    Rng rng(seed);
    // a cube away from every witness cube
    std::vector<int> used;
    for (const auto& w : witnesses) used.push_back(w.cube_id);
    const auto& fam = g->family;
    int cube = -1;
    for (int attempt = 0; attempt < 256 && cube < 0; ++attempt) {
        int c = static_cast<int>(rng.below(static_cast<uint64_t>(fam.cube_count())));
        bool ok = true;
        for (int u : used)
            if (u == c) ok = false;
        if (ok) cube = c;
    }
    if (cube < 0) cube = 0;
    LocalPatch<3> patch;
    patch.cube_center = fam.cube_center(cube);
    patch.rho = sc.rho;
    double eta_extra = 0.01;
    // below the slice zone [1/3, 2/3], well inside the chart
    patch.offset = Vec<3>{{0.45, 0.0, 0.1}};
    ElementaryPerturbation h = build_elementary(kappa_extra, eta_extra, g->dims, g->dims.s,
                                                g->dims.s + g->dims.c);
    return std::make_shared<MapModel<3>>(
        MapModel<3>::composite(g, h, {patch}, PatchFamily<3>{}, false));
}

struct RobustnessReport {
    double size_requested = 0.0;
    bool persists = false;
    double largest_passing = 0.0;
    int rounds = 0;
    Json to_json() const {
        return Json{{"size_requested", size_requested},
                    {"persists", persists},
                    {"largest_passing", largest_passing},
                    {"rounds", rounds}};
    }
};

inline RobustnessReport robustness_recheck(const std::shared_ptr<MapModel<3>>& g,
                                           const ConstantSchedule& sc, const XiCovering<3>& cov,
                                           const VerificationReport& base_report, double size,
                                           const VerifyOptions& base_opt, uint64_t seed,
                                           int subset = 16) {
    RobustnessReport rep;
    rep.size_requested = size;
    VerifyOptions opt = base_opt;
    opt.n_pairs = std::min(subset, base_opt.n_pairs);

    auto passes = [&](double sz) {
        if (sz <= 0.0) return true;
        auto gp = compose_extra_perturbation(g, sc, base_report.witnesses, sz, seed);
        auto rep2 = verify_nji(*gp, sc, cov, opt);
        return rep2.failures == 0;
    };

    rep.persists = passes(size);
    // bisection for the largest passing size (4 rounds)
    double lo = rep.persists ? size : 0.0;
    double hi = std::max(size, 1e-6);
    for (int round = 0; round < 4; ++round) {
        double midsz = rep.persists ? hi * std::pow(4.0, round + 1) : 0.5 * (lo + hi);
        if (rep.persists) {
            if (passes(midsz)) lo = midsz;
            else {
                hi = midsz;
                break;
            }
        } else {
            if (passes(midsz)) lo = midsz;
            else hi = midsz;
        }
        ++rep.rounds;
    }
    rep.largest_passing = lo;
    return rep;
}

}  // namespace phlab

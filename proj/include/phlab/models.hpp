#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "phlab/geometry.hpp"
#include "phlab/json_io.hpp"
#include "phlab/linalg.hpp"
#include "phlab/perturbation.hpp"

namespace phlab {

// ---------------------------------------------------------------------------
// Analytic splitting of a hyperbolic 2x2 integer block.
// ---------------------------------------------------------------------------

struct Planar2Splitting {
    double lam_s, lam_u;  // |lam_s| < 1 < |lam_u|
    Vec<2> e_s, e_u;      // unit eigenvectors
};

inline Planar2Splitting planar_splitting(const Mat<2>& A) {
    double tr = A(0, 0) + A(1, 1);
    double det = A(0, 0) * A(1, 1) - A(0, 1) * A(1, 0);
    double disc = tr * tr - 4 * det;
    if (disc <= 0) throw std::domain_error("planar_splitting: eigenvalues not real/distinct");
    double rt = std::sqrt(disc);
    double l1 = 0.5 * (tr + rt), l2 = 0.5 * (tr - rt);
    auto eigvec = [&](double lam) {
        Vec<2> v;
        if (std::fabs(A(0, 1)) > 1e-14) {
            v[0] = A(0, 1);
            v[1] = lam - A(0, 0);
        } else if (std::fabs(A(1, 0)) > 1e-14) {
            v[0] = lam - A(1, 1);
            v[1] = A(1, 0);
        } else {
            v[0] = std::fabs(A(0, 0) - lam) < std::fabs(A(1, 1) - lam) ? 1.0 : 0.0;
            v[1] = 1.0 - v[0];
        }
        return normalized(v);
    };
    Planar2Splitting sp;
    double au = std::fabs(l1) >= std::fabs(l2) ? l1 : l2;
    double as = std::fabs(l1) >= std::fabs(l2) ? l2 : l1;
    if (!(std::fabs(as) < 1.0 && std::fabs(au) > 1.0))
        throw std::domain_error("planar_splitting: block is not hyperbolic");
    sp.lam_u = au;
    sp.lam_s = as;
    sp.e_u = eigvec(au);
    sp.e_s = eigvec(as);
    return sp;
}

// ---------------------------------------------------------------------------
// MapModel: linear toral automorphisms, skew products over T^2 with a circle
// fiber map, and composites (base + local Hamiltonian patches).
// ---------------------------------------------------------------------------

template <int D>
struct LocalPatch {
    Vec<D> cube_center;
    double rho = 0.1;
    Vec<D> offset;  // chart offset of the rectangle corner (c entries zero)
};

// Arithmetic family of rectangles over a covering lattice: one wandering
// slice per lattice cube, L sub-slice rows, anchors in arithmetic
// progression (tile units, period/stagger/anchor0). Only u = 1 supported.
template <int D>
struct PatchFamily {
    int lattice_n = 0;
    double rho = 0.1;
    double eta_hat = 0.0;
    int L = 1;
    double period = 27.0;
    double stagger = 0.235;
    double anchor0 = 0.0;
    std::vector<int32_t> slice_idx;  // per cube: slice offset = idx * eta_hat; -1 = none

    int cube_count() const { return lattice_n * lattice_n * lattice_n; }
    Vec<D> cube_center(int id) const {
        Vec<D> z{};
        int n = lattice_n;
        z[0] = static_cast<double>(id / (n * n)) / n;
        z[1] = static_cast<double>((id / n) % n) / n;
        z[2] = static_cast<double>(id % n) / n;
        return z;
    }
};

struct PatchHit {
    bool hit = false;
    int cube_id = -1;  // family cube id, or explicit patch index
    bool from_family = false;
};

template <int D>
class MapModel {
  public:
    enum class Kind { Linear, Skew, Composite };

    Kind kind = Kind::Linear;
    SplitDims dims;

    // Linear / base data
    Mat<D> A = Mat<D>::identity();
    Mat<D> Ainv = Mat<D>::identity();

    // Skew data (D == 3): base block acts on (x,y), fiber on the last axis.
    double eps = 0.0;
    int k_harm = 1;
    double rot = 0.0;

    // Composite data
    std::shared_ptr<const MapModel<D>> base;
    ElementaryPerturbation pert;           // kappa, eta, axes, cF
    Frames<D> frames;                      // constant extended frames (from base)
    std::vector<LocalPatch<D>> patches;    // explicit rectangles
    PatchFamily<D> family;                 // arithmetic family (optional)
    bool has_family = false;

    // --- constructors ----------------------------------------------------

    static MapModel linear(const Mat<D>& M, SplitDims sd) {
        MapModel m;
        m.kind = Kind::Linear;
        m.dims = sd;
        m.A = M;
        m.Ainv = integer_inverse(M);
        return m;
    }

    static MapModel skew(const Mat<2>& A2, double eps, int k, double rot = 0.0) {
        static_assert(D == 3, "skew products live on T^3");
        MapModel m;
        m.kind = Kind::Skew;
        m.dims = SplitDims{1, 1, 1};
        m.eps = eps;
        m.k_harm = k;
        m.rot = rot;
        if (std::fabs(eps * k) >= 0.95)
            throw std::invalid_argument("skew: fiber map is not a diffeomorphism (|eps*k| too large)");
        Mat<D> M = Mat<D>::identity();
        M(0, 0) = A2(0, 0);
        M(0, 1) = A2(0, 1);
        M(1, 0) = A2(1, 0);
        M(1, 1) = A2(1, 1);
        m.A = M;
        m.Ainv = integer_inverse(M);
        return m;
    }

    bool is_composite() const { return kind == Kind::Composite; }

    // --- evaluation -------------------------------------------------------

    Vec<D> eval(const Vec<D>& p) const {
        switch (kind) {
            case Kind::Linear:
                return wrap<D>(A * p);
            case Kind::Skew: {
                Vec<D> q = wrap<D>(A * p);
                q[D - 1] = wrap01(fiber_fwd(p[D - 1]));
                return q;
            }
            default: {
                Vec<D> q = base->eval(p);
                return apply_patch_forward(q);
            }
        }
    }

    Vec<D> eval_inverse(const Vec<D>& q) const {
        switch (kind) {
            case Kind::Linear:
                return wrap<D>(Ainv * q);
            case Kind::Skew: {
                Vec<D> p = wrap<D>(Ainv * q);
                p[D - 1] = wrap01(fiber_inv(q[D - 1]));
                return p;
            }
            default: {
                Vec<D> mid = apply_patch_backward(q);
                return base->eval_inverse(mid);
            }
        }
    }

    Mat<D> derivative(const Vec<D>& p) const {
        switch (kind) {
            case Kind::Linear:
                return A;
            case Kind::Skew: {
                Mat<D> J = A;
                J(D - 1, D - 1) = fiber_deriv(p[D - 1]);
                return J;
            }
            default: {
                Mat<D> Jb = base->derivative(p);
                Vec<D> q = base->eval(p);
                PatchHit hit = locate_patch(q);
                if (!hit.hit || pert.kappa == 0.0) return Jb;
                ChartedCube<D> cu = hit_cube(hit);
                Vec<D> c = cu.psi(q);
                Vec<D> xi = c - hit_offset(hit, c);
                Mat<D> Jh;
                pert.template flow_with_jacobian<D>(xi, Jh, +1.0);
                return frames.B * Jh * frames.Binv * Jb;
            }
        }
    }

    Mat<D> derivative_inverse(const Vec<D>& q) const {
        switch (kind) {
            case Kind::Linear:
                return Ainv;
            case Kind::Skew: {
                Mat<D> J = Ainv;
                double th = fiber_inv(q[D - 1]);
                J(D - 1, D - 1) = 1.0 / fiber_deriv(th);
                return J;
            }
            default: {
                PatchHit hit = locate_patch(q);
                if (!hit.hit || pert.kappa == 0.0) return base->derivative_inverse(q);
                ChartedCube<D> cu = hit_cube(hit);
                Vec<D> c = cu.psi(q);
                Vec<D> off = hit_offset(hit, c);
                Vec<D> xi = c - off;
                Mat<D> Jh;
                pert.template flow_with_jacobian<D>(xi, Jh, -1.0);
                Vec<D> mid = cu.psi_inv(xi + off);
                return base->derivative_inverse(mid) * (frames.B * Jh * frames.Binv);
            }
        }
    }

    // --- analytic splitting ------------------------------------------------

    // For linear/skew models with the fiber as the last axis. Returns frames
    // whose columns are (E_s | E_c | E_u) blocks and the planar multipliers.
    Frames<D> exact_splitting(Planar2Splitting* out_planar = nullptr) const {
        if (kind == Kind::Composite)
            throw std::domain_error("exact_splitting: composite models only carry cone data");
        if constexpr (D == 2) {
            if (!(dims.s == 1 && dims.c == 0 && dims.u == 1))
                throw std::domain_error("exact_splitting: expected dims (1,0,1) on T^2");
            Mat<2> A2;
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) A2(r, c) = A(r, c);
            Planar2Splitting sp = planar_splitting(A2);
            if (out_planar) *out_planar = sp;
            Mat<2> B;
            B(0, 0) = sp.e_s[0];
            B(1, 0) = sp.e_s[1];
            B(0, 1) = sp.e_u[0];
            B(1, 1) = sp.e_u[1];
            return make_frames<2>(B, dims);
        } else if constexpr (D == 3) {
            if (!(dims.s == 1 && dims.c == 1 && dims.u == 1))
                throw std::domain_error("exact_splitting: expected dims (1,1,1) on T^3");
            // Require the block form (planar hyperbolic) x (fiber axis).
            if (A(0, 2) != 0 || A(1, 2) != 0 || A(2, 0) != 0 || A(2, 1) != 0 || A(2, 2) != 1)
                throw std::domain_error("exact_splitting: expected planar block x fiber form");
            Mat<2> A2;
            A2(0, 0) = A(0, 0);
            A2(0, 1) = A(0, 1);
            A2(1, 0) = A(1, 0);
            A2(1, 1) = A(1, 1);
            Planar2Splitting sp = planar_splitting(A2);
            if (out_planar) *out_planar = sp;
            Mat<3> B{};
            B(0, 0) = sp.e_s[0];
            B(1, 0) = sp.e_s[1];
            B(2, 1) = 1.0;  // center = fiber direction
            B(0, 2) = sp.e_u[0];
            B(1, 2) = sp.e_u[1];
            return make_frames<3>(B, dims);
        } else {
            throw std::domain_error("exact_splitting: unsupported dimension");
        }
    }

    // Frames used by charts; composites reuse the base splitting (constant
    // continuous extension).
    Frames<D> chart_frames() const {
        if (kind == Kind::Composite) return frames;
        return exact_splitting();
    }

    // --- patch plumbing (composite only) -----------------------------------

    PatchHit locate_patch(const Vec<D>& q) const {
        PatchHit none;
        if (kind != Kind::Composite) return none;
        if (has_family) {
            if constexpr (D == 3) {
                PatchHit h = family_lookup(q);
                if (h.hit) return h;
            }
        }
        for (size_t i = 0; i < patches.size(); ++i) {
            if (explicit_hit(patches[i], q)) {
                PatchHit h;
                h.hit = true;
                h.cube_id = static_cast<int>(i);
                h.from_family = false;
                return h;
            }
        }
        return none;
    }

    Vec<D> apply_patch_forward(const Vec<D>& q) const { return apply_patch(q, +1.0); }

    Vec<D> apply_patch_backward(const Vec<D>& q) const { return apply_patch(q, -1.0); }

    // Chart-conjugated elementary flow on the rectangle containing q; the
    // flow keeps each rectangle invariant, so the offset derived from the
    // pre-flow point stays valid. Off the rectangles q is returned bitwise.
    Vec<D> apply_patch(const Vec<D>& q, double dir) const {
        if (pert.kappa == 0.0) return q;
        PatchHit hit = locate_patch(q);
        if (!hit.hit) return q;
        ChartedCube<D> cu = hit_cube(hit);
        Vec<D> c = cu.psi(q);
        Vec<D> off = hit_offset(hit, c);
        Vec<D> xi = c - off;
        xi = pert.template flow<D>(xi, dir);
        return cu.psi_inv(xi + off);
    }

    // Exact difference arithmetic: returns g(p + v) - g(p) for a small
    // displacement v with full relative precision (iterating tiny stable
    // separations forward in absolute coordinates would drown in the
    // lambda_u^n round-off amplification).
    Vec<D> eval_difference(const Vec<D>& p, const Vec<D>& v) const {
        switch (kind) {
            case Kind::Linear:
                return A * v;
            case Kind::Skew: {
                Vec<D> w = A * v;
                // fiber difference without cancellation:
                // -eps/(2pi) [sin(2pik(th+v)) - sin(2pik th)]
                double th = p[D - 1], dv = v[D - 1];
                double twok = 2.0 * M_PI * k_harm;
                double diff = 2.0 * std::cos(twok * (th + dv / 2)) * std::sin(twok * dv / 2);
                w[D - 1] = dv - eps * diff / (2.0 * M_PI);
                return w;
            }
            default: {
                Vec<D> q1 = base->eval(p);
                Vec<D> dq = base->eval_difference(p, v);
                Vec<D> d1 = patch_displacement(q1);
                Vec<D> d2 = patch_displacement(wrap<D>(q1 + dq));
                return dq + d2 - d1;
            }
        }
    }

    Vec<D> eval_difference_inverse(const Vec<D>& q, const Vec<D>& v) const {
        switch (kind) {
            case Kind::Linear:
                return Ainv * v;
            case Kind::Skew: {
                Vec<D> w = Ainv * v;
                // difference of the fiber inverse: Newton on d with the
                // cancellation-free forward difference
                double th = fiber_inv(q[D - 1]);
                double dv = v[D - 1];
                double dd = dv / fiber_deriv(th);
                double twok = 2.0 * M_PI * k_harm;
                for (int it = 0; it < 40; ++it) {
                    double fd = dd - eps / (2.0 * M_PI) * 2.0 *
                                         std::cos(twok * (th + dd / 2)) * std::sin(twok * dd / 2);
                    double err = fd - dv;
                    double step = err / fiber_deriv(th + dd);
                    dd -= step;
                    if (std::fabs(step) <= 1e-18 + 1e-14 * std::fabs(dd)) break;
                }
                w[D - 1] = dd;
                return w;
            }
            default: {
                Vec<D> d1 = patch_displacement_dir(q, -1.0);
                Vec<D> d2 = patch_displacement_dir(wrap<D>(q + v), -1.0);
                Vec<D> mid = v + d2 - d1;
                Vec<D> q_mid = apply_patch_backward(q);
                return base->eval_difference_inverse(q_mid, mid);
            }
        }
    }

    // Manifold displacement of the patch layer at q (zero off rectangles),
    // accumulated with full relative precision.
    Vec<D> patch_displacement(const Vec<D>& q) const { return patch_displacement_dir(q, +1.0); }

    Vec<D> patch_displacement_dir(const Vec<D>& q, double dir) const {
        Vec<D> zero{};
        if (kind != Kind::Composite || pert.kappa == 0.0) return zero;
        PatchHit hit = locate_patch(q);
        if (!hit.hit) return zero;
        ChartedCube<D> cu = hit_cube(hit);
        Vec<D> c = cu.psi(q);
        Vec<D> off = hit_offset(hit, c);
        Vec<D> dxi = pert.template flow_displacement<D>(c - off, dir);
        for (int i = 0; i < D; ++i) dxi[i] *= cu.rho;
        return frames.from_frame(dxi);
    }

    // Uniform-ish point inside some rectangle; empty if the model carries no
    // patches. Used to bias certificates toward the perturbed region.
    std::optional<Vec<D>> sample_patch_point(Rng& rng) const {
        if (kind != Kind::Composite) return std::nullopt;
        size_t n_expl = patches.size();
        size_t n_fam = fam_cubes_.size();
        if (n_expl + n_fam == 0) return std::nullopt;
        size_t pick = static_cast<size_t>(rng.below(n_expl + n_fam));
        double eta = pert.eta;
        if (pick < n_expl) {
            const LocalPatch<D>& p = patches[pick];
            ChartedCube<D> cu{p.cube_center, p.rho, frames};
            Vec<D> c;
            for (int i = 0; i < D; ++i) {
                double w = dims.is_c(i) ? 1.0 : eta;
                c[i] = p.offset[i] + rng.uniform01() * w;
            }
            return cu.psi_inv(c);
        }
        if constexpr (D == 3) {
            int id = fam_cubes_[pick - n_expl];
            ChartedCube<D> cu{family.cube_center(id), family.rho, frames};
            double u0 = family.eta_hat * family.slice_idx[static_cast<size_t>(id)];
            int j = static_cast<int>(rng.below(static_cast<uint64_t>(family.L)));
            double aj = row_anchor(j);
            // anchors a = aj + k*period with a*eta in [0, 1-eta]
            double amax = 1.0 / eta - 1.0;
            int klo = static_cast<int>(std::ceil((0.0 - aj) / family.period));
            int khi = static_cast<int>(std::floor((amax - aj) / family.period));
            if (khi < klo) return std::nullopt;
            int k = klo + static_cast<int>(rng.below(static_cast<uint64_t>(khi - klo + 1)));
            double a = aj + k * family.period;
            Vec<D> c{};
            c[0] = (a + rng.uniform01()) * eta;
            c[1] = rng.uniform01();
            c[2] = u0 + j * eta + rng.uniform01() * eta;
            return cu.psi_inv(c);
        }
        return std::nullopt;
    }

    const std::vector<int32_t>& family_cubes_with_slices() const { return fam_cubes_; }

    // --- hashes / serialization --------------------------------------------

    Json to_json() const {
        Json j;
        switch (kind) {
            case Kind::Linear: {
                j["kind"] = "linear";
                j["dims"] = Json{{"s", dims.s}, {"c", dims.c}, {"u", dims.u}};
                j["A"] = matrix_json(A);
                break;
            }
            case Kind::Skew: {
                j["kind"] = "skew";
                Json a2 = Json::array();
                for (int r = 0; r < 2; ++r) a2.push_back(Json::array({A(r, 0), A(r, 1)}));
                j["A"] = a2;
                j["eps"] = eps;
                j["k"] = k_harm;
                j["rot"] = rot;
                break;
            }
            default: {
                j["kind"] = "composite";
                j["base"] = base->to_json();
                j["perturbation"] = Json{{"kappa", pert.kappa}, {"eta", pert.eta},
                                         {"cF", pert.cF},       {"axis_i", pert.axis_i},
                                         {"axis_j", pert.axis_j}, {"rk4_steps", pert.rk4_steps}};
                Json eps_json = Json::array();
                for (const auto& p : patches) {
                    Json pj;
                    pj["center"] = vec_json(p.cube_center);
                    pj["rho"] = p.rho;
                    pj["offset"] = vec_json(p.offset);
                    eps_json.push_back(pj);
                }
                j["explicit_patches"] = eps_json;
                if (has_family) {
                    Json f;
                    f["lattice_n"] = family.lattice_n;
                    f["rho"] = family.rho;
                    f["eta_hat"] = family.eta_hat;
                    f["L"] = family.L;
                    f["period"] = family.period;
                    f["stagger"] = family.stagger;
                    f["anchor0"] = family.anchor0;
                    f["slice_idx"] = family.slice_idx;
                    j["family"] = f;
                }
                break;
            }
        }
        return j;
    }

    static MapModel from_json(const Json& j);

    std::string hash() const { return json_hash(to_json()); }

    // --- skew fiber helpers -------------------------------------------------

    double fiber_fwd(double th) const {
        return th + rot - eps * std::sin(2.0 * M_PI * k_harm * th) / (2.0 * M_PI);
    }
    double fiber_deriv(double th) const {
        return 1.0 - eps * k_harm * std::cos(2.0 * M_PI * k_harm * th);
    }
    double fiber_inv(double y) const {
        // strictly monotone lift; Newton from the zeroth-order guess
        double th = y - rot;
        for (int it = 0; it < 60; ++it) {
            double f = fiber_fwd(th) - y;
            double d = fiber_deriv(th);
            double step = f / d;
            th -= step;
            if (std::fabs(step) < 1e-16) break;
        }
        return th;
    }

    // --- composite construction ----------------------------------------------

    static MapModel composite(std::shared_ptr<const MapModel<D>> base_model,
                              ElementaryPerturbation h, std::vector<LocalPatch<D>> explicit_patches,
                              PatchFamily<D> fam, bool use_family) {
        MapModel m;
        m.kind = Kind::Composite;
        m.dims = base_model->dims;
        m.base = std::move(base_model);
        m.pert = h;
        m.pert.dims = m.dims;
        m.pert.validate();
        m.frames = m.base->chart_frames();  // layered composites reuse the frames
        m.patches = std::move(explicit_patches);
        m.family = std::move(fam);
        m.has_family = use_family;
        m.A = m.base->A;
        m.Ainv = m.base->Ainv;
        m.validate_patches();
        if (m.has_family) {
            if constexpr (D == 3) {
                for (int id = 0; id < m.family.cube_count(); ++id)
                    if (m.family.slice_idx[static_cast<size_t>(id)] >= 0) m.fam_cubes_.push_back(id);
                m.build_family_hash();
            } else {
                throw std::invalid_argument("patch families require D = 3");
            }
        }
        return m;
    }

  private:
    ChartedCube<D> hit_cube(const PatchHit& hit) const {
        ChartedCube<D> cu;
        if (hit.from_family) {
            if constexpr (D == 3) {
                cu.center = family.cube_center(hit.cube_id);
                cu.rho = family.rho;
            }
        } else {
            cu.center = patches[static_cast<size_t>(hit.cube_id)].cube_center;
            cu.rho = patches[static_cast<size_t>(hit.cube_id)].rho;
        }
        cu.frames = frames;
        return cu;
    }

    Vec<D> hit_offset(const PatchHit& hit, const Vec<D>& chart_pt) const {
        Vec<D> off{};
        if (!hit.from_family) {
            off = patches[static_cast<size_t>(hit.cube_id)].offset;
        } else if constexpr (D == 3) {
            double eta = pert.eta;
            double u_off = family.eta_hat * family.slice_idx[static_cast<size_t>(hit.cube_id)];
            int j = static_cast<int>(std::floor((chart_pt[2] - u_off) / eta));
            double shat = chart_pt[0] / eta;
            double aj = row_anchor(j);
            double rel = std::fmod(shat - aj, family.period);
            if (rel < 0) rel += family.period;
            double a_real = shat - rel;
            off[0] = a_real * eta;
            off[2] = u_off + j * eta;
        }
        return off;
    }

    double row_anchor(int j) const {
        double a = family.anchor0 + j * family.stagger;
        a = std::fmod(a, family.period);
        if (a < 0) a += family.period;
        return a;
    }

    bool explicit_hit(const LocalPatch<D>& p, const Vec<D>& q) const {
        ChartedCube<D> cu{p.cube_center, p.rho, frames};
        Vec<D> c = cu.psi(q);
        double eta = pert.eta;
        for (int i = 0; i < D; ++i) {
            double lo = p.offset[i];
            double hi = lo + (dims.is_c(i) ? 1.0 : eta);
            if (c[i] < lo || c[i] >= hi) return false;
        }
        return true;
    }

    void validate_patches() const {
        double eta = pert.eta;
        for (const auto& p : patches) {
            for (int i = 0; i < D; ++i) {
                double w = dims.is_c(i) ? 1.0 : eta;
                if (p.offset[i] < 0 || p.offset[i] + w > 1.0 + 1e-12)
                    throw std::invalid_argument("composite: rectangle escapes its cube");
                if (dims.is_c(i) && p.offset[i] != 0.0)
                    throw std::invalid_argument("composite: rectangle offset must vanish on center block");
            }
        }
        // pairwise disjoint interiors (frame-aligned boxes, shared frames)
        for (size_t a = 0; a + 1 < patches.size(); ++a)
            for (size_t b = a + 1; b < patches.size(); ++b)
                if (boxes_overlap(patches[a], patches[b]))
                    throw std::invalid_argument("composite: overlapping rectangles");
    }

    bool boxes_overlap(const LocalPatch<D>& pa, const LocalPatch<D>& pb) const {
        double eta = pert.eta;
        Vec<D> dz = frames.to_frame(torus_diff(pb.cube_center, pa.cube_center));
        for (int i = 0; i < D; ++i) {
            double wa = dims.is_c(i) ? 1.0 : eta;
            double lo_a = (pa.offset[i] - 0.5) * pa.rho;
            double hi_a = (pa.offset[i] + wa - 0.5) * pa.rho;
            double lo_b = dz[i] + (pb.offset[i] - 0.5) * pb.rho;
            double hi_b = dz[i] + (pb.offset[i] + wa - 0.5) * pb.rho;
            if (hi_a <= lo_b || hi_b <= lo_a) return false;
        }
        return true;
    }

    // ---- family lookup acceleration (D == 3) ------------------------------

    struct FamilyHash {
        int n = 0;
        std::vector<int32_t> start;
        std::vector<int32_t> items;
    };
    std::shared_ptr<const FamilyHash> fam_hash_;
    std::vector<int32_t> fam_cubes_;  // cube ids carrying a slice

    int bin_of(const Vec<3>& q, int n) const {
        int bx = static_cast<int>(std::floor(q[0] * n)) % n;
        int by = static_cast<int>(std::floor(q[1] * n)) % n;
        int bz = static_cast<int>(std::floor(q[2] * n)) % n;
        if (bx < 0) bx += n;
        if (by < 0) by += n;
        if (bz < 0) bz += n;
        return (bx * n + by) * n + bz;
    }

    void build_family_hash() {
        if constexpr (D == 3) {
            int n = family.lattice_n;
            int bins = n * n * n;
            double rho = family.rho;
            double pad = 0.87 / n;  // bin half-diagonal in frame coordinates
            std::vector<std::vector<int32_t>> tmp(static_cast<size_t>(bins));
            for (int id = 0; id < family.cube_count(); ++id) {
                if (family.slice_idx[static_cast<size_t>(id)] < 0) continue;
                Vec<3> z = family.cube_center(id);
                double u0 = family.eta_hat * family.slice_idx[static_cast<size_t>(id)];
                // slab in frame coords: |w_s|,|w_c| <= rho/2, w_u in rho*[u0-1/2, u0-1/2+eta_hat]
                double ulo = rho * (u0 - 0.5) - pad;
                double uhi = rho * (u0 + family.eta_hat - 0.5) + pad;
                // AABB from slab corners in standard coords
                Vec<3> ext{};
                for (int r = 0; r < 3; ++r) {
                    double e = 0;
                    e += std::fabs(frames.B(r, 0)) * rho * 0.5;
                    e += std::fabs(frames.B(r, 1)) * rho * 0.5;
                    e += std::fabs(frames.B(r, 2)) * (std::fabs(ulo) > std::fabs(uhi)
                                                          ? std::fabs(ulo)
                                                          : std::fabs(uhi));
                    ext[r] = e + 1.0 / n;
                }
                int range[3][2];
                for (int r = 0; r < 3; ++r) {
                    range[r][0] = static_cast<int>(std::floor((z[r] - ext[r]) * n));
                    range[r][1] = static_cast<int>(std::floor((z[r] + ext[r]) * n));
                }
                for (int bx = range[0][0]; bx <= range[0][1]; ++bx)
                    for (int by = range[1][0]; by <= range[1][1]; ++by)
                        for (int bz = range[2][0]; bz <= range[2][1]; ++bz) {
                            Vec<3> bc;
                            bc[0] = (bx + 0.5) / n;
                            bc[1] = (by + 0.5) / n;
                            bc[2] = (bz + 0.5) / n;
                            Vec<3> w = frames.to_frame(torus_diff(wrap<3>(bc), z));
                            if (std::fabs(w[0]) > rho * 0.5 + pad) continue;
                            if (std::fabs(w[1]) > rho * 0.5 + pad) continue;
                            if (w[2] < ulo || w[2] > uhi) continue;
                            int bin = bin_of(wrap<3>(bc), n);
                            tmp[static_cast<size_t>(bin)].push_back(id);
                        }
            }
            auto hash = std::make_shared<FamilyHash>();
            hash->n = n;
            hash->start.resize(static_cast<size_t>(bins) + 1, 0);
            size_t total = 0;
            for (int b = 0; b < bins; ++b) total += tmp[static_cast<size_t>(b)].size();
            hash->items.reserve(total);
            for (int b = 0; b < bins; ++b) {
                hash->start[static_cast<size_t>(b)] = static_cast<int32_t>(hash->items.size());
                for (int32_t id : tmp[static_cast<size_t>(b)]) hash->items.push_back(id);
            }
            hash->start[static_cast<size_t>(bins)] = static_cast<int32_t>(hash->items.size());
            fam_hash_ = hash;
        }
    }

    PatchHit family_lookup(const Vec<3>& q) const {
        PatchHit none;
        if (!fam_hash_) return none;
        const FamilyHash& H = *fam_hash_;
        int bin = bin_of(q, H.n);
        double rho = family.rho;
        double eta = pert.eta;
        for (int32_t it = H.start[static_cast<size_t>(bin)];
             it < H.start[static_cast<size_t>(bin) + 1]; ++it) {
            int id = H.items[static_cast<size_t>(it)];
            Vec<3> z = family.cube_center(id);
            Vec<3> w = frames.to_frame(torus_diff(q, z));
            double cs = w[0] / rho + 0.5;
            double cc = w[1] / rho + 0.5;
            double cuu = w[2] / rho + 0.5;
            double u0 = family.eta_hat * family.slice_idx[static_cast<size_t>(id)];
            if (cuu < u0 || cuu >= u0 + family.eta_hat) continue;
            if (cc < 0.0 || cc >= 1.0) continue;
            if (cs < 0.0 || cs >= 1.0) continue;
            int j = static_cast<int>(std::floor((cuu - u0) / eta));
            if (j < 0 || j >= family.L) continue;
            double shat = cs / eta;
            double aj = row_anchor(j);
            double rel = std::fmod(shat - aj, family.period);
            if (rel < 0) rel += family.period;
            if (rel >= 1.0) continue;
            double a_real = shat - rel;
            if (a_real * eta < 0.0 || (a_real + 1.0) * eta > 1.0) continue;
            PatchHit h;
            h.hit = true;
            h.cube_id = id;
            h.from_family = true;
            return h;
        }
        return none;
    }

    static Json matrix_json(const Mat<D>& M) {
        Json rows = Json::array();
        for (int r = 0; r < D; ++r) {
            Json row = Json::array();
            for (int c = 0; c < D; ++c) row.push_back(M(r, c));
            rows.push_back(row);
        }
        return rows;
    }
    static Json vec_json(const Vec<D>& v) {
        Json a = Json::array();
        for (int i = 0; i < D; ++i) a.push_back(v[i]);
        return a;
    }

    // Integer matrix with det +-1: invert exactly and verify.
    static Mat<D> integer_inverse(const Mat<D>& M) {
        Mat<D> inv = inverse(M);
        for (double& x : inv.m) x = std::round(x);
        Mat<D> check = M * inv;
        for (int r = 0; r < D; ++r)
            for (int c = 0; c < D; ++c)
                if (std::fabs(check(r, c) - (r == c ? 1.0 : 0.0)) > 1e-9)
                    throw std::invalid_argument("linear model: matrix is not unimodular");
        return inv;
    }
};

template <int D>
MapModel<D> MapModel<D>::from_json(const Json& j) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear") {
        Mat<D> M;
        auto rows = j.at("A");
        for (int r = 0; r < D; ++r)
            for (int c = 0; c < D; ++c) M(r, c) = rows.at(r).at(c).get<double>();
        SplitDims sd;
        sd.s = j.at("dims").at("s").get<int>();
        sd.c = j.at("dims").at("c").get<int>();
        sd.u = j.at("dims").at("u").get<int>();
        return linear(M, sd);
    }
    if (kind == "skew") {
        if constexpr (D == 3) {
            Mat<2> A2;
            auto rows = j.at("A");
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) A2(r, c) = rows.at(r).at(c).get<double>();
            return skew(A2, j.at("eps").get<double>(), j.at("k").get<int>(),
                        j.value("rot", 0.0));
        }
        throw std::invalid_argument("skew model requires D = 3");
    }
    if (kind == "composite") {
        auto base = std::make_shared<MapModel<D>>(from_json(j.at("base")));
        ElementaryPerturbation h;
        const Json& pj = j.at("perturbation");
        h.kappa = pj.at("kappa").get<double>();
        h.eta = pj.at("eta").get<double>();
        h.cF = pj.at("cF").get<double>();
        h.axis_i = pj.at("axis_i").get<int>();
        h.axis_j = pj.at("axis_j").get<int>();
        h.rk4_steps = pj.at("rk4_steps").get<int>();
        h.dims = base->dims;
        std::vector<LocalPatch<D>> eps_list;
        for (const auto& pjson : j.at("explicit_patches")) {
            LocalPatch<D> p;
            for (int i = 0; i < D; ++i) {
                p.cube_center[i] = pjson.at("center").at(i).get<double>();
                p.offset[i] = pjson.at("offset").at(i).get<double>();
            }
            p.rho = pjson.at("rho").get<double>();
            eps_list.push_back(p);
        }
        PatchFamily<D> fam;
        bool use_family = j.contains("family");
        if (use_family) {
            const Json& f = j.at("family");
            fam.lattice_n = f.at("lattice_n").get<int>();
            fam.rho = f.at("rho").get<double>();
            fam.eta_hat = f.at("eta_hat").get<double>();
            fam.L = f.at("L").get<int>();
            fam.period = f.at("period").get<double>();
            fam.stagger = f.at("stagger").get<double>();
            fam.anchor0 = f.at("anchor0").get<double>();
            fam.slice_idx = f.at("slice_idx").get<std::vector<int32_t>>();
        }
        return composite(base, h, std::move(eps_list), std::move(fam), use_family);
    }
    throw std::invalid_argument("unknown model kind: " + kind);
}

// Spec-facing free functions.

template <int D>
Vec<D> eval(const MapModel<D>& m, const Vec<D>& p) { return m.eval(p); }

template <int D>
Mat<D> derivative(const MapModel<D>& m, const Vec<D>& p) { return m.derivative(p); }

template <int D>
ChartedCube<D> make_chart(const MapModel<D>& m, const Vec<D>& center, double rho) {
    if (!(rho > 0.0 && rho < 0.25))
        throw std::invalid_argument("make_chart: rho must lie in (0, 1/4)");
    ChartedCube<D> cu;
    cu.center = wrap<D>(center);
    cu.rho = rho;
    cu.frames = m.chart_frames();
    return cu;
}

// g = f off the rectangles, chart-conjugated elementary flow inside them.
template <int D>
MapModel<D> compose_global(const MapModel<D>& f, const std::vector<LocalPatch<D>>& placements,
                           double kappa, double eta, int axis_i = -1, int axis_j = -1) {
    SplitDims sd = f.dims;
    if (axis_i < 0) axis_i = sd.s;          // first center coordinate
    if (axis_j < 0) axis_j = sd.s + sd.c;   // first unstable coordinate
    ElementaryPerturbation h = build_elementary(kappa, eta, sd, axis_i, axis_j);
    auto base = std::make_shared<MapModel<D>>(f);
    return MapModel<D>::composite(base, h, placements, PatchFamily<D>{}, false);
}

}  // namespace phlab

#ifndef SCLQ_SEMICLASSICS_HPP
#define SCLQ_SEMICLASSICS_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fiber.hpp"
#include "intersections.hpp"

namespace sclq {

using cplx = std::complex<double>;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// An integrable system: the fibration by level sets of H, with a chosen level b.
/// The seed selects the traced component of {H = b} (default: see default_seed).
struct System {
    Observable H;
    double b = 0.0;
    std::optional<PhasePoint> seed;

    System() = default;
    System(Observable H_, double b_, std::optional<PhasePoint> seed_ = {}) : H(std::move(H_)), b(b_), seed(seed_) {}
};

inline FiberCurve trace_fiber(const System& s, const TraceOptions& opts = {}) {
    return s.seed ? trace_level_curve(s.H, s.b, *s.seed, opts) : trace_level_curve_default(s.H, s.b, opts);
}

// ---------------------------------------------------------------- Maslov

struct MaslovCount {
    int index = 0;
    int double_roots = 0;
    std::vector<PhasePoint> crossings;
};

/// Signed count of zeros of s -> {H1,H2}(γ(s)) along the arc of `curve` (a fiber of H2)
/// starting at arclength s_from and running over the signed arclength delta.
/// A crossing weighs +1 when the bracket goes from + to − along the traversal, −1 otherwise,
/// multiplied by the sign of <∇H1, ∇H2> at the crossing (anchors the count to the H1 fibration
/// rather than to the sign of H1).
inline MaslovCount maslov_arc(const FiberCurve& curve, const Observable& H1, double s_from, double delta,
                              bool check_endpoints = true) {
    const auto& H2 = curve.H;
    auto bracket_at = [&](double s) {
        auto y = curve.point_at(s);
        return std::pair{poisson_bracket(H1, H2, y.x), y.x};
    };
    MaslovCount out;
    double s_to = s_from + delta;
    const double trans = curve.opts.tol.trans_tol;
    auto [v0, x0] = bracket_at(s_from);
    auto [v1, x1] = bracket_at(s_to);
    if (check_endpoints && (std::abs(v0) <= trans || std::abs(v1) <= trans))
        throw TangencyAtEndpoint("Maslov segment endpoint is a tangency point of the two fibrations");
    if (delta == 0.0) return out;

    // nodes: endpoints plus every sample strictly inside the arc, in traversal order
    std::vector<double> nodes{s_from};
    double lo = std::min(s_from, s_to), hi = std::max(s_from, s_to);
    std::vector<double> inner;
    const auto& S = curve.samples;
    std::size_t last = curve.closed ? S.size() - 1 : S.size();  // closing sample duplicates the first
    for (int wrap = -2; wrap <= 2; ++wrap) {
        if (!curve.closed && wrap != 0) continue;
        double off = wrap * curve.length;
        for (std::size_t i = 0; i < last; ++i) {
            double s = S[i].s + off;
            if (s > lo + 1e-13 && s < hi - 1e-13) inner.push_back(s);
        }
    }
    std::sort(inner.begin(), inner.end());
    if (delta < 0) std::reverse(inner.begin(), inner.end());
    nodes.insert(nodes.end(), inner.begin(), inner.end());
    nodes.push_back(s_to);

    std::vector<double> vals(nodes.size());
    vals.front() = v0;
    vals.back() = v1;
    for (std::size_t k = 1; k + 1 < nodes.size(); ++k) vals[k] = bracket_at(nodes[k]).first;

    for (std::size_t k = 0; k + 1 < nodes.size(); ++k) {
        double a = vals[k], b = vals[k + 1];
        if ((a < 0) != (b < 0)) {
            double ua = nodes[k], ub = nodes[k + 1];
            double fa = a;
            for (int it = 0; it < 80 && std::abs(ub - ua) > 1e-14; ++it) {
                double um = 0.5 * (ua + ub);
                double fm = bracket_at(um).first;
                if ((fm < 0) == (fa < 0)) ua = um, fa = fm;
                else ub = um;
            }
            PhasePoint xc = curve.point_at(0.5 * (ua + ub)).x;
            auto g1 = H1.gradient(xc), g2 = H2.gradient(xc);
            double dot = g1[0] * g2[0] + g1[1] * g2[1];
            int w = b < 0 ? +1 : -1;  // sign classes: [0, ∞) vs (−∞, 0)
            out.index += dot >= 0 ? w : -w;
            out.crossings.push_back(xc);
        } else if (k > 0 && std::abs(a) < trans && std::abs(a) <= std::abs(vals[k - 1]) && std::abs(a) <= std::abs(b)) {
            ++out.double_roots;  // touches zero without changing sign: counted 0
        }
    }
    return out;
}

/// Maslov index of the segment of curve2 from `from` to `to` (orientation-respecting when forward).
inline MaslovCount maslov_segment(const FiberCurve& curve2, const FiberCurve::Location& from,
                                  const FiberCurve::Location& to, const Observable& H1,
                                  Direction dir = Direction::forward) {
    return maslov_arc(curve2, H1, from.at.s, arc_length_between(curve2, from, to, dir));
}

/// Index of the full closed loop relative to the H1 fibration, traversed in the flow direction.
inline MaslovCount maslov_loop(const FiberCurve& curve, const Observable& H1) {
    if (!curve.closed) throw OpenFiber("loop Maslov index requires a closed fiber");
    std::size_t best = 0;
    double bv = -1.0;
    for (std::size_t i = 0; i + 1 < curve.samples.size(); ++i) {
        double v = std::abs(poisson_bracket(H1, curve.H, curve.samples[i].x));
        if (v > bv) bv = v, best = i;
    }
    return maslov_arc(curve, H1, curve.samples[best].s, curve.length);
}

// ---------------------------------------------------------------- Bohr–Sommerfeld

struct BSLevel {
    int n = 0;
    double b = 0.0;
    double loop_action = 0.0;
    int loop_maslov = 0;
    double period = 0.0;
};

struct BSResult {
    std::vector<BSLevel> levels;
    std::vector<std::string> warnings;
};

struct LoopData {
    double action;
    double period;
    int maslov;
};

inline LoopData loop_data(const Observable& H, double b, const TraceOptions& opts,
                          std::optional<PhasePoint> seed = std::nullopt) {
    FiberCurve c = seed ? trace_level_curve(H, b, *seed, opts) : trace_level_curve_default(H, b, opts);
    if (!c.closed) throw OpenFiber("fiber at level " + std::to_string(b) + " is not closed");
    return {c.loop_action, c.period, maslov_loop(c, Observable::position()).index};
}

/// Levels b in [b_lo, b_hi] with ∮α = 2πh(n + μ/4).
inline BSResult bohr_sommerfeld_levels(const Observable& H, double h, double b_lo, double b_hi,
                                       const TraceOptions& opts = {}, std::optional<PhasePoint> seed = std::nullopt) {
    BSResult out;
    if (!(h > 0)) throw Error("h must be positive");
    if (!(b_hi > b_lo)) return out;
    const double W = b_hi - b_lo;
    const double bs_tol = opts.tol.bs_tol;

    // usable endpoints: nudge inward past critical or open levels
    auto usable = [&](double b0, double sgn) -> std::optional<std::pair<double, LoopData>> {
        for (double eps : {0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 5e-2, 0.1, 0.2, 0.3, 0.4, 0.5}) {
            double b = b0 + sgn * eps * W;
            try {
                return std::pair{b, loop_data(H, b, opts, seed)};
            } catch (const SingularFiber&) {
            } catch (const OpenFiber&) {
            }
            if (eps == 0.0) out.warnings.push_back("level " + std::to_string(b0) + " has no regular closed fiber; range nudged inward");
        }
        return std::nullopt;
    };
    auto lo = usable(b_lo, +1.0);
    auto hi = usable(b_hi, -1.0);
    if (!lo || !hi || hi->first <= lo->first) {
        out.warnings.push_back("no closed regular fibers in the requested range");
        return out;
    }
    if (hi->second.action <= lo->second.action)
        throw NonMonotoneAction("loop action is not increasing on the range");
    int mu = lo->second.maslov;
    if (hi->second.maslov != mu) throw NonMonotoneAction("loop Maslov index changes across the range");

    auto target = [&](int n) { return two_pi * h * (n + mu / 4.0); };
    int n0 = static_cast<int>(std::ceil(lo->second.action / (two_pi * h) - mu / 4.0 - 1e-12));
    n0 = std::max(n0, 0);
    for (int n = n0;; ++n) {
        double A = target(n);
        if (A > hi->second.action) break;
        if (A < lo->second.action) continue;
        double blo = lo->first, bhi = hi->first;
        double flo = lo->second.action - A, fhi = hi->second.action - A;
        // Newton on the period with a bisection safeguard
        double b = blo + (bhi - blo) * (-flo) / (fhi - flo);
        LoopData d{};
        bool ok = false;
        for (int it = 0; it < 100; ++it) {
            d = loop_data(H, b, opts, seed);
            if (d.maslov != mu) throw NonMonotoneAction("loop Maslov index changes across the range");
            double f = d.action - A;
            if (std::abs(f) <= 0.1 * bs_tol) {
                ok = true;
                break;
            }
            if (f < 0) blo = b, flo = f;
            else bhi = b, fhi = f;
            if (!(d.period > 0)) throw NonMonotoneAction("non-positive period inside the range");
            if (bhi - blo < 1e-15 * (1 + std::abs(b))) {
                ok = std::abs(f) <= bs_tol;
                break;
            }
            double bn = b - f / d.period;
            if (!(bn > blo && bn < bhi)) bn = 0.5 * (blo + bhi);
            b = bn;
        }
        if (!ok) throw NonMonotoneAction("Bohr–Sommerfeld root not bracketed for n = " + std::to_string(n));
        out.levels.push_back({n, b, d.action, mu, d.period});
    }
    return out;
}

// ---------------------------------------------------------------- overlap terms

enum class HessianMethod { finite_difference, bracket_identity };

struct OverlapOptions {
    TraceOptions trace;
    HessianMethod hessian = HessianMethod::finite_difference;
};

struct OverlapTerm {
    IntersectionPoint c;
    double action = 0.0;
    int maslov = 0;
    double hessian_det = 0.0;
    double bracket = 0.0;
    double hessian_check = 0.0;  // relative deviation of hessian_det from 1/|bracket|
    cplx weight{1.0, 0.0};       // insertion f(c) for matrix elements
    cplx contribution{};
    int maslov_double_roots = 0;
};

struct PrefactorConvention {
    double C = 1.0;
    double power = 0.5;  // prefactor = C / (2πh)^power
    double value(double h) const { return C / std::pow(two_pi * h, power); }
};

struct SemiclassicalAmplitude {
    double h = 0.0;
    std::vector<OverlapTerm> terms;
    cplx value{};
    PrefactorConvention prefactor;
    std::vector<std::string> warnings;
};

inline cplx term_contribution(const OverlapTerm& t, double h) {
    return t.weight * std::sqrt(std::abs(t.hessian_det)) * std::exp(cplx(0.0, t.action / h + std::numbers::pi * t.maslov / 2.0));
}

/// Recompute every contribution and the total from the term fields.
inline void assemble(SemiclassicalAmplitude& a) {
    cplx sum{};
    for (auto& t : a.terms) {
        t.contribution = term_contribution(t, a.h);
        sum += t.contribution;
    }
    a.value = a.prefactor.value(a.h) * sum;
}

/// Geometric data of an overlap, independent of h.
struct OverlapGeometry {
    FiberCurve curve1, curve2;
    FiberCurve::Location x1, x2;
    std::vector<OverlapTerm> terms;
    std::vector<std::string> warnings;
};

namespace detail {

// ∫α along the forward arc c -> x of a fiber; `ref_arc` (if given) pins the branch on closed curves.
inline double forward_action(const FiberCurve& curve, const FiberCurve::Location& c, const FiberCurve::Location& x,
                             const PrequantumForm& alpha, double* arc_out = nullptr, const double* ref_arc = nullptr) {
    double arc = arc_length_between(curve, c, x, Direction::forward);
    double a = action_along_fiber(curve, c, x, alpha, Direction::forward);
    if (curve.closed && ref_arc) {
        if (arc - *ref_arc > 0.5 * curve.length) arc -= curve.length, a -= curve.loop_action;
        if (*ref_arc - arc > 0.5 * curve.length) arc += curve.length, a += curve.loop_action;
    }
    if (arc_out) *arc_out = arc;
    return a;
}

inline FiberCurve::Location nearest_crossing(const FiberCurve& curve, const ReferenceLagrangian& lam, PhasePoint near) {
    auto all = lagrangian_crossings(curve, lam);
    if (all.empty()) throw NoReferencePoint("perturbed fiber lost its reference point");
    return *std::min_element(all.begin(), all.end(),
                             [&](const auto& a, const auto& b) { return distance(a.at.x, near) < distance(b.at.x, near); });
}

} // namespace detail

inline OverlapGeometry overlap_geometry(const System& sys1, const System& sys2, const ReferenceLagrangian& lambda = {},
                                        const PrequantumForm& alpha = {}, const OverlapOptions& opts = {}) {
    const auto& tol = opts.trace.tol;
    OverlapGeometry g{trace_fiber(sys1, opts.trace), trace_fiber(sys2, opts.trace), {}, {}, {}, {}};
    auto cs = intersections_on_curve(sys1.H, sys1.b, g.curve2, tol);
    if (cs.empty()) return g;
    g.x1 = reference_location(g.curve1, lambda);
    g.x2 = reference_location(g.curve2, lambda);

    for (auto& ip : cs) {
        FiberCurve::Location l1, l2;
        try {
            l1 = g.curve1.locate(ip.c);
        } catch (const PointNotOnFiber&) {
            g.warnings.push_back("intersection off the traced component of fiber 1 skipped");
            continue;
        }
        l2 = g.curve2.locate(ip.c);
        ip.branch_1 = l1.segment;
        ip.branch_2 = l2.segment;

        OverlapTerm t;
        t.c = ip;
        t.bracket = ip.bracket;
        double arc1 = 0, arc2 = 0;
        t.action = detail::forward_action(g.curve1, l1, g.x1, alpha, &arc1) -
                   detail::forward_action(g.curve2, l2, g.x2, alpha, &arc2);
        // Maslov count along γ2 relative to the first fibration; when only the second fibration is
        // linear, count along γ1 relative to it instead (sign flipped), which keeps the pair hermitian
        bool swap = !sys1.H.is_linear() && sys2.H.is_linear();
        auto m = swap ? maslov_arc(g.curve1, sys2.H, l1.at.s, arc1) : maslov_arc(g.curve2, sys1.H, l2.at.s, arc2);
        t.maslov = swap ? -m.index : m.index;
        t.maslov_double_roots = m.double_roots;
        if (m.double_roots) g.warnings.push_back("DoubleRoot: bracket touches zero without sign change on a Maslov segment");
        if (std::abs(ip.bracket) < 10 * tol.trans_tol)
            g.warnings.push_back("CausticNearby: |{H1,H2}| = " + std::to_string(std::abs(ip.bracket)));

        double ident = 1.0 / std::abs(ip.bracket);
        if (opts.hessian == HessianMethod::bracket_identity || (sys1.H.is_linear() && sys2.H.is_linear())) {
            // exact for straight fibers
            t.hessian_det = ident;
        } else try {
            const double d = tol.fd_step;
            PhasePoint seed1 = g.curve1.samples[g.curve1.seed_index].x;
            PhasePoint seed2 = g.curve2.samples[g.curve2.seed_index].x;
            double S[2][2];
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    double b1 = sys1.b + (i ? -d : d), b2 = sys2.b + (j ? -d : d);
                    auto c1 = trace_level_curve(sys1.H, b1, seed1, opts.trace);
                    auto c2 = trace_level_curve(sys2.H, b2, seed2, opts.trace);
                    auto nr = detail::newton2(sys1.H, b1, sys2.H, b2, ip.c, tol.newton_tol);
                    if (!nr.converged) throw TangentialIntersection("intersection lost under level perturbation");
                    auto m1 = c1.locate(nr.x), m2 = c2.locate(nr.x);
                    auto y1 = detail::nearest_crossing(c1, lambda, g.x1.at.x);
                    auto y2 = detail::nearest_crossing(c2, lambda, g.x2.at.x);
                    // the gauge adds f(y1(b1)) − f(y2(b2)), which has no mixed derivative
                    S[i][j] = detail::forward_action(c1, m1, y1, {}, nullptr, &arc1) -
                              detail::forward_action(c2, m2, y2, {}, nullptr, &arc2);
                }
            double mixed = (S[0][0] - S[0][1] - S[1][0] + S[1][1]) / (4 * d * d);
            t.hessian_det = std::abs(mixed);
        } catch (const Error&) {
            // the level perturbation crosses a caustic: only the bracket identity is available
            t.hessian_det = ident;
            g.warnings.push_back("CausticNearby: finite-difference Hessian unavailable at |{H1,H2}| = " +
                                 std::to_string(std::abs(ip.bracket)) + ", bracket identity used");
        }
        t.hessian_check = std::abs(t.hessian_det - ident) / ident;
        g.terms.push_back(t);
    }
    return g;
}

/// Semiclassical scalar product of eigen-half-densities of two systems:
/// C/(2πh)^{1/2} Σ_c |∂²S/∂b1∂b2|^{1/2} exp(iS/h + iπμ/2), with C = 1.
inline SemiclassicalAmplitude overlap(const System& sys1, const System& sys2, const ReferenceLagrangian& lambda,
                                      const PrequantumForm& alpha, double h, const OverlapOptions& opts = {}) {
    auto g = overlap_geometry(sys1, sys2, lambda, alpha, opts);
    SemiclassicalAmplitude a;
    a.h = h;
    a.terms = std::move(g.terms);
    a.warnings = std::move(g.warnings);
    assemble(a);
    return a;
}

/// |overlap|² as the double sum over intersection pairs; the cross terms carry the relative
/// action (a symplectic area) and relative Maslov index.
inline double transition_probability(const SemiclassicalAmplitude& a) {
    double sum = 0.0;
    for (auto& s : a.terms)
        for (auto& t : a.terms) {
            double rel = (s.action - t.action) / a.h + std::numbers::pi * (s.maslov - t.maslov) / 2.0;
            sum += std::sqrt(s.hessian_det * t.hessian_det) * std::real(s.weight * std::conj(t.weight)) * std::cos(rel) -
                   std::sqrt(s.hessian_det * t.hessian_det) * std::imag(s.weight * std::conj(t.weight)) * std::sin(rel);
        }
    double pf = a.prefactor.value(a.h);
    return pf * pf * sum;
}

inline double transition_probability(const System& sys1, const System& sys2, double h,
                                      const ReferenceLagrangian& lambda = {}, const PrequantumForm& alpha = {},
                                      const OverlapOptions& opts = {}) {
    return transition_probability(overlap(sys1, sys2, lambda, alpha, h, opts));
}

// ---------------------------------------------------------------- cyclic amplitudes

struct CyclicTerm {
    std::vector<PhasePoint> chain;  // c_a ∈ 𝓛_a ∩ 𝓛_{a+1}
    double action = 0.0;
    int maslov = 0;
    double hessian = 1.0;  // Π 1/|{H_a, H_{a+1}}(c_a)|
    cplx contribution{};
};

struct CyclicAmplitude {
    double h = 0.0;
    std::vector<CyclicTerm> terms;
    cplx value{};
    std::vector<std::string> warnings;
};

/// Cyclic amplitude of k = 2..4 systems. The phase of a chain is −Σ_a ∫α along 𝓛_a from c_{a-1}
/// to c_a (the symplectic area enclosed by the chain), the Maslov index is summed over the same
/// arcs relative to the preceding fibration. All chains are summed unless one is given.
inline CyclicAmplitude cyclic_amplitude(const std::vector<System>& systems, const PrequantumForm& alpha, double h,
                                        const TraceOptions& opts = {},
                                        std::optional<std::vector<PhasePoint>> chain = std::nullopt) {
    const int k = static_cast<int>(systems.size());
    if (k < 2 || k > 4) throw Error("cyclic amplitudes are supported for 2 <= k <= 4");
    std::vector<FiberCurve> curves;
    for (auto& s : systems) curves.push_back(trace_fiber(s, opts));

    // I[a] = 𝓛_a ∩ 𝓛_{a+1}, restricted to the traced components
    std::vector<std::vector<PhasePoint>> I(k);
    for (int a = 0; a < k; ++a) {
        int b = (a + 1) % k;
        for (auto& ip : intersections_on_curve(systems[a].H, systems[a].b, curves[b], opts.tol)) {
            try {
                curves[a].locate(ip.c);
                I[a].push_back(ip.c);
            } catch (const PointNotOnFiber&) {
            }
        }
    }
    CyclicAmplitude out;
    out.h = h;
    std::vector<std::vector<PhasePoint>> chains;
    if (chain) {
        if (static_cast<int>(chain->size()) != k) throw Error("chain length must equal the number of systems");
        chains.push_back(*chain);
    } else {
        std::vector<PhasePoint> cur(k);
        std::function<void(int)> rec = [&](int a) {
            if (a == k) {
                chains.push_back(cur);
                return;
            }
            for (auto& c : I[a]) {
                cur[a] = c;
                rec(a + 1);
            }
        };
        rec(0);
    }
    for (auto& ch : chains) {
        CyclicTerm t;
        t.chain = ch;
        for (int a = 0; a < k; ++a) {
            int prev = (a + k - 1) % k;
            auto from = curves[a].locate(ch[prev]);
            auto to = curves[a].locate(ch[a]);
            double arc = arc_length_between(curves[a], from, to, Direction::forward);
            t.action -= action_along_fiber(curves[a], from, to, alpha, Direction::forward);
            t.maslov += maslov_arc(curves[a], systems[prev].H, from.at.s, arc).index;
            double br = poisson_bracket(systems[a].H, systems[(a + 1) % k].H, ch[a]);
            if (std::abs(br) <= opts.tol.trans_tol) throw TangentialIntersection("non-transverse chain point");
            t.hessian /= std::abs(br);
        }
        t.contribution = std::sqrt(t.hessian) * std::exp(cplx(0.0, t.action / h + std::numbers::pi * t.maslov / 2.0));
        out.value += t.contribution;
        out.terms.push_back(t);
    }
    out.value /= std::pow(two_pi * h, k / 2.0);
    return out;
}

// ---------------------------------------------------------------- gluing

/// A kernel as a function of the intermediate label b.
using Kernel = std::function<SemiclassicalAmplitude(double b, HessianMethod)>;

struct ComposeOptions {
    double b_lo = -1.0, b_hi = 1.0;
    int scan_points = 64;
    double fd_rel = 1e-4;       // first-derivative step, relative to the interval width
    double stencil_rel = 2e-3;  // second-derivative stencil step, relative to the interval width
    bool first_order = false;   // include the O(h) stationary-phase correction
    double hess_tol = 1e-6;
};

struct StationaryPoint {
    double b = 0.0;
    double phase = 0.0;           // Φ(b*) = S_20 + S_01
    double second_derivative = 0.0;
    int maslov = 0;               // μ_20 + μ_01 of the paired terms
    PhasePoint c20, c01;
    cplx contribution{};
};

struct Composition {
    double h = 0.0;
    cplx value{};
    std::vector<StationaryPoint> points;
    std::vector<std::string> warnings;
};

namespace detail {

struct PairEval {
    PhasePoint ct, cu;
    double phi = 0.0;
    int mu = 0;
    cplx amp{};  // prefactor-free amplitude product, weights included
    double pref = 0.0;
};

inline std::vector<PairEval> pair_terms(const SemiclassicalAmplitude& A, const SemiclassicalAmplitude& B) {
    std::vector<PairEval> out;
    for (auto& t : A.terms)
        for (auto& u : B.terms)
            out.push_back({t.c.c, u.c.c, t.action + u.action, t.maslov + u.maslov,
                           t.weight * u.weight * std::sqrt(t.hessian_det * u.hessian_det),
                           A.prefactor.value(A.h) * B.prefactor.value(B.h)});
    return out;
}

inline std::optional<PairEval> match(const std::vector<PairEval>& v, PhasePoint ct, PhasePoint cu, double radius) {
    std::optional<PairEval> best;
    double bd = radius;
    for (auto& e : v) {
        double d = distance(e.ct, ct) + distance(e.cu, cu);
        if (d < bd) bd = d, best = e;
    }
    return best;
}

} // namespace detail

/// Stationary-phase evaluation of ∫ U_20(b2, b) U_01(b, b1) db over the intermediate label.
inline Composition compose_kernels(const Kernel& U20, const Kernel& U01, double h, const ComposeOptions& o) {
    using detail::PairEval;
    const double W = o.b_hi - o.b_lo;
    const double dfd = o.fd_rel * W;
    const auto hm = HessianMethod::bracket_identity;
    int caustics = 0;
    auto pairs_at = [&](double b) {
        try {
            auto A = U20(b, hm), B = U01(b, hm);
            A.h = B.h = h;
            return detail::pair_terms(A, B);
        } catch (const TangentialIntersection&) {
            ++caustics;  // the label sits on a caustic of one kernel: no regular terms there
            return std::vector<PairEval>{};
        }
    };
    // each pair with its phase derivative
    struct Node {
        PairEval e;
        double g;
    };
    auto eval = [&](double b) {
        auto mid = pairs_at(b), plus = pairs_at(b + dfd), minus = pairs_at(b - dfd);
        std::vector<Node> out;
        for (auto& e : mid) {
            double rad = 50 * dfd + 1e-6;
            auto p = detail::match(plus, e.ct, e.cu, rad), m = detail::match(minus, e.ct, e.cu, rad);
            if (!p || !m) continue;
            out.push_back({e, (p->phi - m->phi) / (2 * dfd)});
        }
        return out;
    };

    Composition res;
    res.h = h;
    const int M = std::max(o.scan_points, 4);
    const double db = W / (M - 1);
    std::vector<std::vector<Node>> scan(M);
    for (int k = 0; k < M; ++k) scan[k] = eval(o.b_lo + k * db);

    double max_second = 0.0;
    struct Root {
        double b;
        PhasePoint ct, cu;
    };
    std::vector<Root> roots;
    auto follow = [&](const std::vector<Node>& nodes, PhasePoint ct, PhasePoint cu) -> std::optional<Node> {
        std::optional<Node> best;
        double bd = 0.5 * W;
        for (auto& x : nodes) {
            double d = distance(x.e.ct, ct) + distance(x.e.cu, cu);
            if (d < bd) bd = d, best = x;
        }
        return best;
    };
    // a branch present at b_have but not at b_gone ends in between (a caustic of one kernel):
    // walk to the last label where it still exists
    auto branch_end = [&](Node n, double b_have, double b_gone) {
        for (int it = 0; it < 40; ++it) {
            double m = 0.5 * (b_have + b_gone);
            if (auto x = follow(eval(m), n.e.ct, n.e.cu)) n = *x, b_have = m;
            else b_gone = m;
        }
        return std::pair{n, b_have};
    };
    for (int k = 0; k + 1 < M; ++k) {
        double bl = o.b_lo + k * db;
        std::vector<std::array<double, 2>> brackets;  // [lo, hi] with a sign change
        std::vector<Node> lows;
        for (auto& nl : scan[k]) {
            auto nr = follow(scan[k + 1], nl.e.ct, nl.e.cu);
            if (nr) {
                max_second = std::max(max_second, std::abs(nr->g - nl.g) / db);
                if ((nl.g < 0) == (nr->g < 0)) continue;
                brackets.push_back({bl, bl + db});
                lows.push_back(nl);
            } else {
                auto [ne, be] = branch_end(nl, bl, bl + db);
                if ((nl.g < 0) == (ne.g < 0)) continue;
                brackets.push_back({bl, be});
                lows.push_back(nl);
            }
        }
        for (auto& nr : scan[k + 1]) {
            if (follow(scan[k], nr.e.ct, nr.e.cu)) continue;
            auto [ne, be] = branch_end(nr, bl + db, bl);
            if ((nr.g < 0) == (ne.g < 0)) continue;
            brackets.push_back({be, bl + db});
            lows.push_back(ne);
        }
        for (std::size_t j = 0; j < brackets.size(); ++j) {
            const auto& nl = lows[j];
            // bisection on the sign of the phase derivative along this branch
            double lo = brackets[j][0], hi = brackets[j][1], glo = nl.g;
            PhasePoint ct = nl.e.ct, cu = nl.e.cu;
            for (int it = 0; it < 60 && hi - lo > 1e-13 * (1 + W); ++it) {
                double m = 0.5 * (lo + hi);
                auto nodes = eval(m);
                const Node* best = nullptr;
                double bdist = 0.5 * W;
                for (auto& x : nodes) {
                    double d = distance(x.e.ct, ct) + distance(x.e.cu, cu);
                    if (d < bdist) bdist = d, best = &x;
                }
                if (!best) break;
                if ((best->g < 0) == (glo < 0)) lo = m, glo = best->g, ct = best->e.ct, cu = best->e.cu;
                else hi = m;
            }
            roots.push_back({0.5 * (lo + hi), ct, cu});
        }
    }
    if (caustics) res.warnings.push_back("CausticNearby: " + std::to_string(caustics) + " kernel evaluations hit a caustic");
    if (roots.empty()) {
        if (max_second < o.hess_tol && !scan.front().empty())
            throw DegenerateStationaryPoint("phase is affine in the intermediate label: coincident fibrations");
        return res;
    }
    for (auto& r : roots) {
        // five-point stencil, shrunk when it reaches past the end of a kernel branch
        std::array<PairEval, 5> e;
        double d2 = o.stencil_rel * W;
        for (bool ok = false; !ok; d2 *= 0.5) {
            if (d2 < 1e-3 * o.stencil_rel * W)
                throw DegenerateStationaryPoint("stationary point too close to the end of a kernel branch");
            ok = true;
            for (int j = -2; j <= 2 && ok; ++j) {
                auto m = detail::match(pairs_at(r.b + j * d2), r.ct, r.cu, 0.5 * W);
                if (m) e[j + 2] = *m;
                else ok = false;
            }
            if (ok) break;
        }
        double f0 = e[2].phi;
        double a = (-e[4].phi + 16 * e[3].phi - 30 * f0 + 16 * e[1].phi - e[0].phi) / (12 * d2 * d2);
        if (std::abs(a) < o.hess_tol)
            throw DegenerateStationaryPoint("vanishing second derivative of the phase at b = " + std::to_string(r.b));
        cplx A = e[2].amp;
        cplx corr{};
        if (o.first_order) {
            double c3 = (e[4].phi - 2 * e[3].phi + 2 * e[1].phi - e[0].phi) / (2 * d2 * d2 * d2);
            double c4 = (e[4].phi - 4 * e[3].phi + 6 * f0 - 4 * e[1].phi + e[0].phi) / (d2 * d2 * d2 * d2);
            cplx A1 = (-e[4].amp + 8. * e[3].amp - 8. * e[1].amp + e[0].amp) / (12 * d2);
            cplx A2 = (-e[4].amp + 16. * e[3].amp - 30. * A + 16. * e[1].amp - e[0].amp) / (12 * d2 * d2);
            corr = cplx(0, h) * (A2 / (2 * a) - c3 * A1 / (2 * a * a) - c4 * A / (8 * a * a) +
                                 5 * c3 * c3 * A / (24 * a * a * a));
        }
        StationaryPoint sp;
        sp.b = r.b;
        sp.phase = f0;
        sp.second_derivative = a;
        sp.maslov = e[2].mu;
        sp.c20 = e[2].ct;
        sp.c01 = e[2].cu;
        double sgn = a > 0 ? 1.0 : -1.0;
        sp.contribution = e[2].pref * (A + corr) * std::sqrt(two_pi * h / std::abs(a)) *
                          std::exp(cplx(0, f0 / h + std::numbers::pi * e[2].mu / 2.0 + sgn * std::numbers::pi / 4));
        res.value += sp.contribution;
        res.points.push_back(sp);
    }
    return res;
}

} // namespace sclq

#endif

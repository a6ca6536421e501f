#ifndef SCLQ_FIBER_HPP
#define SCLQ_FIBER_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "observable.hpp"

namespace sclq {

struct Tolerances {
    double curve_tol = 1e-9;
    double quad_tol = 1e-8;
    double newton_tol = 1e-10;
    double trans_tol = 1e-6;
    double dedup_radius = 1e-6;
    double hess_tol = 1e-6;
    double bs_tol = 1e-9;
    double fd_step = 1e-4;
};

struct Box {
    double qmin = -8.0, qmax = 8.0, pmin = -8.0, pmax = 8.0;

    static Box square(double r) { return {-r, r, -r, r}; }
    bool contains(PhasePoint x) const { return x.q >= qmin && x.q <= qmax && x.p >= pmin && x.p <= pmax; }
    /// Signed distance-like exit function: <= 0 inside.
    double excess(PhasePoint x) const {
        return std::max({x.q - qmax, qmin - x.q, x.p - pmax, pmin - x.p});
    }
};

struct TraceOptions {
    Box domain;
    Tolerances tol;
    double ode_tol = 1e-13;
    double max_step = 0.05;
    double min_step = 1e-13;
    double singular_gradient = 1e-6;
    double max_length = 2e4;
};

struct FiberSample {
    PhasePoint x;
    double s = 0.0;       // arclength
    double action = 0.0;  // cumulative ∫ p dq
    double time = 0.0;    // Hamiltonian flow time
};

enum class Direction { forward, reverse };

namespace detail {

using State = std::array<double, 4>;  // q, p, action, time

// Arclength-parametrised Hamiltonian field, direction dir = ±1.
inline State field(const Observable& H, const State& y, double dir, double singular) {
    auto g = H.gradient({y[0], y[1]});
    double n = std::hypot(g[0], g[1]);
    if (!(n > singular)) throw SingularFiber("gradient vanishes on the level curve near (" + std::to_string(y[0]) + ", " + std::to_string(y[1]) + ")");
    double dq = dir * g[1] / n, dp = -dir * g[0] / n;
    return {dq, dp, y[1] * dq, dir / n};
}

struct StepResult {
    State y;
    double err;
};

// Dormand–Prince 5(4) step.
inline StepResult dopri_step(const Observable& H, const State& y, double h, double dir, double singular,
                             double atol, double rtol) {
    static constexpr double a21 = 1.0 / 5, a31 = 3.0 / 40, a32 = 9.0 / 40, a41 = 44.0 / 45, a42 = -56.0 / 15,
                            a43 = 32.0 / 9, a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729, a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656, b1 = 35.0 / 384, b3 = 500.0 / 1113,
                            b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84, e1 = 71.0 / 57600,
                            e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                            e7 = -1.0 / 40;
    auto lin = [&](std::initializer_list<std::pair<double, const State*>> parts) {
        State r = y;
        for (auto& [c, k] : parts)
            for (int i = 0; i < 4; ++i) r[i] += h * c * (*k)[i];
        return r;
    };
    State k1 = field(H, y, dir, singular);
    State k2 = field(H, lin({{a21, &k1}}), dir, singular);
    State k3 = field(H, lin({{a31, &k1}, {a32, &k2}}), dir, singular);
    State k4 = field(H, lin({{a41, &k1}, {a42, &k2}, {a43, &k3}}), dir, singular);
    State k5 = field(H, lin({{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}), dir, singular);
    State k6 = field(H, lin({{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}), dir, singular);
    State y5 = lin({{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
    State k7 = field(H, y5, dir, singular);
    double err = 0.0;
    for (int i = 0; i < 4; ++i) {
        double e = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
        double sc = atol + rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
        err = std::max(err, std::abs(e) / sc);
    }
    return {y5, err};
}

// Newton projection onto {H = b} along the gradient.
inline PhasePoint project(const Observable& H, double b, PhasePoint x, int iters = 8) {
    for (int k = 0; k < iters; ++k) {
        double r = H(x) - b;
        auto g = H.gradient(x);
        double n2 = g[0] * g[0] + g[1] * g[1];
        if (n2 == 0.0) break;
        x.q -= r * g[0] / n2;
        x.p -= r * g[1] / n2;
        if (std::abs(r) < 1e-15 * (1.0 + std::abs(b))) break;
    }
    return x;
}

} // namespace detail

/// Newton projection of a point onto the level set H = b.
inline PhasePoint project_to_level(const Observable& H, double b, PhasePoint x) {
    return detail::project(H, b, x, 50);
}

/// Default seed: the root of H - b closest to the origin on the q-axis, else on the p-axis.
inline std::optional<PhasePoint> default_seed(const Observable& H, double b, const Box& box = {}) {
    std::optional<PhasePoint> best;
    double best_r = std::numeric_limits<double>::infinity();
    auto scan = [&](bool along_q) {
        for (double dir : {1.0, -1.0}) {
            double lim = along_q ? (dir > 0 ? box.qmax : -box.qmin) : (dir > 0 ? box.pmax : -box.pmin);
            auto at = [&](double t) { return along_q ? PhasePoint{dir * t, 0.0} : PhasePoint{0.0, dir * t}; };
            const double dt = 1e-2;
            double t0 = 0.0, f0 = H(at(0.0)) - b;
            if (f0 == 0.0) {
                if (0.0 < best_r) best_r = 0.0, best = at(0.0);
                return;
            }
            for (double t1 = dt; t1 <= lim + 1e-12 && t0 < best_r; t1 += dt) {
                double f1 = H(at(t1)) - b;
                if ((f0 < 0) != (f1 < 0)) {
                    double lo = t0, hi = t1, flo = f0;
                    for (int k = 0; k < 200 && hi - lo > 1e-15 * (1 + hi); ++k) {
                        double mid = 0.5 * (lo + hi);
                        double fm = H(at(mid)) - b;
                        if ((fm < 0) == (flo < 0)) lo = mid, flo = fm;
                        else hi = mid;
                    }
                    double t = 0.5 * (lo + hi);
                    if (t < best_r) best_r = t, best = at(t);
                    break;
                }
                t0 = t1;
                f0 = f1;
            }
        }
    };
    scan(true);
    if (!best) scan(false);
    return best;
}

/// A traced level set {H = b}, samples ordered along the Hamiltonian flow.
class FiberCurve {
public:
    struct Location {
        std::size_t segment = 0;  // point lies between samples[segment] and samples[segment+1]
        double sigma = 0.0;       // arclength offset from samples[segment]
        FiberSample at;
    };

    Observable H;
    double level = 0.0;
    std::vector<FiberSample> samples;
    bool closed = false;
    bool truncated = false;
    double period = 0.0;       // total flow time (closed curves)
    double loop_action = 0.0;  // ∮ p dq in the flow direction (closed curves)
    double length = 0.0;
    int orientation = +1;
    std::size_t seed_index = 0;
    TraceOptions opts;

    double s_begin() const { return samples.front().s; }
    double s_end() const { return samples.back().s; }

    /// Exact state at arclength offset sigma past samples[seg].
    FiberSample substep(std::size_t seg, double sigma) const {
        const auto& a = samples[seg];
        if (sigma == 0.0) return a;
        detail::State y{a.x.q, a.x.p, a.action, a.time};
        double dir = sigma > 0 ? 1.0 : -1.0;
        double rem = std::abs(sigma);
        // sigma never exceeds an accepted step, but split long requests defensively
        int pieces = std::max(1, static_cast<int>(std::ceil(rem / opts.max_step)));
        double hstep = rem / pieces;
        for (int k = 0; k < pieces; ++k)
            y = detail::dopri_step(H, y, hstep, dir, opts.singular_gradient, opts.ode_tol, opts.ode_tol).y;
        PhasePoint x = detail::project(H, level, {y[0], y[1]}, 3);
        return {x, a.s + sigma, y[2], y[3]};
    }

    /// State at absolute arclength s (reduced modulo the length on closed curves).
    FiberSample point_at(double s) const {
        if (closed) {
            s = std::fmod(s - s_begin(), length);
            if (s < 0) s += length;
            s += s_begin();
        } else if (s < s_begin() - 1e-12 || s > s_end() + 1e-12) {
            throw PointNotOnFiber("arclength outside traced fiber");
        }
        auto it = std::upper_bound(samples.begin(), samples.end(), s,
                                   [](double v, const FiberSample& f) { return v < f.s; });
        std::size_t seg = it == samples.begin() ? 0 : static_cast<std::size_t>(it - samples.begin()) - 1;
        if (seg + 1 >= samples.size()) seg = samples.size() - 2;
        return substep(seg, s - samples[seg].s);
    }

    Location location_at(double s) const {
        if (closed) {
            s = std::fmod(s - s_begin(), length);
            if (s < 0) s += length;
            s += s_begin();
        }
        auto it = std::upper_bound(samples.begin(), samples.end(), s,
                                   [](double v, const FiberSample& f) { return v < f.s; });
        std::size_t seg = it == samples.begin() ? 0 : static_cast<std::size_t>(it - samples.begin()) - 1;
        if (seg + 1 >= samples.size()) seg = samples.size() - 2;
        return {seg, s - samples[seg].s, substep(seg, s - samples[seg].s)};
    }

    /// Locate a point of the level set on this traced component.
    Location locate(PhasePoint c, double tol = 1e-7) const {
        auto g = H.gradient(c);
        double gn = std::hypot(g[0], g[1]);
        if (std::abs(H(c) - level) > opts.tol.curve_tol * std::max(1.0, gn))
            throw PointNotOnFiber("point is not on the level set H = " + std::to_string(level));
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            double d = distance(samples[i].x, c);
            if (d < bd) bd = d, best = i;
        }
        std::vector<std::size_t> segs;
        std::size_t last = samples.size() - 1;
        if (best > 0) segs.push_back(best - 1);
        if (best < last) segs.push_back(best);
        if (closed && best == 0) segs.push_back(last - 1);
        if (closed && best == last) segs.push_back(0);
        std::optional<Location> found;
        double found_d = std::numeric_limits<double>::infinity();
        for (std::size_t seg : segs) {
            double ds = samples[seg + 1].s - samples[seg].s;
            auto tan = [&](PhasePoint x) {
                auto gr = H.gradient(x);
                double n = std::hypot(gr[0], gr[1]);
                return std::array<double, 2>{gr[1] / n, -gr[0] / n};
            };
            auto t0 = tan(samples[seg].x);
            double sigma = (c.q - samples[seg].x.q) * t0[0] + (c.p - samples[seg].x.p) * t0[1];
            sigma = std::clamp(sigma, -0.5 * ds, 1.5 * ds);
            FiberSample y = substep(seg, sigma);
            for (int k = 0; k < 30; ++k) {
                auto t = tan(y.x);
                double r = (y.x.q - c.q) * t[0] + (y.x.p - c.p) * t[1];
                if (std::abs(r) < 1e-15) break;
                sigma -= r;
                y = substep(seg, sigma);
            }
            double slack = 1e-9 * (1.0 + ds);
            if (sigma < -slack || sigma > ds + slack) continue;
            double d = distance(y.x, c);
            if (d < found_d) found_d = d, found = Location{seg, sigma, y};
        }
        if (!found || found_d > tol)
            throw PointNotOnFiber("point (" + std::to_string(c.q) + ", " + std::to_string(c.p) +
                                  ") is not on the traced fiber component");
        // normalise the closing endpoint onto the start
        if (closed && found->segment == last - 1 && found->sigma >= samples[last].s - samples[last - 1].s)
            found = Location{0, 0.0, samples[0]};
        return *found;
    }

    /// Unit tangent in the flow direction.
    std::array<double, 2> tangent(PhasePoint x) const {
        auto g = H.gradient(x);
        double n = std::hypot(g[0], g[1]);
        return {g[1] / n, -g[0] / n};
    }

    /// CSV dump: q, p, arclength, action, time
    void write_csv(std::ostream& os) const {
        os << "q,p,arclength,action,time\n";
        os.precision(17);
        for (auto& s : samples) os << s.x.q << ',' << s.x.p << ',' << s.s << ',' << s.action << ',' << s.time << '\n';
    }
};

namespace detail {

struct RawTrace {
    std::vector<FiberSample> samples;
    bool closed = false;
    bool exited = false;
};

inline RawTrace integrate(const Observable& H, double b, PhasePoint x0, double dir, const TraceOptions& o,
                          bool detect_closure) {
    RawTrace out;
    State y{x0.q, x0.p, 0.0, 0.0};
    out.samples.push_back({x0, 0.0, 0.0, 0.0});
    auto g0 = H.gradient(x0);
    double gn0 = std::hypot(g0[0], g0[1]);
    if (!(gn0 > o.singular_gradient)) throw SingularFiber("seed lies at a critical point");
    std::array<double, 2> t0{dir * g0[1] / gn0, -dir * g0[0] / gn0};
    auto along = [&](const State& s) { return (s[0] - x0.q) * t0[0] + (s[1] - x0.p) * t0[1]; };
    auto across = [&](const State& s) { return std::abs(-(s[0] - x0.q) * t0[1] + (s[1] - x0.p) * t0[0]); };

    double sigma = 0.0;
    double h = std::min(1e-3, o.max_step);
    while (true) {
        if (sigma > o.max_length) throw SingularFiber("level curve did not close within the length budget");
        auto st = dopri_step(H, y, h, dir, o.singular_gradient, o.ode_tol, o.ode_tol);
        if (st.err > 1.0) {
            h *= std::max(0.1, 0.9 * std::pow(st.err, -0.2));
            if (h < o.min_step) throw SingularFiber("step size underflow while tracing level curve");
            continue;
        }
        State yn = st.y;
        PhasePoint xp = project(H, b, {yn[0], yn[1]}, 3);
        yn[0] = xp.q;
        yn[1] = xp.p;
        double step = h;

        // closure: the tangential coordinate crosses zero from below near the seed
        if (detect_closure && sigma > 0 && along(y) < 0 && along(yn) >= 0 &&
            across(yn) < 10 * step + 1e-6) {
            auto sub = [&](double s) {
                State r = dopri_step(H, y, s, dir, o.singular_gradient, o.ode_tol, o.ode_tol).y;
                PhasePoint px = project(H, b, {r[0], r[1]}, 3);
                r[0] = px.q;
                r[1] = px.p;
                return r;
            };
            double lo = 0.0, hi = step, flo = along(y), fhi = along(yn);
            double s = step;
            for (int k = 0; k < 100; ++k) {
                s = hi - fhi * (hi - lo) / (fhi - flo);
                if (!(s > lo && s < hi)) s = 0.5 * (lo + hi);
                State r = sub(s);
                double f = along(r);
                if (std::abs(f) < 1e-15 || hi - lo < 1e-15) break;
                if (f < 0) lo = s, flo = f;
                else hi = s, fhi = f;
            }
            State r = sub(s);
            if (across(r) < std::max(o.tol.curve_tol, 1e-9) * 10) {
                out.samples.push_back({x0, dir * (sigma + s), r[2], r[3]});
                out.closed = true;
                return out;
            }
        }

        // domain exit: cut the trace on the box boundary
        if (o.domain.excess({yn[0], yn[1]}) > 0) {
            auto sub = [&](double s) { return dopri_step(H, y, s, dir, o.singular_gradient, o.ode_tol, o.ode_tol).y; };
            double lo = 0.0, hi = step;
            for (int k = 0; k < 80 && hi - lo > 1e-15; ++k) {
                double mid = 0.5 * (lo + hi);
                if (o.domain.excess({sub(mid)[0], sub(mid)[1]}) > 0) hi = mid;
                else lo = mid;
            }
            State r = sub(lo);
            PhasePoint px = project(H, b, {r[0], r[1]}, 3);
            out.samples.push_back({px, dir * (sigma + lo), r[2], r[3]});
            out.exited = true;
            return out;
        }

        y = yn;
        sigma += step;
        out.samples.push_back({{y[0], y[1]}, dir * sigma, y[2], y[3]});
        h *= std::min(5.0, std::max(0.2, 0.9 * std::pow(std::max(st.err, 1e-30), -0.2)));
        h = std::min(h, o.max_step);
    }
}

} // namespace detail

/// Trace the level curve {H = b} through (the projection of) seed.
inline FiberCurve trace_level_curve(const Observable& H, double b, PhasePoint seed, const TraceOptions& opts = {}) {
    PhasePoint x0 = project_to_level(H, b, seed);
    auto g = H.gradient(x0);
    if (std::abs(H(x0) - b) > opts.tol.newton_tol * std::max(1.0, std::hypot(g[0], g[1])))
        throw SingularFiber("could not project the seed onto the level set");
    if (!opts.domain.contains(x0)) throw SingularFiber("seed outside the domain box");

    FiberCurve c;
    c.H = H;
    c.level = b;
    c.opts = opts;
    auto fwd = detail::integrate(H, b, x0, +1.0, opts, true);
    if (fwd.closed) {
        c.samples = std::move(fwd.samples);
        c.closed = true;
        c.length = c.samples.back().s;
        c.loop_action = c.samples.back().action;
        c.period = c.samples.back().time;
        c.seed_index = 0;
        return c;
    }
    auto bwd = detail::integrate(H, b, x0, -1.0, opts, false);
    c.samples.assign(bwd.samples.rbegin(), bwd.samples.rend());
    c.seed_index = c.samples.size() - 1;
    c.samples.insert(c.samples.end(), fwd.samples.begin() + 1, fwd.samples.end());
    c.truncated = true;
    c.length = c.samples.back().s - c.samples.front().s;
    return c;
}

/// Trace {H = b} from the default seed.
inline FiberCurve trace_level_curve_default(const Observable& H, double b, const TraceOptions& opts = {}) {
    auto seed = default_seed(H, b, opts.domain);
    if (!seed) throw SingularFiber("no seed found for level " + std::to_string(b) + " of " + H.name());
    return trace_level_curve(H, b, *seed, opts);
}

/// ∫ alpha along the fiber between two located points.
/// forward: the orientation-respecting segment (wrapping through the seed on closed curves);
/// reverse: the segment traversed against the flow.
inline double action_along_fiber(const FiberCurve& curve, const FiberCurve::Location& from,
                                 const FiberCurve::Location& to, const PrequantumForm& alpha = {},
                                 Direction dir = Direction::forward) {
    double a = to.at.action - from.at.action;
    if (curve.closed) {
        double ds = to.at.s - from.at.s;
        if (dir == Direction::forward && ds < 0) a += curve.loop_action;
        if (dir == Direction::reverse && ds > 0) a -= curve.loop_action;
    }
    return a + alpha.f(to.at.x) - alpha.f(from.at.x);
}

inline double action_along_fiber(const FiberCurve& curve, PhasePoint from, PhasePoint to,
                                 const PrequantumForm& alpha = {}, Direction dir = Direction::forward) {
    return action_along_fiber(curve, curve.locate(from), curve.locate(to), alpha, dir);
}

/// Arclength travelled from one location to another in the given direction.
inline double arc_length_between(const FiberCurve& curve, const FiberCurve::Location& from,
                                 const FiberCurve::Location& to, Direction dir = Direction::forward) {
    double ds = to.at.s - from.at.s;
    if (curve.closed) {
        if (dir == Direction::forward && ds < 0) ds += curve.length;
        if (dir == Direction::reverse && ds > 0) ds -= curve.length;
    }
    return ds;
}

/// Transversal intersections of the fiber with the graph Λ, in arclength order.
inline std::vector<FiberCurve::Location> lagrangian_crossings(const FiberCurve& curve, const ReferenceLagrangian& lam) {
    std::vector<FiberCurve::Location> out;
    const auto& S = curve.samples;
    for (std::size_t i = 0; i + 1 < S.size(); ++i) {
        double g0 = lam.defect(S[i].x), g1 = lam.defect(S[i + 1].x);
        if ((g0 < 0) == (g1 < 0)) continue;
        double lo = 0.0, hi = S[i + 1].s - S[i].s, glo = g0, ghi = g1;
        FiberSample y = S[i];
        for (int k = 0; k < 100; ++k) {
            double mid = hi - ghi * (hi - lo) / (ghi - glo);
            if (!(mid > lo && mid < hi)) mid = 0.5 * (lo + hi);
            y = curve.substep(i, mid);
            double gm = lam.defect(y.x);
            if (gm == 0.0 || hi - lo < 1e-15) {
                lo = hi = mid;
                break;
            }
            if ((gm < 0) == (glo < 0)) lo = mid, glo = gm;
            else hi = mid, ghi = gm;
            if (std::abs(gm) < 1e-15) break;
        }
        auto gr = curve.H.gradient(y.x);
        double det = gr[1] * lam.slope(y.x.q) + gr[0];
        if (std::abs(det) <= curve.opts.tol.trans_tol) continue;
        double sigma = y.s - S[i].s;
        out.push_back({i, sigma, y});
    }
    return out;
}

/// x = 𝓛 ∩ Λ: smallest q among transversal intersections, ties broken by smallest p.
inline FiberCurve::Location reference_location(const FiberCurve& curve, const ReferenceLagrangian& lam) {
    auto all = lagrangian_crossings(curve, lam);
    if (all.empty()) throw NoReferencePoint("fiber " + curve.H.name() + " = " + std::to_string(curve.level) +
                                            " does not meet the reference Lagrangian in the domain");
    auto best = std::min_element(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (std::abs(a.at.x.q - b.at.x.q) > 1e-12) return a.at.x.q < b.at.x.q;
        return a.at.x.p < b.at.x.p;
    });
    return *best;
}

inline PhasePoint reference_point(const FiberCurve& curve, const ReferenceLagrangian& lam) {
    return reference_location(curve, lam).at.x;
}

} // namespace sclq

#endif

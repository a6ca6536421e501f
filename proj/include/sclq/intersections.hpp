#ifndef SCLQ_INTERSECTIONS_HPP
#define SCLQ_INTERSECTIONS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "fiber.hpp"

namespace sclq {

struct IntersectionPoint {
    PhasePoint c;
    double bracket = 0.0;  // {H1,H2}(c)
    std::size_t branch_1 = npos;
    std::size_t branch_2 = npos;

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

namespace detail {

struct NewtonResult {
    PhasePoint x;
    bool converged = false;
};

// Solve H1 = b1, H2 = b2 by Newton; the Jacobian determinant is the Poisson bracket.
inline NewtonResult newton2(const Observable& H1, double b1, const Observable& H2, double b2, PhasePoint x,
                            double tol, int max_iter = 60) {
    for (int k = 0; k < max_iter; ++k) {
        double f1 = H1(x) - b1, f2 = H2(x) - b2;
        auto g1 = H1.gradient(x), g2 = H2.gradient(x);
        double det = g1[0] * g2[1] - g1[1] * g2[0];
        if (det == 0.0 || !std::isfinite(det)) return {x, false};
        double dq = (f1 * g2[1] - f2 * g1[1]) / det;
        double dp = (g1[0] * f2 - g2[0] * f1) / det;
        x.q -= dq;
        x.p -= dp;
        if (!std::isfinite(x.q) || !std::isfinite(x.p)) return {x, false};
        if (std::hypot(dq, dp) < 1e-15 * (1 + std::hypot(x.q, x.p))) break;
    }
    bool ok = std::abs(H1(x) - b1) <= tol && std::abs(H2(x) - b2) <= tol;
    return {x, ok};
}

inline void dedup_sort(std::vector<IntersectionPoint>& v, double radius) {
    std::vector<IntersectionPoint> out;
    for (auto& c : v) {
        bool dup = false;
        for (auto& d : out)
            if (distance(c.c, d.c) <= radius) dup = true;
        if (!dup) out.push_back(c);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.c.q != b.c.q) return a.c.q < b.c.q;
        return a.c.p < b.c.p;
    });
    v = std::move(out);
}

inline IntersectionPoint accept(const Observable& H1, const Observable& H2, PhasePoint x, const Tolerances& tol) {
    double br = poisson_bracket(H1, H2, x);
    if (std::abs(br) <= tol.trans_tol)
        throw TangentialIntersection("fibers touch non-transversally at (" + std::to_string(x.q) + ", " +
                                     std::to_string(x.p) + "), bracket " + std::to_string(br));
    return {x, br};
}

} // namespace detail

/// All intersections of {H1 = b1} and {H2 = b2} in the box: grid scan for sign patterns + Newton polish.
inline std::vector<IntersectionPoint> find_intersections(const Observable& H1, double b1, const Observable& H2,
                                                         double b2, const Box& box = {}, const Tolerances& tol = {},
                                                         int resolution = 512) {
    const int n = resolution;
    double dq = (box.qmax - box.qmin) / n, dp = (box.pmax - box.pmin) / n;
    std::vector<double> f1((n + 1) * (n + 1)), f2((n + 1) * (n + 1));
    for (int i = 0; i <= n; ++i)
        for (int j = 0; j <= n; ++j) {
            PhasePoint x{box.qmin + i * dq, box.pmin + j * dp};
            f1[i * (n + 1) + j] = H1(x) - b1;
            f2[i * (n + 1) + j] = H2(x) - b2;
        }
    auto changes = [&](const std::vector<double>& f, int i, int j) {
        double a = f[i * (n + 1) + j], b = f[(i + 1) * (n + 1) + j], c = f[i * (n + 1) + j + 1],
               d = f[(i + 1) * (n + 1) + j + 1];
        double lo = std::min({a, b, c, d}), hi = std::max({a, b, c, d});
        return lo <= 0.0 && hi >= 0.0;
    };
    std::vector<IntersectionPoint> out;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (!changes(f1, i, j) || !changes(f2, i, j)) continue;
            PhasePoint x0{box.qmin + (i + 0.5) * dq, box.pmin + (j + 0.5) * dp};
            auto r = detail::newton2(H1, b1, H2, b2, x0, tol.newton_tol);
            if (!r.converged || !box.contains(r.x)) continue;
            // reject roots that escaped far from their cell (they are found from their own cell)
            if (std::abs(r.x.q - x0.q) > 2 * dq || std::abs(r.x.p - x0.p) > 2 * dp) continue;
            out.push_back(detail::accept(H1, H2, r.x, tol));
        }
    detail::dedup_sort(out, tol.dedup_radius);
    return out;
}

/// Intersections of {H1 = b1} with one traced component of {H2 = b2}, scanning along the curve.
inline std::vector<IntersectionPoint> intersections_on_curve(const Observable& H1, double b1, const FiberCurve& curve2,
                                                             const Tolerances& tol = {}) {
    const auto& S = curve2.samples;
    const auto& H2 = curve2.H;
    std::vector<IntersectionPoint> out;
    std::vector<double> f(S.size());
    for (std::size_t i = 0; i < S.size(); ++i) f[i] = H1(S[i].x) - b1;
    for (std::size_t i = 0; i + 1 < S.size(); ++i) {
        bool sign_change = (f[i] < 0) != (f[i + 1] < 0);
        // near-touching candidates: local minimum of |f| that stays small
        bool touch = false;
        if (!sign_change && i > 0 && std::abs(f[i]) <= std::abs(f[i - 1]) && std::abs(f[i]) <= std::abs(f[i + 1])) {
            double ds = S[i + 1].s - S[i].s;
            auto g = H1.gradient(S[i].x);
            touch = std::abs(f[i]) < 1e-3 * std::hypot(g[0], g[1]) * std::max(ds, 1e-3);
        }
        if (!sign_change && !touch) continue;
        PhasePoint x0 = S[i].x;
        if (sign_change) {
            double lo = 0.0, hi = S[i + 1].s - S[i].s, flo = f[i];
            for (int k = 0; k < 60 && hi - lo > 1e-13; ++k) {
                double mid = 0.5 * (lo + hi);
                auto y = curve2.substep(i, mid);
                double fm = H1(y.x) - b1;
                if ((fm < 0) == (flo < 0)) lo = mid, flo = fm;
                else hi = mid;
            }
            x0 = curve2.substep(i, 0.5 * (lo + hi)).x;
        }
        auto r = detail::newton2(H1, b1, H2, curve2.level, x0, tol.newton_tol);
        if (!r.converged) continue;
        if (touch && distance(r.x, x0) > 1e-2) continue;
        if (sign_change && distance(r.x, x0) > 1e-6) continue;
        auto ip = detail::accept(H1, H2, r.x, tol);
        ip.branch_2 = i;
        out.push_back(ip);
    }
    detail::dedup_sort(out, tol.dedup_radius);
    return out;
}

} // namespace sclq

#endif

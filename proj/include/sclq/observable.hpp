#ifndef SCLQ_OBSERVABLE_HPP
#define SCLQ_OBSERVABLE_HPP

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "monomial_syntax.hpp"

namespace sclq {

struct PhasePoint {
    double q = 0.0;
    double p = 0.0;
};

inline double distance(PhasePoint a, PhasePoint b) { return std::hypot(a.q - b.q, a.p - b.p); }

/// One-variable building block: (x-s)^n, cos(w(x-s)) or sin(w(x-s)).
struct Factor {
    enum Kind { power, cosine, sine };
    Kind kind = power;
    int n = 0;
    double omega = 1.0;
    double shift = 0.0;

    static Factor pow(int n, double shift = 0.0) { return {power, n, 1.0, shift}; }
    static Factor cos(double omega, double shift = 0.0) { return {cosine, 0, omega, shift}; }
    static Factor sin(double omega, double shift = 0.0) { return {sine, 0, omega, shift}; }

    bool is_constant() const { return kind == power && n == 0; }

    /// k-th derivative at x.
    double deriv(double x, int k) const {
        double y = x - shift;
        if (kind == power) {
            if (k > n) return 0.0;
            double c = 1.0;
            for (int j = 0; j < k; ++j) c *= (n - j);
            return c * ipow(y, n - k);
        }
        double arg = omega * y + k * std::numbers::pi / 2;
        return ipow(omega, k) * (kind == cosine ? std::cos(arg) : std::sin(arg));
    }
    double operator()(double x) const { return deriv(x, 0); }

    static double ipow(double x, int n) {
        double r = 1.0;
        for (int j = 0; j < n; ++j) r *= x;
        return r;
    }
};

struct Term {
    double coef = 1.0;
    Factor qf;
    Factor pf;
};

/// Hamiltonian on the phase plane: a finite sum of separable terms
/// coef * f(q) * g(p), with analytic derivatives of any order.
class Observable {
public:
    Observable() = default;
    Observable(std::string name, std::vector<Term> terms) : name_(std::move(name)), terms_(std::move(terms)) {}

    static Observable polynomial(const std::map<std::pair<int, int>, double>& coeffs, std::string name = {}) {
        std::vector<Term> t;
        for (auto& [ab, c] : coeffs)
            if (c != 0.0) t.push_back({c, Factor::pow(ab.first), Factor::pow(ab.second)});
        return Observable(name.empty() ? "polynomial" : std::move(name), std::move(t));
    }

    /// Real polynomial in the monomial syntax, e.g. "0.5 p^2 + 0.5 q^2".
    static Observable parse(const std::string& text, std::string name = {}) {
        std::map<std::pair<int, int>, double> c;
        for (auto& m : syntax::parse(text)) {
            if (m.imaginary) throw ParseError("observables must have real coefficients: '" + text + "'");
            double v = std::stod(m.num) / std::stod(m.den);
            c[{m.qdeg, m.pdeg}] += m.negative ? -v : v;
        }
        return polynomial(c, name.empty() ? text : std::move(name));
    }

    /// p^2/2 - cos q
    static Observable pendulum() {
        return Observable("pendulum", {{0.5, Factor::pow(0), Factor::pow(2)}, {-1.0, Factor::cos(1.0), Factor::pow(0)}});
    }

    /// (p^2 + omega^2 (q-q0)^2)/2
    static Observable harmonic(double omega = 1.0, double q0 = 0.0, double p0 = 0.0) {
        std::ostringstream nm;
        nm << "harmonic(omega=" << omega << ",q0=" << q0 << ",p0=" << p0 << ")";
        return Observable(nm.str(), {{0.5, Factor::pow(0), Factor::pow(2, p0)},
                                     {0.5 * omega * omega, Factor::pow(2, q0), Factor::pow(0)}});
    }

    /// a q + b p
    static Observable linear(double a, double b) {
        std::vector<Term> t;
        if (a != 0.0) t.push_back({a, Factor::pow(1), Factor::pow(0)});
        if (b != 0.0) t.push_back({b, Factor::pow(0), Factor::pow(1)});
        std::ostringstream nm;
        nm << "linear(" << a << "," << b << ")";
        return Observable(nm.str(), std::move(t));
    }
    static Observable position() { return Observable("q", {{1.0, Factor::pow(1), Factor::pow(0)}}); }
    static Observable momentum() { return Observable("p", {{1.0, Factor::pow(0), Factor::pow(1)}}); }
    /// q cos(theta) + p sin(theta)
    static Observable rotated_position(double theta) { return linear(std::cos(theta), std::sin(theta)); }

    const std::string& name() const { return name_; }
    const std::vector<Term>& terms() const { return terms_; }
    bool is_zero() const { return terms_.empty(); }

    double deriv(PhasePoint x, int kq, int kp) const {
        double s = 0.0;
        for (auto& t : terms_) s += t.coef * t.qf.deriv(x.q, kq) * t.pf.deriv(x.p, kp);
        return s;
    }
    double operator()(PhasePoint x) const { return deriv(x, 0, 0); }
    std::array<double, 2> gradient(PhasePoint x) const {
        double gq = 0.0, gp = 0.0;
        for (auto& t : terms_) {
            double fq = t.qf(x.q), fp = t.pf(x.p);
            gq += t.coef * t.qf.deriv(x.q, 1) * fp;
            gp += t.coef * fq * t.pf.deriv(x.p, 1);
        }
        return {gq, gp};
    }
    /// {H_qq, H_qp, H_pp}
    std::array<double, 3> hessian(PhasePoint x) const {
        return {deriv(x, 2, 0), deriv(x, 1, 1), deriv(x, 0, 2)};
    }

    /// True when every term is affine in (q, p).
    bool is_linear() const {
        for (auto& t : terms_) {
            auto deg = [](const Factor& f) { return f.kind == Factor::power ? f.n : 99; };
            if (deg(t.qf) + deg(t.pf) > 1) return false;
        }
        return true;
    }

    /// True when the observable does not depend on p (a graph function λ(q)).
    bool is_function_of_q() const {
        for (auto& t : terms_)
            if (!t.pf.is_constant()) return false;
        return true;
    }

    Observable scaled(double s, std::string name = {}) const {
        auto t = terms_;
        for (auto& x : t) x.coef *= s;
        return Observable(name.empty() ? name_ : std::move(name), std::move(t));
    }

    friend Observable operator+(const Observable& a, const Observable& b) {
        auto t = a.terms_;
        t.insert(t.end(), b.terms_.begin(), b.terms_.end());
        return Observable(a.name_ + " + " + b.name_, std::move(t));
    }

private:
    std::string name_ = "0";
    std::vector<Term> terms_;
};

/// {f,g} = f_q g_p - f_p g_q
inline double poisson_bracket(const Observable& f, const Observable& g, PhasePoint x) {
    auto a = f.gradient(x);
    auto b = g.gradient(x);
    return a[0] * b[1] - a[1] * b[0];
}

/// alpha = p dq + df. The gauge enters line integrals only through endpoint values of f.
struct PrequantumForm {
    Observable gauge;

    double f(PhasePoint x) const { return gauge.is_zero() ? 0.0 : gauge(x); }
};

/// Graph p = lambda(q); lambda must not depend on p.
class ReferenceLagrangian {
public:
    ReferenceLagrangian() = default;
    explicit ReferenceLagrangian(Observable lambda) : lambda_(std::move(lambda)) {
        if (!lambda_.is_function_of_q()) throw Error("reference Lagrangian must be a graph p = lambda(q)");
    }
    static ReferenceLagrangian diagonal() { return ReferenceLagrangian(Observable::position()); }

    double lambda(double q) const { return lambda_.is_zero() ? 0.0 : lambda_({q, 0.0}); }
    double slope(double q) const { return lambda_.is_zero() ? 0.0 : lambda_.deriv({q, 0.0}, 1, 0); }
    /// G(q,p) = p - lambda(q); Λ = {G = 0}.
    double defect(PhasePoint x) const { return x.p - lambda(x.q); }
    const Observable& function() const { return lambda_; }

private:
    Observable lambda_;
};

} // namespace sclq

#endif

#ifndef SCLQ_STAR_PRODUCT_HPP
#define SCLQ_STAR_PRODUCT_HPP

#include <complex>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "monomial_syntax.hpp"
#include "quantum_oracle.hpp"
#include "semiclassics.hpp"

namespace sclq {

using Rational = boost::multiprecision::cpp_rational;

/// Exact complex rational a + i b.
struct CRational {
    Rational re{0}, im{0};

    CRational() = default;
    CRational(Rational r, Rational i = Rational(0)) : re(std::move(r)), im(std::move(i)) {}
    CRational(long long r) : re(r), im(0) {}

    static CRational i() { return {Rational(0), Rational(1)}; }
    bool is_zero() const { return re == 0 && im == 0; }
    CRational conj() const { return {re, -im}; }
    std::complex<double> to_complex() const { return {static_cast<double>(re), static_cast<double>(im)}; }

    friend CRational operator+(const CRational& a, const CRational& b) { return {a.re + b.re, a.im + b.im}; }
    friend CRational operator-(const CRational& a, const CRational& b) { return {a.re - b.re, a.im - b.im}; }
    friend CRational operator-(const CRational& a) { return {-a.re, -a.im}; }
    friend CRational operator*(const CRational& a, const CRational& b) {
        return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
    }
    CRational& operator+=(const CRational& b) { return *this = *this + b; }
    friend bool operator==(const CRational& a, const CRational& b) { return a.re == b.re && a.im == b.im; }
};

inline std::string to_string(const Rational& r) {
    std::ostringstream os;
    os << r;
    return os.str();
}

/// Polynomial in (q, p) with exact complex rational coefficients, canonical (no zero entries).
class PolynomialObservable {
public:
    using Key = std::pair<int, int>;  // (q-degree, p-degree)
    using Map = std::map<Key, CRational>;

    PolynomialObservable() = default;
    PolynomialObservable(CRational c) { add({0, 0}, std::move(c)); }

    static PolynomialObservable monomial(int a, int b, CRational c = CRational(1)) {
        PolynomialObservable r;
        r.add({a, b}, std::move(c));
        return r;
    }
    static PolynomialObservable q() { return monomial(1, 0); }
    static PolynomialObservable p() { return monomial(0, 1); }

    static PolynomialObservable parse(const std::string& text) {
        PolynomialObservable r;
        for (auto& m : syntax::parse(text)) {
            Rational v(boost::multiprecision::cpp_int(m.num), boost::multiprecision::cpp_int(m.den));
            if (m.negative) v = -v;
            r.add({m.qdeg, m.pdeg}, m.imaginary ? CRational(Rational(0), v) : CRational(v));
        }
        return r;
    }

    void add(Key k, const CRational& c) {
        auto& slot = terms_[k];
        slot += c;
        if (slot.is_zero()) terms_.erase(k);
    }

    const Map& terms() const { return terms_; }
    bool is_zero() const { return terms_.empty(); }
    int degree() const {
        int d = 0;
        for (auto& [k, c] : terms_) d = std::max(d, k.first + k.second);
        return d;
    }
    int p_degree() const {
        int d = 0;
        for (auto& [k, c] : terms_) d = std::max(d, k.second);
        return d;
    }
    bool is_real() const {
        for (auto& [k, c] : terms_)
            if (c.im != 0) return false;
        return true;
    }

    PolynomialObservable derivative(int dq, int dp) const {
        PolynomialObservable r;
        for (auto& [k, c] : terms_) {
            if (k.first < dq || k.second < dp) continue;
            long long f = 1;
            for (int j = 0; j < dq; ++j) f *= (k.first - j);
            for (int j = 0; j < dp; ++j) f *= (k.second - j);
            r.add({k.first - dq, k.second - dp}, c * CRational(f));
        }
        return r;
    }

    PolynomialObservable conj() const {
        PolynomialObservable r;
        for (auto& [k, c] : terms_) r.add(k, c.conj());
        return r;
    }

    std::complex<double> operator()(PhasePoint x) const {
        std::complex<double> s{};
        for (auto& [k, c] : terms_) s += c.to_complex() * Factor::ipow(x.q, k.first) * Factor::ipow(x.p, k.second);
        return s;
    }

    /// Real part as a floating-point Observable.
    Observable to_observable(std::string name = {}) const {
        std::map<std::pair<int, int>, double> m;
        for (auto& [k, c] : terms_) m[k] = static_cast<double>(c.re);
        return Observable::polynomial(m, name.empty() ? str() : std::move(name));
    }

    friend PolynomialObservable operator+(const PolynomialObservable& a, const PolynomialObservable& b) {
        PolynomialObservable r = a;
        for (auto& [k, c] : b.terms_) r.add(k, c);
        return r;
    }
    friend PolynomialObservable operator-(const PolynomialObservable& a, const PolynomialObservable& b) {
        PolynomialObservable r = a;
        for (auto& [k, c] : b.terms_) r.add(k, -c);
        return r;
    }
    friend PolynomialObservable operator*(const PolynomialObservable& a, const PolynomialObservable& b) {
        PolynomialObservable r;
        for (auto& [ka, ca] : a.terms_)
            for (auto& [kb, cb] : b.terms_) r.add({ka.first + kb.first, ka.second + kb.second}, ca * cb);
        return r;
    }
    friend PolynomialObservable operator*(const CRational& s, const PolynomialObservable& a) {
        PolynomialObservable r;
        if (s.is_zero()) return r;
        for (auto& [k, c] : a.terms_) r.add(k, s * c);
        return r;
    }
    friend bool operator==(const PolynomialObservable& a, const PolynomialObservable& b) { return a.terms_ == b.terms_; }

    /// Monomial syntax, highest total degree first, e.g. "q^2 p^2 + 2i q p - 1/2".
    std::string str() const {
        if (terms_.empty()) return "0";
        std::vector<std::pair<Key, CRational>> v(terms_.begin(), terms_.end());
        std::stable_sort(v.begin(), v.end(), [](const auto& x, const auto& y) {
            int dx = x.first.first + x.first.second, dy = y.first.first + y.first.second;
            if (dx != dy) return dx > dy;
            return x.first.first > y.first.first;
        });
        std::string out;
        bool first = true;
        for (auto& [k, c] : v) {
            bool real = c.im == 0, imag = c.re == 0;
            std::string coef;
            bool negative = false;
            if (real || imag) {
                Rational val = real ? c.re : c.im;
                negative = val < 0;
                Rational a = negative ? Rational(-val) : val;
                bool unit = (a == 1);
                bool bare = k.first == 0 && k.second == 0;
                coef = (unit && !bare && real) ? "" : to_string(a);
                if (imag) coef = (unit && !bare) ? "i" : coef + " i";
            } else {
                coef = "(" + to_string(c.re) + (c.im < 0 ? " - " : " + ") + to_string(c.im < 0 ? Rational(-c.im) : c.im) + " i)";
            }
            std::string mono;
            auto pw = [](const char* v, int e) { return e == 0 ? std::string() : e == 1 ? std::string(v) : std::string(v) + "^" + std::to_string(e); };
            std::string qs = pw("q", k.first), ps = pw("p", k.second);
            for (const std::string& part : {coef, qs, ps})
                if (!part.empty()) mono += (mono.empty() ? "" : " ") + part;
            if (first) out += negative ? "-" + mono : mono;
            else out += (negative ? " - " : " + ") + mono;
            first = false;
        }
        return out;
    }

private:
    Map terms_;
};

/// Truncated power series Σ_{k ≤ N} h^k f_k with polynomial coefficients.
class FormalSeries {
public:
    explicit FormalSeries(int order = 0) : c_(order + 1) {}
    FormalSeries(PolynomialObservable f, int order) : c_(order + 1) { c_[0] = std::move(f); }

    int order() const { return static_cast<int>(c_.size()) - 1; }
    const PolynomialObservable& operator[](int k) const { return c_.at(k); }
    PolynomialObservable& operator[](int k) { return c_.at(k); }
    bool is_zero() const {
        for (auto& c : c_)
            if (!c.is_zero()) return false;
        return true;
    }
    std::complex<double> operator()(PhasePoint x, double h) const {
        std::complex<double> s{};
        double hk = 1.0;
        for (auto& c : c_) {
            s += hk * c(x);
            hk *= h;
        }
        return s;
    }
    /// Coefficients conjugated (the star-conjugation acts with reversed factor order).
    FormalSeries conj() const {
        FormalSeries r(order());
        for (int k = 0; k <= order(); ++k) r[k] = c_[k].conj();
        return r;
    }
    friend FormalSeries operator-(const FormalSeries& a, const FormalSeries& b) {
        FormalSeries r(std::min(a.order(), b.order()));
        for (int k = 0; k <= r.order(); ++k) r[k] = a[k] - b[k];
        return r;
    }
    friend bool operator==(const FormalSeries& a, const FormalSeries& b) { return a.c_ == b.c_; }

    std::string str() const {
        std::string out;
        for (int k = 0; k <= order(); ++k) {
            if (c_[k].is_zero()) continue;
            if (!out.empty()) out += " + ";
            std::string body = c_[k].str();
            out += k == 0 ? "(" + body + ")" : "(" + body + ") h" + (k > 1 ? "^" + std::to_string(k) : "");
        }
        return out.empty() ? "0" : out;
    }

private:
    std::vector<PolynomialObservable> c_;
};

inline constexpr int max_star_order = 8;

/// Coefficient of h^n in the Moyal product of two polynomials:
/// i^n/(2^n n!) Σ_k C(n,k) (−1)^k ∂_q^{n−k}∂_p^k f · ∂_q^k ∂_p^{n−k} g.
inline PolynomialObservable moyal_term(const PolynomialObservable& f, const PolynomialObservable& g, int n) {
    PolynomialObservable r;
    long long binom = 1;
    for (int k = 0; k <= n; ++k) {
        if (k > 0) binom = binom * (n - k + 1) / k;
        auto df = f.derivative(n - k, k);
        if (df.is_zero()) continue;
        auto dg = g.derivative(k, n - k);
        if (dg.is_zero()) continue;
        r = r + CRational((k % 2 ? -1 : 1) * binom) * (df * dg);
    }
    long long denom = 1;
    for (int j = 1; j <= n; ++j) denom *= 2 * j;
    static const CRational ipow[4] = {CRational(1), CRational::i(), CRational(-1), -CRational::i()};
    return (ipow[n % 4] * CRational(Rational(1, denom))) * r;
}

inline FormalSeries moyal_product(const FormalSeries& f, const FormalSeries& g, int N) {
    if (N > max_star_order || N < 0) throw OrderOverflow("star product order " + std::to_string(N) + " exceeds " + std::to_string(max_star_order));
    FormalSeries r(N);
    for (int i = 0; i <= std::min(N, f.order()); ++i)
        for (int j = 0; i + j <= N && j <= g.order(); ++j) {
            if (f[i].is_zero() || g[j].is_zero()) continue;
            for (int n = 0; i + j + n <= N; ++n) {
                auto t = moyal_term(f[i], g[j], n);
                if (t.is_zero() && n > f[i].degree() + g[j].degree()) break;
                r[i + j + n] = r[i + j + n] + t;
            }
        }
    return r;
}

inline FormalSeries moyal_product(const PolynomialObservable& f, const PolynomialObservable& g, int N) {
    return moyal_product(FormalSeries(f, N), FormalSeries(g, N), N);
}

/// (f⋆g)⋆k − f⋆(g⋆k), truncated at order N.
inline FormalSeries associativity_defect(const PolynomialObservable& f, const PolynomialObservable& g,
                                         const PolynomialObservable& k, int N) {
    FormalSeries F(f, N), G(g, N), K(k, N);
    return moyal_product(moyal_product(F, G, N), K, N) - moyal_product(F, moyal_product(G, K, N), N);
}

/// Weyl-ordered operator of a polynomial on the grid: q^a p^b -> 2^{-a} Σ_k C(a,k) Q^k P^b Q^{a−k}.
inline Eigen::MatrixXcd weyl_operator_of(const PolynomialObservable& f, const GridSpec& g) {
    detail::check_grid(g);
    if (f.p_degree() > max_star_order) throw UnsupportedOrdering("momentum degree too high for the grid operator");
    const int N = g.N;
    Eigen::MatrixXcd op = Eigen::MatrixXcd::Zero(N, N);
    std::map<int, Eigen::MatrixXcd> P;
    for (auto& [k, c] : f.terms()) {
        int a = k.first, b = k.second;
        std::complex<double> cf = c.to_complex();
        if (b == 0) {
            for (int i = 0; i < N; ++i) op(i, i) += cf * Factor::ipow(g.q(i), a);
            continue;
        }
        if (!P.count(b)) P[b] = momentum_power(g, b);
        const auto& Pb = P[b];
        double binom = 1.0;
        for (int j = 0; j <= a; ++j) {
            if (j > 0) binom = binom * (a - j + 1) / j;
            double w = binom / std::pow(2.0, a);
            for (int r = 0; r < N; ++r) {
                double qr = Factor::ipow(g.q(r), j);
                for (int s = 0; s < N; ++s) op(r, s) += cf * w * qr * Pb(r, s) * Factor::ipow(g.q(s), a - j);
            }
        }
    }
    return op;
}

// ---------------------------------------------------------------- matrix elements

/// Semiclassical matrix element: each overlap term weighted by f(c).
inline SemiclassicalAmplitude semiclassical_matrix_element(const std::function<std::complex<double>(PhasePoint)>& f,
                                                           const System& sys1, const System& sys2,
                                                           const ReferenceLagrangian& lambda, const PrequantumForm& alpha,
                                                           double h, const OverlapOptions& opts = {}) {
    auto a = overlap(sys1, sys2, lambda, alpha, h, opts);
    for (auto& t : a.terms) t.weight = f(t.c.c);
    assemble(a);
    return a;
}

inline SemiclassicalAmplitude semiclassical_matrix_element(const PolynomialObservable& f, const System& sys1,
                                                           const System& sys2, const ReferenceLagrangian& lambda,
                                                           const PrequantumForm& alpha, double h,
                                                           const OverlapOptions& opts = {}) {
    return semiclassical_matrix_element([&](PhasePoint x) { return f(x); }, sys1, sys2, lambda, alpha, h, opts);
}

inline SemiclassicalAmplitude semiclassical_matrix_element(const FormalSeries& f, const System& sys1,
                                                           const System& sys2, const ReferenceLagrangian& lambda,
                                                           const PrequantumForm& alpha, double h,
                                                           const OverlapOptions& opts = {}) {
    return semiclassical_matrix_element([&](PhasePoint x) { return f(x, h); }, sys1, sys2, lambda, alpha, h, opts);
}

struct HomomorphismOptions {
    int order = 4;
    double b_lo = -2.0, b_hi = 2.0;  // range of the intermediate position label
    int scan_points = 64;
    bool first_order = true;
    OverlapOptions overlap;
};

struct HomomorphismReport {
    std::complex<double> left;   // π21(f⋆g)(b2, b1)
    std::complex<double> right;  // ∫ π20(f)(b2, b) π01(g)(b, b1) db by stationary phase
    double modulus_deviation = 0.0;
    double complex_deviation = 0.0;
    double maslov_estimate = 0.0;  // (4/π) arg(right/left)
    std::string product;           // f⋆g in monomial syntax
    std::vector<StationaryPoint> points;
};

/// Both sides of the homomorphism identity with the position fibration as intermediate.
inline HomomorphismReport homomorphism_check(const PolynomialObservable& f, const PolynomialObservable& g,
                                             const System& sys1, const System& sys2, const ReferenceLagrangian& lambda,
                                             const PrequantumForm& alpha, double h, const HomomorphismOptions& o = {}) {
    HomomorphismReport r;
    auto fg = moyal_product(f, g, o.order);
    r.product = fg.str();
    r.left = semiclassical_matrix_element(fg, sys1, sys2, lambda, alpha, h, o.overlap).value;
    auto qsys = [](double b) { return System{Observable::position(), b, PhasePoint{b, 0.0}}; };
    Kernel k20 = [&](double b, HessianMethod hm) {
        auto oo = o.overlap;
        oo.hessian = hm;
        return semiclassical_matrix_element(f, qsys(b), sys2, lambda, alpha, h, oo);
    };
    Kernel k01 = [&](double b, HessianMethod hm) {
        auto oo = o.overlap;
        oo.hessian = hm;
        return semiclassical_matrix_element(g, sys1, qsys(b), lambda, alpha, h, oo);
    };
    ComposeOptions co;
    co.b_lo = o.b_lo;
    co.b_hi = o.b_hi;
    co.scan_points = o.scan_points;
    co.first_order = o.first_order;
    auto comp = compose_kernels(k20, k01, h, co);
    r.right = comp.value;
    r.points = comp.points;
    double L = std::abs(r.left);
    r.modulus_deviation = std::abs(std::abs(r.right) - L) / L;
    r.complex_deviation = std::abs(r.right - r.left) / L;
    r.maslov_estimate = 4.0 / std::numbers::pi * std::arg(r.right / r.left);
    return r;
}

} // namespace sclq

#endif

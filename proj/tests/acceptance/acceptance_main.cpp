// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sclq/sclq.hpp"

using namespace sclq;
using std::numbers::pi;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

double wrap(double a) { return std::remainder(a, 2 * pi); }

const ReferenceLagrangian diag = ReferenceLagrangian::diagonal();

struct Glue {
    Composition comp;
    SemiclassicalAmplitude direct;
};

Glue glue(const System& s1, const Observable& mid, const System& s2, double h, double lo, double hi) {
    Kernel k20 = [&](double b, HessianMethod hm) {
        OverlapOptions oo;
        oo.hessian = hm;
        return overlap({mid, b}, s2, diag, {}, h, oo);
    };
    Kernel k01 = [&](double b, HessianMethod hm) {
        OverlapOptions oo;
        oo.hessian = hm;
        return overlap(s1, {mid, b}, diag, {}, h, oo);
    };
    ComposeOptions o;
    o.b_lo = lo, o.b_hi = hi;
    return {compose_kernels(k20, k01, h, o), overlap(s1, s2, diag, {}, h)};
}

// ---------------------------------------------------------------- criteria

void ac1(Outcome& o) {
    const double h = 0.1;
    auto bs = bohr_sommerfeld_levels(Observable::harmonic(), h, 0.0, 3.1);
    double bs_err = 0;
    int top = -1;
    for (auto& l : bs.levels)
        if (l.n <= 30) bs_err = std::max(bs_err, std::abs(l.b - h * (l.n + 0.5))), top = std::max(top, l.n);
    auto es = solve(Observable::harmonic(), GridSpec{10.0, 512, h});
    double or_err = 0;
    for (int n = 0; n <= 30 && n < es.size(); ++n) or_err = std::max(or_err, std::abs(es.values[n] - h * (n + 0.5)));
    o.detail << "levels 0.." << top << " max |b_n - h(n+1/2)| = " << bs_err << ", oracle max dev = " << or_err;
    o.require(top == 30, "levels n = 0..30 present");
    o.require(bs_err <= 1e-9, "Bohr–Sommerfeld within 1e-9");
    o.require(es.size() > 30 && or_err <= 1e-10, "oracle within 1e-10");
}

void ac2(Outcome& o) {
    SweepSpec sp;  // q against the oscillator, E0 ∈ {0.5, 1, 1.5}, five interior positions, h = 0.2 .. 0.025
    auto r = run_sweep(sp);
    double worst = r.max_rel_err.back().second;
    o.detail << "cases " << r.cases.size();
    if (r.fit) o.detail << ", slope " << r.fit->slope << " (residual " << r.fit->residual << ")";
    o.detail << ", max rel err at h = 0.025: " << worst;
    o.require(r.fit && r.fit->slope >= 0.8 && r.fit->slope <= 1.5, "slope in [0.8, 1.5]");
    o.require(worst < 0.15, "max relative error below 15%");
}

void ac3(Outcome& o) {
    double worst = 0;
    for (double h : {1.0, 0.1, 0.01}) {
        double P = transition_probability({Observable::position(), 0.37}, {Observable::momentum(), -1.2}, h, diag);
        worst = std::max(worst, std::abs(P * 2 * pi * h - 1.0));
    }
    o.detail << "max |P 2πh - 1| = " << worst;
    o.require(worst < 1e-10, "relative error below 1e-10");
}

void ac4(Outcome& o) {
    std::mt19937 rng(20240611);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto make = [&](int kind) -> System {
        switch (kind) {
        case 0: return {Observable::harmonic(), 0.3 + 1.2 * u(rng)};
        case 1: return {Observable::harmonic(1.0, 0.5 + 0.7 * u(rng), 0.4 * u(rng) - 0.2), 0.3 + 1.0 * u(rng)};
        case 2: return {Observable::pendulum(), -0.8 + 1.2 * u(rng)};
        default: return {Observable::rotated_position(pi * u(rng)), u(rng) - 0.5};
        }
    };
    const int pairs[][2] = {{0, 1}, {2, 0}, {3, 0}, {3, 2}, {1, 2}, {3, 1}};
    int checked = 0, attempts = 0;
    double worst = 0;
    std::vector<int> per_pair(6, 0);
    while (checked < 20 && attempts < 400) {
        int k = attempts++ % 6;
        System s1 = make(pairs[k][0]), s2 = make(pairs[k][1]);
        OverlapGeometry g;
        try {
            g = overlap_geometry(s1, s2, diag);
        } catch (const Error&) {
            continue;  // tangential or without reference point: not a transversal sample
        }
        for (auto& t : g.terms) {
            if (checked >= 20 || std::abs(t.bracket) < 0.05) continue;
            worst = std::max(worst, std::abs(t.hessian_det * std::abs(t.bracket) - 1.0));
            ++checked;
            ++per_pair[k];
        }
    }
    o.detail << checked << " intersections (per pair type:";
    for (int n : per_pair) o.detail << ' ' << n;
    o.detail << "), max relative deviation " << worst;
    o.require(checked == 20, "20 transversal intersections");
    o.require(worst < 1e-4, "within 1e-4");
}

void ac5(Outcome& o) {
    auto c = trace_level_curve(Observable::harmonic(), 0.5, {0.0, 1.0});
    int loop = maslov_loop(c, Observable::position()).index;
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(0.0, c.length);
    int bad = 0;
    for (int k = 0; k < 50; ++k) {
        double s = u(rng), d = u(rng);
        int a = maslov_arc(c, Observable::position(), s, d).index;
        int b = maslov_arc(c, Observable::position(), s + d, c.length - d).index;
        if (std::abs(a + b) != 2 || a + b != loop) ++bad;
    }
    o.detail << "loop index " << loop << ", inconsistent arc pairs " << bad << "/50";
    o.require(loop == 2, "loop index 2");
    o.require(bad == 0, "arc + complement = ±2");
}

void ac6(Outcome& o) {
    std::mt19937 rng(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double h = 0.07;
    std::vector<std::pair<System, System>> pairs{{{Observable::position(), 0.3}, {Observable::harmonic(), 0.9}},
                                                 {{Observable::harmonic(), 0.7}, {Observable::harmonic(1.0, 1.0), 0.6}}};
    double dmod = 0, dphase = 0;
    for (int trial = 0; trial < 5; ++trial) {
        std::map<std::pair<int, int>, double> coef;
        for (int a = 0; a <= 3; ++a)
            for (int b = 0; a + b <= 3; ++b) coef[{a, b}] = u(rng);
        PrequantumForm alpha{Observable::polynomial(coef)};
        for (auto& [s1, s2] : pairs) {
            auto a0 = overlap(s1, s2, diag, {}, h), a1 = overlap(s1, s2, diag, alpha, h);
            auto x1 = reference_point(trace_fiber(s1), diag), x2 = reference_point(trace_fiber(s2), diag);
            dmod = std::max(dmod, std::abs(std::abs(a1.value) - std::abs(a0.value)) / std::abs(a0.value));
            dphase = std::max(dphase, std::abs(wrap(std::arg(a1.value / a0.value) - (alpha.f(x1) - alpha.f(x2)) / h)));
        }
    }
    o.detail << "max relative |overlap| change " << dmod << ", max phase-shift error " << dphase;
    o.require(dmod < 1e-12, "modulus invariant within 1e-12");
    o.require(dphase < 1e-8, "phase shift within 1e-8");
}

void ac7(Outcome& o) {
    double worst = 0;
    int terms = 0;
    struct Case {
        Observable H1;
        double b1;
        Observable H2;
        double lo, hi, h;
        std::vector<int> ns;
    };
    std::vector<Case> cases{{Observable::position(), 0.25, Observable::harmonic(), 0.0, 1.2, 0.05, {2, 9, 17}},
                            {Observable::position(), -0.4, Observable::pendulum(), -1.0, 0.6, 0.1, {1, 3, 6}},
                            {Observable::rotated_position(0.6), 0.2, Observable::harmonic(1.0, 0.5), 0.0, 2.0, 0.1, {6, 11}}};
    for (auto& cs : cases) {
        auto bs = bohr_sommerfeld_levels(cs.H2, cs.h, cs.lo, cs.hi).levels;
        for (int n : cs.ns) {
            System s1{cs.H1, cs.b1}, s2{cs.H2, bs.at(n).b};
            auto g = overlap_geometry(s1, s2, diag);
            for (auto& t : g.terms) {
                auto c = g.curve2.locate(t.c.c);
                auto exponent = [&](Direction d) {
                    double arc = arc_length_between(g.curve2, c, g.x2, d);
                    double S = -action_along_fiber(g.curve2, c, g.x2, {}, d);
                    int mu = maslov_arc(g.curve2, s1.H, c.at.s, arc).index;
                    return std::exp(cplx(0, S / cs.h + pi * mu / 2));
                };
                worst = std::max(worst, std::abs(exponent(Direction::forward) - exponent(Direction::reverse)));
                ++terms;
            }
        }
    }
    o.detail << terms << " terms, max |e^{iφ(γ)} - e^{iφ(γ')}| = " << worst;
    o.require(terms >= 10, "enough terms");
    o.require(worst < 1e-8, "within 1e-8");
}

void ac8(Outcome& o) {
    std::vector<PolynomialObservable> mons;
    for (int a = 0; a <= 4; ++a)
        for (int b = 0; a + b <= 4; ++b) mons.push_back(PolynomialObservable::monomial(a, b));
    long nonzero = 0, triples = 0;
    for (auto& f : mons)
        for (auto& g : mons)
            for (auto& k : mons) {
                ++triples;
                if (!associativity_defect(f, g, k, 6).is_zero()) ++nonzero;
            }
    auto s = moyal_product(PolynomialObservable::parse("q^2"), PolynomialObservable::parse("p^2"), 6);
    FormalSeries expect(6);
    expect[0] = PolynomialObservable::parse("q^2 p^2");
    expect[1] = PolynomialObservable::parse("2 i q p");
    expect[2] = PolynomialObservable::parse("-1/2");
    GridSpec grid{8.0, 256, 0.1};
    Eigen::VectorXcd psi(grid.N);
    for (int a = 0; a < grid.N; ++a) psi[a] = std::pow(pi * grid.h, -0.25) * std::exp(-std::pow(grid.q(a) - 0.3, 2) / (2 * grid.h));
    double op_dev = 0;
    for (auto [fs, gs] : {std::pair{"q^2", "p^2"}, std::pair{"q p", "p^2 - q^2"}, std::pair{"2 q^2 + p", "q p + 3 p^2"}}) {
        auto f = PolynomialObservable::parse(fs), g = PolynomialObservable::parse(gs);
        auto fg = moyal_product(f, g, 4);
        Eigen::VectorXcd lhs = Eigen::VectorXcd::Zero(grid.N);
        double hk = 1;
        for (int k = 0; k <= fg.order(); ++k, hk *= grid.h)
            if (!fg[k].is_zero()) lhs += hk * (weyl_operator_of(fg[k], grid) * psi);
        Eigen::VectorXcd rhs = weyl_operator_of(f, grid) * (weyl_operator_of(g, grid) * psi);
        op_dev = std::max(op_dev, (lhs - rhs).norm() / rhs.norm());
    }
    o.detail << triples << " triples, nonzero defects " << nonzero << "; q²⋆p² = " << s.str() << "; max operator deviation " << op_dev;
    o.require(nonzero == 0, "associativity defect identically zero");
    o.require(s == expect, "q²⋆p² exact");
    o.require(op_dev < 1e-8, "Op(f⋆g) = Op(f)Op(g) within 1e-8");
}

void ac9(Outcome& o) {
    const double h = 0.1, b1 = 0.3, b2 = 0.95;
    System s1{Observable::position(), b1}, s2{Observable::harmonic(), b2};
    auto ov = overlap(s1, s2, diag, {}, h);
    auto mq = semiclassical_matrix_element(PolynomialObservable::parse("q"), s1, s2, diag, {}, h);
    auto mH = semiclassical_matrix_element(PolynomialObservable::parse("1/2 p^2 + 1/2 q^2"), s1, s2, diag, {}, h);
    double term_dev = 0;
    for (std::size_t k = 0; k < ov.terms.size(); ++k) {
        term_dev = std::max(term_dev, std::abs(mq.terms[k].contribution - b1 * ov.terms[k].contribution));
        term_dev = std::max(term_dev, std::abs(mH.terms[k].contribution - b2 * ov.terms[k].contribution));
    }
    SweepSpec sp;
    sp.quantity = SweepSpec::matrix_element_q;
    auto r = run_sweep(sp);
    o.detail << "term-level deviation " << term_dev;
    if (r.fit) o.detail << "; q-matrix-element error slope " << r.fit->slope << " (max rel err at h = 0.025: " << r.max_rel_err.back().second << ")";
    o.require(ov.terms.size() == 2 && term_dev < 1e-12, "eigenvalue × overlap at the term level");
    o.require(r.fit && r.fit->slope >= 0.8 && r.fit->slope <= 1.5, "slope in [0.8, 1.5]");
}

void ac10(Outcome& o) {
    // linear triple: position -> momentum -> position rotated by 45°
    auto lin = glue({Observable::position(), 0.3}, Observable::momentum(), {Observable::rotated_position(pi / 4), 0.2}, 0.1, -3, 3);
    double lin_dev = std::abs(std::abs(lin.comp.value) / std::abs(lin.direct.value) - 1.0);
    // position and oscillator glued through the momentum fibration
    double worst_ratio = 0, phase_dev = 0;
    int points = 0;
    for (double h : {0.1, 0.05, 0.025}) {
        auto bs = bohr_sommerfeld_levels(Observable::harmonic(), h, 0.0, 2.0).levels;
        double b2 = bs[static_cast<int>(std::round(1.0 / h - 0.5))].b;
        for (double b1 : {0.3, -0.5, 0.8}) {
            System sq{Observable::position(), b1}, so{Observable::harmonic(), b2};
            auto fwd = glue(sq, Observable::momentum(), so, h, -2, 2);
            auto rev = glue(so, Observable::momentum(), sq, h, -2, 2);
            worst_ratio = std::max(worst_ratio, std::abs(std::abs(fwd.comp.value) / std::abs(fwd.direct.value) - 1.0) / h);
            double pf = std::arg(fwd.comp.value / fwd.direct.value), pr = std::arg(rev.comp.value / rev.direct.value);
            double mu = 4 * pf / pi;  // e^{iπμ/4}
            phase_dev = std::max({phase_dev, std::abs(wrap(pf + pr)), std::abs(mu - std::round(mu)) * pi / 4});
            points += static_cast<int>(fwd.comp.points.size());
        }
    }
    o.detail << "linear modulus deviation " << lin_dev << "; oscillator max |ratio - 1|/h = " << worst_ratio
             << " over " << points << " stationary points; phase consistency " << phase_dev;
    o.require(lin_dev < 1e-10, "linear triple within 1e-10");
    o.require(points == 18 && worst_ratio < 5.0, "(q, HO, p) within 5h");
    o.require(phase_dev < 1e-6, "Maslov phase consistent within 1e-6");
}

void ac11(Outcome& o) {
    const double h = 0.05;
    const double b[3] = {0.3, 0.2, -0.4};
    auto A = cyclic_amplitude({{Observable::position(), b[0]}, {Observable::momentum(), b[1]}, {Observable::rotated_position(pi / 4), b[2]}}, {}, h);
    PhasePoint c0{b[0], b[1]}, c1{b[2] * std::sqrt(2.0) - b[1], b[1]}, c2{b[0], b[2] * std::sqrt(2.0) - b[0]};
    double area = 0.5 * ((c0.q * c1.p - c1.q * c0.p) + (c1.q * c2.p - c2.q * c1.p) + (c2.q * c0.p - c0.q * c2.p));
    double phase_err = A.terms.size() == 1 ? std::abs(wrap(std::arg(A.value) - area / h)) : 1.0;
    double k2 = 0;
    for (auto [th1, th2] : {std::pair{0.0, pi / 2}, std::pair{0.3, 1.9}, std::pair{pi / 4, -0.5}})
        for (double hh : {0.5, 0.05}) {
            System s1{Observable::rotated_position(th1), 0.2}, s2{Observable::rotated_position(th2), -0.35};
            auto C = cyclic_amplitude({s1, s2}, {}, hh);
            double P = std::norm(overlap(s1, s2, diag, {}, hh).value);
            k2 = std::max(k2, std::abs(C.value - P) / P);
        }
    o.detail << "triangle phase error " << phase_err << " (area " << area << "); k = 2 max deviation " << k2;
    o.require(phase_err < 1e-8, "k = 3 phase = area/h within 1e-8");
    o.require(k2 < 1e-10, "k = 2 matches |overlap|² within 1e-10");
}

} // namespace

int main() {
    struct Criterion {
        const char* id;
        const char* name;
        std::function<void(Outcome&)> fn;
        double limit_s;
    };
    const Criterion all[] = {
        {"AC1", "Bohr–Sommerfeld exactness (oscillator)", ac1, 5},
        {"AC2", "probability convergence (q vs oscillator)", ac2, 30},
        {"AC3", "exact linear case", ac3, 60},
        {"AC4", "Hessian identity", ac4, 60},
        {"AC5", "Maslov loop and arcs", ac5, 60},
        {"AC6", "gauge covariance", ac6, 60},
        {"AC7", "path independence at Bohr–Sommerfeld levels", ac7, 60},
        {"AC8", "star product", ac8, 60},
        {"AC9", "matrix elements", ac9, 60},
        {"AC10", "gluing", ac10, 60},
        {"AC11", "cyclic amplitudes", ac11, 60},
    };
    int failed = 0;
    for (auto& c : all) {
        Outcome o;
        auto t0 = std::chrono::steady_clock::now();
        try {
            c.fn(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.require(dt < c.limit_s, "runtime below " + std::to_string(static_cast<int>(c.limit_s)) + " s");
        std::printf("%-4s %s  %s: %s (%.2f s)\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.str().c_str(), dt);
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(std::size(all)) - failed, std::size(all));
    return failed ? 1 : 0;
}

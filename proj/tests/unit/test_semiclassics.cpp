#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "sclq/semiclassics.hpp"

using namespace sclq;
using std::numbers::pi;

namespace {

// ∮ sqrt(2(b + cos q)) dq = 2πh(n + 1/2) at h = 0.1, solved with arbitrary-precision quadrature
constexpr double pendulum_bs[] = {-0.95015674213576193948, -0.85141975249980747997, -0.7539698001260671056,
                                  -0.65783361155223399088};

Kernel kernel_from(const Observable& mid, const System& other, bool mid_first, double h) {
    return [=](double b, HessianMethod hm) {
        OverlapOptions oo;
        oo.hessian = hm;
        System m{mid, b};
        return mid_first ? overlap(m, other, ReferenceLagrangian::diagonal(), {}, h, oo)
                         : overlap(other, m, ReferenceLagrangian::diagonal(), {}, h, oo);
    };
}

double wrap(double a) { return std::remainder(a, 2 * pi); }

} // namespace

TEST(BohrSommerfeld, OscillatorLevelsAreExact) {
    auto r = bohr_sommerfeld_levels(Observable::harmonic(), 0.1, 0.0, 3.1);
    ASSERT_EQ(r.levels.size(), 31u);
    for (auto& l : r.levels) {
        EXPECT_NEAR(l.b, 0.1 * (l.n + 0.5), 1e-9);
        EXPECT_EQ(l.loop_maslov, 2);
        EXPECT_NEAR(l.loop_action, 2 * pi * 0.1 * (l.n + 0.5), 1e-9);
    }
}

TEST(BohrSommerfeld, PendulumLevelsMatchQuadrature) {
    auto r = bohr_sommerfeld_levels(Observable::pendulum(), 0.1, -1.0, -0.6);
    ASSERT_GE(r.levels.size(), 4u);
    for (int n = 0; n < 4; ++n) {
        EXPECT_EQ(r.levels[n].n, n);
        EXPECT_NEAR(r.levels[n].b, pendulum_bs[n], 1e-9);
    }
}

TEST(Maslov, OscillatorLoopIndexIsTwo) {
    for (double b : {1e-6, 0.5, 3.0}) {
        auto c = trace_level_curve_default(Observable::harmonic(), b);
        EXPECT_EQ(maslov_loop(c, Observable::position()).index, 2) << "b = " << b;
    }
    auto p = trace_level_curve_default(Observable::pendulum(), -0.2);
    EXPECT_EQ(maslov_loop(p, Observable::position()).index, 2);
}

TEST(Maslov, ArcAndComplementAddUpToTheLoop) {
    auto c = trace_level_curve(Observable::harmonic(), 0.5, {0.0, 1.0});
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> u(0.0, c.length);
    for (int k = 0; k < 20; ++k) {
        double s = u(rng), d = u(rng);
        int a = maslov_arc(c, Observable::position(), s, d).index;
        int b = maslov_arc(c, Observable::position(), s + d, c.length - d).index;
        EXPECT_EQ(a + b, 2);
        // the same arc traversed backwards carries the opposite index
        EXPECT_EQ(maslov_arc(c, Observable::position(), s + d, -d).index, -a);
    }
}

TEST(Maslov, TangencyAtEndpointIsRejected) {
    auto c = trace_level_curve(Observable::harmonic(), 0.5, {0.0, 1.0});
    double s_turn = c.locate({1.0, 0.0}).at.s;  // {q, HO} = p vanishes there
    EXPECT_THROW(maslov_arc(c, Observable::position(), s_turn, 0.5), TangencyAtEndpoint);
}

TEST(Overlap, PositionMomentumIsAPlaneWave) {
    const double b1 = 0.3, b2 = -0.7;
    for (double h : {1.0, 0.1, 0.01}) {
        auto a = overlap({Observable::position(), b1}, {Observable::momentum(), b2}, ReferenceLagrangian::diagonal(), {}, h);
        ASSERT_EQ(a.terms.size(), 1u);
        EXPECT_NEAR(a.terms[0].action, b2 * (b1 - b2), 1e-12);
        EXPECT_NEAR(a.terms[0].hessian_det, 1.0, 1e-6);
        EXPECT_NEAR(transition_probability(a) * 2 * pi * h, 1.0, 1e-10);
        EXPECT_NEAR(std::norm(a.value) * 2 * pi * h, 1.0, 1e-10);
    }
}

TEST(Overlap, DoubleSumEqualsSquaredModulus) {
    auto a = overlap({Observable::position(), 0.3}, {Observable::harmonic(), 0.95}, ReferenceLagrangian::diagonal(), {}, 0.1);
    ASSERT_EQ(a.terms.size(), 2u);
    EXPECT_NEAR(transition_probability(a), std::norm(a.value), 1e-12 * std::norm(a.value));
}

TEST(Overlap, FiniteDifferenceHessianMatchesBracket) {
    struct Pair {
        System s1, s2;
    };
    std::vector<Pair> pairs{
        {{Observable::harmonic(), 0.7}, {Observable::harmonic(1.0, 1.0), 0.6}},
        {{Observable::pendulum(), -0.3}, {Observable::harmonic(1.0, 0.5), 0.6}},
        {{Observable::position(), 0.4}, {Observable::pendulum(), -0.2}},
        {{Observable::rotated_position(0.6), 0.2}, {Observable::harmonic(1.3), 0.9}},
    };
    int checked = 0;
    for (auto& pr : pairs) {
        auto g = overlap_geometry(pr.s1, pr.s2, ReferenceLagrangian::diagonal());
        ASSERT_FALSE(g.terms.empty());
        for (auto& t : g.terms) {
            EXPECT_NEAR(t.hessian_det * std::abs(t.bracket), 1.0, 1e-4);
            ++checked;
        }
    }
    EXPECT_GE(checked, 8);
}

TEST(Overlap, GaugeChangesOnlyTheBoundaryPhase) {
    System s1{Observable::position(), 0.3}, s2{Observable::harmonic(), 0.95};
    const double h = 0.1;
    auto lam = ReferenceLagrangian::diagonal();
    auto a0 = overlap(s1, s2, lam, {}, h);
    PrequantumForm alpha{Observable::parse("0.4 q^3 - 1.5 q p + 0.25 p^2 + 2")};
    auto a1 = overlap(s1, s2, lam, alpha, h);
    auto x1 = reference_point(trace_fiber(s1), lam), x2 = reference_point(trace_fiber(s2), lam);
    EXPECT_NEAR(std::abs(a1.value), std::abs(a0.value), 1e-12);
    EXPECT_NEAR(wrap(std::arg(a1.value / a0.value) - (alpha.f(x1) - alpha.f(x2)) / h), 0.0, 1e-8);
}

TEST(Overlap, ExponentIndependentOfPathAtBohrSommerfeldLevels) {
    const double h = 0.05;
    auto bs = bohr_sommerfeld_levels(Observable::harmonic(), h, 0.0, 1.2).levels;
    System s1{Observable::position(), 0.25};
    for (int n : {3, 11, 20}) {
        System s2{Observable::harmonic(), bs[n].b};
        auto g = overlap_geometry(s1, s2, ReferenceLagrangian::diagonal());
        ASSERT_EQ(g.terms.size(), 2u);
        for (auto& t : g.terms) {
            auto c = g.curve2.locate(t.c.c);
            auto exponent = [&](Direction d) {
                double arc = arc_length_between(g.curve2, c, g.x2, d);
                double S = -action_along_fiber(g.curve2, c, g.x2, {}, d);
                int mu = maslov_arc(g.curve2, s1.H, c.at.s, arc).index;
                return std::exp(cplx(0, S / h + pi * mu / 2));
            };
            EXPECT_LT(std::abs(exponent(Direction::forward) - exponent(Direction::reverse)), 1e-8) << "n = " << n;
        }
    }
}

TEST(Cyclic, TriangleOfLinesHasAreaPhase) {
    const double b1 = 0.3, b2 = 0.2, b3 = -0.4, h = 0.05;
    auto d = Observable::rotated_position(pi / 4);
    auto A = cyclic_amplitude({{Observable::position(), b1}, {Observable::momentum(), b2}, {d, b3}}, {}, h);
    ASSERT_EQ(A.terms.size(), 1u);
    // chain: q∩p, p∩d, d∩q
    PhasePoint c0{b1, b2}, c1{b3 * std::sqrt(2.0) - b2, b2}, c2{b1, b3 * std::sqrt(2.0) - b1};
    double area = 0.5 * ((c0.q * c1.p - c1.q * c0.p) + (c1.q * c2.p - c2.q * c1.p) + (c2.q * c0.p - c0.q * c2.p));
    EXPECT_NEAR(A.terms[0].action, area, 1e-12);
    EXPECT_EQ(A.terms[0].maslov, 0);
    EXPECT_NEAR(wrap(std::arg(A.value) - area / h), 0.0, 1e-8);
}

TEST(Cyclic, TwoCycleIsTheSquaredOverlapForLinearPairs) {
    for (double h : {0.5, 0.05}) {
        System s1{Observable::position(), 0.3}, s2{Observable::rotated_position(1.1), -0.2};
        auto A = cyclic_amplitude({s1, s2}, {}, h);
        auto a = overlap(s1, s2, ReferenceLagrangian::diagonal(), {}, h);
        EXPECT_NEAR(std::abs(A.value - std::norm(a.value)), 0.0, 1e-10 * std::norm(a.value));
    }
}

TEST(Gluing, LinearTripleReproducesTheDirectKernel) {
    const double h = 0.1;
    System s1{Observable::position(), 0.3}, s2{Observable::rotated_position(pi / 4), 0.2};
    ComposeOptions o;
    o.b_lo = -3, o.b_hi = 3;
    auto comp = compose_kernels(kernel_from(Observable::momentum(), s2, true, h),
                                kernel_from(Observable::momentum(), s1, false, h), h, o);
    auto direct = overlap(s1, s2, ReferenceLagrangian::diagonal(), {}, h);
    ASSERT_EQ(comp.points.size(), 1u);
    EXPECT_NEAR(std::abs(comp.value) / std::abs(direct.value), 1.0, 1e-10);
}

TEST(Gluing, CoincidentOuterFibrationsAreDegenerate) {
    const double h = 0.1;
    System s1{Observable::position(), 0.3}, s2{Observable::position(), 0.2};
    ComposeOptions o;
    o.b_lo = -3, o.b_hi = 3;
    EXPECT_THROW(compose_kernels(kernel_from(Observable::momentum(), s2, true, h),
                                 kernel_from(Observable::momentum(), s1, false, h), h, o),
                 DegenerateStationaryPoint);
}

TEST(Gluing, OscillatorThroughMomentumMatchesWithinOrderH) {
    const double h = 0.05;
    System s1{Observable::position(), 0.8}, s2{Observable::harmonic(), 1.025};
    ComposeOptions o;
    o.b_lo = -2, o.b_hi = 2;
    auto comp = compose_kernels(kernel_from(Observable::momentum(), s2, true, h),
                                kernel_from(Observable::momentum(), s1, false, h), h, o);
    auto direct = overlap(s1, s2, ReferenceLagrangian::diagonal(), {}, h);
    EXPECT_EQ(comp.points.size(), 2u);
    EXPECT_LT(std::abs(std::abs(comp.value) / std::abs(direct.value) - 1.0), 5 * h);
}

TEST(Overlap, SwappingTheSystemsConjugatesTermByTerm) {
    const double h = 0.1;
    auto lam = ReferenceLagrangian::diagonal();
    std::vector<std::pair<System, System>> pairs{{{Observable::position(), 0.3}, {Observable::harmonic(), 0.95}},
                                                 {{Observable::position(), -0.5}, {Observable::harmonic(), 0.95}},
                                                 {{Observable::momentum(), -0.5}, {Observable::harmonic(), 0.95}},
                                                 {{Observable::rotated_position(0.4), 0.2}, {Observable::pendulum(), -0.3}},
                                                 {{Observable::position(), 0.3}, {Observable::rotated_position(1.1), -0.2}}};
    for (auto& [s1, s2] : pairs) {
        auto a = overlap(s1, s2, lam, {}, h), b = overlap(s2, s1, lam, {}, h);
        ASSERT_EQ(a.terms.size(), b.terms.size());
        for (std::size_t k = 0; k < a.terms.size(); ++k) {
            EXPECT_NEAR(a.terms[k].action, -b.terms[k].action, 1e-12);
            EXPECT_EQ(a.terms[k].maslov, -b.terms[k].maslov);
        }
        EXPECT_LT(std::abs(a.value - std::conj(b.value)), 1e-10 * std::abs(a.value));
    }
}

TEST(Maslov, CurvedFibrationCanCarryZeroLoopIndex) {
    // a circle against off-centre circles: at one tangency the fibration turns faster than the
    // curve, at the other slower, so the two crossings cancel; straight fibrations always give 2
    auto c = trace_level_curve_default(Observable::harmonic(), 0.65);
    EXPECT_EQ(maslov_loop(c, Observable::harmonic(1.0, 1.0)).index, 0);
    EXPECT_EQ(maslov_loop(c, Observable::harmonic(1.0, 0.2)).index, 0);
    EXPECT_EQ(maslov_loop(c, Observable::rotated_position(0.7)).index, 2);
}

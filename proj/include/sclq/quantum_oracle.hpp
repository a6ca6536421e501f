#ifndef SCLQ_QUANTUM_ORACLE_HPP
#define SCLQ_QUANTUM_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "semiclassics.hpp"

namespace sclq {

/// Periodic position grid q_a = -L + a Δq, a = 0..N-1, with ħ = h.
struct GridSpec {
    double L = 10.0;
    int N = 1024;
    double h = 0.1;

    double dq() const { return 2 * L / N; }
    double q(int a) const { return -L + a * dq(); }
    /// Momentum of Fourier mode j (Nyquist mode at j = N/2 is stored as negative).
    double p(int j) const { return h * std::numbers::pi / L * (j < N / 2 ? j : j - N); }
    bool operator==(const GridSpec& o) const { return L == o.L && N == o.N && h == o.h; }
};

namespace detail {

inline void check_grid(const GridSpec& g) {
    if (g.N < 4 || (g.N & (g.N - 1)) != 0) throw GridMismatch("grid size must be a power of two");
    if (!(g.L > 0) || !(g.h > 0)) throw GridMismatch("grid half-width and h must be positive");
}

// Circulant matrix of the Fourier multiplier m(p): C_ab = (1/N) Σ_j m(p_j) e^{2πi k_j (a-b)/N}.
// The Nyquist mode carries the symmetrised value so that even multipliers give real matrices
// and odd ones purely imaginary matrices.
template <class F>
Eigen::MatrixXcd fourier_multiplier(const GridSpec& g, F m) {
    const int N = g.N;
    const double dk = std::numbers::pi / g.L;
    std::vector<std::complex<double>> c(N);
    double nyq = 0.5 * (m(g.h * dk * (N / 2)) + m(-g.h * dk * (N / 2)));
    for (int r = 0; r < N; ++r) {
        double re = m(0.0), im = 0.0;
        for (int k = 1; k < N / 2; ++k) {
            double th = 2 * std::numbers::pi * k * static_cast<double>(r) / N;
            double mp = m(g.h * dk * k), mm = m(-g.h * dk * k);
            re += (mp + mm) * std::cos(th);
            im += (mp - mm) * std::sin(th);
        }
        re += nyq * ((r % 2) ? -1.0 : 1.0);
        c[r] = {re / N, im / N};
    }
    Eigen::MatrixXcd C(N, N);
    for (int a = 0; a < N; ++a)
        for (int b = 0; b < N; ++b) C(a, b) = c[((a - b) % N + N) % N];
    return C;
}

} // namespace detail

/// Fourier-diagonal p^n on the grid (odd powers vanish on the Nyquist mode).
inline Eigen::MatrixXcd momentum_power(const GridSpec& g, int n) {
    detail::check_grid(g);
    return detail::fourier_multiplier(g, [n](double p) { return Factor::ipow(p, n); });
}

inline Eigen::VectorXd grid_positions(const GridSpec& g) {
    Eigen::VectorXd x(g.N);
    for (int a = 0; a < g.N; ++a) x[a] = g.q(a);
    return x;
}

struct GridQuantization {
    GridSpec grid;
    Eigen::MatrixXcd op;
    std::string provenance;

    bool is_real() const { return op.imag().cwiseAbs().maxCoeff() == 0.0; }
    double hermiticity_defect() const { return (op - op.adjoint()).cwiseAbs().maxCoeff(); }
};

/// Weyl-ordered operator of H: position-diagonal V(q), Fourier-diagonal T(p), and cross terms
/// f(q)·(p - s)^n with n ≤ 2 symmetrised: f p -> (FP + PF)/2, f p² -> (FP² + P²F)/2 + h² f''/4.
inline GridQuantization build_weyl_operator(const Observable& H, const GridSpec& g) {
    detail::check_grid(g);
    const int N = g.N;
    Eigen::MatrixXcd op = Eigen::MatrixXcd::Zero(N, N);
    std::optional<Eigen::MatrixXcd> P1, P2;
    auto P = [&](int n) -> const Eigen::MatrixXcd& {
        auto& slot = n == 1 ? P1 : P2;
        if (!slot) slot = momentum_power(g, n);
        return *slot;
    };
    for (auto& t : H.terms()) {
        if (t.pf.is_constant()) {
            for (int a = 0; a < N; ++a) op(a, a) += t.coef * t.qf(g.q(a));
        } else if (t.qf.is_constant()) {
            double fq = t.qf(0.0);
            op += detail::fourier_multiplier(g, [&](double p) { return t.coef * fq * t.pf(p); });
        } else {
            if (t.pf.kind != Factor::power || t.pf.n > 2)
                throw UnsupportedOrdering("cross term of degree > 2 in p in " + H.name());
            // (p - s)^n = Σ_k C(n,k) p^k (-s)^{n-k}
            const int n = t.pf.n;
            const double s = t.pf.shift;
            for (int k = 0; k <= n; ++k) {
                double binom = (n == 2 && k == 1) ? 2.0 : 1.0;
                double cf = t.coef * binom * Factor::ipow(-s, n - k);
                if (cf == 0.0) continue;
                if (k == 0) {
                    for (int a = 0; a < N; ++a) op(a, a) += cf * t.qf(g.q(a));
                } else {
                    const auto& Pk = P(k);
                    for (int a = 0; a < N; ++a)
                        for (int b = 0; b < N; ++b) op(a, b) += 0.5 * cf * (t.qf(g.q(a)) + t.qf(g.q(b))) * Pk(a, b);
                    if (k == 2)
                        for (int a = 0; a < N; ++a) op(a, a) += cf * g.h * g.h * t.qf.deriv(g.q(a), 2) / 4.0;
                }
            }
        }
    }
    return {g, std::move(op), H.name()};
}

struct Eigensystem {
    GridSpec grid;
    Eigen::VectorXd values;     // ascending, retained states only
    Eigen::MatrixXcd vectors;   // columns, Σ|v|² Δq = 1
    double ceiling = 0.0;
    double op_norm = 0.0;

    int size() const { return static_cast<int>(values.size()); }
};

/// Diagonalise and keep eigenpairs below the ceiling (default H(L, 0)/2 for kinetic-plus-potential
/// operators, i.e. half the potential at the box edge).
inline Eigensystem diagonalize(const GridQuantization& gq, std::optional<double> retain_below = std::nullopt,
                               const Observable* source = nullptr) {
    const auto& g = gq.grid;
    Eigen::VectorXd vals;
    Eigen::MatrixXcd vecs;
    if (gq.is_real()) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gq.op.real());
        vals = es.eigenvalues();
        vecs = es.eigenvectors().cast<std::complex<double>>();
    } else {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(gq.op);
        vals = es.eigenvalues();
        vecs = es.eigenvectors();
    }
    double ceiling = retain_below ? *retain_below
                                  : (source ? 0.5 * (*source)({g.L, 0.0}) : std::numeric_limits<double>::infinity());
    int keep = 0;
    while (keep < vals.size() && vals[keep] < ceiling) ++keep;
    Eigensystem es;
    es.grid = g;
    es.ceiling = ceiling;
    es.values = vals.head(keep);
    es.vectors = vecs.leftCols(keep) / std::sqrt(g.dq());
    es.op_norm = vals.cwiseAbs().maxCoeff();
    // deterministic phase: the largest-modulus component is real and positive
    for (int k = 0; k < keep; ++k) {
        Eigen::Index imax;
        es.vectors.col(k).cwiseAbs().maxCoeff(&imax);
        auto ph = es.vectors(imax, k) / std::abs(es.vectors(imax, k));
        es.vectors.col(k) *= std::conj(ph);
    }
    return es;
}

inline Eigensystem solve(const Observable& H, const GridSpec& g, std::optional<double> retain_below = std::nullopt) {
    return diagonalize(build_weyl_operator(H, g), retain_below, &H);
}

/// (v2, v1) = Σ conj(v2) v1 Δq
inline std::complex<double> exact_overlap(const Eigen::VectorXcd& v1, const GridSpec& g1, const Eigen::VectorXcd& v2,
                                          const GridSpec& g2) {
    if (!(g1 == g2) || v1.size() != v2.size() || v1.size() != g1.N) throw GridMismatch("states live on different grids");
    return v2.dot(v1) * g1.dq();  // Eigen's dot conjugates the left operand
}

inline std::complex<double> exact_overlap(const Eigensystem& s1, int n1, const Eigensystem& s2, int n2) {
    return exact_overlap(s1.vectors.col(n1), s1.grid, s2.vectors.col(n2), s2.grid);
}

/// Trigonometric interpolant of a grid state, evaluable at any q.
class GridFunction {
public:
    GridFunction(const Eigen::VectorXcd& v, const GridSpec& g) : g_(g), c_(g.N) {
        const int N = g.N;
        for (int j = 0; j < N; ++j) {
            std::complex<double> s{};
            for (int a = 0; a < N; ++a) s += v[a] * std::polar(1.0, -2 * std::numbers::pi * static_cast<double>((static_cast<long long>(j) * a) % N) / N);
            c_[j] = s / static_cast<double>(N);
        }
    }
    std::complex<double> operator()(double q) const {
        const int N = g_.N;
        double x = (q + g_.L) * std::numbers::pi / g_.L;  // phase per unit wavenumber
        std::complex<double> s = c_[0];
        for (int k = 1; k < N / 2; ++k) s += c_[k] * std::polar(1.0, k * x) + c_[N - k] * std::polar(1.0, -k * x);
        s += c_[N / 2] * std::cos((N / 2) * x);
        return s;
    }

private:
    GridSpec g_;
    std::vector<std::complex<double>> c_;
};

/// Level spacing 2πh/T(b) of a closed fiber; continuum (δ-normalised) fibers return nullopt.
inline std::optional<double> level_spacing(const FiberCurve& f, double h) {
    if (!f.closed) return std::nullopt;
    return two_pi * h / f.period;
}

/// Converts a half-density amplitude to a discrete-spectrum overlap: × √(Δb₁ Δb₂), Δb = 2πh/T(b).
/// Linear (plane-wave) fibers are δ-normalised and contribute a factor 1.
inline std::complex<double> half_density_bridge(const SemiclassicalAmplitude& a, const FiberCurve& f1,
                                                const FiberCurve& f2) {
    double factor = 1.0;
    for (const FiberCurve* f : {&f1, &f2}) {
        if (auto d = level_spacing(*f, a.h)) factor *= std::sqrt(*d);
        else if (!f->H.is_linear())
            throw OpenFiber("continuum normalisation of the open fiber " + f->H.name() + " is not available");
    }
    return a.value * factor;
}

inline double bridge_factor(const FiberCurve& f1, const FiberCurve& f2, double h) {
    SemiclassicalAmplitude unit;
    unit.h = h;
    unit.value = 1.0;
    return std::real(half_density_bridge(unit, f1, f2));
}

/// Writes <stem>_values.csv, <stem>_vectors.bin (row-major float64, shape [states][N][2] with
/// real/imaginary parts interleaved) and <stem>.json recording grid, h and layout.
inline void export_eigensystem(const Eigensystem& es, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / (stem + "_values.csv"));
        os << "n,value\n";
        os.precision(17);
        for (int k = 0; k < es.size(); ++k) os << k << ',' << es.values[k] << '\n';
    }
    {
        std::ofstream os(dir / (stem + "_vectors.bin"), std::ios::binary);
        for (int k = 0; k < es.size(); ++k)
            for (int a = 0; a < es.grid.N; ++a) {
                double re = es.vectors(a, k).real(), im = es.vectors(a, k).imag();
                os.write(reinterpret_cast<const char*>(&re), sizeof re);
                os.write(reinterpret_cast<const char*>(&im), sizeof im);
            }
    }
    nlohmann::json j{{"L", es.grid.L},
                     {"N", es.grid.N},
                     {"h", es.grid.h},
                     {"dq", es.grid.dq()},
                     {"states", es.size()},
                     {"ceiling", es.ceiling},
                     {"dtype", "float64"},
                     {"order", "row-major"},
                     {"shape", {es.size(), es.grid.N, 2}},
                     {"normalisation", "sum |v|^2 dq = 1"}};
    std::ofstream(dir / (stem + ".json")) << j.dump(2) << '\n';
}

struct LevelMatch {
    int n = 0;
    double semiclassical = 0.0;
    double oracle = 0.0;
    double deviation = 0.0;
};

/// Pair the n-th oracle eigenvalue with the Bohr–Sommerfeld level of quantum number n.
inline std::vector<LevelMatch> match_levels(const Eigensystem& es, const std::vector<BSLevel>& levels) {
    std::vector<LevelMatch> out;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto& l = levels[i];
        if (l.n < 0 || l.n >= es.size())
            throw CountMismatch("oracle retains " + std::to_string(es.size()) + " states; level n = " + std::to_string(l.n) + " unmatched");
        if (i > 0 && l.n != levels[i - 1].n + 1) throw CountMismatch("Bohr–Sommerfeld levels are not consecutive");
        double E = es.values[l.n];
        // the oracle level must be closer to its partner than to the neighbouring semiclassical levels
        if (i > 0 && std::abs(E - l.b) > std::abs(E - levels[i - 1].b))
            throw CountMismatch("level ordering differs at n = " + std::to_string(l.n));
        if (i + 1 < levels.size() && std::abs(E - l.b) > std::abs(E - levels[i + 1].b))
            throw CountMismatch("level ordering differs at n = " + std::to_string(l.n));
        out.push_back({l.n, l.b, E, std::abs(E - l.b)});
    }
    return out;
}

} // namespace sclq

#endif

#ifndef SCLQ_EXPERIMENT_HPP
#define SCLQ_EXPERIMENT_HPP

// Configuration-driven experiment runner: scenario definitions, the error-slope regression,
// and the oracle-comparison sweeps shared by the CLI and the acceptance suite.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "quantum_oracle.hpp"
#include "semiclassics.hpp"
#include "star_product.hpp"

namespace sclq {

// ---------------------------------------------------------------- regression

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  // RMS residual of the log-log fit
};

/// Least-squares fit of log(error) against log(h).
inline SlopeFit regress_error_slope(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 3) throw DegenerateFit("slope needs at least 3 points");
    bool all_tiny = true;
    for (auto& [h, e] : points) {
        if (!(h > 0)) throw DegenerateFit("h values must be positive");
        if (e >= 1e-13) all_tiny = false;
        else if (!(e > 0) && e != 0.0) throw DegenerateFit("errors must be positive");
    }
    if (all_tiny) throw DegenerateFit("errors are at machine precision: convergence is exact");
    for (auto& [h, e] : points)
        if (!(e > 0)) throw DegenerateFit("errors must be positive for a log-log fit");
    const double n = static_cast<double>(points.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (auto& [h, e] : points) {
        double x = std::log(h), y = std::log(e);
        sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    double den = n * sxx - sx * sx;
    if (den == 0.0) throw DegenerateFit("all h values coincide");
    SlopeFit f;
    f.slope = (n * sxy - sx * sy) / den;
    f.intercept = (sy - f.slope * sx) / n;
    double r2 = 0;
    for (auto& [h, e] : points) {
        double d = std::log(e) - (f.intercept + f.slope * std::log(h));
        r2 += d * d;
    }
    f.residual = std::sqrt(r2 / n);
    return f;
}

// ---------------------------------------------------------------- worker pool

/// Runs fn(i) for i in [0, n) on `jobs` threads; the first exception is rethrown.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lk(mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------- oracle sweeps

/// Position fibration (H1 linear) against a closed system H2 at Bohr–Sommerfeld levels,
/// compared with the grid eigenfunction of H2 evaluated at q = b1.
struct SweepSpec {
    enum Quantity { probability, amplitude, matrix_element_q };

    Observable H1 = Observable::position();
    Observable H2 = Observable::harmonic();
    std::optional<PhasePoint> seed2;
    std::vector<double> hs{0.2, 0.1, 0.05, 0.025};
    std::vector<double> energies{0.5, 1.0, 1.5};
    std::vector<double> fractions{-0.5, -0.25, 0.0, 0.25, 0.5};
    double b_min = 0.0, b_max = 2.0;  // Bohr–Sommerfeld search range for H2
    ReferenceLagrangian lambda = ReferenceLagrangian::diagonal();
    PrequantumForm alpha;
    GridSpec grid{10.0, 1024, 0.1};
    std::optional<double> retain_below;
    Quantity quantity = probability;
    // move each position to the nearest point where the two-term interference cross term
    // vanishes, so relative errors are not dominated by the vicinity of nodes
    bool snap = true;
    int jobs = 1;
};

struct SweepCase {
    double h = 0, energy = 0, b2 = 0, fraction = 0, b1 = 0;
    int n = 0;
    double semiclassical = 0, oracle = 0, abs_err = 0, rel_err = 0;
    int n_terms = 0;
    cplx value{};
    std::vector<std::string> warnings;
};

struct SweepResult {
    std::vector<SweepCase> cases;
    std::vector<std::pair<double, double>> mean_rel_err;  // (h, mean relative error)
    std::vector<std::pair<double, double>> max_rel_err;
    std::optional<SlopeFit> fit;
    bool exact = false;
};

namespace detail {

// Relative phase between the two terms of a two-point overlap.
inline double interference_phase(const OverlapGeometry& g, double h) {
    const auto& a = g.terms[0];
    const auto& c = g.terms[1];
    return (a.action - c.action) / h + std::numbers::pi * (a.maslov - c.maslov) / 2.0;
}

inline double snap_to_quadrature(const Observable& H1, double b1, const System& s2, const SweepSpec& spec, double h) {
    OverlapOptions fast;
    fast.hessian = HessianMethod::bracket_identity;
    auto phase = [&](double b) {
        auto g = overlap_geometry({H1, b}, s2, spec.lambda, spec.alpha, fast);
        if (g.terms.size() != 2) throw Error("interference snapping needs two terms");
        return interference_phase(g, h);
    };
    double b = b1;
    double phi = phase(b);
    double target = std::numbers::pi * (std::round(phi / std::numbers::pi - 0.5) + 0.5);
    for (int it = 0; it < 30; ++it) {
        const double d = 1e-6;
        double dphi = (phase(b + d) - phase(b - d)) / (2 * d);
        double step = (phi - target) / dphi;
        b -= step;
        phi = phase(b);
        if (std::abs(step) < 1e-13) break;
    }
    return b;
}

} // namespace detail

inline SweepResult run_sweep(const SweepSpec& spec) {
    SweepResult res;
    struct Level {
        double h;
        Eigensystem es;
        std::vector<BSLevel> bs;
    };
    std::vector<Level> levels(spec.hs.size());
    parallel_for(spec.hs.size(), spec.jobs, [&](std::size_t i) {
        double h = spec.hs[i];
        GridSpec g = spec.grid;
        g.h = h;
        levels[i] = {h, solve(spec.H2, g, spec.retain_below),
                     bohr_sommerfeld_levels(spec.H2, h, spec.b_min, spec.b_max, {}, spec.seed2).levels};
    });
    for (std::size_t i = 0; i < spec.hs.size(); ++i)
        for (double E : spec.energies)
            for (double f : spec.fractions) {
                SweepCase c;
                c.h = spec.hs[i];
                c.energy = E;
                c.fraction = f;
                res.cases.push_back(c);
            }
    parallel_for(res.cases.size(), spec.jobs, [&](std::size_t k) {
        auto& c = res.cases[k];
        auto lv = std::find_if(levels.begin(), levels.end(), [&](const Level& l) { return l.h == c.h; });
        const auto& bs = lv->bs;
        if (bs.empty()) throw Error("no Bohr–Sommerfeld levels in the sweep range");
        auto best = std::min_element(bs.begin(), bs.end(), [&](const BSLevel& a, const BSLevel& b) {
            return std::abs(a.b - c.energy) < std::abs(b.b - c.energy);
        });
        c.n = best->n;
        c.b2 = best->b;
        System s2{spec.H2, c.b2, spec.seed2};
        auto curve = trace_fiber(s2);
        double qmin = 1e300, qmax = -1e300;
        for (auto& smp : curve.samples) qmin = std::min(qmin, smp.x.q), qmax = std::max(qmax, smp.x.q);
        double b1 = 0.5 * (qmin + qmax) + c.fraction * 0.5 * (qmax - qmin);
        if (spec.snap) b1 = detail::snap_to_quadrature(spec.H1, b1, s2, spec, c.h);
        c.b1 = b1;
        System s1{spec.H1, b1};
        SemiclassicalAmplitude a = spec.quantity == SweepSpec::matrix_element_q
                                       ? semiclassical_matrix_element(PolynomialObservable::q(), s1, s2, spec.lambda, spec.alpha, c.h)
                                       : overlap(s1, s2, spec.lambda, spec.alpha, c.h);
        c.value = a.value;
        c.n_terms = static_cast<int>(a.terms.size());
        c.warnings = a.warnings;
        auto f1 = trace_fiber(s1);
        double bridge = bridge_factor(f1, curve, c.h);
        const auto& es = lv->es;
        if (c.n >= es.size()) throw CountMismatch("oracle does not retain level n = " + std::to_string(c.n));
        GridFunction psi(es.vectors.col(c.n), es.grid);
        switch (spec.quantity) {
        case SweepSpec::probability:
            c.semiclassical = transition_probability(a) * bridge * bridge;
            c.oracle = std::norm(psi(b1));
            break;
        case SweepSpec::amplitude:
            c.semiclassical = std::abs(a.value) * bridge;
            c.oracle = std::abs(psi(b1));
            break;
        case SweepSpec::matrix_element_q: {
            // (ψ_n, Op(q) δ_{b1}) = conj((Op(q) ψ_n)(b1))
            Eigen::VectorXcd qpsi = weyl_operator_of(PolynomialObservable::q(), es.grid) * es.vectors.col(c.n);
            c.semiclassical = std::abs(a.value) * bridge;
            c.oracle = std::abs(GridFunction(qpsi, es.grid)(b1));
            break;
        }
        }
        c.abs_err = std::abs(c.semiclassical - c.oracle);
        c.rel_err = c.abs_err / std::abs(c.oracle);
    });
    for (double h : spec.hs) {
        double sum = 0, mx = 0;
        int cnt = 0;
        for (auto& c : res.cases)
            if (c.h == h) sum += c.rel_err, mx = std::max(mx, c.rel_err), ++cnt;
        res.mean_rel_err.push_back({h, sum / cnt});
        res.max_rel_err.push_back({h, mx});
    }
    if (spec.hs.size() >= 3) {
        try {
            res.fit = regress_error_slope(res.mean_rel_err);
        } catch (const DegenerateFit&) {
            res.exact = true;
        }
    }
    return res;
}

// ---------------------------------------------------------------- configuration

struct SystemSpec {
    std::string name;
    std::string kind;
    Observable H;
    std::optional<PhasePoint> seed;
    double bs_min = 0.0, bs_max = 4.0;  // Bohr–Sommerfeld search range

    bool is_position() const { return kind == "position"; }
    System at(double b) const { return {H, b, seed}; }
};

/// Level choice for one system: explicit b values, Bohr–Sommerfeld indices, or the
/// Bohr–Sommerfeld level nearest to each target energy.
struct LevelSelector {
    enum Kind { value, index, energy } kind = value;
    std::vector<double> values;
};

/// INI text with sections; keeps the raw text for line-level diagnostics.
class ConfigReader {
public:
    using ptree = boost::property_tree::ptree;

    explicit ConfigReader(std::string text) : text_(std::move(text)) {
        std::istringstream is(text_);
        try {
            boost::property_tree::ini_parser::read_ini(is, tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(e.message(), static_cast<int>(e.line()));
        }
    }

    static ConfigReader from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return ConfigReader(ss.str());
    }

    const ptree& tree() const { return tree_; }
    bool has_section(const std::string& sec) const { return tree_.find(sec) != tree_.not_found(); }
    bool has(const std::string& sec, const std::string& key) const {
        auto it = tree_.find(sec);
        return it != tree_.not_found() && it->second.find(key) != it->second.not_found();
    }

    /// 1-based line of `key` inside [sec] (or of the section header when key is empty); 0 if absent.
    int line_of(const std::string& sec, const std::string& key = {}) const {
        std::istringstream is(text_);
        std::string line, cur;
        int n = 0, header = 0;
        while (std::getline(is, line)) {
            ++n;
            auto t = trim(line);
            if (t.empty() || t[0] == ';' || t[0] == '#') continue;
            if (t.front() == '[' && t.back() == ']') {
                cur = trim(t.substr(1, t.size() - 2));
                if (cur == sec) header = n;
                continue;
            }
            auto eq = t.find('=');
            if (cur == sec && eq != std::string::npos && trim(t.substr(0, eq)) == key) return n;
        }
        return header;
    }

    [[noreturn]] void fail(const std::string& sec, const std::string& key, const std::string& what) const {
        throw ConfigError(what, line_of(sec, key), key.empty() ? sec : sec + "." + key);
    }

    std::optional<std::string> get(const std::string& sec, const std::string& key) const {
        if (!has(sec, key)) return std::nullopt;
        return trim(tree_.get_child(sec).get_child(key).data());
    }
    std::string require(const std::string& sec, const std::string& key) const {
        auto v = get(sec, key);
        if (!v || v->empty()) fail(sec, key, "missing required key");
        return *v;
    }
    std::string str(const std::string& sec, const std::string& key, const std::string& def) const {
        return get(sec, key).value_or(def);
    }

    double number(const std::string& sec, const std::string& key, std::optional<double> def = std::nullopt) const {
        auto v = get(sec, key);
        if (!v) {
            if (def) return *def;
            fail(sec, key, "missing required key");
        }
        return to_double(*v, sec, key);
    }
    int integer(const std::string& sec, const std::string& key, std::optional<int> def = std::nullopt) const {
        double d = number(sec, key, def ? std::optional<double>(*def) : std::nullopt);
        if (d != std::floor(d) || std::abs(d) > 1e9) fail(sec, key, "expected an integer");
        return static_cast<int>(d);
    }
    bool flag(const std::string& sec, const std::string& key, bool def) const {
        auto v = get(sec, key);
        if (!v) return def;
        if (*v == "true" || *v == "yes" || *v == "1" || *v == "on") return true;
        if (*v == "false" || *v == "no" || *v == "0" || *v == "off") return false;
        fail(sec, key, "expected a boolean, got '" + *v + "'");
    }
    std::vector<std::string> words(const std::string& sec, const std::string& key) const {
        std::vector<std::string> out;
        auto v = get(sec, key);
        if (!v) return out;
        std::stringstream ss(*v);
        for (std::string item; std::getline(ss, item, ',');) {
            item = trim(item);
            if (item.empty()) fail(sec, key, "empty list entry");
            out.push_back(item);
        }
        return out;
    }
    std::vector<double> numbers(const std::string& sec, const std::string& key) const {
        std::vector<double> out;
        for (auto& w : words(sec, key)) out.push_back(to_double(w, sec, key));
        return out;
    }

    /// Keys present in [sec] that are not in `allowed`.
    void check_keys(const std::string& sec, std::initializer_list<const char*> allowed) const {
        auto it = tree_.find(sec);
        if (it == tree_.not_found()) return;
        for (auto& [k, v] : it->second) {
            bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; });
            if (!ok) fail(sec, k, "unknown key");
        }
    }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    double to_double(const std::string& v, const std::string& sec, const std::string& key) const {
        try {
            std::size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
            return d;
        } catch (const std::logic_error&) {
            fail(sec, key, "expected a number, got '" + v + "'");
        }
    }

    std::string text_;
    ptree tree_;
};

inline const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> names{"spectrum", "overlap", "probability", "cyclic",
                                                "star-check", "glue-check", "sweep"};
    return names;
}

struct ExperimentConfig {
    std::string scenario;
    ConfigReader reader{""};
    std::map<std::string, SystemSpec> systems;
    ReferenceLagrangian lambda = ReferenceLagrangian::diagonal();
    PrequantumForm alpha;
    std::vector<double> hs;
    GridSpec grid{10.0, 1024, 0.1};
    std::optional<double> retain_below;
    bool fiber_dump = false;
    std::optional<std::string> out_dir;

    const SystemSpec& system(const std::string& sec, const std::string& key) const {
        auto name = reader.require(sec, key);
        auto it = systems.find(name);
        if (it == systems.end()) reader.fail(sec, key, "undefined system '" + name + "'");
        return it->second;
    }
    GridSpec grid_at(double h) const {
        GridSpec g = grid;
        g.h = h;
        return g;
    }
};

namespace detail {

inline SystemSpec parse_system(const ConfigReader& r, const std::string& sec, const std::string& name) {
    r.check_keys(sec, {"kind", "omega", "q0", "p0", "a", "b", "theta_deg", "expr", "seed", "bs_range"});
    SystemSpec s;
    s.name = name;
    s.kind = r.require(sec, "kind");
    try {
        if (s.kind == "position") s.H = Observable::position();
        else if (s.kind == "momentum") s.H = Observable::momentum();
        else if (s.kind == "linear") s.H = Observable::linear(r.number(sec, "a"), r.number(sec, "b"));
        else if (s.kind == "rotated") s.H = Observable::rotated_position(r.number(sec, "theta_deg") * std::numbers::pi / 180.0);
        else if (s.kind == "harmonic")
            s.H = Observable::harmonic(r.number(sec, "omega", 1.0), r.number(sec, "q0", 0.0), r.number(sec, "p0", 0.0));
        else if (s.kind == "pendulum") s.H = Observable::pendulum();
        else if (s.kind == "polynomial") s.H = Observable::parse(r.require(sec, "expr"));
        else r.fail(sec, "kind", "unknown system kind '" + s.kind + "'");
    } catch (const ParseError& e) {
        r.fail(sec, "expr", e.what());
    }
    if (r.has(sec, "seed")) {
        auto v = r.numbers(sec, "seed");
        if (v.size() != 2) r.fail(sec, "seed", "seed must be 'q, p'");
        s.seed = PhasePoint{v[0], v[1]};
    }
    if (r.has(sec, "bs_range")) {
        auto v = r.numbers(sec, "bs_range");
        if (v.size() != 2 || !(v[0] < v[1])) r.fail(sec, "bs_range", "bs_range must be 'lo, hi' with lo < hi");
        s.bs_min = v[0], s.bs_max = v[1];
    } else if (s.kind == "pendulum") {
        s.bs_min = -1.0, s.bs_max = 0.99;
    }
    return s;
}

} // namespace detail

/// Parse and validate the scenario-independent parts; `scenario` comes from the subcommand.
inline ExperimentConfig parse_config(ConfigReader reader, const std::string& scenario) {
    ExperimentConfig c;
    c.reader = std::move(reader);
    const auto& r = c.reader;
    if (std::find(scenario_names().begin(), scenario_names().end(), scenario) == scenario_names().end())
        throw ConfigError("unknown scenario '" + scenario + "'");
    c.scenario = scenario;
    for (auto& [sec, body] : r.tree()) {
        if (!body.data().empty()) r.fail(sec, "", "top-level keys must live in a section");
        if (sec.rfind("system ", 0) == 0) {
            auto name = sec.substr(7);
            c.systems[name] = detail::parse_system(r, sec, name);
        } else if (sec != "run" && sec != "lagrangian" && sec != "gauge" && sec != "grid" &&
                   std::find(scenario_names().begin(), scenario_names().end(), sec) == scenario_names().end()) {
            r.fail(sec, "", "unknown section");
        }
    }
    r.check_keys("run", {"scenario", "h", "out", "fiber_dump"});
    if (auto s = r.get("run", "scenario"); s && *s != scenario)
        r.fail("run", "scenario", "config declares scenario '" + *s + "' but '" + scenario + "' was requested");
    c.hs = r.numbers("run", "h");
    if (c.hs.empty()) r.fail("run", "h", "missing required key");
    for (std::size_t i = 0; i < c.hs.size(); ++i) {
        if (!(c.hs[i] > 0)) r.fail("run", "h", "h values must be positive");
        if (i > 0 && !(c.hs[i] < c.hs[i - 1])) r.fail("run", "h", "h values must be strictly decreasing");
    }
    if (auto o = r.get("run", "out")) c.out_dir = *o;
    c.fiber_dump = r.flag("run", "fiber_dump", false);

    r.check_keys("lagrangian", {"lambda"});
    try {
        c.lambda = ReferenceLagrangian(Observable::parse(r.str("lagrangian", "lambda", "q")));
    } catch (const Error& e) {
        r.fail("lagrangian", "lambda", e.what());
    }
    r.check_keys("gauge", {"f"});
    if (auto f = r.get("gauge", "f")) {
        try {
            c.alpha.gauge = Observable::parse(*f);
        } catch (const Error& e) {
            r.fail("gauge", "f", e.what());
        }
    }
    r.check_keys("grid", {"L", "N", "retain_below"});
    c.grid.L = r.number("grid", "L", 10.0);
    c.grid.N = r.integer("grid", "N", 1024);
    try {
        detail::check_grid(c.grid_at(1.0));
    } catch (const GridMismatch& e) {
        r.fail("grid", r.has("grid", "N") ? "N" : "L", e.what());
    }
    if (r.has("grid", "retain_below")) c.retain_below = r.number("grid", "retain_below");
    return c;
}

// ---------------------------------------------------------------- report

struct Report {
    std::string scenario;
    std::vector<std::string> columns;
    std::vector<std::vector<nlohmann::json>> rows;
    nlohmann::json summary = nlohmann::json::object();
    std::string regression_of;  // column regressed against h, if any
    std::optional<SlopeFit> fit;
    bool exact = false;
    std::vector<std::string> warnings;
    std::vector<std::pair<std::string, std::string>> fibers;  // file name, CSV body

    bool numerical_warnings() const {
        return std::any_of(warnings.begin(), warnings.end(), [](const std::string& w) {
            return w.rfind("CausticNearby", 0) == 0 || w.rfind("DoubleRoot", 0) == 0;
        });
    }
    int exit_code() const { return numerical_warnings() ? 2 : 0; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "sclq-report-v1";
        j["scenario"] = scenario;
        auto cases = nlohmann::json::array();
        for (auto& row : rows) {
            nlohmann::json o = nlohmann::json::object();
            for (std::size_t k = 0; k < columns.size(); ++k) o[columns[k]] = row[k];
            cases.push_back(o);
        }
        j["cases"] = cases;
        j["summary"] = summary;
        if (fit) j["regression"] = {{"of", regression_of}, {"slope", fit->slope}, {"intercept", fit->intercept}, {"residual", fit->residual}};
        else if (exact) j["regression"] = {{"of", regression_of}, {"exact", true}};
        else j["regression"] = nullptr;
        j["warnings"] = warnings;
        j["exit_code"] = exit_code();
        return j;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "# sclq cases.csv v1 scenario=" << scenario << "\n";
        for (std::size_t k = 0; k < columns.size(); ++k) os << (k ? "," : "") << columns[k];
        os << "\n";
        for (auto& row : rows) {
            for (std::size_t k = 0; k < row.size(); ++k) {
                if (k) os << ',';
                const auto& v = row[k];
                if (v.is_number_float()) {
                    double d = v.get<double>();
                    if (std::isfinite(d)) {
                        std::ostringstream num;
                        num.precision(17);
                        num << d;
                        os << num.str();
                    }
                } else if (v.is_string()) {
                    os << '"' << v.get<std::string>() << '"';
                } else if (!v.is_null()) {
                    os << v.dump();
                }
            }
            os << "\n";
        }
        return os.str();
    }
};

namespace detail {

inline nlohmann::json num(double d) { return std::isfinite(d) ? nlohmann::json(d) : nlohmann::json(nullptr); }

inline void add_warnings(Report& rep, const std::vector<std::string>& w) {
    for (auto& s : w)
        if (std::find(rep.warnings.begin(), rep.warnings.end(), s) == rep.warnings.end()) rep.warnings.push_back(s);
}

inline void regress(Report& rep, const std::vector<std::pair<double, double>>& pts, const std::string& of) {
    if (pts.size() < 3) return;
    rep.regression_of = of;
    try {
        rep.fit = regress_error_slope(pts);
    } catch (const DegenerateFit&) {
        rep.exact = true;
    }
}

inline std::string fiber_csv(const FiberCurve& c) {
    std::ostringstream os;
    c.write_csv(os);
    return os.str();
}

inline LevelSelector parse_selector(const ConfigReader& r, const std::string& sec, const std::string& suffix,
                                    const SystemSpec& sys) {
    LevelSelector sel;
    int found = 0;
    for (auto [key, kind] : {std::pair{"b" + suffix, LevelSelector::value}, std::pair{"n" + suffix, LevelSelector::index},
                             std::pair{"e" + suffix, LevelSelector::energy}}) {
        if (!r.has(sec, key)) continue;
        ++found;
        sel.kind = kind;
        sel.values = r.numbers(sec, key);
        if (sel.values.empty()) r.fail(sec, key, "empty level list");
        if (kind == LevelSelector::index)
            for (double v : sel.values)
                if (v < 0 || v != std::floor(v)) r.fail(sec, key, "Bohr–Sommerfeld indices must be non-negative integers");
    }
    if (found != 1) r.fail(sec, "", "exactly one of b" + suffix + ", n" + suffix + ", e" + suffix + " must be given");
    if (sel.kind != LevelSelector::value && sys.H.is_linear())
        r.fail(sec, "n" + suffix, "system '" + sys.name + "' has open fibers; give explicit levels b" + suffix);
    return sel;
}

struct ResolvedLevel {
    double b = 0.0;
    int n = -1;  // Bohr–Sommerfeld index, or −1 for explicit levels
};

inline std::vector<ResolvedLevel> resolve(const SystemSpec& s, const LevelSelector& sel, double h) {
    std::vector<ResolvedLevel> out;
    if (sel.kind == LevelSelector::value) {
        for (double b : sel.values) out.push_back({b, -1});
        return out;
    }
    auto bs = bohr_sommerfeld_levels(s.H, h, s.bs_min, s.bs_max, {}, s.seed).levels;
    for (double v : sel.values) {
        const BSLevel* pick = nullptr;
        for (auto& l : bs) {
            if (sel.kind == LevelSelector::index ? l.n == static_cast<int>(v)
                                                 : (!pick || std::abs(l.b - v) < std::abs(pick->b - v)))
                pick = &l;
        }
        if (!pick)
            throw Error("system '" + s.name + "' has no Bohr–Sommerfeld level " + std::to_string(static_cast<int>(v)) +
                        " in its bs_range");
        out.push_back({pick->b, pick->n});
    }
    return out;
}

// ---- scenarios

inline Report run_spectrum(const ExperimentConfig& c, int jobs) {
    const auto& r = c.reader;
    const std::string sec = "spectrum";
    r.check_keys(sec, {"system", "b_min", "b_max"});
    const auto& sys = c.system(sec, "system");
    double lo = r.number(sec, "b_min", sys.bs_min), hi = r.number(sec, "b_max", sys.bs_max);
    if (!(lo < hi)) r.fail(sec, "b_max", "b_max must exceed b_min");
    Report rep;
    rep.columns = {"h", "n", "b_semiclassical", "e_oracle", "abs_err"};
    std::vector<std::vector<LevelMatch>> per_h(c.hs.size());
    std::vector<std::vector<std::string>> warn(c.hs.size());
    parallel_for(c.hs.size(), jobs, [&](std::size_t i) {
        auto bs = bohr_sommerfeld_levels(sys.H, c.hs[i], lo, hi, {}, sys.seed);
        auto es = solve(sys.H, c.grid_at(c.hs[i]), c.retain_below);
        std::vector<BSLevel> kept;
        for (auto& l : bs.levels)
            if (l.n < es.size()) kept.push_back(l);
        per_h[i] = match_levels(es, kept);
        warn[i] = bs.warnings;
    });
    std::vector<std::pair<double, double>> pts;
    auto maxdev = nlohmann::json::array();
    for (std::size_t i = 0; i < c.hs.size(); ++i) {
        double mx = 0;
        for (auto& m : per_h[i]) {
            rep.rows.push_back({c.hs[i], m.n, m.semiclassical, m.oracle, m.deviation});
            mx = std::max(mx, m.deviation);
        }
        maxdev.push_back({{"h", c.hs[i]}, {"levels", per_h[i].size()}, {"max_deviation", mx}});
        pts.push_back({c.hs[i], mx});
        add_warnings(rep, warn[i]);
    }
    rep.summary["system"] = sys.name;
    rep.summary["per_h"] = maxdev;
    regress(rep, pts, "max_deviation");
    if (c.fiber_dump && !per_h[0].empty())
        rep.fibers.push_back({"fiber_" + sys.name + ".csv", fiber_csv(trace_fiber(sys.at(per_h[0][0].semiclassical)))});
    return rep;
}

// overlap and probability share the case layout
inline Report run_pair(const ExperimentConfig& c, int jobs, bool probability) {
    const auto& r = c.reader;
    const std::string sec = probability ? "probability" : "overlap";
    r.check_keys(sec, {"system1", "system2", "b1", "n1", "e1", "b2", "n2", "e2"});
    const auto& s1 = c.system(sec, "system1");
    const auto& s2 = c.system(sec, "system2");
    auto sel1 = parse_selector(r, sec, "1", s1);
    auto sel2 = parse_selector(r, sec, "2", s2);

    struct Case {
        double h;
        ResolvedLevel l1, l2;
        SemiclassicalAmplitude a;
        double semi = NAN, oracle = NAN;
    };
    std::vector<std::vector<ResolvedLevel>> L1(c.hs.size()), L2(c.hs.size());
    std::vector<std::optional<Eigensystem>> E1(c.hs.size()), E2(c.hs.size());
    const bool closed1 = sel1.kind != LevelSelector::value, closed2 = sel2.kind != LevelSelector::value;
    const bool oracle_pos = (s1.is_position() && closed2) || (s2.is_position() && closed1);
    const bool oracle_pair = closed1 && closed2;
    parallel_for(c.hs.size(), jobs, [&](std::size_t i) {
        L1[i] = resolve(s1, sel1, c.hs[i]);
        L2[i] = resolve(s2, sel2, c.hs[i]);
        if (closed1 && (oracle_pos || oracle_pair)) E1[i] = solve(s1.H, c.grid_at(c.hs[i]), c.retain_below);
        if (closed2 && (oracle_pos || oracle_pair)) E2[i] = solve(s2.H, c.grid_at(c.hs[i]), c.retain_below);
    });
    std::vector<Case> cases;
    for (std::size_t i = 0; i < c.hs.size(); ++i)
        for (auto& a : L1[i])
            for (auto& b : L2[i]) cases.push_back({c.hs[i], a, b, {}});
    parallel_for(cases.size(), jobs, [&](std::size_t k) {
        auto& cs = cases[k];
        std::size_t i = std::find(c.hs.begin(), c.hs.end(), cs.h) - c.hs.begin();
        auto sys1 = s1.at(cs.l1.b), sys2 = s2.at(cs.l2.b);
        cs.a = overlap(sys1, sys2, c.lambda, c.alpha, cs.h);
        double bridge = NAN;
        try {
            bridge = bridge_factor(trace_fiber(sys1), trace_fiber(sys2), cs.h);
        } catch (const OpenFiber&) {
        }
        cs.semi = probability ? transition_probability(cs.a) * bridge * bridge : std::abs(cs.a.value) * bridge;
        cplx o = NAN;
        if (oracle_pos) {
            const auto& es = s1.is_position() && closed2 ? *E2[i] : *E1[i];
            int n = s1.is_position() && closed2 ? cs.l2.n : cs.l1.n;
            double q = s1.is_position() && closed2 ? cs.l1.b : cs.l2.b;
            if (n >= es.size()) throw CountMismatch("oracle does not retain level n = " + std::to_string(n));
            o = GridFunction(es.vectors.col(n), es.grid)(q);
        } else if (oracle_pair) {
            if (cs.l1.n >= E1[i]->size() || cs.l2.n >= E2[i]->size()) throw CountMismatch("oracle does not retain the requested levels");
            o = exact_overlap(*E1[i], cs.l1.n, *E2[i], cs.l2.n);
        }
        cs.oracle = probability ? std::norm(o) : std::abs(o);
    });
    Report rep;
    rep.columns = {"b1", "b2", "h", "re", "im", "abs", "n_terms", "bridged", "oracle", "abs_err", "rel_err"};
    std::map<double, std::pair<double, int>> mean;
    for (auto& cs : cases) {
        double re = probability ? transition_probability(cs.a) : cs.a.value.real();
        double im = probability ? 0.0 : cs.a.value.imag();
        double ae = std::abs(cs.semi - cs.oracle), rel = ae / std::abs(cs.oracle);
        rep.rows.push_back({cs.l1.b, cs.l2.b, cs.h, re, im, probability ? std::abs(re) : std::abs(cs.a.value),
                            static_cast<int>(cs.a.terms.size()), num(cs.semi), num(cs.oracle), num(ae), num(rel)});
        if (std::isfinite(rel)) mean[cs.h].first += rel, mean[cs.h].second++;
        add_warnings(rep, cs.a.warnings);
    }
    std::vector<std::pair<double, double>> pts;
    for (double h : c.hs)
        if (mean.count(h)) pts.push_back({h, mean[h].first / mean[h].second});
    rep.summary["system1"] = s1.name;
    rep.summary["system2"] = s2.name;
    rep.summary["quantity"] = probability ? "transition_probability" : "overlap";
    auto js = nlohmann::json::array();
    for (auto& [h, e] : pts) js.push_back({{"h", h}, {"mean_rel_err", e}});
    rep.summary["per_h"] = js;
    regress(rep, pts, "mean_rel_err");
    if (c.fiber_dump && !cases.empty()) {
        rep.fibers.push_back({"fiber_" + s1.name + ".csv", fiber_csv(trace_fiber(s1.at(cases[0].l1.b)))});
        rep.fibers.push_back({"fiber_" + s2.name + ".csv", fiber_csv(trace_fiber(s2.at(cases[0].l2.b)))});
    }
    return rep;
}

inline Report run_cyclic(const ExperimentConfig& c, int jobs) {
    const auto& r = c.reader;
    const std::string sec = "cyclic";
    r.check_keys(sec, {"systems", "b"});
    auto names = r.words(sec, "systems");
    auto levels = r.numbers(sec, "b");
    if (names.size() < 2 || names.size() > 4) r.fail(sec, "systems", "cyclic amplitudes need 2 to 4 systems");
    if (levels.size() != names.size()) r.fail(sec, "b", "one level per system is required");
    std::vector<System> systems;
    bool all_linear = true;
    for (std::size_t a = 0; a < names.size(); ++a) {
        auto it = c.systems.find(names[a]);
        if (it == c.systems.end()) r.fail(sec, "systems", "undefined system '" + names[a] + "'");
        systems.push_back(it->second.at(levels[a]));
        all_linear = all_linear && it->second.H.is_linear();
    }
    std::vector<CyclicAmplitude> amps(c.hs.size());
    parallel_for(c.hs.size(), jobs, [&](std::size_t i) { amps[i] = cyclic_amplitude(systems, c.alpha, c.hs[i]); });
    Report rep;
    rep.columns = {"h", "re", "im", "abs", "n_terms", "action", "maslov", "area"};
    for (std::size_t i = 0; i < c.hs.size(); ++i) {
        const auto& A = amps[i];
        double action = A.terms.empty() ? NAN : A.terms[0].action;
        int maslov = A.terms.empty() ? 0 : A.terms[0].maslov;
        double area = NAN;
        if (all_linear && !A.terms.empty()) {
            // shoelace area of the chain polygon
            const auto& ch = A.terms[0].chain;
            area = 0;
            for (std::size_t a = 0; a < ch.size(); ++a) {
                const auto& u = ch[a];
                const auto& v = ch[(a + 1) % ch.size()];
                area += 0.5 * (u.q * v.p - v.q * u.p);
            }
        }
        rep.rows.push_back({c.hs[i], A.value.real(), A.value.imag(), std::abs(A.value), static_cast<int>(A.terms.size()),
                            num(action), maslov, num(area)});
        add_warnings(rep, A.warnings);
    }
    rep.summary["systems"] = names;
    rep.summary["levels"] = levels;
    if (c.fiber_dump)
        for (std::size_t a = 0; a < systems.size(); ++a)
            rep.fibers.push_back({"fiber_" + names[a] + ".csv", fiber_csv(trace_fiber(systems[a]))});
    return rep;
}

inline Report run_star_check(const ExperimentConfig& c, int jobs) {
    const auto& r = c.reader;
    const std::string sec = "star-check";
    r.check_keys(sec, {"f", "g", "order", "assoc_degree"});
    PolynomialObservable f, g;
    try {
        f = PolynomialObservable::parse(r.require(sec, "f"));
    } catch (const ParseError& e) {
        r.fail(sec, "f", e.what());
    }
    try {
        g = PolynomialObservable::parse(r.require(sec, "g"));
    } catch (const ParseError& e) {
        r.fail(sec, "g", e.what());
    }
    int order = r.integer(sec, "order", 6);
    if (order < 0 || order > max_star_order) r.fail(sec, "order", "order must lie in [0, " + std::to_string(max_star_order) + "]");
    int deg = r.integer(sec, "assoc_degree", 0);
    if (deg < 0 || deg > 4) r.fail(sec, "assoc_degree", "assoc_degree must lie in [0, 4]");

    auto fg = moyal_product(f, g, order);
    Report rep;
    rep.summary["f"] = f.str();
    rep.summary["g"] = g.str();
    rep.summary["order"] = order;
    rep.summary["product"] = fg.str();
    if (deg > 0) {
        std::vector<PolynomialObservable> mons;
        for (int a = 0; a <= deg; ++a)
            for (int b = 0; a + b <= deg; ++b) mons.push_back(PolynomialObservable::monomial(a, b));
        std::atomic<long> nonzero{0};
        const std::size_t M = mons.size();
        parallel_for(M * M * M, jobs, [&](std::size_t t) {
            if (!associativity_defect(mons[t / (M * M)], mons[(t / M) % M], mons[t % M], order).is_zero()) ++nonzero;
        });
        rep.summary["associativity"] = {{"max_degree", deg}, {"triples", M * M * M}, {"nonzero_defects", nonzero.load()}};
    }
    // Op(f⋆g) against Op(f)Op(g) on the oscillator ground state (πh)^{-1/4} e^{-q²/2h}
    rep.columns = {"h", "op_deviation"};
    std::vector<double> dev(c.hs.size());
    parallel_for(c.hs.size(), jobs, [&](std::size_t i) {
        auto grid = c.grid_at(c.hs[i]);
        Eigen::VectorXcd psi(grid.N);
        for (int a = 0; a < grid.N; ++a)
            psi[a] = std::pow(std::numbers::pi * grid.h, -0.25) * std::exp(-grid.q(a) * grid.q(a) / (2 * grid.h));
        Eigen::VectorXcd lhs = Eigen::VectorXcd::Zero(grid.N);
        double hk = 1.0;
        for (int k = 0; k <= fg.order(); ++k, hk *= grid.h)
            if (!fg[k].is_zero()) lhs += hk * (weyl_operator_of(fg[k], grid) * psi);
        Eigen::VectorXcd rhs = weyl_operator_of(f, grid) * (weyl_operator_of(g, grid) * psi);
        dev[i] = (lhs - rhs).norm() / std::max(rhs.norm(), 1e-300);
    });
    for (std::size_t i = 0; i < c.hs.size(); ++i) rep.rows.push_back({c.hs[i], dev[i]});
    return rep;
}

inline Report run_glue_check(const ExperimentConfig& c, int jobs) {
    const auto& r = c.reader;
    const std::string sec = "glue-check";
    r.check_keys(sec, {"system1", "intermediate", "system2", "b1", "n1", "e1", "b2", "n2", "e2", "b_lo", "b_hi",
                       "scan_points", "first_order"});
    const auto& s1 = c.system(sec, "system1");
    const auto& mid = c.system(sec, "intermediate");
    const auto& s2 = c.system(sec, "system2");
    auto sel1 = parse_selector(r, sec, "1", s1);
    auto sel2 = parse_selector(r, sec, "2", s2);
    ComposeOptions co;
    co.b_lo = r.number(sec, "b_lo");
    co.b_hi = r.number(sec, "b_hi");
    if (!(co.b_lo < co.b_hi)) r.fail(sec, "b_hi", "b_hi must exceed b_lo");
    co.scan_points = r.integer(sec, "scan_points", 64);
    if (co.scan_points < 4) r.fail(sec, "scan_points", "scan_points must be at least 4");
    co.first_order = r.flag(sec, "first_order", false);

    struct Case {
        double h;
        ResolvedLevel l1, l2;
        Composition comp;
        SemiclassicalAmplitude direct;
    };
    std::vector<Case> cases;
    for (double h : c.hs)
        for (auto& a : resolve(s1, sel1, h))
            for (auto& b : resolve(s2, sel2, h)) cases.push_back({h, a, b, {}, {}});
    parallel_for(cases.size(), jobs, [&](std::size_t k) {
        auto& cs = cases[k];
        auto sys1 = s1.at(cs.l1.b), sys2 = s2.at(cs.l2.b);
        Kernel k20 = [&](double b, HessianMethod hm) {
            OverlapOptions oo;
            oo.hessian = hm;
            return overlap(mid.at(b), sys2, c.lambda, c.alpha, cs.h, oo);
        };
        Kernel k01 = [&](double b, HessianMethod hm) {
            OverlapOptions oo;
            oo.hessian = hm;
            return overlap(sys1, mid.at(b), c.lambda, c.alpha, cs.h, oo);
        };
        cs.comp = compose_kernels(k20, k01, cs.h, co);
        cs.direct = overlap(sys1, sys2, c.lambda, c.alpha, cs.h);
    });
    Report rep;
    rep.columns = {"h", "b1", "b2", "composed_re", "composed_im", "direct_re", "direct_im", "modulus_rel_err", "phase_diff", "n_stationary"};
    std::map<double, double> worst;
    for (auto& cs : cases) {
        double dm = std::abs(cs.direct.value);
        double rel = std::abs(std::abs(cs.comp.value) - dm) / dm;
        double ph = std::arg(cs.comp.value / cs.direct.value);
        rep.rows.push_back({cs.h, cs.l1.b, cs.l2.b, cs.comp.value.real(), cs.comp.value.imag(), cs.direct.value.real(),
                            cs.direct.value.imag(), num(rel), num(ph), static_cast<int>(cs.comp.points.size())});
        worst[cs.h] = std::max(worst[cs.h], rel);
        add_warnings(rep, cs.comp.warnings);
        add_warnings(rep, cs.direct.warnings);
    }
    std::vector<std::pair<double, double>> pts;
    for (double h : c.hs) pts.push_back({h, worst[h]});
    rep.summary["system1"] = s1.name;
    rep.summary["intermediate"] = mid.name;
    rep.summary["system2"] = s2.name;
    regress(rep, pts, "max_modulus_rel_err");
    return rep;
}

inline Report run_sweep_scenario(const ExperimentConfig& c, int jobs) {
    const auto& r = c.reader;
    const std::string sec = "sweep";
    r.check_keys(sec, {"system1", "system2", "energies", "fractions", "quantity", "snap"});
    const auto& s1 = c.system(sec, "system1");
    const auto& s2 = c.system(sec, "system2");
    if (!s1.is_position()) r.fail(sec, "system1", "sweeps compare against ψ_n(q): system1 must be of kind position");
    if (s2.H.is_linear()) r.fail(sec, "system2", "system2 must have closed fibers");
    if (c.hs.size() < 3) r.fail("run", "h", "a sweep needs at least 3 h values");
    SweepSpec sp;
    sp.H1 = s1.H;
    sp.H2 = s2.H;
    sp.seed2 = s2.seed;
    sp.hs = c.hs;
    sp.b_min = s2.bs_min;
    sp.b_max = s2.bs_max;
    sp.lambda = c.lambda;
    sp.alpha = c.alpha;
    sp.grid = c.grid;
    sp.retain_below = c.retain_below;
    sp.jobs = jobs;
    if (r.has(sec, "energies")) sp.energies = r.numbers(sec, "energies");
    if (r.has(sec, "fractions")) sp.fractions = r.numbers(sec, "fractions");
    for (double f : sp.fractions)
        if (!(std::abs(f) < 1.0)) r.fail(sec, "fractions", "positions must be interior: |fraction| < 1");
    auto q = r.str(sec, "quantity", "probability");
    if (q == "probability") sp.quantity = SweepSpec::probability;
    else if (q == "amplitude") sp.quantity = SweepSpec::amplitude;
    else if (q == "matrix_element_q") sp.quantity = SweepSpec::matrix_element_q;
    else r.fail(sec, "quantity", "quantity must be probability, amplitude or matrix_element_q");
    sp.snap = r.flag(sec, "snap", true);

    auto res = run_sweep(sp);
    Report rep;
    rep.columns = {"h", "energy", "n", "b2", "fraction", "b1", "semiclassical", "oracle", "abs_err", "rel_err", "n_terms"};
    for (auto& cs : res.cases) {
        rep.rows.push_back({cs.h, cs.energy, cs.n, cs.b2, cs.fraction, cs.b1, cs.semiclassical, cs.oracle, cs.abs_err,
                            cs.rel_err, cs.n_terms});
        add_warnings(rep, cs.warnings);
    }
    auto js = nlohmann::json::array();
    for (std::size_t i = 0; i < res.mean_rel_err.size(); ++i)
        js.push_back({{"h", res.mean_rel_err[i].first}, {"mean_rel_err", res.mean_rel_err[i].second},
                      {"max_rel_err", res.max_rel_err[i].second}});
    rep.summary["system1"] = s1.name;
    rep.summary["system2"] = s2.name;
    rep.summary["quantity"] = q;
    rep.summary["per_h"] = js;
    rep.regression_of = "mean_rel_err";
    rep.fit = res.fit;
    rep.exact = res.exact;
    return rep;
}

} // namespace detail

/// Execute the configured scenario. Everything is computed in memory; nothing is written.
inline Report run(const ExperimentConfig& c, int jobs = 1) {
    Report rep;
    if (c.scenario == "spectrum") rep = detail::run_spectrum(c, jobs);
    else if (c.scenario == "overlap") rep = detail::run_pair(c, jobs, false);
    else if (c.scenario == "probability") rep = detail::run_pair(c, jobs, true);
    else if (c.scenario == "cyclic") rep = detail::run_cyclic(c, jobs);
    else if (c.scenario == "star-check") rep = detail::run_star_check(c, jobs);
    else if (c.scenario == "glue-check") rep = detail::run_glue_check(c, jobs);
    else rep = detail::run_sweep_scenario(c, jobs);
    rep.scenario = c.scenario;
    return rep;
}

/// Write report.json, cases.csv and any fiber dumps; files are staged and renamed into place.
inline void write_outputs(const Report& rep, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<std::pair<std::string, std::string>> files{{"report.json", rep.to_json().dump(2) + "\n"},
                                                           {"cases.csv", rep.to_csv()}};
    files.insert(files.end(), rep.fibers.begin(), rep.fibers.end());
    std::vector<fs::path> staged;
    try {
        for (auto& [name, body] : files) {
            fs::path tmp = dir / ("." + name + ".tmp");
            std::ofstream os(tmp, std::ios::binary);
            os << body;
            if (!os) throw Error("cannot write " + tmp.string());
            staged.push_back(tmp);
        }
    } catch (...) {
        for (auto& p : staged) fs::remove(p);
        throw;
    }
    for (std::size_t k = 0; k < files.size(); ++k) fs::rename(staged[k], dir / files[k].first);
}

} // namespace sclq

#endif

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "sclq/experiment.hpp"

using namespace sclq;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("sclq_test_" + name);
    fs::remove_all(d);
    return d;
}

int cli(const std::string& args, const std::string& env = {}) {
    std::string cmd = env + (env.empty() ? "" : " ") + SCLQ_CLI_PATH + std::string(" ") + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string config(const std::string& name) { return std::string(SCLQ_CONFIG_DIR) + "/" + name; }

int error_line(const std::string& text, const std::string& scenario = "overlap") {
    try {
        auto c = parse_config(ConfigReader(text), scenario);
        run(c);
    } catch (const ConfigError& e) {
        return e.line();
    }
    return -1;
}

} // namespace

TEST(Regression, LinearErrorsGiveUnitSlope) {
    std::vector<std::pair<double, double>> pts;
    for (double h : {0.2, 0.1, 0.05, 0.025}) pts.push_back({h, 3.0 * h});
    auto f = regress_error_slope(pts);
    EXPECT_NEAR(f.slope, 1.0, 1e-12);
    EXPECT_NEAR(f.residual, 0.0, 1e-12);
}

TEST(Regression, QuadraticErrorsGiveSlopeTwo) {
    std::vector<std::pair<double, double>> pts;
    for (double h : {0.3, 0.1, 0.03}) pts.push_back({h, 0.5 * h * h});
    EXPECT_NEAR(regress_error_slope(pts).slope, 2.0, 1e-12);
}

TEST(Regression, PlateauAndShortInputsAreDegenerate) {
    EXPECT_THROW(regress_error_slope({{0.1, 1e-15}, {0.05, 2e-16}, {0.025, 5e-14}}), DegenerateFit);
    EXPECT_THROW(regress_error_slope({{0.1, 0.1}, {0.05, 0.05}}), DegenerateFit);
}

TEST(Config, ReportsLineAndFieldOfErrors) {
    const std::string base = "[run]\nh = 0.1\n[system q]\nkind = position\n[system p]\nkind = momentum\n";
    EXPECT_EQ(error_line(base + "[overlap]\nsystem1 = q\nsystem2 = x\nb1 = 0\nb2 = 0\n"), 9);
    EXPECT_EQ(error_line(base + "[overlap]\nsystem1 = q\nsystem2 = p\nb1 = zero\nb2 = 0\n"), 10);
    EXPECT_EQ(error_line(base + "[overlap]\nsystem1 = q\nsystem2 = p\nb1 = 0\nb2 = 0\ncolour = red\n"), 12);
    EXPECT_EQ(error_line("[run]\nh = 0.1, 0.2\n"), 2);
    EXPECT_EQ(error_line("[run]\nh = 0.1\n[system q\n"), 3);
    EXPECT_EQ(error_line("[run]\nh = 0.1\n[system q]\nkind = spiral\n"), 4);
    try {
        parse_config(ConfigReader("[run]\nh = -1\n"), "spectrum");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "run.h");
        EXPECT_NE(std::string(e.what()).find("config:2 [run.h]"), std::string::npos);
    }
}

TEST(Config, ScenarioMustMatchTheSubcommand) {
    EXPECT_THROW(parse_config(ConfigReader("[run]\nscenario = sweep\nh = 0.1\n"), "spectrum"), ConfigError);
    EXPECT_THROW(parse_config(ConfigReader("[run]\nh = 0.1\n"), "banana"), ConfigError);
}

TEST(Run, OscillatorSpectrumScenario) {
    auto c = parse_config(ConfigReader::from_file(config("spectrum_ho.ini")), "spectrum");
    auto rep = run(c);
    ASSERT_EQ(rep.rows.size(), 31u);
    EXPECT_LE(rep.summary["per_h"][0]["max_deviation"].get<double>(), 1e-9);
    EXPECT_EQ(rep.exit_code(), 0);
}

TEST(Run, PlaneWaveOverlapScenario) {
    auto c = parse_config(ConfigReader::from_file(config("overlap_q_p.ini")), "overlap");
    auto rep = run(c, 2);
    ASSERT_EQ(rep.rows.size(), 3u);
    for (auto& row : rep.rows) {
        double h = row[2].get<double>(), a = row[5].get<double>();
        EXPECT_NEAR(a * a * 2 * M_PI * h, 1.0, 1e-10);
    }
}

TEST(Run, WorkerCountDoesNotChangeResults) {
    auto c = parse_config(ConfigReader::from_file(config("probability_q_ho.ini")), "probability");
    EXPECT_EQ(run(c, 1).to_csv(), run(c, 3).to_csv());
}

TEST(Cli, SpectrumWritesReportAndVersionedCsv) {
    auto out = fresh_dir("spectrum");
    ASSERT_EQ(cli("spectrum --config " + config("spectrum_ho.ini") + " --out " + out.string()), 0);
    auto csv = slurp(out / "cases.csv");
    EXPECT_EQ(csv.rfind("# sclq cases.csv v1", 0), 0u);
    auto j = nlohmann::json::parse(slurp(out / "report.json"));
    EXPECT_EQ(j["scenario"], "spectrum");
    EXPECT_EQ(j["cases"].size(), 31u);
    EXPECT_LE(j["summary"]["per_h"][0]["max_deviation"].get<double>(), 1e-9);
}

TEST(Cli, MalformedConfigFailsWithoutOutput) {
    auto out = fresh_dir("malformed");
    auto bad = fs::temp_directory_path() / "sclq_bad.ini";
    std::ofstream(bad) << "[run]\nh = 0.1\n[overlap]\nsystem1 = nowhere\n";
    EXPECT_EQ(cli("overlap --config " + bad.string() + " --out " + out.string()), 1);
    EXPECT_FALSE(fs::exists(out));
    EXPECT_EQ(cli("overlap --out " + out.string()), 1);  // missing --config
    EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, CausticProximityExitsWithTwo) {
    auto out = fresh_dir("caustic");
    EXPECT_EQ(cli("overlap --config " + config("caustic_warning.ini") + " --out " + out.string()), 2);
    auto j = nlohmann::json::parse(slurp(out / "report.json"));
    EXPECT_FALSE(j["warnings"].empty());
}

TEST(Cli, EnvironmentSetsDefaultOutputDirectory) {
    auto out = fresh_dir("env");
    ASSERT_EQ(cli("overlap --config " + config("overlap_q_p.ini"), "SCLQ_OUT_DIR=" + out.string()), 0);
    EXPECT_TRUE(fs::exists(out / "report.json"));
}

TEST(Cli, ReportsAreBitwiseReproducible) {
    auto a = fresh_dir("repro_a"), b = fresh_dir("repro_b");
    ASSERT_EQ(cli("probability --config " + config("probability_q_ho.ini") + " --out " + a.string()), 0);
    ASSERT_EQ(cli("probability --config " + config("probability_q_ho.ini") + " --out " + b.string() + " --jobs 2"), 0);
    for (auto name : {"report.json", "cases.csv", "fiber_q.csv", "fiber_ho.csv"}) EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
}

TEST(Cli, StarCheckReportsProductInMonomialSyntax) {
    auto out = fresh_dir("star");
    ASSERT_EQ(cli("star-check --config " + config("star_check.ini") + " --out " + out.string()), 0);
    auto j = nlohmann::json::parse(slurp(out / "report.json"));
    EXPECT_EQ(j["summary"]["product"], "(q^2 p^2) + (2 i q p) h + (-1/2) h^2");
    EXPECT_EQ(j["summary"]["associativity"]["nonzero_defects"], 0);
    for (auto& c : j["cases"]) EXPECT_LT(c["op_deviation"].get<double>(), 1e-8);
}

TEST(Cli, CyclicTriangleScenario) {
    auto out = fresh_dir("cyclic");
    ASSERT_EQ(cli("cyclic --config " + config("cyclic_lines.ini") + " --out " + out.string()), 0);
    auto j = nlohmann::json::parse(slurp(out / "report.json"));
    for (auto& c : j["cases"]) EXPECT_NEAR(c["action"].get<double>(), c["area"].get<double>(), 1e-12);
}

TEST(Cli, LinearGlueScenario) {
    auto out = fresh_dir("glue");
    ASSERT_EQ(cli("glue-check --config " + config("glue_linear.ini") + " --out " + out.string()), 0);
    auto j = nlohmann::json::parse(slurp(out / "report.json"));
    for (auto& c : j["cases"]) EXPECT_LT(c["modulus_rel_err"].get<double>(), 1e-10);
}

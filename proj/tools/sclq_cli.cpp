// sclq: configuration-driven semiclassical experiments.
//   sclq <scenario> --config run.ini [--out DIR] [--jobs N]
// Exit status: 0 success, 2 numerical warnings (caustic proximity), 1 error (nothing written).

#include <cstdlib>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "sclq/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"semiclassical overlap experiments"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    int jobs = 1;
    for (const auto& name : sclq::scenario_names()) {
        auto* sub = app.add_subcommand(name, "run the " + name + " scenario");
        sub->add_option("--config", config_path, "INI experiment configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory (default: [run] out, then $SCLQ_OUT_DIR, then ./sclq_out)");
        sub->add_option("--jobs", jobs, "worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    const std::string scenario = app.get_subcommands().front()->get_name();
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    try {
        auto cfg = sclq::parse_config(sclq::ConfigReader::from_file(config_path), scenario);
        std::string dir = out_dir;
        if (dir.empty() && cfg.out_dir) dir = *cfg.out_dir;
        if (dir.empty())
            if (const char* env = std::getenv("SCLQ_OUT_DIR"); env && *env) dir = env;
        if (dir.empty()) dir = "sclq_out";
        auto report = sclq::run(cfg, jobs);
        sclq::write_outputs(report, dir);
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
        std::cout << scenario << ": " << report.rows.size() << " cases -> " << dir << "\n";
        if (report.fit)
            std::cout << "slope of " << report.regression_of << " vs h: " << report.fit->slope
                      << " (residual " << report.fit->residual << ")\n";
        else if (report.exact)
            std::cout << report.regression_of << ": exact (errors at machine precision)\n";
        return report.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

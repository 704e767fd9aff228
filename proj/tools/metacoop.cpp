#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metacoop/harness.hpp"
#include "metacoop/oracles.hpp"

namespace mc = metacoop;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = mc::detail::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int cmd_run(const std::string& path) {
    mc::RunConfig cfg;
    try {
        cfg = mc::load_config(path);
    } catch (const mc::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return mc::kExitConfig;
    }
    const mc::RunOutcome out = mc::run(cfg, std::cerr);
    std::cout << out.dir.string() << '\n';
    return out.exit_code;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& metric, const std::string& out_path) {
    std::vector<mc::fs::path> paths(dirs.begin(), dirs.end());
    const mc::Comparison c = mc::compare(paths, metric);
    const std::string csv = c.csv();
    std::cout << csv;
    const mc::fs::path target = out_path.empty() ? mc::fs::path("compare.csv") : mc::fs::path(out_path);
    std::ofstream os(target);
    if (!os) throw std::runtime_error("cannot write " + target.string());
    os << csv;
    return mc::kExitOk;
}

int cmd_sweep(const std::string& path, const std::string& axis, const std::string& values) {
    mc::ConfigMap base;
    std::vector<mc::SweepRow> rows;
    try {
        base = mc::read_config_map(mc::fs::path(path));
        mc::sweep_key(axis);
    } catch (const mc::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return mc::kExitConfig;
    }
    try {
        rows = mc::sweep(base, axis, split_csv(values), std::cerr);
    } catch (const mc::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return mc::kExitConfig;
    }
    const std::string table = mc::sweep_table_csv(axis, rows);
    std::cout << table;
    const mc::RunConfig base_cfg = mc::resolve_config(base);
    const mc::fs::path dir = base_cfg.run_dir().parent_path();
    std::ofstream(dir / (base_cfg.name + "-sweep-" + mc::sanitize(axis) + ".csv")) << table;
    int code = mc::kExitOk;
    for (const auto& r : rows)
        if (r.outcome.exit_code != mc::kExitOk) code = r.outcome.exit_code;
    return code;
}

int cmd_selftest() {
    const auto groups = mc::run_selftest(&std::cout);
    bool ok = true;
    for (const auto& g : groups) ok = ok && g.passed();
    std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
    return ok ? mc::kExitOk : mc::kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-learning with a co-learner: training, evaluation and diagnostics"};
    app.require_subcommand(1);

    std::string run_config;
    auto* run = app.add_subcommand("run", "Train and evaluate one configuration");
    run->add_option("config", run_config, "Config file")->required()->check(CLI::ExistingFile);

    std::vector<std::string> dirs;
    std::string metric, compare_out;
    auto* compare = app.add_subcommand("compare", "Tabulate one metric across runs");
    compare->add_option("dirs", dirs, "Run directories")->required();
    compare->add_option("--metric", metric, "Metric key from metrics.jsonl or summary.json")->required();
    compare->add_option("--out", compare_out, "CSV path (default ./compare.csv)");

    std::string sweep_config, axis, values;
    auto* sweep = app.add_subcommand("sweep", "One run per value of a single config field");
    sweep->add_option("config", sweep_config, "Base config file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--axis", axis, "Field name, e.g. gamma or method.gamma")->required();
    sweep->add_option("--values", values, "Comma-separated values")->required();

    auto* selftest = app.add_subcommand("selftest", "Finite-difference oracles and invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : mc::kExitConfig;
    }

    try {
        if (*run) return cmd_run(run_config);
        if (*compare) return cmd_compare(dirs, metric, compare_out);
        if (*sweep) return cmd_sweep(sweep_config, axis, values);
        if (*selftest) return cmd_selftest();
    } catch (const mc::ProtocolMismatch& e) {
        std::cerr << "error: " << e.what() << '\n';
        return mc::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return mc::kExitFailure;
    }
    return mc::kExitFailure;
}

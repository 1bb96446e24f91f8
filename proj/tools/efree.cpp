// efree: run a named study and write CSV files plus manifest.json, or
// re-check a manifest written earlier.
//
// Exit status: 0 all checks pass, 1 a check failed, 2 usage error,
// 3 the run or validation could not complete.

#include "runner.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

void print_checks(const nlohmann::json& checks) {
    for (const auto& c : checks)
        std::cout << (c["pass"].get<bool>() ? "PASS  " : "FAIL  ") << c["name"].get<std::string>() << "  ["
                  << c["detail"].get<std::string>() << "]\n";
}

} // namespace

int main(int argc, char** argv) {
    namespace cli = efree::cli;
    CLI::App app{"Equation-free coarse-flow studies"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run an experiment");
    std::string experiment, config_file, out_dir;
    std::vector<std::string> sets;
    std::uint64_t seed = 1;
    run->add_option("experiment", experiment, "experiment name")->required();
    run->add_option("--config", config_file, "key = value file; [section] headers prefix keys");
    run->add_option("--set", sets, "override one parameter, key=value (repeatable)");
    run->add_option("--out", out_dir, "output directory (default: out/<experiment>)");
    run->add_option("--seed", seed, "random seed");

    auto* validate = app.add_subcommand("validate", "re-run the checks of a written manifest");
    std::string manifest;
    validate->add_option("manifest", manifest, "path to manifest.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) {
            // resolve everything before touching the file system
            const auto& exp = cli::find_experiment(experiment);
            cli::Params overrides;
            if (!config_file.empty())
                overrides = cli::parse_config_file(config_file);
            for (const auto& kv : sets) {
                const auto [k, v] = cli::parse_assignment(kv);
                overrides[k] = v;
            }
            cli::resolve_params(exp, overrides);
            const auto dir = out_dir.empty() ? std::filesystem::path("out") / experiment : std::filesystem::path(out_dir);
            const auto result = cli::run_experiment(experiment, overrides, seed, dir);
            print_checks(result.manifest["checks"]);
            std::cout << "wrote " << (dir / "manifest.json").string() << "\n";
            return result.passed ? 0 : 1;
        }
        const auto rep = cli::validate_manifest(manifest);
        for (const auto& p : rep.problems)
            std::cout << "MISSING  " << p << "\n";
        print_checks(cli::checks_json(rep.checks));
        return rep.passed ? 0 : 1;
    } catch (const efree::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

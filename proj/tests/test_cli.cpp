#include "runner.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

namespace cli = efree::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("efree_cli_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_binary(const std::string& args) {
    const std::string cmd = std::string(EFREE_BINARY) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Config, SectionsPrefixKeys) {
    std::istringstream in("# comment\nnote = two words\n[model]\nmu = 5\n nu=0.2 \n\n[mc]\nN = 1000\n");
    const auto p = cli::parse_config(in);
    EXPECT_EQ(p.at("model.mu"), "5");
    EXPECT_EQ(p.at("model.nu"), "0.2");
    EXPECT_EQ(p.at("mc.N"), "1000");
    EXPECT_EQ(p.at("note"), "two words");
}

TEST(Config, DottedKeysWithoutSection) {
    std::istringstream in("model.mu = 4\n");
    EXPECT_EQ(cli::parse_config(in).at("model.mu"), "4");
}

TEST(Config, MalformedLinesAreUsageErrors) {
    std::istringstream no_eq("model.mu 4\n");
    EXPECT_THROW(cli::parse_config(no_eq), efree::UsageError);
    std::istringstream bad_section("[model\nmu = 1\n");
    EXPECT_THROW(cli::parse_config(bad_section), efree::UsageError);
    EXPECT_THROW(cli::parse_assignment("novalue"), efree::UsageError);
}

TEST(Params, UnknownKeyRejected) {
    const auto& e = cli::find_experiment("fp-spectrum");
    EXPECT_THROW(cli::resolve_params(e, {{"model.mew", "1"}}), efree::UsageError);
    EXPECT_EQ(cli::resolve_params(e, {{"model.mu", "5"}}).at("model.mu"), "5");
}

TEST(Params, ReaderRejectsMalformedValues) {
    const cli::ParamReader r({{"a", "1.5x"}, {"b", "2.5"}, {"c", "maybe"}, {"g_min", "0"}, {"g_max", "1"}, {"g_step", "0.25"}});
    EXPECT_THROW(r.num("a"), efree::UsageError);
    EXPECT_THROW(r.integer("b"), efree::UsageError);
    EXPECT_THROW(r.flag("c"), efree::UsageError);
    EXPECT_THROW(r.num("missing"), efree::UsageError);
    const auto g = r.grid("g");
    ASSERT_EQ(g.size(), 5u);
    EXPECT_DOUBLE_EQ(g.back(), 1.0);
}

TEST(Csv, SeventeenSignificantDigitsRoundTrip) {
    const double v = 0.1 + 0.2;
    EXPECT_EQ(std::stod(cli::fmt(v)), v);
    EXPECT_EQ(cli::fmt(v), "0.30000000000000004");
}

TEST(Run, UnknownExperimentWritesNothing) {
    const fs::path out = scratch("unknown");
    EXPECT_THROW(cli::run_experiment("fp-nothing", {}, 1, out), efree::UsageError);
    EXPECT_FALSE(fs::exists(out));
    EXPECT_EQ(run_binary("run fp-nothing --out " + out.string()), 2);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Run, UnknownKeyWritesNothing) {
    const fs::path out = scratch("badkey");
    EXPECT_EQ(run_binary("run fp-spectrum --set model.mew=1 --out " + out.string()), 2);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Run, ManifestHasRequiredKeys) {
    const fs::path out = scratch("manifest");
    const auto res = cli::run_experiment("fp-spectrum", {{"grid.n", "400"}}, 7, out);
    EXPECT_TRUE(res.passed);
    const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
    for (const char* key : {"experiment", "params", "seed", "outputs", "checks", "version", "wall_time_s"})
        EXPECT_TRUE(m.contains(key)) << key;
    EXPECT_EQ(m["experiment"], "fp-spectrum");
    EXPECT_EQ(m["seed"], 7);
    EXPECT_EQ(m["params"]["grid.n"], "400");
    EXPECT_EQ(m["params"]["model.mu"], "6");
    EXPECT_EQ(slurp(out / "eigenvalues.csv").substr(0, 13), "index,lambda\n");
}

TEST(Run, ConfigFileThenSetOverride) {
    const fs::path out = scratch("config");
    fs::create_directories(fs::temp_directory_path());
    const fs::path cfg = fs::temp_directory_path() / "efree_cli_test.cfg";
    std::ofstream(cfg) << "[grid]\nn = 300\nm = 5\n";
    EXPECT_EQ(run_binary("run fp-spectrum --config " + cfg.string() + " --set grid.n=350 --out " + out.string()), 0);
    const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
    EXPECT_EQ(m["params"]["grid.n"], "350");
    EXPECT_EQ(m["params"]["grid.m"], "5");
}

TEST(Run, FailedCheckSetsExitStatus) {
    // a flat potential has no spectral gap of the expected size
    const fs::path out = scratch("failing");
    EXPECT_EQ(run_binary("run fp-spectrum --set model.mu=1 --set grid.n=300 --out " + out.string()), 1);
    EXPECT_TRUE(fs::exists(out / "manifest.json"));
    EXPECT_EQ(run_binary("validate " + (out / "manifest.json").string()), 1);
}

TEST(Validate, PassesOnFreshOutput) {
    const fs::path out = scratch("validate_ok");
    cli::run_experiment("fp-spectrum", {{"grid.n", "400"}}, 1, out);
    const auto rep = cli::validate_manifest(out / "manifest.json");
    EXPECT_TRUE(rep.passed);
    EXPECT_TRUE(rep.problems.empty());
    EXPECT_EQ(rep.checks.size(), 4u);
    EXPECT_EQ(run_binary("validate " + (out / "manifest.json").string()), 0);
}

TEST(Validate, NamesMissingFilesAndColumns) {
    const fs::path out = scratch("validate_missing");
    cli::run_experiment("fp-linear", {{"grid.n", "400"}, {"portrait.samples", "3"}}, 1, out);
    fs::remove(out / "portrait.csv");
    {
        std::ofstream f(out / "linear.csv");
        f << "t_skip,err_norm,n_t,sigma_min\n0,1,1,1\n";
    }
    const auto rep = cli::validate_manifest(out / "manifest.json");
    EXPECT_FALSE(rep.passed);
    auto mentions = [&](const std::string& what) {
        return std::any_of(rep.problems.begin(), rep.problems.end(),
                           [&](const std::string& p) { return p.find(what) != std::string::npos; });
    };
    EXPECT_TRUE(mentions("portrait.csv"));
    EXPECT_TRUE(mentions("r_t"));
    EXPECT_FALSE(mentions("sigma_min"));
}

TEST(Validate, RerunFromManifestReproducesCsv) {
    const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
    const cli::Params over{{"mc.N", "2000"}, {"study.N_list", "100,400"}, {"study.repeats", "5"}, {"mc.threads", "2"}};
    cli::run_experiment("mc-sampling", over, 11, a);
    const auto m = nlohmann::json::parse(slurp(a / "manifest.json"));
    cli::run_experiment(m["experiment"].get<std::string>(), m["params"].get<cli::Params>(), m["seed"].get<std::uint64_t>(), b);
    EXPECT_EQ(slurp(a / "sampling.csv"), slurp(b / "sampling.csv"));
    EXPECT_FALSE(slurp(a / "sampling.csv").empty());
}

TEST(Validate, DifferentSeedChangesNoisyOutput) {
    const fs::path a = scratch("seed_a"), b = scratch("seed_b");
    const cli::Params over{{"study.N_list", "100"}, {"study.repeats", "4"}};
    cli::run_experiment("mc-sampling", over, 1, a);
    cli::run_experiment("mc-sampling", over, 2, b);
    EXPECT_NE(slurp(a / "sampling.csv"), slurp(b / "sampling.csv"));
}

TEST(Binary, NoSubcommandIsUsageError) {
    EXPECT_EQ(run_binary(""), 2);
    EXPECT_EQ(run_binary("validate /nonexistent/manifest.json"), 2);
}

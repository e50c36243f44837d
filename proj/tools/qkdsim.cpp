// qkdsim: run attack scenarios, sweep a link's attack response, summarize runs.

#include "qkdsim/runner.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

namespace {

int cmd_run(const std::string& topology, const std::string& scenario_file, std::uint64_t seed, const std::string& out,
            bool deterministic, bool allow_exhaustion, const std::string& qpm_log) {
    const auto topo = qkdsim::load_topology(topology);
    const auto scenario = qkdsim::load_scenario(scenario_file, &topo);

    qkdsim::RunOptions opt;
    opt.seed = seed;
    opt.out_dir = out;
    opt.deterministic = deterministic;
    opt.allow_exhaustion = allow_exhaustion;
    if (!qpm_log.empty()) opt.qpm_log = qpm_log;

    const auto result = qkdsim::run_scenario(topo, scenario, opt);
    fmt::print("final_path={} episodes={} exhausted={}\n", result.final_path.value_or("none"), result.episodes.size(),
               result.exhausted ? "yes" : "no");
    if (result.exhausted) {
        fmt::print(stderr, "ALARM: every path failed (EXHAUSTED){}\n",
                   allow_exhaustion ? "" : "; rerun with --allow-exhaustion to exit 0");
    }
    return result.exit_code;
}

int cmd_sweep(const std::string& topology, const std::string& link, double from, double to, double step,
              const std::string& out) {
    const auto topo = qkdsim::load_topology(topology);
    const auto rows = qkdsim::sweep_link(topo, link, from, to, step);
    std::filesystem::create_directories(out);
    qkdsim::write_sweep_csv(std::filesystem::path(out) / "sweep.csv", rows);
    fmt::print("{} rows written to {}\n", rows.size(), (std::filesystem::path(out) / "sweep.csv").string());
    return qkdsim::kExitOk;
}

int cmd_summarize(const std::string& out, const std::string& thresholds_file) {
    std::optional<qkdsim::json> thresholds;
    if (!thresholds_file.empty()) thresholds = qkdsim::load_json_file(thresholds_file);
    const auto summary = qkdsim::summarize(out, thresholds);
    qkdsim::detail::write_text(std::filesystem::path(out) / "summary.txt", summary.text);
    fmt::print("{}", summary.text);
    return summary.failures == 0 ? qkdsim::kExitOk : qkdsim::kExitThresholdFail;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"QKD DDoS mitigation testbed simulator"};
    app.require_subcommand(1);

    std::string topology, scenario, out, qpm_log, link, thresholds;
    std::uint64_t seed = 42;
    bool deterministic = false, allow_exhaustion = false;
    double from = 0, to = 0, step = 0;

    auto* run = app.add_subcommand("run", "simulate a scenario end to end");
    run->add_option("--topology", topology, "topology JSON")->required()->check(CLI::ExistingFile);
    run->add_option("--scenario", scenario, "scenario JSON")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "RNG seed")->required();
    run->add_option("--out", out, "output directory")->required();
    run->add_flag("--deterministic", deterministic, "omit the wall-clock timestamp from summary.txt");
    run->add_flag("--allow-exhaustion", allow_exhaustion, "exit 0 even when every path failed");
    run->add_option("--qpm-log", qpm_log, "QPM event log path (default OUT/qpm_log.ndjson)");

    auto* sweep = app.add_subcommand("sweep", "evaluate one link's model over an attack power grid");
    sweep->add_option("--topology", topology, "topology JSON")->required()->check(CLI::ExistingFile);
    sweep->add_option("--link", link, "link id")->required();
    sweep->add_option("--from", from, "first power (dBm)")->required();
    sweep->add_option("--to", to, "last power (dBm)")->required();
    sweep->add_option("--step", step, "grid step (dB)")->required();
    sweep->add_option("--out", out, "output directory")->required();

    auto* summ = app.add_subcommand("summarize", "steady-state and episode statistics of a run");
    summ->add_option("--out", out, "run output directory")->required()->check(CLI::ExistingDirectory);
    summ->add_option("--thresholds", thresholds, "acceptance thresholds JSON")->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : qkdsim::kExitConfigError;
    }

    try {
        if (*run) return cmd_run(topology, scenario, seed, out, deterministic, allow_exhaustion, qpm_log);
        if (*sweep) return cmd_sweep(topology, link, from, to, step, out);
        return cmd_summarize(out, thresholds);
    } catch (const qkdsim::ParseError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
    } catch (const qkdsim::ValidationError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return qkdsim::kExitConfigError;
}

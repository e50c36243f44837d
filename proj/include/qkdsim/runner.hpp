#pragma once

// Scenario runner, attack-power sweep, and run summarizer.

#include "qkdsim/clock.hpp"
#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/northbound.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/qkd_service.hpp"
#include "qkdsim/qkd_unit.hpp"
#include "qkdsim/qpm.hpp"
#include "qkdsim/scenario.hpp"
#include "qkdsim/sdn_controller.hpp"
#include "qkdsim/topology.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace qkdsim {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitThresholdFail = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitExhausted = 3;

inline constexpr const char* kMetricsHeader =
    "t,active_path,skr_bps,qber,attack_link1_dbm,attack_link2_dbm,attack_link3_dbm,qpm_state";
inline constexpr const char* kTimingHeader = "episode,detect_s,controller_s,reinit_s,total_s";
inline constexpr const char* kMetricsAttackLinks[] = {"link1", "link2", "link3"};

struct RunOptions {
    std::uint64_t seed = 42;
    // Empty: nothing is written to disk.
    fs::path out_dir;
    bool deterministic = false;
    bool allow_exhaustion = false;
    std::optional<fs::path> qpm_log;
    QpmConfig qpm;
    UnitConfig unit;
    double switch_latency_s = 0.001;
    double northbound_latency_s = 0.005;
};

struct MetricsRow {
    double t = 0.0;
    std::string active_path;
    double skr_bps = 0.0;
    double qber = 0.0;
    std::map<std::string, double> attack_dbm;
    std::string qpm_state;
};

struct Episode {
    int index = 0;
    std::string from_path;
    std::string to_path;
    double onset = 0.0;
    double detected_at = 0.0;
    double reconfig_done_at = 0.0;
    double reinit_done_at = 0.0;

    double detect_s() const { return detected_at - onset; }
    double controller_s() const { return reconfig_done_at - detected_at; }
    double reinit_s() const { return reinit_done_at - reconfig_done_at; }
    double total_s() const { return detect_s() + controller_s() + reinit_s(); }
};

struct RunResult {
    int exit_code = kExitOk;
    bool exhausted = false;
    std::optional<std::string> final_path;
    std::vector<MitigationEvent> events;
    std::vector<Episode> episodes;
    std::vector<MetricsRow> metrics;
    std::vector<ordered_json> controller_log;
    double first_init_s = 0.0;
    std::size_t qpm_polls = 0;
    std::size_t polls_after_exhaustion = 0;
};

namespace detail {

    inline std::string format_dbm(double dbm) { return dbm == kAttackOff ? "off" : fmt::format("{:.2f}", dbm); }

    inline std::string metrics_line(const MetricsRow& r) {
        std::string line = fmt::format("{:.3f},{},{:.3f},{:.6f}", r.t, r.active_path, r.skr_bps, r.qber);
        for (const char* link : kMetricsAttackLinks) {
            auto it = r.attack_dbm.find(link);
            line += "," + format_dbm(it == r.attack_dbm.end() ? kAttackOff : it->second);
        }
        return line + "," + r.qpm_state;
    }

    inline std::string timing_line(const Episode& e) {
        return fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f}", e.index, e.detect_s(), e.controller_s(), e.reinit_s(),
                           e.total_s());
    }

    inline void write_text(const fs::path& file, const std::string& text) {
        std::ofstream out(file, std::ios::binary | std::ios::trunc);
        if (!out) throw TransportError(file.string() + ": cannot open for writing");
        out << text;
        if (!out) throw TransportError(file.string() + ": write failed");
    }

    inline double parse_detail_number(const std::string& detail, const std::string& key) {
        const auto pos = detail.find(key + "=");
        if (pos == std::string::npos) return std::numeric_limits<double>::quiet_NaN();
        return std::stod(detail.substr(pos + key.size() + 1));
    }

    // Latest attack onset on `link` at or before `t`, but not before `not_before`.
    inline double onset_for(const std::map<std::string, std::vector<double>>& onsets, const std::string& link,
                            double t, double not_before) {
        double best = not_before;
        if (auto it = onsets.find(link); it != onsets.end()) {
            for (double o : it->second) {
                if (o <= t) best = std::max(best, o);
            }
        }
        return best;
    }

} // namespace detail

/// Pairs every detection with the reconfiguration and re-initialization that
/// resolved it. Detections that end in exhaustion have no episode.
inline std::vector<Episode> extract_episodes(const std::vector<MitigationEvent>& events, const Topology& topo,
                                             const std::map<std::string, std::vector<double>>& onsets) {
    std::vector<Episode> out;
    std::map<std::string, double> activated;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const MitigationEvent& e = events[i];
        if (e.kind == EventKind::ReconfigDone && e.detail == "outcome=SUCCESS") activated[e.path] = e.t;
        if (e.kind != EventKind::Detected) continue;

        Episode ep;
        ep.from_path = e.path;
        ep.detected_at = e.t;
        const PathSpec* lost = topo.find_path(e.path);
        const double active_since = activated.count(e.path) ? activated[e.path] : 0.0;
        ep.onset = detail::onset_for(onsets, lost ? lost->link_id : "", e.t, active_since);

        bool done = false;
        for (std::size_t k = i + 1; k < events.size() && !done; ++k) {
            const MitigationEvent& f = events[k];
            if (f.kind == EventKind::Detected || f.kind == EventKind::Exhausted) break;
            if (f.kind == EventKind::ReconfigDone && f.detail == "outcome=SUCCESS") {
                ep.to_path = f.path;
                ep.reconfig_done_at = f.t;
            }
            if (f.kind == EventKind::ReinitDone && f.path == ep.to_path) {
                ep.reinit_done_at = f.t;
                done = true;
            }
        }
        if (!done) continue;
        ep.index = static_cast<int>(out.size()) + 1;
        out.push_back(ep);
    }
    return out;
}

// ---- sweep -------------------------------------------------------------------

struct SweepRow {
    double power_dbm;
    double skr_bps;
    double qber;
};

inline std::vector<SweepRow> sweep_channel(const ChannelParams& p, double from_dbm, double to_dbm, double step_db) {
    if (!(step_db > 0.0)) throw ValidationError("sweep: step must be positive");
    if (!(to_dbm >= from_dbm)) throw ValidationError("sweep: --to must not be below --from");
    std::vector<SweepRow> rows;
    for (long k = 0;; ++k) {
        const double power = from_dbm + static_cast<double>(k) * step_db;
        if (power > to_dbm + 1e-9) break;
        rows.push_back({power, skr(p, power), qber(p, power)});
    }
    return rows;
}

inline std::vector<SweepRow> sweep_link(const Topology& topo, const std::string& link, double from_dbm, double to_dbm,
                                        double step_db) {
    const LinkSpec* l = topo.find_link(link);
    if (l == nullptr) throw ValidationError("sweep: unknown link '" + link + "'");
    return sweep_channel(l->channel, from_dbm, to_dbm, step_db);
}

inline void write_sweep_csv(const fs::path& file, const std::vector<SweepRow>& rows) {
    std::string text = "power_dbm,skr_bps,qber\n";
    for (const auto& r : rows) text += fmt::format("{:.2f},{:.6f},{:.8f}\n", r.power_dbm, r.skr_bps, r.qber);
    detail::write_text(file, text);
}

// ---- summarize -----------------------------------------------------------------

struct WindowStats {
    std::string path;
    double start = 0.0;
    double end = 0.0;
    std::size_t samples = 0;
    double skr_mean = 0.0;
    double skr_std = 0.0;
    double qber_mean = 0.0;
    double qber_std = 0.0;

    bool skipped() const { return samples == 0; }
    double duration() const { return end - start; }
};

struct Summary {
    std::vector<WindowStats> windows;
    std::vector<Episode> episodes;
    double first_init_s = 0.0;
    std::vector<std::string> checks;
    int failures = 0;
    std::string text;
};

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ParseError(file.string() + ": cannot open file");
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw ParseError(file.string() + ":1: unexpected header");
    }
    std::vector<MetricsRow> rows;
    for (int lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 8) throw ParseError(fmt::format("{}:{}: expected 8 fields, got {}", file.string(), lineno, f.size()));
        try {
            MetricsRow r;
            r.t = std::stod(f[0]);
            r.active_path = f[1];
            r.skr_bps = std::stod(f[2]);
            r.qber = std::stod(f[3]);
            for (int k = 0; k < 3; ++k) {
                r.attack_dbm[kMetricsAttackLinks[k]] = f[4 + k] == "off" ? kAttackOff : std::stod(f[4 + k]);
            }
            r.qpm_state = f[7];
            rows.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw ParseError(fmt::format("{}:{}: bad number", file.string(), lineno));
        }
    }
    return rows;
}

inline WindowStats window_stats(const std::vector<MetricsRow>& rows, const std::string& path, double start,
                                double end, bool end_inclusive) {
    WindowStats w{path, start, end};
    std::vector<double> skr, q;
    for (const auto& r : rows) {
        if (r.active_path != path || r.t < start) continue;
        if (r.t > end || (!end_inclusive && r.t >= end)) continue;
        skr.push_back(r.skr_bps);
        q.push_back(r.qber);
    }
    w.samples = skr.size();
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
        if (v.empty()) return;
        double s = 0.0;
        for (double x : v) s += x;
        mean = s / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    stats(skr, w.skr_mean, w.skr_std);
    stats(q, w.qber_mean, w.qber_std);
    return w;
}

/// Reads a run directory and evaluates the optional thresholds document.
inline Summary summarize(const fs::path& out_dir, const std::optional<json>& thresholds = std::nullopt) {
    const json info = load_json_file(out_dir / "run_info.json");
    const auto rows = read_metrics_csv(out_dir / "metrics.csv");
    const double duration = detail::require<double>(info, "duration_s", "run_info");

    Summary s;
    s.first_init_s = detail::require<double>(info, "first_init_s", "run_info");
    for (const auto& w : detail::require<json>(info, "windows", "run_info")) {
        const double end = w.at("end").get<double>();
        s.windows.push_back(window_stats(rows, w.at("path").get<std::string>(), w.at("start").get<double>(), end,
                                         end >= duration));
    }
    for (const auto& e : detail::require<json>(info, "episodes", "run_info")) {
        Episode ep;
        ep.index = e.at("episode").get<int>();
        ep.from_path = e.at("from").get<std::string>();
        ep.to_path = e.at("to").get<std::string>();
        ep.onset = e.at("onset").get<double>();
        ep.detected_at = e.at("detected").get<double>();
        ep.reconfig_done_at = e.at("reconfig_done").get<double>();
        ep.reinit_done_at = e.at("reinit_done").get<double>();
        s.episodes.push_back(ep);
    }

    std::string& out = s.text;
    if (!info.value("deterministic", false)) {
        out += fmt::format("# generated {:%Y-%m-%dT%H:%M:%S}\n", fmt::localtime(std::time(nullptr)));
    }
    out += fmt::format("run: duration_s={:.0f} seed={} final_path={} exhausted={}\n", duration,
                       info.value("seed", std::uint64_t{0}),
                       info.at("final_path").is_null() ? "none" : info.at("final_path").get<std::string>(),
                       info.value("exhausted", false) ? "yes" : "no");
    out += fmt::format("first_init_s={:.6f}\n", s.first_init_s);
    for (std::size_t i = 0; i < s.windows.size(); ++i) {
        const auto& w = s.windows[i];
        if (w.skipped()) {
            out += fmt::format("window {} path={} start={:.3f} end={:.3f} SKIPPED\n", i + 1, w.path, w.start, w.end);
        } else {
            out += fmt::format("window {} path={} start={:.3f} end={:.3f} samples={} skr_mean={:.3f} skr_std={:.3f} "
                               "qber_mean={:.6f} qber_std={:.6f}\n",
                               i + 1, w.path, w.start, w.end, w.samples, w.skr_mean, w.skr_std, w.qber_mean,
                               w.qber_std);
        }
    }
    for (const auto& e : s.episodes) {
        out += fmt::format("episode {} {}->{} detect_s={:.6f} controller_s={:.6f} reinit_s={:.6f} total_s={:.6f} "
                           "controller/reinit={:.6g}\n",
                           e.index, e.from_path, e.to_path, e.detect_s(), e.controller_s(), e.reinit_s(), e.total_s(),
                           e.controller_s() / e.reinit_s());
    }

    if (!thresholds) return s;

    auto check = [&s](bool ok, const std::string& what) {
        s.checks.push_back(fmt::format("{} {}", ok ? "PASS" : "FAIL", what));
        if (!ok) ++s.failures;
    };
    for (const auto& band : thresholds->value("steady_state", json::array())) {
        const auto path = detail::require<std::string>(band, "path", "thresholds.steady_state");
        const auto skr_band = detail::require<std::vector<double>>(band, "skr_bps", "thresholds.steady_state");
        const auto qber_band = detail::require<std::vector<double>>(band, "qber", "thresholds.steady_state");
        const double min_duration = detail::optional_field<double>(band, "min_duration_s", 0.0, "thresholds");
        if (skr_band.size() != 2 || qber_band.size() != 2) {
            throw ValidationError("thresholds.steady_state: bands are [lo, hi] pairs");
        }
        bool any = false;
        for (std::size_t i = 0; i < s.windows.size(); ++i) {
            const auto& w = s.windows[i];
            if (w.path != path || w.skipped() || w.duration() < min_duration) continue;
            any = true;
            check(w.skr_mean >= skr_band[0] && w.skr_mean <= skr_band[1],
                  fmt::format("steady_state window {} path={} skr_mean={:.3f} in [{}, {}]", i + 1, path, w.skr_mean,
                              skr_band[0], skr_band[1]));
            check(w.qber_mean >= qber_band[0] && w.qber_mean <= qber_band[1],
                  fmt::format("steady_state window {} path={} qber_mean={:.6f} in [{}, {}]", i + 1, path,
                              w.qber_mean, qber_band[0], qber_band[1]));
        }
        if (!any) check(false, fmt::format("steady_state path={} no window of at least {:.0f} s", path, min_duration));
    }
    if (thresholds->contains("max_controller_reinit_ratio")) {
        const double limit = thresholds->at("max_controller_reinit_ratio").get<double>();
        for (const auto& e : s.episodes) {
            const double ratio = e.controller_s() / e.reinit_s();
            check(ratio < limit, fmt::format("episode {} controller/reinit={:.6g} < {}", e.index, ratio, limit));
        }
    }
    if (thresholds->contains("reinit_parity_rel_tol")) {
        const double tol = thresholds->at("reinit_parity_rel_tol").get<double>();
        for (const auto& e : s.episodes) {
            const double rel = std::abs(e.reinit_s() - s.first_init_s) / s.first_init_s;
            check(rel <= tol, fmt::format("episode {} reinit_s={:.6f} vs first_init_s={:.6f} rel={:.4f} <= {}",
                                          e.index, e.reinit_s(), s.first_init_s, rel, tol));
        }
    }
    if (thresholds->contains("min_episodes")) {
        const auto need = thresholds->at("min_episodes").get<std::size_t>();
        check(s.episodes.size() >= need, fmt::format("episodes={} >= {}", s.episodes.size(), need));
    }
    for (const auto& c : s.checks) out += c + "\n";
    return s;
}

// ---- run ---------------------------------------------------------------------

inline RunResult run_scenario(const Topology& topo, const Scenario& scenario, const RunOptions& opt) {
    const AttackSchedule attacks(scenario.events);
    SimClock clock;
    World world(topo, opt.unit, opt.seed, attacks);
    clock.set_advance_hook([&world](double t) { world.advance_to(t); });

    RunResult result;

    Controller controller(topo, clock);
    controller.set_log_sink([&result](const ordered_json& rec) { result.controller_log.push_back(rec); });
    for (const auto& s : topo.switches) {
        controller.attach(s.id, std::make_shared<LocalSwitchChannel>(world.agent(s.id), clock, opt.switch_latency_s));
    }
    NorthboundApi api(controller);
    LocalControllerClient controller_client(api, clock, opt.northbound_latency_s);
    LocalQkdClient qkd_client([&world](const json& req) { return world.handle(req); });

    Qpm qpm(opt.qpm, topo, controller_client, qkd_client, clock);
    std::optional<std::size_t> polls_at_exhaustion;
    qpm.set_event_sink([&](const MitigationEvent& e) {
        if (e.kind == EventKind::Exhausted && !polls_at_exhaustion) polls_at_exhaustion = qpm.polls();
    });

    world.set_sampler(opt.qpm.poll_period_s, [&](double ts) {
        if (ts > scenario.duration_s + kTimeEpsilon) return;
        MetricsRow row;
        row.t = ts;
        row.active_path = world.active_path().value_or("none");
        const MonitorReading r = world.unit().read_monitor(ts);
        row.skr_bps = r.skr_bps;
        row.qber = r.qber;
        for (const auto& l : topo.links) row.attack_dbm[l.id] = attacks.power_at(l.id, ts);
        row.qpm_state = std::string(Qpm::to_string(qpm.phase()));
        result.metrics.push_back(std::move(row));
    });

    qpm.establish_initial();
    qpm.run_loop(scenario.duration_s);
    if (clock.now() < scenario.duration_s) clock.sleep_until(scenario.duration_s);

    result.events = qpm.events();
    result.qpm_polls = qpm.polls();
    result.final_path = world.active_path();
    result.exhausted = qpm.phase() == Qpm::Phase::Alarm;
    if (polls_at_exhaustion) result.polls_after_exhaustion = result.qpm_polls - *polls_at_exhaustion;
    // The first REINIT_DONE belongs to the initial bring-up.
    for (const auto& e : result.events) {
        if (e.kind == EventKind::ReinitDone) {
            result.first_init_s = detail::parse_detail_number(e.detail, "init_s");
            break;
        }
    }
    result.episodes = extract_episodes(result.events, topo, attacks.onsets());
    result.exit_code = result.exhausted && !opt.allow_exhaustion ? kExitExhausted : kExitOk;

    if (opt.out_dir.empty()) return result;

    fs::create_directories(opt.out_dir);
    std::string metrics = std::string(kMetricsHeader) + "\n";
    for (const auto& r : result.metrics) metrics += detail::metrics_line(r) + "\n";
    detail::write_text(opt.out_dir / "metrics.csv", metrics);

    std::string timing = std::string(kTimingHeader) + "\n";
    for (const auto& e : result.episodes) timing += detail::timing_line(e) + "\n";
    detail::write_text(opt.out_dir / "timing.csv", timing);

    std::string qpm_log;
    for (const auto& e : result.events) qpm_log += to_json_value(e).dump() + "\n";
    detail::write_text(opt.qpm_log.value_or(opt.out_dir / "qpm_log.ndjson"), qpm_log);

    std::string ctl_log;
    for (const auto& rec : result.controller_log) ctl_log += rec.dump() + "\n";
    detail::write_text(opt.out_dir / "controller_log.ndjson", ctl_log);

    ordered_json onsets_json = ordered_json::object();
    for (const auto& [link, ts] : attacks.onsets()) onsets_json[link] = ts;
    ordered_json episodes_json = ordered_json::array();
    for (const auto& e : result.episodes) {
        episodes_json.push_back({{"episode", e.index},
                                 {"from", e.from_path},
                                 {"to", e.to_path},
                                 {"onset", e.onset},
                                 {"detected", e.detected_at},
                                 {"reconfig_done", e.reconfig_done_at},
                                 {"reinit_done", e.reinit_done_at}});
    }
    ordered_json windows_json = ordered_json::array();
    const double no_more = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < result.events.size(); ++i) {
        const auto& e = result.events[i];
        if (e.kind != EventKind::ReconfigDone || e.detail != "outcome=SUCCESS") continue;
        double end = scenario.duration_s;
        for (std::size_t k = i + 1; k < result.events.size(); ++k) {
            if (result.events[k].kind == EventKind::Detected) {
                end = std::min(end, result.events[k].t);
                break;
            }
        }
        const PathSpec* p = topo.find_path(e.path);
        double next_onset = no_more;
        if (auto it = attacks.onsets().find(p->link_id); it != attacks.onsets().end()) {
            for (double o : it->second) {
                if (o > e.t) next_onset = std::min(next_onset, o);
            }
        }
        end = std::min(end, next_onset);
        windows_json.push_back({{"path", e.path}, {"start", e.t + opt.qpm.init_grace_s}, {"end", end}});
    }

    ordered_json info = {{"seed", opt.seed},
                         {"deterministic", opt.deterministic},
                         {"duration_s", scenario.duration_s},
                         {"poll_period_s", opt.qpm.poll_period_s},
                         {"init_grace_s", opt.qpm.init_grace_s},
                         {"first_init_s", result.first_init_s},
                         {"final_path", result.final_path ? ordered_json(*result.final_path) : ordered_json(nullptr)},
                         {"exhausted", result.exhausted},
                         {"qpm_polls", result.qpm_polls},
                         {"polls_after_exhaustion", result.polls_after_exhaustion},
                         {"onsets", onsets_json},
                         {"episodes", episodes_json},
                         {"windows", windows_json}};
    detail::write_text(opt.out_dir / "run_info.json", info.dump(2) + "\n");
    detail::write_text(opt.out_dir / "summary.txt", summarize(opt.out_dir).text);
    return result;
}

} // namespace qkdsim

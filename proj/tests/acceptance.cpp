// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "qkdsim/runner.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace qkdsim;
namespace fs = std::filesystem;

namespace {

const fs::path kData = QKDSIM_DATA_DIR;
const fs::path kScratch = fs::temp_directory_path() / "qkdsim_acceptance";

struct Verdict {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string& why) {
        if (!cond && ok) {
            ok = false;
            detail = why;
        }
    }
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int failures = 0;

void report(int n, const std::string& name, const Verdict& v, const std::string& info) {
    if (!v.ok) ++failures;
    fmt::print("AC-{} {} {}: {}\n", n, v.ok ? "PASS" : "FAIL", name, v.ok ? info : v.detail);
}

Topology reference() { return load_topology(kData / "topology" / "reference.json"); }

fs::path fresh_dir(const std::string& name) {
    const auto d = kScratch / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<json> read_ndjson(const fs::path& p) {
    std::vector<json> out;
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

struct TimingRow {
    int episode;
    double detect_s, controller_s, reinit_s, total_s;
};

std::vector<TimingRow> read_timing(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<TimingRow> rows;
    while (std::getline(in, line)) {
        TimingRow r{};
        char c;
        std::istringstream ss(line);
        ss >> r.episode >> c >> r.detect_s >> c >> r.controller_s >> c >> r.reinit_s >> c >> r.total_s;
        rows.push_back(r);
    }
    return rows;
}

const WindowStats* longest_window(const Summary& s, const std::string& path) {
    const WindowStats* best = nullptr;
    for (const auto& w : s.windows) {
        if (w.path == path && !w.skipped() && (best == nullptr || w.duration() > best->duration())) best = &w;
    }
    return best;
}

RunResult run_to(const Topology& topo, const std::string& scenario, const fs::path& out, std::uint64_t seed = 42) {
    RunOptions opt;
    opt.seed = seed;
    opt.deterministic = true;
    opt.out_dir = out;
    return run_scenario(topo, load_scenario(kData / "scenarios" / scenario, &topo), opt);
}

// -- channel anchors ------------------------------------------------------

void ac1(const Topology& topo) {
    Stopwatch sw;
    Verdict v;
    const auto rows = sweep_link(topo, "link1", -80.0, -68.0, 0.1);
    double lo_skr = 1e300, hi_skr = 0.0, lo_q = 1.0, hi_q = 0.0;
    for (const auto& r : rows) {
        v.require(r.skr_bps >= 700.0 && r.skr_bps <= 800.0, fmt::format("SKR {:.3f} at {:.1f} dBm", r.skr_bps, r.power_dbm));
        v.require(r.qber >= 0.025 && r.qber <= 0.03, fmt::format("QBER {:.5f} at {:.1f} dBm", r.qber, r.power_dbm));
        lo_skr = std::min(lo_skr, r.skr_bps);
        hi_skr = std::max(hi_skr, r.skr_bps);
        lo_q = std::min(lo_q, r.qber);
        hi_q = std::max(hi_q, r.qber);
    }
    const double t = sw.seconds();
    v.require(t < 1.0, fmt::format("took {:.3f} s", t));
    report(1, "link1 baseline band", v,
           fmt::format("{} points, SKR [{:.1f}, {:.1f}] b/s, QBER [{:.4f}, {:.4f}], {:.3f} s", rows.size(), lo_skr,
                       hi_skr, lo_q, hi_q, t));
}

void ac2(const Topology& topo) {
    Stopwatch sw;
    Verdict v;
    const auto rows = sweep_link(topo, "link1", -68.0, -30.0, 0.5);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        v.require(rows[i].skr_bps <= rows[i - 1].skr_bps,
                  fmt::format("SKR rises at {:.1f} dBm", rows[i].power_dbm));
        v.require(rows[i].qber >= rows[i - 1].qber, fmt::format("QBER falls at {:.1f} dBm", rows[i].power_dbm));
    }
    const auto& p = topo.find_link("link1")->channel;
    v.require(skr(p, -58.0) == 0.0, fmt::format("SKR at -58 dBm is {}", skr(p, -58.0)));
    const double t = sw.seconds();
    v.require(t < 1.0, fmt::format("took {:.3f} s", t));
    report(2, "link1 degradation", v,
           fmt::format("{} points monotone, SKR(-58 dBm)=0, SKR(-60 dBm)={:.1f}, {:.3f} s", rows.size(), skr(p, -60.0),
                       t));
}

void ac3(const Topology& topo) {
    Stopwatch sw;
    Verdict v;
    const auto& p = topo.find_link("link2")->channel;
    const double base = skr(p, kAttackOff);
    double worst = 0.0;
    for (const auto& r : sweep_link(topo, "link2", -60.0, -17.0, 0.1)) {
        if (r.power_dbm >= -17.0) break;
        worst = std::max(worst, std::abs(r.skr_bps - base) / base);
    }
    v.require(worst < 0.01, fmt::format("relative SKR change {:.4f} below -17 dBm", worst));
    for (const auto& r : sweep_link(topo, "link2", -9.0, 20.0, 0.1)) {
        v.require(r.skr_bps == 0.0, fmt::format("SKR {} at {:.1f} dBm", r.skr_bps, r.power_dbm));
    }
    const double t = sw.seconds();
    v.require(t < 1.0, fmt::format("took {:.3f} s", t));
    report(3, "link2 anchors", v, fmt::format("max |dSKR|/SKR={:.5f} below -17 dBm, zero from -9 dBm, {:.3f} s", worst, t));
}

// -- end-to-end mitigation ------------------------------------------------

struct Mitigation {
    Summary summary;
    fs::path dir;
    double wall_s = 0.0;
};

void ac4_ac5(const Topology& topo, Mitigation& m) {
    Stopwatch sw;
    m.dir = fresh_dir("attack-link1");
    const auto r = run_to(topo, "attack-link1.json", m.dir);
    m.summary = summarize(m.dir);
    m.wall_s = sw.seconds();

    Verdict v;
    std::vector<std::string> kinds;
    for (const auto& e : r.events) kinds.emplace_back(to_string(e.kind));
    const std::vector<std::string> expected{"RECONFIG_SENT", "RECONFIG_DONE", "REINIT_DONE", "DETECTED",
                                            "RECONFIG_SENT", "RECONFIG_DONE", "REINIT_DONE"};
    v.require(kinds == expected, "unexpected event sequence");
    v.require(r.final_path == "link2", "final path is " + r.final_path.value_or("none"));
    const auto* w = longest_window(m.summary, "link2");
    v.require(w != nullptr, "no link2 window");
    if (w != nullptr) {
        v.require(w->duration() >= 10800.0, fmt::format("link2 window only {:.0f} s", w->duration()));
        v.require(std::abs(w->skr_mean - 950.0) <= 95.0, fmt::format("mean SKR {:.2f}", w->skr_mean));
        v.require(std::abs(w->qber_mean - 0.02) <= 0.005, fmt::format("mean QBER {:.5f}", w->qber_mean));
    }
    v.require(m.wall_s < 5.0, fmt::format("took {:.3f} s", m.wall_s));
    report(4, "link1 to link2 mitigation", v,
           w ? fmt::format("final link2, window {:.0f} s, SKR {:.2f} b/s, QBER {:.5f}, {:.3f} s", w->duration(),
                           w->skr_mean, w->qber_mean, m.wall_s)
             : "");

    Stopwatch sw2;
    const auto topo2 = load_topology(kData / "topology" / "reference-link2-first.json");
    const auto ref_dir = fresh_dir("baseline-link2");
    run_to(topo2, "baseline.json", ref_dir);
    const auto ref = summarize(ref_dir);
    const double wall = m.wall_s + sw2.seconds();
    Verdict v5;
    const auto* rw = longest_window(ref, "link2");
    v5.require(w != nullptr && rw != nullptr, "missing link2 window");
    double d_skr = 1.0, d_q = 1.0;
    if (w != nullptr && rw != nullptr) {
        d_skr = std::abs(w->skr_mean - rw->skr_mean) / rw->skr_mean;
        d_q = std::abs(w->qber_mean - rw->qber_mean) / rw->qber_mean;
        v5.require(d_skr < 0.05, fmt::format("SKR differs by {:.4f}", d_skr));
        v5.require(d_q < 0.05, fmt::format("QBER differs by {:.4f}", d_q));
    }
    v5.require(wall < 10.0, fmt::format("took {:.3f} s", wall));
    report(5, "switch transparency", v5,
           rw ? fmt::format("reference SKR {:.2f} QBER {:.5f}, rel diff {:.4f} / {:.4f}, {:.3f} s", rw->skr_mean,
                            rw->qber_mean, d_skr, d_q, wall)
              : "");
}

void ac6_ac7(const fs::path& two_episode_dir, const fs::path& one_episode_dir) {
    Verdict v6, v7;
    double worst_ratio = 0.0, worst_parity = 0.0;
    int episodes = 0;
    for (const auto& dir : {one_episode_dir, two_episode_dir}) {
        const auto rows = read_timing(dir / "timing.csv");
        const double first = load_json_file(dir / "run_info.json").at("first_init_s").get<double>();
        v6.require(!rows.empty(), dir.filename().string() + ": no episodes");
        for (const auto& r : rows) {
            ++episodes;
            const double ratio = r.controller_s / r.reinit_s;
            const double parity = std::abs(r.reinit_s - first) / first;
            worst_ratio = std::max(worst_ratio, ratio);
            worst_parity = std::max(worst_parity, parity);
            v6.require(ratio < 0.01, fmt::format("episode {} ratio {:.5f}", r.episode, ratio));
            v7.require(parity <= 0.10, fmt::format("episode {} reinit {:.3f} s vs first {:.3f} s", r.episode,
                                                   r.reinit_s, first));
        }
    }
    report(6, "controller negligibility", v6, fmt::format("{} episodes, max controller/reinit {:.6f}", episodes, worst_ratio));
    report(7, "re-init parity", v7, fmt::format("{} episodes, max |reinit-first|/first {:.4f}", episodes, worst_parity));
}

// -- atomic switching -----------------------------------------------------

struct Step {
    SwitchId sw;
    bool barrier;
    FlowMod mod;
};

struct Node {
    std::map<SwitchId, SwitchState> fabric;
    std::set<SwitchId> committed;
};

// Depth-first walk over every global ordering of the per-switch scripts.
// Orderings that share a prefix share its fabric state; `leaves` counts
// complete orderings.
bool explore(const std::vector<std::vector<Step>>& scripts, std::vector<std::size_t>& pos, const Node& node,
             const std::function<bool(const Node&)>& check, std::size_t& leaves) {
    bool any = false;
    for (std::size_t i = 0; i < scripts.size(); ++i) {
        if (pos[i] == scripts[i].size()) continue;
        any = true;
        const Step& st = scripts[i][pos[i]];
        Node next = node;
        auto& state = next.fabric.at(st.sw);
        if (st.barrier) {
            state.handle_barrier(st.mod.xid);
            next.committed.insert(st.sw);
        } else if (state.handle_flow_mod(st.mod).status != AckStatus::Staged) {
            return false;
        }
        if (!check(next)) return false;
        ++pos[i];
        const bool ok = explore(scripts, pos, next, check, leaves);
        --pos[i];
        if (!ok) return false;
    }
    if (!any) ++leaves;
    return true;
}

bool touches(const PathSpec* p, const SwitchId& sw) {
    return p != nullptr && std::any_of(p->cross_connects.begin(), p->cross_connects.end(),
                                       [&](const CrossConnect& xc) { return xc.switch_id == sw; });
}

void ac8(const Topology& topo) {
    Stopwatch sw;
    Verdict v;

    // Observers placed at every gap of a delete+add+barrier batch.
    const CrossConnectTable before{{1, 2}}, after{{1, 3}};
    std::size_t snapshots = 0;
    for (int code = 0; code < 256; ++code) {
        SwitchState s("s", 8);
        s.handle_flow_mod({1, "s", FlowCommand::Add, 1, 2});
        s.handle_barrier(2);
        for (int g = 0; g <= 3; ++g) {
            for (int o = 0, c = code; o < 4; ++o, c /= 4) {
                if (c % 4 != g) continue;
                const auto& snap = s.query_table();
                ++snapshots;
                v.require(snap == (g == 3 ? after : before), fmt::format("partial batch visible at gap {}", g));
            }
            if (g == 0) s.handle_flow_mod({10, "s", FlowCommand::Delete, 1, 2});
            if (g == 1) s.handle_flow_mod({11, "s", FlowCommand::Add, 1, 3});
            if (g == 2) s.handle_barrier(12);
        }
    }

    // Every global ordering of per-switch streams for every path transition.
    std::size_t orders = 0;
    for (const auto& to : topo.paths) {
        std::vector<const PathSpec*> froms{nullptr};
        for (const auto& p : topo.paths) {
            if (&p != &to) froms.push_back(&p);
        }
        for (const PathSpec* from : froms) {
            Xid xid = 0;
            std::vector<std::vector<Step>> scripts;
            std::set<SwitchId> to_switches, from_switches;
            for (const auto& s : topo.switches) {
                std::vector<Step> script;
                if (from != nullptr) {
                    for (const auto& xc : from->cross_connects) {
                        if (xc.switch_id == s.id)
                            script.push_back({s.id, false, {++xid, s.id, FlowCommand::Delete, xc.in_port, xc.out_port}});
                    }
                }
                for (const auto& xc : to.cross_connects) {
                    if (xc.switch_id == s.id)
                        script.push_back({s.id, false, {++xid, s.id, FlowCommand::Add, xc.in_port, xc.out_port}});
                }
                if (!script.empty()) {
                    script.push_back({s.id, true, {++xid, s.id, FlowCommand::Add, 0, 0}});
                    scripts.push_back(std::move(script));
                }
                if (touches(&to, s.id)) to_switches.insert(s.id);
                if (touches(from, s.id)) from_switches.insert(s.id);
            }
            Node root;
            for (const auto& s : topo.switches) root.fabric.emplace(s.id, SwitchState(s.id, s.ports));
            if (from != nullptr) {
                for (const auto& xc : from->cross_connects) {
                    root.fabric.at(xc.switch_id).handle_flow_mod({0, xc.switch_id, FlowCommand::Add, xc.in_port, xc.out_port});
                    root.fabric.at(xc.switch_id).handle_barrier(0);
                }
            }
            const auto check = [&](const Node& n) {
                FabricState f;
                for (const auto& [id, s] : n.fabric) f[id] = s.query_table();
                const auto r = resolve_active_path(topo, f);
                const bool to_done = std::includes(n.committed.begin(), n.committed.end(), to_switches.begin(),
                                                   to_switches.end());
                const bool from_untouched = std::none_of(n.committed.begin(), n.committed.end(),
                                                         [&](const SwitchId& id) { return from_switches.count(id) > 0; });
                const bool ok = r == to.id ? to_done
                                : r        ? (from != nullptr && *r == from->id && from_untouched)
                                           : !to_done;
                if (!ok) {
                    v.require(false, fmt::format("{} -> {}: resolved {} mid-transition", from ? from->id : "none",
                                                 to.id, r.value_or("none")));
                }
                return ok;
            };
            std::vector<std::size_t> pos(scripts.size(), 0);
            if (!explore(scripts, pos, root, check, orders)) v.require(false, "flow-mod rejected");
        }
    }
    const double t = sw.seconds();
    v.require(t < 1.0, fmt::format("took {:.3f} s", t));
    report(8, "atomic switching", v,
           fmt::format("{} batch snapshots, {} fabric orderings, {:.3f} s", snapshots, orders, t));
}

// -- transaction hygiene --------------------------------------------------

void ac9(const Topology& topo, const fs::path& dir) {
    Verdict v;
    const auto log = read_ndjson(dir / "controller_log.ndjson");
    const auto events = read_ndjson(dir / "qpm_log.ndjson");

    Xid last = 0;
    std::set<Xid> seen;
    std::vector<std::string> requests;
    std::map<std::string, std::multiset<std::string>> mods;
    for (const auto& rec : log) {
        if (!rec.contains("xid")) continue;
        const Xid x = rec.at("xid").get<Xid>();
        v.require(seen.insert(x).second, fmt::format("xid {} repeated", x));
        v.require(x > last, fmt::format("xid {} after {}", x, last));
        last = x;
        if (rec.at("type") == "FLOW_MOD") {
            const auto id = rec.at("request_id").get<std::string>();
            if (mods.find(id) == mods.end()) requests.push_back(id);
            mods[id].insert(fmt::format("{} {} {}>{}", rec.at("switch").get<std::string>(),
                                        rec.at("command").get<std::string>(), rec.at("in_port").get<int>(),
                                        rec.at("out_port").get<int>()));
        }
    }

    std::vector<std::multiset<std::string>> expected;
    for (const auto& e : events) {
        if (e.at("kind") != "RECONFIG_SENT") continue;
        std::multiset<std::string> want;
        const auto detail = e.at("detail").get<std::string>();
        if (detail.rfind("tear_down=", 0) == 0) {
            for (const auto& xc : topo.find_path(detail.substr(10))->cross_connects)
                want.insert(fmt::format("{} DELETE {}>{}", xc.switch_id, xc.in_port, xc.out_port));
        }
        for (const auto& xc : topo.find_path(e.at("path").get<std::string>())->cross_connects)
            want.insert(fmt::format("{} ADD {}>{}", xc.switch_id, xc.in_port, xc.out_port));
        expected.push_back(std::move(want));
    }
    v.require(requests.size() == expected.size(),
              fmt::format("{} requests with flow-mods, {} reconfigurations sent", requests.size(), expected.size()));
    for (std::size_t i = 0; i < std::min(requests.size(), expected.size()); ++i) {
        v.require(mods[requests[i]] == expected[i], "flow-mods of " + requests[i] + " do not match its cross-connects");
    }

    Xid last_done = 0;
    for (const auto& e : events) {
        if (!e.contains("xids")) continue;
        for (const auto& x : e.at("xids")) {
            v.require(x.get<Xid>() > last_done, "RECONFIG_DONE xids not increasing");
            last_done = x.get<Xid>();
        }
    }
    report(9, "transaction hygiene", v,
           fmt::format("{} reconfigurations, {} xids unique and increasing, one flow-mod per cross-connect",
                       requests.size(), seen.size()));
}

// -- exhaustion, determinism, numerics ------------------------------------

void ac10(const Topology& topo) {
    Verdict v;
    RunResult r;
    try {
        r = run_to(topo, "attack-all.json", fresh_dir("attack-all"));
    } catch (const std::exception& e) {
        v.require(false, std::string("run threw: ") + e.what());
    }
    if (v.ok) {
        v.require(r.exhausted, "not exhausted");
        v.require(!r.events.empty() && r.events.back().kind == EventKind::Exhausted, "last event is not EXHAUSTED");
        v.require(r.exit_code == kExitExhausted, fmt::format("exit code {}", r.exit_code));
        v.require(r.polls_after_exhaustion > 0, "polling stopped at exhaustion");
    }
    report(10, "exhaustion safety", v,
           fmt::format("EXHAUSTED, exit code {}, {} polls after alarm", r.exit_code, r.polls_after_exhaustion));
}

void ac11(const Topology& topo) {
    Verdict v;
    const auto a = fresh_dir("det-a"), b = fresh_dir("det-b");
    run_to(topo, "attack-link1-then-link2.json", a, 7);
    run_to(topo, "attack-link1-then-link2.json", b, 7);
    std::size_t bytes = 0;
    for (const char* f : {"metrics.csv", "timing.csv", "qpm_log.ndjson"}) {
        const auto x = slurp(a / f);
        v.require(!x.empty(), std::string(f) + " is empty");
        v.require(x == slurp(b / f), std::string(f) + " differs");
        bytes += x.size();
    }
    report(11, "determinism", v, fmt::format("metrics.csv, timing.csv, qpm_log identical ({} bytes)", bytes));
}

long double entropy_oracle(long double x) {
    if (x <= 0.0L || x >= 1.0L) return 0.0L;
    return -(x * std::log(x) + (1.0L - x) * std::log1p(-x)) / std::log(2.0L);
}

void ac12() {
    Verdict v;
    double worst = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double x = i / 1000.0;
        const double err = std::abs(static_cast<double>(entropy_oracle(x) - binary_entropy(x)));
        worst = std::max(worst, err);
        v.require(err <= 1e-12, fmt::format("h2({}) off by {:.3e}", x, err));
    }
    double scan = 0.5;
    for (int i = 0; i <= 50000; ++i) {
        const long double q = i * 1e-5L;
        if (1.0L - 2.2L * entropy_oracle(q) <= 0.0L) {
            scan = static_cast<double>(q);
            break;
        }
    }
    const double a = abort_qber(1.2);
    v.require(std::abs(a - scan) <= 1e-4, fmt::format("abort_qber {:.7f} vs scan {:.5f}", a, scan));
    report(12, "numeric oracles", v,
           fmt::format("max h2 error {:.2e}, abort_qber(1.2)={:.7f}, scan {:.5f}", worst, a, scan));
}

} // namespace

int main() {
    try {
        const auto topo = reference();
        ac1(topo);
        ac2(topo);
        ac3(topo);
        Mitigation m;
        ac4_ac5(topo, m);
        const auto two = fresh_dir("attack-link1-then-link2");
        run_to(topo, "attack-link1-then-link2.json", two);
        ac6_ac7(two, m.dir);
        ac8(topo);
        ac9(topo, two);
        ac10(topo);
        ac11(topo);
        ac12();
    } catch (const std::exception& e) {
        fmt::print("acceptance aborted: {}\n", e.what());
        return 2;
    }
    fmt::print("{} of 12 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}

#pragma once

// Attack scenarios and the simulated physical world: switch fabric, QKD
// units, and attacker power on every link, all advanced on one clock.

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/optical_switch.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/qkd_unit.hpp"
#include "qkdsim/topology.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace qkdsim {

struct ScenarioEvent {
    double t = 0.0;
    std::string link;
    double attack_power_dbm = kAttackOff;
    // Ramp events move linearly toward attack_power_dbm at this rate.
    std::optional<double> ramp_db_per_s;
    // Ramp origin; defaults to the link's power when the ramp starts.
    std::optional<double> ramp_from_dbm;
};

struct Scenario {
    double duration_s = 0.0;
    std::vector<ScenarioEvent> events;
};

inline Scenario parse_scenario(const json& j, const Topology* topo = nullptr) {
    if (!j.is_object()) throw ValidationError("scenario: document must be an object");
    Scenario s;
    s.duration_s = detail::require<double>(j, "duration_s", "scenario");
    if (!(s.duration_s > 0.0)) throw ValidationError("scenario: duration_s must be positive");

    const json events = detail::optional_field<json>(j, "events", json::array(), "scenario");
    std::set<std::pair<double, std::string>> seen;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const std::string ctx = "scenario.events[" + std::to_string(i) + "]";
        const json& ej = events[i];
        ScenarioEvent e;
        e.t = detail::require<double>(ej, "t", ctx);
        e.link = detail::require<std::string>(ej, "link", ctx);
        const json power = ej.contains("attack_power_dbm") ? ej.at("attack_power_dbm") : json();
        if (power.is_string() && power.get<std::string>() == "off") {
            e.attack_power_dbm = kAttackOff;
        } else if (power.is_number()) {
            e.attack_power_dbm = power.get<double>();
        } else {
            throw ValidationError(ctx + ": attack_power_dbm must be a number or \"off\"");
        }
        const auto kind = detail::optional_field<std::string>(ej, "kind", "step", ctx);
        if (kind == "ramp") {
            e.ramp_db_per_s = detail::require<double>(ej, "ramp_db_per_s", ctx);
            if (!(*e.ramp_db_per_s > 0.0)) throw ValidationError(ctx + ": ramp_db_per_s must be positive");
            if (e.attack_power_dbm == kAttackOff) throw ValidationError(ctx + ": a ramp needs a numeric target");
            if (ej.contains("ramp_from_dbm")) e.ramp_from_dbm = detail::require<double>(ej, "ramp_from_dbm", ctx);
        } else if (kind != "step") {
            throw ValidationError(ctx + ": unknown event kind '" + kind + "'");
        }

        if (!(e.t >= 0.0)) throw ValidationError(ctx + ": t must be >= 0");
        if (!s.events.empty() && e.t < s.events.back().t) throw ValidationError(ctx + ": events must be sorted by t");
        if (!seen.emplace(e.t, e.link).second) throw ValidationError(ctx + ": second event for this link at this time");
        if (topo != nullptr && topo->find_link(e.link) == nullptr) {
            throw ValidationError(ctx + ": unknown link '" + e.link + "'");
        }
        s.events.push_back(std::move(e));
    }
    return s;
}

inline Scenario load_scenario(const std::filesystem::path& file, const Topology* topo = nullptr) {
    const json doc = load_json_file(file);
    try {
        return parse_scenario(doc, topo);
    } catch (const ValidationError& e) {
        throw ValidationError(file.string() + ": " + e.what());
    }
}

/// Attacker power per link as a function of time.
class AttackSchedule {
public:
    AttackSchedule() = default;

    explicit AttackSchedule(const std::vector<ScenarioEvent>& events) {
        for (const auto& e : events) {
            auto& segs = segments_[e.link];
            Segment seg{e.t, e.attack_power_dbm, e.ramp_db_per_s, 0.0};
            if (e.ramp_db_per_s) {
                const double from = e.ramp_from_dbm ? *e.ramp_from_dbm : level(segs, e.t);
                if (from == kAttackOff) {
                    throw ValidationError("scenario: ramp on '" + e.link + "' at t=" + std::to_string(e.t) +
                                          " starts from an inactive attacker; give ramp_from_dbm");
                }
                seg.from_dbm = from;
            }
            segs.push_back(seg);
            if (e.attack_power_dbm != kAttackOff) onsets_[e.link].push_back(e.t);
        }
    }

    double power_at(const std::string& link, double t) const {
        auto it = segments_.find(link);
        return it == segments_.end() ? kAttackOff : level(it->second, t);
    }

    const std::map<std::string, std::vector<double>>& onsets() const { return onsets_; }

private:
    struct Segment {
        double start;
        double target_dbm;
        std::optional<double> rate;
        double from_dbm;
    };

    static double level(const std::vector<Segment>& segs, double t) {
        const Segment* cur = nullptr;
        for (const auto& s : segs) {
            if (s.start <= t) cur = &s;
        }
        if (cur == nullptr) return kAttackOff;
        if (!cur->rate) return cur->target_dbm;
        const double moved = *cur->rate * (t - cur->start);
        if (cur->target_dbm >= cur->from_dbm) return std::min(cur->target_dbm, cur->from_dbm + moved);
        return std::max(cur->target_dbm, cur->from_dbm - moved);
    }

    std::map<std::string, std::vector<Segment>> segments_;
    std::map<std::string, std::vector<double>> onsets_;
};

/// The physical side of the testbed: switch agents, the QKD unit pair, and
/// the attackers. Advanced lazily to the clock; the unit only ever sees the
/// circuit the switch tables actually form.
class World {
public:
    World(const Topology& topo, UnitConfig unit_config, std::uint64_t seed, AttackSchedule attacks)
        : topo_(topo), unit_(unit_config), rng_(seed), attacks_(std::move(attacks)) {
        for (const auto& s : topo_.switches) agents_.emplace(s.id, std::make_unique<SwitchAgent>(s.id, s.ports));
    }

    SwitchAgent& agent(const SwitchId& id) { return *agents_.at(id); }
    const QkdUnit& unit() const { return unit_; }
    double now() const { return now_; }
    std::optional<std::string> active_path() const { return active_path_; }
    std::int64_t keys_emitted() const { return keys_emitted_; }
    std::int64_t key_bits_emitted() const { return key_bits_; }

    FabricState fabric() const {
        FabricState f;
        for (const auto& [id, a] : agents_) f[id] = a->query_table();
        return f;
    }

    double attack_power(const std::string& link, double t) const { return attacks_.power_at(link, t); }

    /// Called at every multiple of `period` as the world passes it.
    void set_sampler(double period, std::function<void(double)> fn) {
        sample_period_ = period;
        sample_index_ = 1;
        sampler_ = std::move(fn);
    }

    void advance_to(double t) {
        for (;;) {
            refresh_path();
            double next = t;
            if (sampler_) next = std::min(next, sample_index_ * sample_period_);
            const double until_unit = unit_.time_to_next_event();
            if (std::isfinite(until_unit)) next = std::min(next, now_ + std::max(until_unit, kTimeEpsilon));

            if (next > now_) {
                std::optional<ChannelParams> channel;
                double power = kAttackOff;
                if (active_path_) {
                    const PathSpec& path = *topo_.find_path(*active_path_);
                    channel = topo_.channel_of(path);
                    power = attacks_.power_at(path.link_id, next);
                }
                for (const KeyBlock& b : unit_.tick(next - now_, channel, power, rng_)) {
                    ++keys_emitted_;
                    key_bits_ += b.size_bits;
                }
                now_ = next;
            }
            while (sampler_ && sample_index_ * sample_period_ <= now_ + kTimeEpsilon) {
                const double ts = sample_index_ * sample_period_;
                ++sample_index_;
                sampler_(ts);
            }
            if (now_ >= t) return;
        }
    }

    MonitorReading read_monitor() {
        refresh_path();
        return unit_.read_monitor(now_);
    }

    bool start_session() {
        refresh_path();
        if (!active_path_) return false;
        unit_.start_session(topo_.channel_of(*topo_.find_path(*active_path_)), now_, rng_);
        return true;
    }

    /// Monitoring-channel request handler.
    ordered_json handle(const json& request) {
        const std::string op = request.value("op", "");
        if (op == "read_monitor") return to_json_value(read_monitor());
        if (op == "start_session") {
            const bool ok = start_session();
            return {{"ok", ok}, {"state", to_string(unit_.state())}};
        }
        return {{"error", "unknown op '" + op + "'"}};
    }

private:
    void refresh_path() {
        auto resolved = resolve_active_path(topo_, fabric());
        if (resolved != active_path_) {
            if (unit_.state() != SessionState::Idle) unit_.path_down();
            active_path_ = std::move(resolved);
        }
    }

    const Topology& topo_;
    std::map<SwitchId, std::unique_ptr<SwitchAgent>> agents_;
    QkdUnit unit_;
    std::mt19937_64 rng_;
    AttackSchedule attacks_;
    std::optional<std::string> active_path_;
    double now_ = 0.0;

    double sample_period_ = 0.0;
    std::int64_t sample_index_ = 1;
    std::function<void(double)> sampler_;

    std::int64_t keys_emitted_ = 0;
    std::int64_t key_bits_ = 0;
};

} // namespace qkdsim

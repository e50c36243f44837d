#pragma once

// Quantum Parameters Monitor: polls the QKD units, declares the active link
// failed when keys stop or the QBER climbs past a threshold, and moves the
// quantum channel to the next pre-computed path through the controller.

#include "qkdsim/clock.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/northbound.hpp"
#include "qkdsim/qkd_service.hpp"
#include "qkdsim/qkd_unit.hpp"
#include "qkdsim/topology.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qkdsim {

struct QpmConfig {
    double poll_period_s = 60.0;
    double qber_threshold = 0.08;
    int zero_key_debounce = 2;
    // Detection is suppressed this long after every path change.
    double init_grace_s = 240.0;
    // Poll cadence while waiting for the units to finish initializing.
    double reinit_poll_s = 1.0;
    double reinit_timeout_s = 600.0;
    int controller_retries = 0;
};

enum class PathState { Available, Active, Failed };

inline std::string_view to_string(PathState s) {
    switch (s) {
    case PathState::Available: return "AVAILABLE";
    case PathState::Active: return "ACTIVE";
    case PathState::Failed: return "FAILED";
    }
    return "?";
}

struct PathStatus {
    std::string path_id;
    PathState state = PathState::Available;
};

enum class EventKind { Detected, ReconfigSent, ReconfigDone, ReinitDone, Exhausted };

inline std::string_view to_string(EventKind k) {
    switch (k) {
    case EventKind::Detected: return "DETECTED";
    case EventKind::ReconfigSent: return "RECONFIG_SENT";
    case EventKind::ReconfigDone: return "RECONFIG_DONE";
    case EventKind::ReinitDone: return "REINIT_DONE";
    case EventKind::Exhausted: return "EXHAUSTED";
    }
    return "?";
}

inline std::optional<EventKind> parse_event_kind(std::string_view s) {
    for (auto k : {EventKind::Detected, EventKind::ReconfigSent, EventKind::ReconfigDone, EventKind::ReinitDone,
                   EventKind::Exhausted}) {
        if (to_string(k) == s) return k;
    }
    return std::nullopt;
}

struct MitigationEvent {
    double t = 0.0;
    EventKind kind = EventKind::Detected;
    std::string path;
    std::vector<Xid> xids;
    std::string detail;
};

inline ordered_json to_json_value(const MitigationEvent& e) {
    ordered_json j = {{"t", e.t}, {"kind", to_string(e.kind)}, {"path", e.path}};
    if (e.kind == EventKind::ReconfigDone) j["xids"] = e.xids;
    j["detail"] = e.detail;
    return j;
}

inline MitigationEvent parse_mitigation_event(const json& j) {
    MitigationEvent e;
    e.t = detail::require<double>(j, "t", "qpm event");
    auto kind = parse_event_kind(detail::require<std::string>(j, "kind", "qpm event"));
    if (!kind) throw ValidationError("qpm event: unknown kind");
    e.kind = *kind;
    e.path = detail::require<std::string>(j, "path", "qpm event");
    e.xids = detail::optional_field<std::vector<Xid>>(j, "xids", {}, "qpm event");
    e.detail = detail::optional_field<std::string>(j, "detail", "", "qpm event");
    return e;
}

/// Failure predicate. `history` holds the readings polled before `reading`
/// since the last path change, oldest first.
inline bool detect_failure(const MonitorReading& reading, std::span<const MonitorReading> history,
                           const QpmConfig& config, double since_path_change) {
    if (!(since_path_change > config.init_grace_s)) return false;
    if (reading.qber > config.qber_threshold) return true;

    auto no_key = [](const MonitorReading& r) {
        return r.last_key_size_bits == 0 &&
               (r.state == SessionState::Generating || r.state == SessionState::Aborted);
    };
    if (!no_key(reading)) return false;
    const auto earlier = static_cast<std::size_t>(std::max(config.zero_key_debounce - 1, 0));
    if (history.size() < earlier) return false;
    return std::all_of(history.end() - static_cast<std::ptrdiff_t>(earlier), history.end(), no_key);
}

/// First AVAILABLE path in list order.
inline std::optional<std::string> select_next_path(std::span<const PathStatus> statuses) {
    for (const auto& s : statuses) {
        if (s.state == PathState::Available) return s.path_id;
    }
    return std::nullopt;
}

class Qpm {
public:
    enum class Phase { Starting, Monitoring, Reconfiguring, ReinitWait, Alarm };

    using EventSink = std::function<void(const MitigationEvent&)>;

    Qpm(QpmConfig config, const Topology& topology, ControllerClient& controller, QkdClient& qkd, Clock& clock)
        : config_(config), controller_(controller), qkd_(qkd), clock_(clock) {
        for (const auto& p : topology.paths) statuses_.push_back({p.id, PathState::Available});
    }

    void set_event_sink(EventSink sink) { sink_ = std::move(sink); }

    Phase phase() const { return phase_.load(); }

    static std::string_view to_string(Phase p) {
        switch (p) {
        case Phase::Starting: return "STARTING";
        case Phase::Monitoring: return "MONITORING";
        case Phase::Reconfiguring: return "RECONFIGURING";
        case Phase::ReinitWait: return "REINIT_WAIT";
        case Phase::Alarm: return "ALARM";
        }
        return "?";
    }

    const std::vector<PathStatus>& statuses() const { return statuses_; }
    const std::vector<MitigationEvent>& events() const { return events_; }
    std::size_t polls() const { return polls_; }

    std::optional<std::string> active_path() const {
        for (const auto& s : statuses_) {
            if (s.state == PathState::Active) return s.path_id;
        }
        return std::nullopt;
    }

    /// Installs the first usable path on the list and waits for keys.
    bool establish_initial() { return switch_to_next_path(true); }

    /// Polls on the fixed grid k * poll_period until `until` or stop().
    void run_loop(double until = std::numeric_limits<double>::infinity()) {
        while (!stop_requested_ && clock_.now() < until) {
            const double next = (std::floor(clock_.now() / config_.poll_period_s) + 1.0) * config_.poll_period_s;
            if (next > until) {
                clock_.sleep_until(until);
                break;
            }
            clock_.sleep_until(next);
            poll_once();
        }
    }

    void stop() { stop_requested_ = true; }

    void poll_once() {
        const MonitorReading reading = qkd_.read_monitor();
        ++polls_;
        if (phase_ != Phase::Monitoring) return;

        const bool failed = detect_failure(reading, history_, config_, clock_.now() - last_change_);
        history_.push_back(reading);
        if (history_.size() > static_cast<std::size_t>(std::max(config_.zero_key_debounce, 1)) + 1) {
            history_.erase(history_.begin());
        }
        if (!failed) return;

        const std::string lost = active_path().value_or("");
        set_state(lost, PathState::Failed);
        emit(EventKind::Detected, lost, {},
             reading.qber > config_.qber_threshold ? "qber=" + fmt_num(reading.qber) + " above threshold"
                                                   : "final key size zero");
        switch_to_next_path(false);
    }

private:
    bool switch_to_next_path(bool initial) {
        for (;;) {
            auto next = select_next_path(statuses_);
            if (!next) {
                phase_ = Phase::Alarm;
                emit(EventKind::Exhausted, installed_.value_or(""), {}, "no available path left");
                return false;
            }
            if (bring_up(*next, initial)) return true;
        }
    }

    bool bring_up(const std::string& target, bool initial) {
        phase_ = Phase::Reconfiguring;
        std::optional<ReconfigReport> report;
        for (int attempt = 0; attempt <= config_.controller_retries; ++attempt) {
            ReconfigRequest req{"qpm-" + std::to_string(++request_counter_), installed_, target};
            emit(EventKind::ReconfigSent, target, {},
                 initial ? "initial" : "tear_down=" + installed_.value_or("none"));
            report = controller_.reconfigure(req);
            std::vector<Xid> xids;
            if (report) {
                for (const auto& tx : report->transactions) xids.push_back(tx.xid);
            }
            const bool ok = report && report->outcome == Outcome::Success;
            emit(EventKind::ReconfigDone, target, std::move(xids), ok ? "outcome=SUCCESS" : "outcome=FAILED");
            if (ok) break;
            report.reset();
        }
        if (!report) {
            set_state(target, PathState::Failed);
            return false;
        }

        installed_ = target;
        set_state(target, PathState::Active);
        last_change_ = clock_.now();
        history_.clear();
        phase_ = Phase::ReinitWait;

        const double started = clock_.now();
        if (!qkd_.start_session()) {
            set_state(target, PathState::Failed);
            return false;
        }
        for (;;) {
            clock_.sleep_for(config_.reinit_poll_s);
            const MonitorReading r = qkd_.read_monitor();
            if (r.state == SessionState::Generating) {
                emit(EventKind::ReinitDone, target, {}, "init_s=" + fmt_num(clock_.now() - started));
                break;
            }
            if (clock_.now() - started >= config_.reinit_timeout_s) {
                set_state(target, PathState::Failed);
                return false;
            }
        }
        phase_ = Phase::Monitoring;
        return true;
    }

    void set_state(const std::string& path, PathState state) {
        for (auto& s : statuses_) {
            if (s.path_id == path && s.state != PathState::Failed) s.state = state;
        }
    }

    void emit(EventKind kind, std::string path, std::vector<Xid> xids, std::string detail) {
        MitigationEvent e{clock_.now(), kind, std::move(path), std::move(xids), std::move(detail)};
        if (sink_) sink_(e);
        events_.push_back(std::move(e));
    }

    static std::string fmt_num(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return buf;
    }

    QpmConfig config_;
    ControllerClient& controller_;
    QkdClient& qkd_;
    Clock& clock_;
    EventSink sink_;

    std::vector<PathStatus> statuses_;
    std::vector<MonitorReading> history_;
    std::vector<MitigationEvent> events_;
    std::optional<std::string> installed_;
    std::atomic<Phase> phase_{Phase::Starting};
    std::atomic<bool> stop_requested_{false};
    double last_change_ = 0.0;
    std::size_t polls_ = 0;
    std::uint64_t request_counter_ = 0;
};

} // namespace qkdsim

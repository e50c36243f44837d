#pragma once

// Paired Alice/Bob QKD units as one session state machine.
//
//   Idle --start_session--> Initializing --init timer--> Generating
//   Generating --sampled QBER >= abort threshold--> Aborted
//   any --path down--> Idle

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/physics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace qkdsim {

// Slack for comparing simulated timestamps built from different sums.
inline constexpr double kTimeEpsilon = 1e-9;

enum class SessionState { Idle, Initializing, Generating, Aborted };

inline std::string_view to_string(SessionState s) {
    switch (s) {
    case SessionState::Idle: return "Idle";
    case SessionState::Initializing: return "Initializing";
    case SessionState::Generating: return "Generating";
    case SessionState::Aborted: return "Aborted";
    }
    return "?";
}

inline std::optional<SessionState> parse_session_state(std::string_view s) {
    if (s == "Idle") return SessionState::Idle;
    if (s == "Initializing") return SessionState::Initializing;
    if (s == "Generating") return SessionState::Generating;
    if (s == "Aborted") return SessionState::Aborted;
    return std::nullopt;
}

struct MonitorReading {
    double timestamp = 0.0;
    double skr_bps = 0.0;
    double qber = 0.0;
    std::int64_t last_key_size_bits = 0;
    SessionState state = SessionState::Idle;

    friend bool operator==(const MonitorReading&, const MonitorReading&) = default;
};

struct KeyBlock {
    std::int64_t sequence_no = 0;
    std::int64_t size_bits = 0;
    double produced_at = 0.0;
};

struct UnitConfig {
    double init_time_s = 120.0;
    // Each (re)initialization lasts init_time_s * (1 + U(-init_jitter, +init_jitter)).
    double init_jitter = 0.03;
    double key_interval_s = 60.0;
    JitterConfig jitter;
};

inline ordered_json to_json_value(const MonitorReading& r) {
    return {{"timestamp", r.timestamp},
            {"skr_bps", r.skr_bps},
            {"qber", r.qber},
            {"last_key_size_bits", r.last_key_size_bits},
            {"state", to_string(r.state)}};
}

inline MonitorReading parse_monitor_reading(const json& j) {
    MonitorReading r;
    r.timestamp = detail::require<double>(j, "timestamp", "monitor reading");
    r.skr_bps = detail::require<double>(j, "skr_bps", "monitor reading");
    r.qber = detail::require<double>(j, "qber", "monitor reading");
    r.last_key_size_bits = detail::require<std::int64_t>(j, "last_key_size_bits", "monitor reading");
    auto state = parse_session_state(detail::require<std::string>(j, "state", "monitor reading"));
    if (!state) throw ValidationError("monitor reading: unknown state");
    r.state = *state;
    return r;
}

class QkdUnit {
public:
    explicit QkdUnit(UnitConfig config = {}) : config_(config) {}

    const UnitConfig& config() const { return config_; }
    SessionState state() const { return state_; }
    double now() const { return now_; }
    const QuantumSample& last_sample() const { return last_sample_; }
    // Duration drawn for the current (or last) initialization.
    double last_init_duration() const { return init_duration_; }

    /// Begins a session on `channel`. Any running session is dropped first.
    void start_session(const ChannelParams& channel, double now, std::mt19937_64& rng) {
        now_ = std::max(now_, now);
        std::uniform_real_distribution<double> spread(-config_.init_jitter, config_.init_jitter);
        init_duration_ = config_.init_time_s * (1.0 + spread(rng));
        channel_ = channel;
        state_ = SessionState::Initializing;
        remaining_ = init_duration_;
        last_sample_ = {};
        last_key_size_ = 0;
        next_sequence_ = 1;
    }

    // Circuit torn down under the session.
    void path_down() {
        state_ = SessionState::Idle;
        channel_.reset();
        last_key_size_ = 0;
    }

    /// Time until the next internal transition (init expiry or key boundary).
    double time_to_next_event() const {
        if (state_ == SessionState::Initializing || state_ == SessionState::Generating) return remaining_;
        return std::numeric_limits<double>::infinity();
    }

    /// Advances the session by dt seconds. `attack_power_dbm` is the attacker
    /// power seen at every key boundary inside this step; callers split steps
    /// where the power changes. No active channel forces Idle.
    std::vector<KeyBlock> tick(double dt, const std::optional<ChannelParams>& active_channel,
                               double attack_power_dbm, std::mt19937_64& rng) {
        std::vector<KeyBlock> blocks;
        if (!(dt > 0.0)) return blocks;
        const double end = now_ + dt;
        if (!active_channel) {
            if (state_ != SessionState::Idle) path_down();
            now_ = end;
            return blocks;
        }

        while (now_ < end) {
            if (state_ != SessionState::Initializing && state_ != SessionState::Generating) {
                now_ = end;
                break;
            }
            const double step = end - now_;
            if (remaining_ > step + kTimeEpsilon) {
                remaining_ -= step;
                now_ = end;
                break;
            }
            now_ += remaining_;
            if (state_ == SessionState::Initializing) {
                state_ = SessionState::Generating;
                remaining_ = config_.key_interval_s;
                continue;
            }
            key_boundary(channel_.value_or(*active_channel), attack_power_dbm, rng, blocks);
        }
        return blocks;
    }

    /// Side-effect-free snapshot for the monitor. Key size and SKR read zero
    /// outside Generating; QBER is the last sampled value.
    MonitorReading read_monitor(double now) const {
        MonitorReading r;
        r.timestamp = now;
        r.state = state_;
        r.qber = last_sample_.qber;
        if (state_ == SessionState::Generating) {
            r.skr_bps = last_sample_.skr_bps;
            r.last_key_size_bits = last_key_size_;
        }
        return r;
    }

private:
    void key_boundary(const ChannelParams& channel, double attack_power_dbm, std::mt19937_64& rng,
                      std::vector<KeyBlock>& out) {
        last_sample_ = sample(channel, attack_power_dbm, rng, config_.jitter);
        remaining_ = config_.key_interval_s;
        if (last_sample_.qber >= abort_qber(channel.ec_efficiency)) {
            state_ = SessionState::Aborted;
            last_key_size_ = 0;
            return;
        }
        const auto bits = static_cast<std::int64_t>(std::llround(last_sample_.skr_bps * config_.key_interval_s));
        last_key_size_ = bits;
        if (last_sample_.skr_bps > 0.0 && bits > 0) {
            out.push_back({next_sequence_++, bits, now_});
        }
    }

    UnitConfig config_;
    SessionState state_ = SessionState::Idle;
    std::optional<ChannelParams> channel_;
    double now_ = 0.0;
    double remaining_ = 0.0;
    double init_duration_ = 0.0;
    QuantumSample last_sample_;
    std::int64_t last_key_size_ = 0;
    std::int64_t next_sequence_ = 1;
};

} // namespace qkdsim

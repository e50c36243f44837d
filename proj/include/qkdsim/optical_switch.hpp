#pragma once

// Emulated optical circuit switch and its controller wire protocol.
//
// Flow-mods are staged and only take optical effect when a barrier commits
// them, so a batch of cross-connects appears in the committed table all at
// once or not at all.

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/topology.hpp"

#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qkdsim {

using Xid = std::uint64_t;

enum class FlowCommand { Add, Delete };

enum class AckStatus { Staged, PortInUse, NoSuchEntry, NoSuchPort };

struct FlowMod {
    Xid xid = 0;
    SwitchId switch_id;
    FlowCommand command = FlowCommand::Add;
    PortId in_port = 0;
    PortId out_port = 0;

    friend bool operator==(const FlowMod&, const FlowMod&) = default;
};

struct FlowModAck {
    Xid xid = 0;
    AckStatus status = AckStatus::Staged;
};

struct BarrierReply {
    Xid xid = 0;
    std::vector<Xid> committed_xids;
};

inline std::string_view to_string(FlowCommand c) { return c == FlowCommand::Add ? "ADD" : "DELETE"; }

inline std::string_view to_string(AckStatus s) {
    switch (s) {
    case AckStatus::Staged: return "STAGED";
    case AckStatus::PortInUse: return "PORT_IN_USE";
    case AckStatus::NoSuchEntry: return "NO_SUCH_ENTRY";
    case AckStatus::NoSuchPort: return "NO_SUCH_PORT";
    }
    return "?";
}

inline std::optional<AckStatus> parse_ack_status(std::string_view s) {
    if (s == "STAGED") return AckStatus::Staged;
    if (s == "PORT_IN_USE") return AckStatus::PortInUse;
    if (s == "NO_SUCH_ENTRY") return AckStatus::NoSuchEntry;
    if (s == "NO_SUCH_PORT") return AckStatus::NoSuchPort;
    return std::nullopt;
}

// ---- wire messages -------------------------------------------------------

namespace wire {

    inline ordered_json hello(std::string_view switch_id) {
        return {{"type", "HELLO"}, {"switch", switch_id}};
    }

    inline ordered_json flow_mod(const FlowMod& m) {
        return {{"type", "FLOW_MOD"}, {"xid", m.xid}, {"command", to_string(m.command)},
                {"in_port", m.in_port}, {"out_port", m.out_port}};
    }

    inline ordered_json flow_mod_ack(const FlowModAck& a) {
        return {{"type", "FLOW_MOD_ACK"}, {"xid", a.xid}, {"status", to_string(a.status)}};
    }

    inline ordered_json barrier_request(Xid xid) {
        return {{"type", "BARRIER_REQUEST"}, {"xid", xid}};
    }

    inline ordered_json barrier_reply(const BarrierReply& r) {
        return {{"type", "BARRIER_REPLY"}, {"xid", r.xid}, {"committed_xids", r.committed_xids}};
    }

    inline ordered_json error(std::string_view detail) {
        return {{"type", "ERROR"}, {"detail", detail}};
    }

    inline FlowModAck parse_flow_mod_ack(const json& j) {
        if (j.value("type", "") != "FLOW_MOD_ACK") {
            throw TransportError("expected FLOW_MOD_ACK, got: " + j.dump());
        }
        auto status = parse_ack_status(detail::require<std::string>(j, "status", "FLOW_MOD_ACK"));
        if (!status) {
            throw TransportError("unknown ack status in: " + j.dump());
        }
        return {detail::require<Xid>(j, "xid", "FLOW_MOD_ACK"), *status};
    }

    inline BarrierReply parse_barrier_reply(const json& j) {
        if (j.value("type", "") != "BARRIER_REPLY") {
            throw TransportError("expected BARRIER_REPLY, got: " + j.dump());
        }
        return {detail::require<Xid>(j, "xid", "BARRIER_REPLY"),
                detail::require<std::vector<Xid>>(j, "committed_xids", "BARRIER_REPLY")};
    }

} // namespace wire

// ---- switch state --------------------------------------------------------

/// Committed cross-connect table plus the staged batch awaiting a barrier.
/// Plain value type; SwitchAgent adds the locking.
class SwitchState {
public:
    SwitchState() = default;
    SwitchState(SwitchId id, int port_count) : id_(std::move(id)), port_count_(port_count) {}

    const SwitchId& id() const { return id_; }
    int port_count() const { return port_count_; }

    FlowModAck handle_flow_mod(const FlowMod& msg) {
        if (!valid_port(msg.in_port) || !valid_port(msg.out_port)) {
            return {msg.xid, AckStatus::NoSuchPort};
        }
        const CrossConnectTable after = projected();
        if (msg.command == FlowCommand::Add) {
            if (msg.in_port == msg.out_port || port_used(after, msg.in_port) || port_used(after, msg.out_port)) {
                return {msg.xid, AckStatus::PortInUse};
            }
        } else {
            auto it = after.find(msg.in_port);
            if (it == after.end() || it->second != msg.out_port) {
                return {msg.xid, AckStatus::NoSuchEntry};
            }
        }
        pending_.push_back(msg);
        return {msg.xid, AckStatus::Staged};
    }

    BarrierReply handle_barrier(Xid xid) {
        BarrierReply reply{xid, {}};
        reply.committed_xids.reserve(pending_.size());
        for (const FlowMod& m : pending_) {
            apply(table_, m);
            reply.committed_xids.push_back(m.xid);
        }
        pending_.clear();
        return reply;
    }

    const CrossConnectTable& query_table() const { return table_; }
    const std::vector<FlowMod>& pending() const { return pending_; }

private:
    static void apply(CrossConnectTable& table, const FlowMod& m) {
        if (m.command == FlowCommand::Add) {
            table[m.in_port] = m.out_port;
        } else {
            table.erase(m.in_port);
        }
    }

    static bool port_used(const CrossConnectTable& table, PortId port) {
        if (table.contains(port)) return true;
        for (const auto& [in, out] : table) {
            if (out == port) return true;
        }
        return false;
    }

    bool valid_port(PortId p) const { return p >= 1 && p <= port_count_; }

    // Table as it will look once the staged batch commits.
    CrossConnectTable projected() const {
        CrossConnectTable t = table_;
        for (const FlowMod& m : pending_) apply(t, m);
        return t;
    }

    SwitchId id_;
    int port_count_ = 0;
    CrossConnectTable table_;
    std::vector<FlowMod> pending_;
};

/// Switch agent: serializes controller messages against one SwitchState and
/// hands out consistent snapshots of the committed table to any thread.
class SwitchAgent {
public:
    SwitchAgent(SwitchId id, int port_count) : state_(std::move(id), port_count) {}

    SwitchAgent(const SwitchAgent&) = delete;
    SwitchAgent& operator=(const SwitchAgent&) = delete;

    const SwitchId& id() const { return state_.id(); }

    FlowModAck handle_flow_mod(const FlowMod& msg) {
        std::lock_guard lock(mutex_);
        return state_.handle_flow_mod(msg);
    }

    BarrierReply handle_barrier(Xid xid) {
        std::lock_guard lock(mutex_);
        return state_.handle_barrier(xid);
    }

    CrossConnectTable query_table() const {
        std::lock_guard lock(mutex_);
        return state_.query_table();
    }

    // Test hook.
    std::vector<FlowMod> pending() const {
        std::lock_guard lock(mutex_);
        return state_.pending();
    }

    /// Dispatches one decoded wire message and returns the reply.
    ordered_json handle_message(const json& msg) {
        const std::string type = msg.value("type", "");
        try {
            if (type == "FLOW_MOD") {
                FlowMod m;
                m.xid = detail::require<Xid>(msg, "xid", "FLOW_MOD");
                m.switch_id = id();
                const auto cmd = detail::require<std::string>(msg, "command", "FLOW_MOD");
                if (cmd != "ADD" && cmd != "DELETE") {
                    return wire::error("FLOW_MOD: unknown command '" + cmd + "'");
                }
                m.command = cmd == "ADD" ? FlowCommand::Add : FlowCommand::Delete;
                m.in_port = detail::require<PortId>(msg, "in_port", "FLOW_MOD");
                m.out_port = detail::require<PortId>(msg, "out_port", "FLOW_MOD");
                return wire::flow_mod_ack(handle_flow_mod(m));
            }
            if (type == "BARRIER_REQUEST") {
                return wire::barrier_reply(handle_barrier(detail::require<Xid>(msg, "xid", "BARRIER_REQUEST")));
            }
        } catch (const ValidationError& e) {
            return wire::error(e.what());
        }
        return wire::error("unknown message type '" + type + "'");
    }

    /// Line-oriented entry point used by every transport.
    std::string handle_line(std::string_view line) {
        json msg;
        try {
            msg = json::parse(line);
        } catch (const json::parse_error& e) {
            return wire::error(std::string("malformed message: ") + e.what()).dump();
        }
        return handle_message(msg).dump();
    }

private:
    mutable std::mutex mutex_;
    SwitchState state_;
};

} // namespace qkdsim

#pragma once

// SDN controller: turns path reconfiguration requests into per-switch
// flow-mods, stages them everywhere, then commits switch by switch with
// barriers. The Alice-side switch commits last so the new circuit only
// closes once every other hop is in place.

#include "qkdsim/clock.hpp"
#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/net.hpp"
#include "qkdsim/optical_switch.hpp"
#include "qkdsim/topology.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace qkdsim {

// ---- southbound channels -------------------------------------------------

/// Request/response link to one switch agent, carrying encoded wire messages.
class SwitchChannel {
public:
    virtual ~SwitchChannel() = default;
    virtual json exchange(const ordered_json& request) = 0;
    virtual bool connected() const = 0;
};

/// In-process channel. Messages still go through the JSON encoding; the
/// round trip costs `latency_s` on the supplied clock.
class LocalSwitchChannel final : public SwitchChannel {
public:
    LocalSwitchChannel(SwitchAgent& agent, Clock& clock, double latency_s = 0.0)
        : agent_(agent), clock_(clock), latency_s_(latency_s) {}

    json exchange(const ordered_json& request) override {
        std::string reply = agent_.handle_line(request.dump());
        if (latency_s_ > 0.0) clock_.sleep_for(latency_s_);
        if (after_exchange_) after_exchange_();
        return json::parse(reply);
    }

    bool connected() const override { return connected_; }
    void set_connected(bool c) { connected_ = c; }

    // Test hook: runs after every message round trip.
    void set_after_exchange(std::function<void()> hook) { after_exchange_ = std::move(hook); }

private:
    SwitchAgent& agent_;
    Clock& clock_;
    double latency_s_;
    bool connected_ = true;
    std::function<void()> after_exchange_;
};

class TcpSwitchChannel final : public SwitchChannel {
public:
    explicit TcpSwitchChannel(net::LineStream stream) : stream_(std::move(stream)) {}

    json exchange(const ordered_json& request) override {
        std::lock_guard lock(mutex_);
        if (!connected_) throw TransportError("switch disconnected");
        try {
            stream_.write_line(request.dump());
        } catch (const TransportError&) {
            connected_ = false;
            throw;
        }
        auto line = stream_.read_line();
        if (!line) {
            connected_ = false;
            throw TransportError("switch closed the connection");
        }
        try {
            return json::parse(*line);
        } catch (const json::parse_error& e) {
            throw TransportError(std::string("malformed reply from switch: ") + e.what());
        }
    }

    bool connected() const override {
        std::lock_guard lock(mutex_);
        return connected_;
    }

private:
    mutable std::mutex mutex_;
    net::LineStream stream_;
    bool connected_ = true;
};

// ---- requests and reports ------------------------------------------------

struct ReconfigRequest {
    std::string request_id;
    std::optional<std::string> tear_down;
    std::string set_up;
};

enum class TransactionStatus { Pending, Acked, Failed };

inline std::string_view to_string(TransactionStatus s) {
    switch (s) {
    case TransactionStatus::Pending: return "PENDING";
    case TransactionStatus::Acked: return "ACKED";
    case TransactionStatus::Failed: return "FAILED";
    }
    return "?";
}

struct Transaction {
    Xid xid = 0;
    SwitchId switch_id;
    FlowMod flow_mod;
    TransactionStatus status = TransactionStatus::Pending;
};

enum class Outcome { Success, Failed };

struct ReconfigReport {
    std::string request_id;
    std::vector<Transaction> transactions;
    double started_at = 0.0;
    double completed_at = 0.0;
    Outcome outcome = Outcome::Failed;
    std::string detail;

    double duration_ms() const { return (completed_at - started_at) * 1000.0; }
};

inline ordered_json to_json_value(const ReconfigRequest& r) {
    ordered_json j = {{"request_id", r.request_id}, {"tear_down", nullptr}, {"set_up", r.set_up}};
    if (r.tear_down) j["tear_down"] = *r.tear_down;
    return j;
}

inline ReconfigRequest parse_reconfig_request(const json& j) {
    if (!j.is_object()) throw RequestError("request body must be a JSON object");
    ReconfigRequest r;
    try {
        r.request_id = detail::require<std::string>(j, "request_id", "reconfigure");
        r.set_up = detail::require<std::string>(j, "set_up", "reconfigure");
        if (j.contains("tear_down") && !j.at("tear_down").is_null()) {
            r.tear_down = detail::require<std::string>(j, "tear_down", "reconfigure");
        }
    } catch (const ValidationError& e) {
        throw RequestError(e.what());
    }
    return r;
}

inline ordered_json to_json_value(const ReconfigReport& r) {
    ordered_json txs = ordered_json::array();
    for (const auto& t : r.transactions) {
        txs.push_back({{"xid", t.xid}, {"switch", t.switch_id}, {"status", to_string(t.status)}});
    }
    return {{"request_id", r.request_id},
            {"outcome", r.outcome == Outcome::Success ? "SUCCESS" : "FAILED"},
            {"transactions", txs},
            {"duration_ms", r.duration_ms()}};
}

inline ReconfigReport parse_reconfig_report(const json& j) {
    ReconfigReport r;
    r.request_id = detail::require<std::string>(j, "request_id", "report");
    const auto outcome = detail::require<std::string>(j, "outcome", "report");
    r.outcome = outcome == "SUCCESS" ? Outcome::Success : Outcome::Failed;
    for (const auto& t : detail::require<json>(j, "transactions", "report")) {
        Transaction tx;
        tx.xid = detail::require<Xid>(t, "xid", "report.transactions");
        tx.switch_id = detail::require<std::string>(t, "switch", "report.transactions");
        const auto status = detail::require<std::string>(t, "status", "report.transactions");
        tx.status = status == "ACKED" ? TransactionStatus::Acked
                    : status == "FAILED" ? TransactionStatus::Failed
                                         : TransactionStatus::Pending;
        r.transactions.push_back(std::move(tx));
    }
    r.completed_at = detail::require<double>(j, "duration_ms", "report") / 1000.0;
    return r;
}

// ---- controller ----------------------------------------------------------

class Controller {
public:
    using LogSink = std::function<void(const ordered_json&)>;

    Controller(Topology topology, Clock& clock) : topo_(std::move(topology)), clock_(clock) {}

    const Topology& topology() const { return topo_; }

    void attach(const SwitchId& id, std::shared_ptr<SwitchChannel> channel) {
        std::lock_guard lock(channels_mutex_);
        channels_[id] = std::move(channel);
    }

    void detach(const SwitchId& id) {
        std::lock_guard lock(channels_mutex_);
        channels_.erase(id);
    }

    bool is_connected(const SwitchId& id) const {
        std::lock_guard lock(channels_mutex_);
        auto it = channels_.find(id);
        return it != channels_.end() && it->second->connected();
    }

    void set_log_sink(LogSink sink) { log_ = std::move(sink); }

    /// Fresh transaction id; 1 on first call, strictly increasing, thread-safe.
    Xid next_xid() { return xid_counter_.fetch_add(1, std::memory_order_relaxed) + 1; }

    /// Path most recently installed by a successful request, if any.
    std::optional<std::string> installed_path() const {
        std::lock_guard lock(state_mutex_);
        return installed_;
    }

    /// Executes one reconfiguration. Requests are serialized. Throws
    /// RequestError (before sending anything) when the request names an
    /// unknown path; every other failure comes back as a FAILED report with
    /// the staged changes rolled back.
    ReconfigReport handle_reconfigure(const ReconfigRequest& req) {
        const PathSpec* set_up = topo_.find_path(req.set_up);
        if (set_up == nullptr) throw RequestError("unknown set_up path '" + req.set_up + "'");
        const PathSpec* tear_down = nullptr;
        if (req.tear_down) {
            tear_down = topo_.find_path(*req.tear_down);
            if (tear_down == nullptr) throw RequestError("unknown tear_down path '" + *req.tear_down + "'");
        }

        std::lock_guard serial(reconfig_mutex_);
        ReconfigReport report;
        report.request_id = req.request_id;
        report.started_at = clock_.now();

        // Deletes before adds on each switch, so a shared endpoint port is free again.
        std::map<SwitchId, std::vector<FlowMod>> ops;
        if (tear_down != nullptr) {
            for (const auto& xc : tear_down->cross_connects) {
                ops[xc.switch_id].push_back({0, xc.switch_id, FlowCommand::Delete, xc.in_port, xc.out_port});
            }
        }
        for (const auto& xc : set_up->cross_connects) {
            ops[xc.switch_id].push_back({0, xc.switch_id, FlowCommand::Add, xc.in_port, xc.out_port});
        }
        const std::vector<SwitchId> order = commit_order(ops);

        std::vector<std::pair<SwitchId, std::shared_ptr<SwitchChannel>>> links;
        for (const auto& sw : order) {
            auto ch = channel(sw);
            if (!ch || !ch->connected()) {
                return finish(std::move(report), Outcome::Failed, "switch '" + sw + "' is not connected");
            }
            links.emplace_back(sw, std::move(ch));
        }

        std::map<SwitchId, std::vector<FlowMod>> staged;
        std::string failure;
        for (auto& [sw, ch] : links) {
            for (FlowMod op : ops[sw]) {
                op.xid = next_xid();
                Transaction tx{op.xid, sw, op, TransactionStatus::Pending};
                try {
                    const FlowModAck ack = wire::parse_flow_mod_ack(ch->exchange(wire::flow_mod(op)));
                    if (ack.xid != op.xid) throw TransportError("ack xid mismatch");
                    tx.status = ack.status == AckStatus::Staged ? TransactionStatus::Acked : TransactionStatus::Failed;
                    log_flow_mod(req.request_id, op, std::string(to_string(ack.status)));
                    if (ack.status == AckStatus::Staged) {
                        staged[sw].push_back(op);
                    } else {
                        failure = "xid " + std::to_string(op.xid) + " on '" + sw + "' rejected: " +
                                  std::string(to_string(ack.status));
                    }
                } catch (const std::exception& e) {
                    log_flow_mod(req.request_id, op, "NO_REPLY");
                    failure = "xid " + std::to_string(op.xid) + " on '" + sw + "': " + e.what();
                }
                report.transactions.push_back(std::move(tx));
                if (!failure.empty()) break;
            }
            if (!failure.empty()) break;
        }

        if (failure.empty()) {
            for (auto& [sw, ch] : links) {
                try {
                    const Xid xid = next_xid();
                    const BarrierReply reply = wire::parse_barrier_reply(ch->exchange(wire::barrier_request(xid)));
                    log_barrier(req.request_id, sw, reply);
                    std::vector<Xid> expected;
                    for (const auto& op : staged[sw]) expected.push_back(op.xid);
                    if (reply.xid != xid || reply.committed_xids != expected) {
                        failure = "barrier on '" + sw + "' committed an unexpected batch";
                        break;
                    }
                } catch (const std::exception& e) {
                    failure = "barrier on '" + sw + "': " + e.what();
                    break;
                }
            }
        }

        if (!failure.empty()) {
            // Undo in reverse: cancels staged changes, reverts committed ones.
            for (auto& [sw, ch] : links) {
                auto it = staged.find(sw);
                if (it == staged.end() || it->second.empty()) continue;
                rollback(req.request_id, sw, *ch, it->second, report);
            }
            return finish(std::move(report), Outcome::Failed, failure);
        }

        {
            std::lock_guard lock(state_mutex_);
            installed_ = set_up->id;
        }
        return finish(std::move(report), Outcome::Success, "");
    }

    struct PathInfo {
        std::string id;
        std::string link;
        bool installed = false;
    };

    std::vector<PathInfo> paths() const {
        std::vector<PathInfo> out;
        const auto inst = installed_path();
        for (const auto& p : topo_.paths) out.push_back({p.id, p.link_id, inst && *inst == p.id});
        return out;
    }

private:
    std::shared_ptr<SwitchChannel> channel(const SwitchId& id) const {
        std::lock_guard lock(channels_mutex_);
        auto it = channels_.find(id);
        return it == channels_.end() ? nullptr : it->second;
    }

    std::vector<SwitchId> commit_order(const std::map<SwitchId, std::vector<FlowMod>>& ops) const {
        std::vector<SwitchId> order;
        for (const auto& s : topo_.switches) {
            if (ops.contains(s.id) && s.id != topo_.alice_port.switch_id) order.push_back(s.id);
        }
        if (ops.contains(topo_.alice_port.switch_id)) order.push_back(topo_.alice_port.switch_id);
        return order;
    }

    void rollback(const std::string& request_id, const SwitchId& sw, SwitchChannel& ch,
                  const std::vector<FlowMod>& done, ReconfigReport& report) {
        std::vector<Xid> sent;
        for (auto it = done.rbegin(); it != done.rend(); ++it) {
            FlowMod inverse = *it;
            inverse.command = it->command == FlowCommand::Add ? FlowCommand::Delete : FlowCommand::Add;
            inverse.xid = next_xid();
            Transaction tx{inverse.xid, sw, inverse, TransactionStatus::Pending};
            try {
                const FlowModAck ack = wire::parse_flow_mod_ack(ch.exchange(wire::flow_mod(inverse)));
                tx.status = ack.status == AckStatus::Staged ? TransactionStatus::Acked : TransactionStatus::Failed;
                log_flow_mod(request_id, inverse, std::string(to_string(ack.status)) + " (rollback)");
            } catch (const std::exception&) {
                log_flow_mod(request_id, inverse, "NO_REPLY (rollback)");
            }
            report.transactions.push_back(std::move(tx));
        }
        try {
            const BarrierReply reply = wire::parse_barrier_reply(ch.exchange(wire::barrier_request(next_xid())));
            log_barrier(request_id, sw, reply);
        } catch (const std::exception&) {
        }
    }

    ReconfigReport finish(ReconfigReport report, Outcome outcome, std::string detail) {
        report.outcome = outcome;
        report.detail = std::move(detail);
        report.completed_at = clock_.now();
        if (log_) {
            ordered_json rec = {{"t", report.completed_at},
                                {"type", "REPORT"},
                                {"request_id", report.request_id},
                                {"outcome", outcome == Outcome::Success ? "SUCCESS" : "FAILED"},
                                {"duration_ms", report.duration_ms()}};
            if (!report.detail.empty()) rec["detail"] = report.detail;
            log_(rec);
        }
        return report;
    }

    void log_flow_mod(const std::string& request_id, const FlowMod& m, const std::string& status) {
        if (!log_) return;
        log_({{"t", clock_.now()},
              {"type", "FLOW_MOD"},
              {"request_id", request_id},
              {"xid", m.xid},
              {"switch", m.switch_id},
              {"command", to_string(m.command)},
              {"in_port", m.in_port},
              {"out_port", m.out_port},
              {"status", status}});
    }

    void log_barrier(const std::string& request_id, const SwitchId& sw, const BarrierReply& reply) {
        if (!log_) return;
        log_({{"t", clock_.now()},
              {"type", "BARRIER"},
              {"request_id", request_id},
              {"xid", reply.xid},
              {"switch", sw},
              {"committed_xids", reply.committed_xids}});
    }

    Topology topo_;
    Clock& clock_;
    LogSink log_;
    std::atomic<Xid> xid_counter_{0};

    mutable std::mutex channels_mutex_;
    std::map<SwitchId, std::shared_ptr<SwitchChannel>> channels_;

    std::mutex reconfig_mutex_;
    mutable std::mutex state_mutex_;
    std::optional<std::string> installed_;
};

/// Accepts switch agent connections: each agent opens with HELLO and is then
/// attached to the controller under the switch id it announced.
class SouthboundListener {
public:
    SouthboundListener(Controller& controller, std::uint16_t port = 0)
        : controller_(controller), listener_(port) {
        thread_ = std::thread([this] { accept_loop(); });
    }

    ~SouthboundListener() { stop(); }

    SouthboundListener(const SouthboundListener&) = delete;
    SouthboundListener& operator=(const SouthboundListener&) = delete;

    std::uint16_t port() const { return listener_.port(); }

    void stop() {
        if (stopped_.exchange(true)) return;
        listener_.shutdown();
        if (thread_.joinable()) thread_.join();
    }

private:
    void accept_loop() {
        while (!stopped_) {
            auto sock = listener_.accept();
            if (!sock) return;
            net::LineStream stream(std::move(*sock));
            auto hello = stream.read_line();
            if (!hello) continue;
            try {
                const json msg = json::parse(*hello);
                if (msg.value("type", "") != "HELLO") continue;
                const auto id = msg.at("switch").get<std::string>();
                controller_.attach(id, std::make_shared<TcpSwitchChannel>(std::move(stream)));
            } catch (const std::exception&) {
                continue;
            }
        }
    }

    Controller& controller_;
    net::TcpListener listener_;
    std::atomic<bool> stopped_{false};
    std::thread thread_;
};

/// Switch-side end of the southbound connection: dials the controller,
/// announces itself, then answers messages until the connection closes.
class SwitchAgentConnection {
public:
    SwitchAgentConnection(SwitchAgent& agent, const std::string& host, std::uint16_t port)
        : agent_(agent), stream_(net::connect_tcp(host, port)) {
        stream_.write_line(wire::hello(agent_.id()).dump());
        thread_ = std::thread([this] { serve(); });
    }

    ~SwitchAgentConnection() { close(); }

    SwitchAgentConnection(const SwitchAgentConnection&) = delete;
    SwitchAgentConnection& operator=(const SwitchAgentConnection&) = delete;

    void close() {
        stream_.shutdown();
        if (thread_.joinable()) thread_.join();
    }

private:
    void serve() {
        while (auto line = stream_.read_line()) {
            try {
                stream_.write_line(agent_.handle_line(*line));
            } catch (const TransportError&) {
                return;
            }
        }
    }

    SwitchAgent& agent_;
    net::LineStream stream_;
    std::thread thread_;
};

} // namespace qkdsim

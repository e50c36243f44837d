#pragma once

// Monitoring channel between the QKD units and the monitor application.
// Newline-delimited JSON: {"op":"read_monitor"} -> MonitorReading,
// {"op":"start_session"} -> {"ok": bool, "state": str}.

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/net.hpp"
#include "qkdsim/qkd_unit.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

namespace qkdsim {

using QkdHandler = std::function<ordered_json(const json&)>;

class QkdClient {
public:
    virtual ~QkdClient() = default;
    virtual MonitorReading read_monitor() = 0;
    /// Asks the units to (re)initialize on the circuit currently in place.
    virtual bool start_session() = 0;
};

namespace detail {

    inline MonitorReading reading_from_reply(const json& reply) {
        try {
            return parse_monitor_reading(reply);
        } catch (const ValidationError& e) {
            throw TransportError(std::string("bad monitor reply: ") + e.what());
        }
    }

} // namespace detail

// In-process client; still encodes and decodes every message.
class LocalQkdClient final : public QkdClient {
public:
    explicit LocalQkdClient(QkdHandler handler) : handler_(std::move(handler)) {}

    MonitorReading read_monitor() override {
        return detail::reading_from_reply(round_trip({{"op", "read_monitor"}}));
    }

    bool start_session() override { return round_trip({{"op", "start_session"}}).value("ok", false); }

private:
    json round_trip(const ordered_json& request) {
        return json::parse(handler_(json::parse(request.dump())).dump());
    }

    QkdHandler handler_;
};

class TcpQkdClient final : public QkdClient {
public:
    TcpQkdClient(const std::string& host, std::uint16_t port) : stream_(net::connect_tcp(host, port)) {}

    MonitorReading read_monitor() override {
        return detail::reading_from_reply(round_trip({{"op", "read_monitor"}}));
    }

    bool start_session() override { return round_trip({{"op", "start_session"}}).value("ok", false); }

private:
    json round_trip(const ordered_json& request) {
        std::lock_guard lock(mutex_);
        stream_.write_line(request.dump());
        auto line = stream_.read_line();
        if (!line) throw TransportError("QKD monitor closed the connection");
        return json::parse(*line);
    }

    std::mutex mutex_;
    net::LineStream stream_;
};

/// Serves the monitoring channel on a local TCP port, one thread per client.
/// The handler is called under a single lock, so it never runs concurrently.
class QkdMonitorServer {
public:
    explicit QkdMonitorServer(QkdHandler handler, std::uint16_t port = 0)
        : handler_(std::move(handler)), listener_(port) {
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    ~QkdMonitorServer() { stop(); }

    QkdMonitorServer(const QkdMonitorServer&) = delete;
    QkdMonitorServer& operator=(const QkdMonitorServer&) = delete;

    std::uint16_t port() const { return listener_.port(); }

    void stop() {
        if (stopped_.exchange(true)) return;
        listener_.shutdown();
        if (accept_thread_.joinable()) accept_thread_.join();
        std::lock_guard lock(sessions_mutex_);
        for (auto& s : sessions_) s.stream->shutdown();
        for (auto& s : sessions_) {
            if (s.thread.joinable()) s.thread.join();
        }
    }

private:
    struct Session {
        std::shared_ptr<net::LineStream> stream;
        std::thread thread;
    };

    void accept_loop() {
        while (!stopped_) {
            auto sock = listener_.accept();
            if (!sock) return;
            auto stream = std::make_shared<net::LineStream>(std::move(*sock));
            std::lock_guard lock(sessions_mutex_);
            sessions_.push_back({stream, std::thread([this, stream] { serve(*stream); })});
        }
    }

    void serve(net::LineStream& stream) {
        while (auto line = stream.read_line()) {
            ordered_json reply;
            try {
                const json req = json::parse(*line);
                std::lock_guard lock(handler_mutex_);
                reply = handler_(req);
            } catch (const std::exception& e) {
                reply = {{"error", e.what()}};
            }
            try {
                stream.write_line(reply.dump());
            } catch (const TransportError&) {
                return;
            }
        }
    }

    QkdHandler handler_;
    std::mutex handler_mutex_;
    net::TcpListener listener_;
    std::atomic<bool> stopped_{false};
    std::thread accept_thread_;
    std::mutex sessions_mutex_;
    std::list<Session> sessions_;
};

} // namespace qkdsim

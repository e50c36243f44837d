#pragma once

// Northbound REST interface of the controller:
//   POST /reconfigure  {"request_id", "tear_down", "set_up"} -> report
//   GET  /paths        ordered path list with install status

#include "qkdsim/clock.hpp"
#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/sdn_controller.hpp"

#include <httplib.h>

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>

namespace qkdsim {

struct HttpReply {
    int status = 200;
    std::string body;
};

/// Transport-independent request handling, shared by the HTTP server and the
/// in-process client so both speak exactly the same JSON.
class NorthboundApi {
public:
    static constexpr int kQueueDepth = 16;

    explicit NorthboundApi(Controller& controller) : controller_(controller) {}

    HttpReply post_reconfigure(std::string_view body) {
        ReconfigRequest req;
        try {
            req = parse_reconfig_request(json::parse(body));
        } catch (const json::parse_error& e) {
            return error_reply(400, std::string("malformed JSON: ") + e.what());
        } catch (const RequestError& e) {
            return error_reply(400, e.what());
        }

        // One request runs; up to kQueueDepth wait behind it.
        if (admitted_.fetch_add(1) >= kQueueDepth + 1) {
            admitted_.fetch_sub(1);
            return error_reply(409, "reconfiguration queue is full");
        }
        struct Release {
            std::atomic<int>& n;
            ~Release() { n.fetch_sub(1); }
        } release{admitted_};

        try {
            return {200, to_json_value(controller_.handle_reconfigure(req)).dump()};
        } catch (const RequestError& e) {
            return error_reply(400, e.what());
        }
    }

    // Requests currently running or queued.
    int in_flight() const { return admitted_.load(); }

    HttpReply get_paths() const {
        ordered_json arr = ordered_json::array();
        for (const auto& p : controller_.paths()) {
            arr.push_back({{"id", p.id}, {"link", p.link}, {"status", p.installed ? "INSTALLED" : "IDLE"}});
        }
        return {200, ordered_json{{"paths", arr}}.dump()};
    }

private:
    static HttpReply error_reply(int status, std::string_view message) {
        return {status, ordered_json{{"error", message}}.dump()};
    }

    Controller& controller_;
    std::atomic<int> admitted_{0};
};

class NorthboundHttpServer {
public:
    NorthboundHttpServer(NorthboundApi& api, const std::string& host = "127.0.0.1", int port = 0) : api_(api) {
        server_.Post("/reconfigure", [this](const httplib::Request& req, httplib::Response& res) {
            respond(res, api_.post_reconfigure(req.body));
        });
        server_.Get("/paths", [this](const httplib::Request&, httplib::Response& res) {
            respond(res, api_.get_paths());
        });
        // Room for a running request, a full queue, and one to turn away.
        server_.new_task_queue = [] { return new httplib::ThreadPool(NorthboundApi::kQueueDepth + 4); };
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw TransportError("northbound: cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~NorthboundHttpServer() { stop(); }

    NorthboundHttpServer(const NorthboundHttpServer&) = delete;
    NorthboundHttpServer& operator=(const NorthboundHttpServer&) = delete;

    int port() const { return port_; }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

private:
    static void respond(httplib::Response& res, const HttpReply& reply) {
        res.status = reply.status;
        res.set_content(reply.body, "application/json");
    }

    NorthboundApi& api_;
    httplib::Server server_;
    int port_ = -1;
    std::thread thread_;
};

// ---- clients used by the monitor ----------------------------------------

class ControllerClient {
public:
    virtual ~ControllerClient() = default;
    /// nullopt when the controller could not be reached or refused the request.
    virtual std::optional<ReconfigReport> reconfigure(const ReconfigRequest& request) = 0;
};

namespace detail {

    inline std::optional<ReconfigReport> report_from_reply(int status, const std::string& body) {
        if (status != 200) return std::nullopt;
        try {
            return parse_reconfig_report(json::parse(body));
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

} // namespace detail

/// Calls the API in-process; the request/response round trip costs
/// `latency_s` of clock time, split evenly across the two directions.
class LocalControllerClient final : public ControllerClient {
public:
    LocalControllerClient(NorthboundApi& api, Clock& clock, double latency_s = 0.0)
        : api_(api), clock_(clock), latency_s_(latency_s) {}

    std::optional<ReconfigReport> reconfigure(const ReconfigRequest& request) override {
        if (latency_s_ > 0.0) clock_.sleep_for(latency_s_ / 2.0);
        const HttpReply reply = api_.post_reconfigure(to_json_value(request).dump());
        if (latency_s_ > 0.0) clock_.sleep_for(latency_s_ / 2.0);
        return detail::report_from_reply(reply.status, reply.body);
    }

private:
    NorthboundApi& api_;
    Clock& clock_;
    double latency_s_;
};

class HttpControllerClient final : public ControllerClient {
public:
    HttpControllerClient(const std::string& host, int port) : client_(host, port) {
        client_.set_read_timeout(30, 0);
    }

    std::optional<ReconfigReport> reconfigure(const ReconfigRequest& request) override {
        auto res = client_.Post("/reconfigure", to_json_value(request).dump(), "application/json");
        if (!res) return std::nullopt;
        return detail::report_from_reply(res->status, res->body);
    }

private:
    httplib::Client client_;
};

} // namespace qkdsim

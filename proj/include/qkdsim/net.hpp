#pragma once

// Minimal blocking TCP plumbing for the newline-delimited JSON transports.

#include "qkdsim/error.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace qkdsim::net {

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket() { close(); }

    Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
    Socket& operator=(Socket&& other) noexcept {
        if (this != &other) {
            close();
            fd_ = std::exchange(other.fd_, -1);
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }

    // Unblocks any thread sitting in accept/recv on this socket.
    void shutdown() const {
        if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
    }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    int fd_ = -1;
};

namespace detail {

    inline sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        const std::string h = (host == "localhost" || host.empty()) ? "127.0.0.1" : host;
        if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
            throw TransportError("invalid IPv4 address '" + host + "'");
        }
        return addr;
    }

    inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

} // namespace detail

/// Buffered reader/writer of '\n'-terminated messages over a connected socket.
class LineStream {
public:
    explicit LineStream(Socket sock) : sock_(std::move(sock)) {}

    /// Next line without its terminator; nullopt once the peer has closed.
    std::optional<std::string> read_line() {
        for (;;) {
            if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            char chunk[4096];
            const ssize_t n = ::recv(sock_.fd(), chunk, sizeof chunk, 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) return std::nullopt;
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    void write_line(std::string_view line) {
        std::string framed(line);
        framed.push_back('\n');
        std::size_t sent = 0;
        while (sent < framed.size()) {
            const ssize_t n = ::send(sock_.fd(), framed.data() + sent, framed.size() - sent, MSG_NOSIGNAL);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) throw TransportError(detail::errno_text("send"));
            sent += static_cast<std::size_t>(n);
        }
    }

    void shutdown() const { sock_.shutdown(); }

private:
    Socket sock_;
    std::string buffer_;
};

class TcpListener {
public:
    /// Binds to host:port; port 0 picks an ephemeral port (see port()).
    explicit TcpListener(std::uint16_t port = 0, const std::string& host = "127.0.0.1") {
        Socket s(::socket(AF_INET, SOCK_STREAM, 0));
        if (!s.valid()) throw TransportError(detail::errno_text("socket"));
        int one = 1;
        ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr = detail::make_addr(host, port);
        if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
            throw TransportError(detail::errno_text("bind"));
        }
        if (::listen(s.fd(), 16) != 0) throw TransportError(detail::errno_text("listen"));
        socklen_t len = sizeof addr;
        ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        sock_ = std::move(s);
    }

    std::uint16_t port() const { return port_; }

    /// Blocks for the next connection; nullopt after shutdown().
    std::optional<Socket> accept() {
        for (;;) {
            const int fd = ::accept(sock_.fd(), nullptr, nullptr);
            if (fd >= 0) {
                int one = 1;
                ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
                return Socket(fd);
            }
            if (errno == EINTR) continue;
            return std::nullopt;
        }
    }

    void shutdown() const { sock_.shutdown(); }

private:
    Socket sock_;
    std::uint16_t port_ = 0;
};

inline Socket connect_tcp(const std::string& host, std::uint16_t port) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw TransportError(detail::errno_text("socket"));
    sockaddr_in addr = detail::make_addr(host, port);
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        throw TransportError(detail::errno_text("connect"));
    }
    int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return s;
}

} // namespace qkdsim::net

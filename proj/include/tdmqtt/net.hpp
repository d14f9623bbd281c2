#pragma once

// Blocking POSIX TCP sockets with deadlines, and a packet-framed channel on top.

#include <arpa/inet.h>
#include <cerrno>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tdmqtt/codec.hpp"
#include "tdmqtt/errors.hpp"
#include "tdmqtt/types.hpp"

namespace tdmqtt::net
{
using Clock = std::chrono::steady_clock;
using namespace std::chrono_literals;

inline std::string errno_text(int err) { return std::strerror(err); }

namespace detail
{
inline int remaining_ms(Clock::time_point deadline)
{
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return static_cast<int>(std::clamp<long long>(left, 0, 60'000));
}

inline void set_nonblocking(int fd, bool on)
{
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK));
}

struct AddrInfoDeleter
{
    void operator()(addrinfo* ai) const noexcept { ::freeaddrinfo(ai); }
};

inline std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const std::string& host, std::uint16_t port, bool passive)
{
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = passive ? AI_PASSIVE : 0;
    addrinfo* res = nullptr;
    const auto port_text = std::to_string(port);
    const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), port_text.c_str(), &hints, &res);
    if (rc != 0)
        throw ConnectFailed("cannot resolve '" + host + "': " + ::gai_strerror(rc));
    return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}
} // namespace detail

/// Owning file descriptor for a stream socket.
class Socket
{
public:
    Socket() = default;
    explicit Socket(int fd) noexcept : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept
    {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket() { reset(); }

    [[nodiscard]] int fd() const noexcept { return fd_; }
    [[nodiscard]] bool valid() const noexcept { return fd_ >= 0; }

    void reset() noexcept
    {
        if (fd_ >= 0)
            ::close(std::exchange(fd_, -1));
    }

    // Wakes any thread blocked in poll/recv on this socket.
    void shutdown() const noexcept
    {
        if (fd_ >= 0)
            ::shutdown(fd_, SHUT_RDWR);
    }

    /// TCP connect bounded by `timeout`. Throws ConnectFailed.
    [[nodiscard]] static Socket connect(const BrokerRef& to, std::chrono::milliseconds timeout)
    {
        const auto deadline = Clock::now() + timeout;
        auto ai = detail::resolve(to.name, to.port, false);
        std::string last_error = "no address";
        for (auto* a = ai.get(); a != nullptr; a = a->ai_next) {
            Socket s(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol));
            if (!s.valid()) {
                last_error = errno_text(errno);
                continue;
            }
            detail::set_nonblocking(s.fd(), true);
            int rc = ::connect(s.fd(), a->ai_addr, a->ai_addrlen);
            if (rc != 0 && errno != EINPROGRESS) {
                last_error = errno_text(errno);
                continue;
            }
            if (rc != 0) {
                pollfd pfd{s.fd(), POLLOUT, 0};
                rc = ::poll(&pfd, 1, detail::remaining_ms(deadline));
                if (rc == 0) {
                    last_error = "timed out";
                    continue;
                }
                int err = 0;
                socklen_t len = sizeof(err);
                ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
                if (rc < 0 || err != 0) {
                    last_error = errno_text(rc < 0 ? errno : err);
                    continue;
                }
            }
            detail::set_nonblocking(s.fd(), false);
            int one = 1;
            ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            return s;
        }
        throw ConnectFailed("connect to " + to.to_string() + " failed: " + last_error);
    }

    /// Wait until readable. Returns false on timeout.
    [[nodiscard]] bool wait_readable(Clock::time_point deadline) const
    {
        for (;;) {
            pollfd pfd{fd_, POLLIN, 0};
            const int rc = ::poll(&pfd, 1, detail::remaining_ms(deadline));
            if (rc > 0)
                return true;
            if (rc == 0) {
                if (Clock::now() >= deadline)
                    return false;
                continue;
            }
            if (errno != EINTR)
                throw ConnectionClosed("poll failed: " + errno_text(errno));
        }
    }

    /// Returns bytes read; 0 means orderly EOF.
    std::size_t read_some(std::span<std::uint8_t> buf) const
    {
        for (;;) {
            const auto n = ::recv(fd_, buf.data(), buf.size(), 0);
            if (n >= 0)
                return static_cast<std::size_t>(n);
            if (errno != EINTR)
                throw ConnectionClosed("recv failed: " + errno_text(errno));
        }
    }

    void write_all(std::span<const std::uint8_t> data) const
    {
        std::size_t off = 0;
        while (off < data.size()) {
            const auto n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR)
                    continue;
                throw ConnectionClosed("send failed: " + errno_text(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    void set_send_timeout(std::chrono::milliseconds t) const
    {
        timeval tv{static_cast<time_t>(t.count() / 1000), static_cast<suseconds_t>((t.count() % 1000) * 1000)};
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
    }

    [[nodiscard]] std::optional<std::string> peer_address() const
    {
        sockaddr_storage ss{};
        socklen_t len = sizeof(ss);
        if (::getpeername(fd_, reinterpret_cast<sockaddr*>(&ss), &len) != 0)
            return std::nullopt;
        char host[NI_MAXHOST];
        char serv[NI_MAXSERV];
        if (::getnameinfo(reinterpret_cast<sockaddr*>(&ss), len, host, sizeof(host), serv, sizeof(serv),
                          NI_NUMERICHOST | NI_NUMERICSERV) != 0)
            return std::nullopt;
        return std::string(host) + ':' + serv;
    }

private:
    int fd_ = -1;
};

/// Listening TCP socket.
class Listener
{
public:
    Listener(const std::string& host, std::uint16_t port, int backlog = 128)
    {
        auto ai = detail::resolve(host, port, true);
        std::string last_error = "no address";
        for (auto* a = ai.get(); a != nullptr; a = a->ai_next) {
            Socket s(::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol));
            if (!s.valid())
                continue;
            int one = 1;
            ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
            if (::bind(s.fd(), a->ai_addr, a->ai_addrlen) != 0 || ::listen(s.fd(), backlog) != 0) {
                last_error = errno_text(errno);
                continue;
            }
            sock_ = std::move(s);
            break;
        }
        if (!sock_.valid())
            throw ConnectFailed("cannot listen on " + host + ':' + std::to_string(port) + ": " + last_error);
    }

    [[nodiscard]] std::uint16_t port() const
    {
        sockaddr_storage ss{};
        socklen_t len = sizeof(ss);
        ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&ss), &len);
        if (ss.ss_family == AF_INET6)
            return ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
        return ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
    }

    /// Blocks until a connection arrives. Returns nullopt once the listener is shut down.
    [[nodiscard]] std::optional<Socket> accept() const
    {
        for (;;) {
            const int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
            if (fd >= 0) {
                int one = 1;
                ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
                return Socket(fd);
            }
            if (errno == EINTR || errno == ECONNABORTED)
                continue;
            return std::nullopt;
        }
    }

    void shutdown() const noexcept { sock_.shutdown(); }

private:
    Socket sock_;
};

/// MQTT packet framing over a socket. Reads are single-threaded; writes are serialized.
class PacketChannel
{
public:
    explicit PacketChannel(Socket s, std::size_t max_packet_size = 1 << 20)
        : sock_(std::move(s)), max_packet_size_(max_packet_size)
    {
        sock_.set_send_timeout(5s);
    }

    [[nodiscard]] static std::unique_ptr<PacketChannel> connect(const BrokerRef& to, std::chrono::milliseconds timeout)
    {
        return std::make_unique<PacketChannel>(Socket::connect(to, timeout));
    }

    void send(const ControlPacket& p)
    {
        const auto bytes = encode(p);
        std::lock_guard lock(write_mutex_);
        sock_.write_all(bytes);
    }

    /// Next packet, or nullopt if none arrived before `deadline`.
    /// Throws ConnectionClosed on EOF or socket error and ProtocolError on malformed input.
    [[nodiscard]] std::optional<ControlPacket> receive(Clock::time_point deadline)
    {
        for (;;) {
            if (auto p = try_decode())
                return p;
            if (!sock_.wait_readable(deadline))
                return std::nullopt;
            std::uint8_t chunk[4096];
            const auto n = sock_.read_some(chunk);
            if (n == 0)
                throw ConnectionClosed("connection closed by peer");
            buffer_.insert(buffer_.end(), chunk, chunk + n);
        }
    }

    [[nodiscard]] std::optional<ControlPacket> receive_for(std::chrono::milliseconds timeout)
    {
        return receive(Clock::now() + timeout);
    }

    /// Blocks until a packet arrives or the connection ends.
    [[nodiscard]] ControlPacket receive_blocking()
    {
        for (;;) {
            if (auto p = receive(Clock::now() + 1h))
                return std::move(*p);
        }
    }

    void shutdown() const noexcept { sock_.shutdown(); }
    [[nodiscard]] const Socket& socket() const noexcept { return sock_; }

private:
    std::optional<ControlPacket> try_decode()
    {
        if (buffer_.empty())
            return std::nullopt;
        auto result = decode(buffer_, max_packet_size_);
        if (auto* m = std::get_if<Malformed>(&result))
            throw ProtocolError("malformed packet: " + m->reason);
        if (auto* d = std::get_if<Decoded>(&result)) {
            buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(d->consumed));
            return std::move(d->packet);
        }
        return std::nullopt;
    }

    Socket sock_;
    std::size_t max_packet_size_;
    std::vector<std::uint8_t> buffer_;
    std::mutex write_mutex_;
};

/// Receive until a packet of type T arrives, skipping PINGRESP; any other packet is a protocol error
/// unless it is a DISCONNECT, which is returned through `disconnect` when provided.
template<class T>
[[nodiscard]] std::optional<T> expect(PacketChannel& ch, Clock::time_point deadline,
                                     std::optional<Disconnect>* disconnect = nullptr)
{
    for (;;) {
        auto p = ch.receive(deadline);
        if (!p)
            return std::nullopt;
        if (auto* t = std::get_if<T>(&*p))
            return std::move(*t);
        if (std::holds_alternative<PingResp>(*p))
            continue;
        if (auto* d = std::get_if<Disconnect>(&*p); d && disconnect) {
            *disconnect = std::move(*d);
            return std::nullopt;
        }
        throw ProtocolError("unexpected " + std::string(packet_name(*p)));
    }
}
} // namespace tdmqtt::net

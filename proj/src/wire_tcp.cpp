#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <limits>
#include <mutex>
#include <vector>

#include "ftl/transport.hpp"

namespace ftl::transport {

namespace {

using Clock = std::chrono::steady_clock;

[[noreturn]] void throw_errno(const std::string& what) {
  throw TransportError(what + ": " + std::strerror(errno));
}

// Remaining budget, floored at zero, as whole milliseconds for poll(2).
int remaining_ms(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  if (left.count() < 0) return 0;
  if (left.count() > std::numeric_limits<int>::max()) return std::numeric_limits<int>::max();
  return static_cast<int>(left.count());
}

void set_nonblocking(int fd) {
  int flags = fcntl(fd, F_GETFL, 0);
  if (flags < 0 || fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0) {
    throw_errno("fcntl(O_NONBLOCK)");
  }
}

class ScopedFd {
 public:
  ScopedFd() = default;
  explicit ScopedFd(int fd) : fd_(fd) {}
  ScopedFd(ScopedFd&& other) noexcept : fd_(other.release()) {}
  ScopedFd& operator=(ScopedFd&& other) noexcept {
    reset(other.release());
    return *this;
  }
  ~ScopedFd() { reset(); }

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void reset(int fd = -1) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
  }

 private:
  int fd_ = -1;
};

class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(ScopedFd fd) : fd_(std::move(fd)) {
    int one = 1;
    setsockopt(fd_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    set_nonblocking(fd_.get());
  }

  ~TcpConnection() override { close(); }

  void send(const wire::Message& msg) override {
    std::lock_guard<std::mutex> lock(send_mutex_);
    if (!fd_.valid()) throw TransportError("send on closed connection");
    std::vector<std::uint8_t> bytes = wire::encode_frame(msg);
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      ssize_t n = ::send(fd_.get(), bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n > 0) {
        sent += static_cast<std::size_t>(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
        pollfd pfd{fd_.get(), POLLOUT, 0};
        if (::poll(&pfd, 1, -1) < 0 && errno != EINTR) throw_errno("poll(send)");
        continue;
      }
      if (n < 0 && errno == EINTR) continue;
      throw_errno("send");
    }
  }

  std::optional<wire::Message> receive(std::chrono::milliseconds timeout) override {
    std::lock_guard<std::mutex> lock(recv_mutex_);
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      if (auto msg = try_parse()) return msg;
      if (!fd_.valid() || peer_closed_) throw TransportError("connection closed by peer");
      int wait = remaining_ms(deadline);
      if (wait == 0 && Clock::now() >= deadline) {
        // One last non-blocking drain in case data raced the deadline.
        if (!fill_buffer(0)) return std::nullopt;
        if (auto msg = try_parse()) return msg;
        return std::nullopt;
      }
      fill_buffer(wait);
    }
  }

  void close() override {
    peer_closed_ = true;
    fd_.reset();
  }

 private:
  // Pulls whatever bytes are available within `wait_ms`; returns whether any
  // arrived. EOF marks the connection for closure after the buffer drains.
  bool fill_buffer(int wait_ms) {
    pollfd pfd{fd_.get(), POLLIN, 0};
    int rc = ::poll(&pfd, 1, wait_ms);
    if (rc < 0) {
      if (errno == EINTR) return false;
      throw_errno("poll(receive)");
    }
    if (rc == 0) return false;
    std::uint8_t chunk[16384];
    ssize_t n = ::recv(fd_.get(), chunk, sizeof(chunk), 0);
    if (n > 0) {
      buffer_.insert(buffer_.end(), chunk, chunk + n);
      return true;
    }
    if (n == 0) {
      peer_closed_ = true;
      return false;
    }
    if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) return false;
    throw_errno("recv");
  }

  // Parses one complete frame from the front of the buffer, if present.
  // Partial frames stay buffered across receive() calls.
  std::optional<wire::Message> try_parse() {
    if (buffer_.size() < wire::kHeaderSize) return std::nullopt;
    wire::FrameHeader header =
        wire::decode_header(std::span<const std::uint8_t>(buffer_.data(), wire::kHeaderSize));
    const std::size_t total = wire::kHeaderSize + header.payload_len + wire::kTrailerSize;
    if (buffer_.size() < total) return std::nullopt;
    wire::Message msg =
        wire::decode_frame(std::span<const std::uint8_t>(buffer_.data(), total));
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(total));
    return msg;
  }

  ScopedFd fd_;
  std::mutex send_mutex_;
  std::mutex recv_mutex_;
  std::vector<std::uint8_t> buffer_;
  bool peer_closed_ = false;
};

class TcpListener final : public Listener {
 public:
  explicit TcpListener(ScopedFd fd) : fd_(std::move(fd)) { set_nonblocking(fd_.get()); }

  ~TcpListener() override { close(); }

  ConnectionPtr accept(std::chrono::milliseconds timeout) override {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      if (!fd_.valid()) throw TransportError("listener closed");
      int fd = ::accept(fd_.get(), nullptr, nullptr);
      if (fd >= 0) return std::make_unique<TcpConnection>(ScopedFd(fd));
      if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) throw_errno("accept");
      int wait = remaining_ms(deadline);
      if (wait == 0 && Clock::now() >= deadline) return nullptr;
      pollfd pfd{fd_.get(), POLLIN, 0};
      int rc = ::poll(&pfd, 1, wait);
      if (rc < 0 && errno != EINTR) throw_errno("poll(accept)");
      if (rc == 0) return nullptr;
    }
  }

  void close() override { fd_.reset(); }

 private:
  ScopedFd fd_;
};

}  // namespace

ListenerPtr tcp_listen(const std::string& host, std::uint16_t port, std::uint16_t* bound_port) {
  ScopedFd fd(::socket(AF_INET, SOCK_STREAM, 0));
  if (!fd.valid()) throw_errno("socket");
  int one = 1;
  setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host.empty() || host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    throw TransportError("tcp_listen: invalid IPv4 address " + host);
  }
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    throw_errno("bind " + host + ":" + std::to_string(port));
  }
  if (::listen(fd.get(), 64) < 0) throw_errno("listen");
  if (bound_port != nullptr) {
    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    if (getsockname(fd.get(), reinterpret_cast<sockaddr*>(&actual), &len) < 0) {
      throw_errno("getsockname");
    }
    *bound_port = ntohs(actual.sin_port);
  }
  return std::make_unique<TcpListener>(std::move(fd));
}

ConnectionPtr tcp_connect(const std::string& host, std::uint16_t port,
                          std::chrono::milliseconds timeout) {
  ScopedFd fd(::socket(AF_INET, SOCK_STREAM, 0));
  if (!fd.valid()) throw_errno("socket");
  set_nonblocking(fd.get());

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  std::string target = host.empty() || host == "localhost" ? "127.0.0.1" : host;
  if (inet_pton(AF_INET, target.c_str(), &addr.sin_addr) != 1) {
    throw TransportError("tcp_connect: invalid IPv4 address " + host);
  }

  int rc = ::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  if (rc < 0 && errno != EINPROGRESS) throw_errno("connect " + target);
  if (rc < 0) {
    pollfd pfd{fd.get(), POLLOUT, 0};
    int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (ready < 0) throw_errno("poll(connect)");
    if (ready == 0) throw TransportError("connect timeout to " + target);
    int err = 0;
    socklen_t len = sizeof(err);
    if (getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len) < 0) throw_errno("getsockopt");
    if (err != 0) {
      errno = err;
      throw_errno("connect " + target);
    }
  }
  return std::make_unique<TcpConnection>(std::move(fd));
}

}  // namespace ftl::transport

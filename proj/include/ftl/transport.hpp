#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "ftl/wire.hpp"

namespace ftl::transport {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One bidirectional, ordered message channel. send() is fire-and-forget;
// receive() blocks up to the deadline and returns nothing on timeout.
// Implementations must keep per-connection FIFO order and allow concurrent
// use of distinct connections.
class Connection {
 public:
  virtual ~Connection() = default;
  virtual void send(const wire::Message& msg) = 0;
  virtual std::optional<wire::Message> receive(std::chrono::milliseconds timeout) = 0;
  virtual void close() = 0;
};

using ConnectionPtr = std::unique_ptr<Connection>;

class Listener {
 public:
  virtual ~Listener() = default;
  // Next inbound connection, or nullptr when the deadline passes.
  virtual ConnectionPtr accept(std::chrono::milliseconds timeout) = 0;
  virtual void close() = 0;
};

using ListenerPtr = std::unique_ptr<Listener>;

// ---- in-process backend (registry by endpoint name) ----

ListenerPtr inproc_listen(const std::string& name);  // name already bound -> TransportError
ConnectionPtr inproc_connect(const std::string& name);  // no such listener -> TransportError

// Directly wired pair of endpoints, useful for tests.
std::pair<ConnectionPtr, ConnectionPtr> inproc_pair();

// ---- TCP backend ----

// Binds host:port (port 0 picks an ephemeral port, reported via bound_port).
ListenerPtr tcp_listen(const std::string& host, std::uint16_t port,
                       std::uint16_t* bound_port = nullptr);
ConnectionPtr tcp_connect(const std::string& host, std::uint16_t port,
                          std::chrono::milliseconds timeout);

// ---- fault injection ----

// Network behavior of one (possibly lossy, slow) link.
struct LinkModel {
  std::chrono::milliseconds latency_lo{0};
  std::chrono::milliseconds latency_hi{0};
  double drop_prob = 0.0;  // per delivery attempt
  std::uint64_t seed = 0;

  void validate() const;
};

// Wraps a connection so every delivery waits a seeded uniform latency and is
// lost with drop_prob. With drop_prob=0 and zero latency it behaves exactly
// like the inner connection.
ConnectionPtr faulty_link(ConnectionPtr inner, const LinkModel& link);

}  // namespace ftl::transport

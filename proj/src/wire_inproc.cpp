#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <utility>

#include "ftl/transport.hpp"

namespace ftl::transport {

namespace {

// One direction of a channel. Closing wakes all waiters; pending messages
// already in the queue are still delivered before the close is observed.
struct MsgQueue {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<wire::Message> queue;
  bool closed = false;

  void push(wire::Message msg) {
    {
      std::lock_guard<std::mutex> lock(mutex);
      if (closed) throw TransportError("send on closed connection");
      queue.push_back(std::move(msg));
    }
    cv.notify_all();
  }

  std::optional<wire::Message> pop(std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lock(mutex);
    if (!cv.wait_for(lock, timeout, [this] { return !queue.empty() || closed; })) {
      return std::nullopt;  // deadline passed
    }
    if (!queue.empty()) {
      wire::Message msg = std::move(queue.front());
      queue.pop_front();
      return msg;
    }
    throw TransportError("connection closed by peer");
  }

  void close() {
    {
      std::lock_guard<std::mutex> lock(mutex);
      closed = true;
    }
    cv.notify_all();
  }
};

class InprocConnection final : public Connection {
 public:
  InprocConnection(std::shared_ptr<MsgQueue> tx, std::shared_ptr<MsgQueue> rx)
      : tx_(std::move(tx)), rx_(std::move(rx)) {}

  ~InprocConnection() override { close(); }

  void send(const wire::Message& msg) override {
    // Round-trip through the codec so in-process delivery exercises the same
    // byte format (and the same validation) as the network backend.
    tx_->push(wire::decode_frame(wire::encode_frame(msg)));
  }

  std::optional<wire::Message> receive(std::chrono::milliseconds timeout) override {
    return rx_->pop(timeout);
  }

  void close() override {
    tx_->close();
    rx_->close();
  }

 private:
  std::shared_ptr<MsgQueue> tx_;
  std::shared_ptr<MsgQueue> rx_;
};

std::pair<ConnectionPtr, ConnectionPtr> make_pair_impl() {
  auto a_to_b = std::make_shared<MsgQueue>();
  auto b_to_a = std::make_shared<MsgQueue>();
  return {std::make_unique<InprocConnection>(a_to_b, b_to_a),
          std::make_unique<InprocConnection>(b_to_a, a_to_b)};
}

// Pending connections for one registered endpoint name.
struct ListenerState {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<ConnectionPtr> pending;  // server-side endpoints
  bool closed = false;
};

struct Registry {
  std::mutex mutex;
  std::map<std::string, std::shared_ptr<ListenerState>> endpoints;
};

Registry& registry() {
  static Registry r;
  return r;
}

class InprocListener final : public Listener {
 public:
  InprocListener(std::string name, std::shared_ptr<ListenerState> state)
      : name_(std::move(name)), state_(std::move(state)) {}

  ~InprocListener() override { close(); }

  ConnectionPtr accept(std::chrono::milliseconds timeout) override {
    std::unique_lock<std::mutex> lock(state_->mutex);
    if (!state_->cv.wait_for(lock, timeout,
                             [this] { return !state_->pending.empty() || state_->closed; })) {
      return nullptr;
    }
    if (!state_->pending.empty()) {
      ConnectionPtr conn = std::move(state_->pending.front());
      state_->pending.pop_front();
      return conn;
    }
    throw TransportError("listener closed");
  }

  void close() override {
    {
      std::lock_guard<std::mutex> lock(state_->mutex);
      if (state_->closed) return;
      state_->closed = true;
    }
    state_->cv.notify_all();
    std::lock_guard<std::mutex> lock(registry().mutex);
    auto it = registry().endpoints.find(name_);
    if (it != registry().endpoints.end() && it->second == state_) {
      registry().endpoints.erase(it);
    }
  }

 private:
  std::string name_;
  std::shared_ptr<ListenerState> state_;
};

}  // namespace

ListenerPtr inproc_listen(const std::string& name) {
  auto state = std::make_shared<ListenerState>();
  {
    std::lock_guard<std::mutex> lock(registry().mutex);
    auto [it, inserted] = registry().endpoints.emplace(name, state);
    if (!inserted) throw TransportError("inproc endpoint already bound: " + name);
  }
  return std::make_unique<InprocListener>(name, std::move(state));
}

ConnectionPtr inproc_connect(const std::string& name) {
  std::shared_ptr<ListenerState> state;
  {
    std::lock_guard<std::mutex> lock(registry().mutex);
    auto it = registry().endpoints.find(name);
    if (it == registry().endpoints.end()) {
      throw TransportError("no inproc listener named " + name);
    }
    state = it->second;
  }
  auto [client_end, server_end] = make_pair_impl();
  {
    std::lock_guard<std::mutex> lock(state->mutex);
    if (state->closed) throw TransportError("inproc listener closed: " + name);
    state->pending.push_back(std::move(server_end));
  }
  state->cv.notify_all();
  return std::move(client_end);
}

std::pair<ConnectionPtr, ConnectionPtr> inproc_pair() { return make_pair_impl(); }

}  // namespace ftl::transport

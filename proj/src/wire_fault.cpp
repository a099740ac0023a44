#include <chrono>
#include <mutex>
#include <thread>

#include "ftl/errors.hpp"
#include "ftl/rng.hpp"
#include "ftl/transport.hpp"

namespace ftl::transport {

void LinkModel::validate() const {
  if (latency_lo.count() < 0 || latency_hi.count() < 0 || latency_lo > latency_hi) {
    throw ConfigError("link: latency interval must satisfy 0 <= lo <= hi");
  }
  if (drop_prob < 0.0 || drop_prob > 1.0) {
    throw ConfigError("link: drop_prob must be in [0, 1]");
  }
}

namespace {

using Clock = std::chrono::steady_clock;

class FaultyConnection final : public Connection {
 public:
  FaultyConnection(ConnectionPtr inner, const LinkModel& link)
      : inner_(std::move(inner)), link_(link), rng_(link.seed) {
    link_.validate();
  }

  void send(const wire::Message& msg) override {
    auto [latency, dropped] = draw();
    if (latency.count() > 0) std::this_thread::sleep_for(latency);
    if (dropped) return;  // lost in transit; the peer simply never sees it
    inner_->send(msg);
  }

  std::optional<wire::Message> receive(std::chrono::milliseconds timeout) override {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      if (left.count() < 0) left = std::chrono::milliseconds(0);
      std::optional<wire::Message> msg = inner_->receive(left);
      if (!msg) return std::nullopt;
      auto [latency, dropped] = draw();
      if (dropped) {
        if (Clock::now() >= deadline) return std::nullopt;
        continue;  // this delivery was lost; keep waiting for the next one
      }
      if (latency.count() > 0) std::this_thread::sleep_for(latency);
      return msg;
    }
  }

  void close() override { inner_->close(); }

 private:
  // One latency + drop draw per delivery attempt, in a fixed order so a given
  // seed always produces the same fault pattern.
  std::pair<std::chrono::milliseconds, bool> draw() {
    std::lock_guard<std::mutex> lock(mutex_);
    const double lo = static_cast<double>(link_.latency_lo.count());
    const double hi = static_cast<double>(link_.latency_hi.count());
    auto latency = std::chrono::milliseconds(
        lo == hi ? link_.latency_lo.count()
                 : static_cast<std::int64_t>(rng_.uniform(lo, hi)));
    bool dropped = link_.drop_prob > 0.0 && rng_.bernoulli(link_.drop_prob);
    return {latency, dropped};
  }

  ConnectionPtr inner_;
  LinkModel link_;
  Rng rng_;
  std::mutex mutex_;
};

}  // namespace

ConnectionPtr faulty_link(ConnectionPtr inner, const LinkModel& link) {
  link.validate();
  return std::make_unique<FaultyConnection>(std::move(inner), link);
}

}  // namespace ftl::transport

#pragma once

// Shared helpers for the test binaries: numeric comparisons, finite
// differences, random model/data generators, and a recording transport
// wrapper for protocol inspection.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "ftl/errors.hpp"
#include "ftl/model.hpp"
#include "ftl/rng.hpp"
#include "ftl/transport.hpp"
#include "ftl/types.hpp"
#include "ftl/wire.hpp"

namespace ftl::test {

inline double rel_err(double got, double want) {
  const double scale = std::max({std::fabs(got), std::fabs(want), 1e-6});
  return std::fabs(got - want) / scale;
}

// Number of representable doubles strictly between a and b.
inline std::uint64_t ulp_diff(double a, double b) {
  if (a == b) return 0;
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<std::uint64_t>::max();
  std::uint64_t count = 0;
  double x = std::min(a, b);
  const double hi = std::max(a, b);
  while (x < hi && count < 64) {
    x = std::nextafter(x, std::numeric_limits<double>::infinity());
    ++count;
  }
  return count;
}

// Central finite-difference gradient of `loss` with respect to every
// trainable parameter of `m`, compared against `grads`. Returns the largest
// relative error seen. `floor` is the minimum denominator: gradients smaller
// than it are compared on an absolute scale, keeping finite-difference noise
// from dominating near-zero entries.
inline double max_grad_rel_err(model::MlpModel& m, const std::vector<model::LayerGrads>& grads,
                               const std::function<double()>& loss, double h = 1e-5,
                               double floor = 1e-4) {
  double worst = 0.0;
  auto compare = [&](double got, double fd) {
    const double scale = std::max({std::fabs(got), std::fabs(fd), floor});
    worst = std::max(worst, std::fabs(got - fd) / scale);
  };
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    auto& layer = m.layers[li];
    if (layer.frozen) continue;
    for (Index r = 0; r < layer.weights.rows(); ++r) {
      for (Index c = 0; c < layer.weights.cols(); ++c) {
        const double keep = layer.weights(r, c);
        layer.weights(r, c) = keep + h;
        const double up = loss();
        layer.weights(r, c) = keep - h;
        const double down = loss();
        layer.weights(r, c) = keep;
        compare(grads[li].dw(r, c), (up - down) / (2.0 * h));
      }
    }
    for (Index r = 0; r < layer.bias.size(); ++r) {
      const double keep = layer.bias(r);
      layer.bias(r) = keep + h;
      const double up = loss();
      layer.bias(r) = keep - h;
      const double down = loss();
      layer.bias(r) = keep;
      compare(grads[li].db(r), (up - down) / (2.0 * h));
    }
  }
  return worst;
}

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  }
  return m;
}

// Two overlapping 2-d Gaussian clouds with a mean/scale shift; the canonical
// domain-adaptation toy pair used across the transfer tests.
inline std::pair<Matrix, Matrix> shifted_gaussians(std::uint64_t seed, Index n = 200) {
  Rng rng(seed);
  Matrix xs(n, 2);
  Matrix xt(n, 2);
  for (Index i = 0; i < n; ++i) {
    xs(i, 0) = rng.normal();
    xs(i, 1) = rng.normal();
    xt(i, 0) = 1.2 + 0.8 * rng.normal();
    xt(i, 1) = -0.9 + 1.3 * rng.normal();
  }
  return {std::move(xs), std::move(xt)};
}

// Captures warnings for the lifetime of the object, then restores stderr.
class WarnCapture {
 public:
  WarnCapture() {
    set_warn_handler([this](const std::string& msg) {
      const std::lock_guard<std::mutex> lock(mu_);
      messages_.push_back(msg);
    });
  }
  ~WarnCapture() { set_warn_handler({}); }

  std::vector<std::string> messages() {
    const std::lock_guard<std::mutex> lock(mu_);
    return messages_;
  }

 private:
  std::mutex mu_;
  std::vector<std::string> messages_;
};

// Transport wrapper recording every message that passes through.
class RecordingConnection : public transport::Connection {
 public:
  explicit RecordingConnection(transport::ConnectionPtr inner) : inner_(std::move(inner)) {}

  void send(const wire::Message& msg) override {
    record(sent_, msg);
    inner_->send(msg);
  }

  std::optional<wire::Message> receive(std::chrono::milliseconds timeout) override {
    auto msg = inner_->receive(timeout);
    if (msg) record(received_, *msg);
    return msg;
  }

  void close() override { inner_->close(); }

  std::vector<wire::Message> sent() {
    const std::lock_guard<std::mutex> lock(mu_);
    return sent_;
  }
  std::vector<wire::Message> received() {
    const std::lock_guard<std::mutex> lock(mu_);
    return received_;
  }

 private:
  void record(std::vector<wire::Message>& into, const wire::Message& msg) {
    const std::lock_guard<std::mutex> lock(mu_);
    into.push_back(msg);
  }

  transport::ConnectionPtr inner_;
  std::mutex mu_;
  std::vector<wire::Message> sent_;
  std::vector<wire::Message> received_;
};

}  // namespace ftl::test

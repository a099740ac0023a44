// Acceptance gate for the federated transfer-learning engine. Each numbered
// check prints exactly one PASS/FAIL line; the process exit code is the
// number of failed checks. Tolerances are pinned here, not configurable.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ftl/bench.hpp"
#include "ftl/errors.hpp"
#include "ftl/federation.hpp"
#include "ftl/linalg.hpp"
#include "ftl/model.hpp"
#include "ftl/rng.hpp"
#include "ftl/thermal.hpp"
#include "ftl/transfer.hpp"
#include "ftl/transport.hpp"
#include "ftl/wire.hpp"
#include "support.hpp"

using namespace ftl;
using namespace std::chrono_literals;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void criterion(int id, const char* label, const std::function<std::string()>& body) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  try {
    detail = body();
  } catch (const std::exception& e) {
    ok = false;
    detail = e.what();
  } catch (...) {
    ok = false;
    detail = "unknown exception";
  }
  std::printf("%s %2d  %-58s (%6.1f s)%s%s\n", ok ? "PASS" : "FAIL", id, label,
              seconds_since(t0), detail.empty() ? "" : "  ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* format, ...) {
  va_list args;
  va_start(args, format);
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  if (v.size() % 2 == 1) return v[m];
  return 0.5 * (v[m - 1] + v[m]);
}

// ---- independent oracles ----------------------------------------------

double oracle_gaussian_mmd(const Matrix& xs, const Matrix& xt, double sigma) {
  const auto k = [&](const Matrix& a, Index i, const Matrix& b, Index j) {
    const double d2 = (a.row(i) - b.row(j)).squaredNorm();
    return std::exp(-d2 / (2.0 * sigma * sigma));
  };
  double kss = 0.0;
  for (Index i = 0; i < xs.rows(); ++i) {
    for (Index j = 0; j < xs.rows(); ++j) kss += k(xs, i, xs, j);
  }
  double ktt = 0.0;
  for (Index i = 0; i < xt.rows(); ++i) {
    for (Index j = 0; j < xt.rows(); ++j) ktt += k(xt, i, xt, j);
  }
  double kst = 0.0;
  for (Index i = 0; i < xs.rows(); ++i) {
    for (Index j = 0; j < xt.rows(); ++j) kst += k(xs, i, xt, j);
  }
  const double ns = static_cast<double>(xs.rows());
  const double nt = static_cast<double>(xt.rows());
  return kss / (ns * ns) + ktt / (nt * nt) - 2.0 * kst / (ns * nt);
}

double oracle_median_bandwidth(const Matrix& xs, const Matrix& xt) {
  Matrix pooled(xs.rows() + xt.rows(), xs.cols());
  pooled << xs, xt;
  std::vector<double> dist;
  for (Index i = 0; i < pooled.rows(); ++i) {
    for (Index j = i + 1; j < pooled.rows(); ++j) {
      dist.push_back((pooled.row(i) - pooled.row(j)).norm());
    }
  }
  std::sort(dist.begin(), dist.end());
  const std::size_t m = dist.size();
  const double med =
      (m % 2 == 1) ? dist[m / 2] : 0.5 * (dist[m / 2 - 1] + dist[m / 2]);
  return std::max(med, 1e-6);
}

// ---- shared small-federation fixtures ----------------------------------

thermal::Dataset synth2(Index n, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  thermal::Dataset d;
  d.features = test::random_matrix(rng, n, 2);
  d.features.array() += shift;
  d.targets = Vector(n);
  for (Index i = 0; i < n; ++i) {
    d.targets(i) = std::tanh(d.features(i, 0)) - 0.4 * d.features(i, 1);
  }
  return d;
}

federation::FedConfig small_fed(int rounds, std::vector<bool> mask) {
  federation::FedConfig cfg;
  cfg.rounds = rounds;
  cfg.local_epochs = 2;
  cfg.trainable_mask = std::move(mask);
  cfg.retry_budget = 1;
  cfg.client_timeout = 5000ms;
  cfg.local_train.learning_rate = 5e-3;
  cfg.local_train.batch_size = 16;
  cfg.local_train.seed = 77;
  return cfg;
}

// Full server+clients run over the given connector; returns log and final
// global model bytes for cross-backend comparison.
struct FedOutcome {
  federation::RoundLog log;
  std::vector<std::uint8_t> global_bytes;
  std::vector<model::MlpModel> finals;
};

FedOutcome run_small_federation(
    const federation::FedConfig& cfg, const model::MlpModel& base,
    const std::vector<thermal::Dataset>& data, transport::Listener& listener,
    const std::function<transport::ConnectionPtr()>& connect,
    const std::function<transport::ConnectionPtr(transport::ConnectionPtr, std::uint64_t)>&
        wrap_server_side = {}) {
  const std::size_t k = data.size();
  FedOutcome out;
  out.finals.resize(k);
  std::vector<std::thread> clients;
  for (std::uint64_t id = 0; id < k; ++id) {
    clients.emplace_back([&, id] {
      model::MlpModel local = base;
      // Give every client a distinct personal head.
      model::MlpModel fresh = model::make_mlp(
          {base.input_dim(), base.layers[0].out_dim(), 1}, model::Activation::Tanh, 910 + id);
      local.layers.back() = fresh.layers.back();
      auto conn = connect();
      try {
        out.finals[id] = federation::run_client(*conn, id, local, data[id], cfg, 0.9, 60000ms);
      } catch (const std::exception&) {
        out.finals[id] = local;  // faulted endpoints may see a closed link
      }
    });
  }
  std::vector<federation::ClientEndpoint> endpoints;
  for (std::size_t i = 0; i < k; ++i) {
    endpoints.push_back(federation::accept_client(listener, 10000ms));
  }
  std::sort(endpoints.begin(), endpoints.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  if (wrap_server_side) {
    for (auto& e : endpoints) e.conn = wrap_server_side(std::move(e.conn), e.client_id);
  }
  const federation::ServerResult result = federation::server_run(cfg, base, endpoints);
  for (auto& e : endpoints) e.conn->close();
  for (auto& t : clients) t.join();
  out.log = result.log;
  out.global_bytes = model::serialize(result.global);
  return out;
}

// ---- shared benchmark-suite run (criteria 8, 10, 12, 13) ----------------

struct SuiteRun {
  bench::RunArtifacts artifacts;
  double wall_s = 0.0;
  bool ok = false;
  std::string error;
};

const SuiteRun& ensure_suite() {
  static SuiteRun run = [] {
    SuiteRun r;
    try {
      const auto t0 = Clock::now();
      r.artifacts = bench::run_suite(bench::paper_mini_suite(), "", 6);
      r.wall_s = seconds_since(t0);
      r.artifacts.report.suite = "paper-mini";
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return run;
}

std::vector<double> scenario_metric(const bench::BenchReport& report, const std::string& name,
                                    const std::function<double(const bench::CellResult&)>& f) {
  std::vector<double> out;
  for (const auto& cell : report.cells) {
    if (cell.scenario != name) continue;
    require(cell.ok, "cell " + name + " seed " + std::to_string(cell.seed) +
                         " failed: " + cell.error);
    out.push_back(f(cell));
  }
  require(!out.empty(), "no cells for scenario " + name);
  return out;
}

// ---- criteria ------------------------------------------------------------

std::string check_mmd_oracle() {
  const auto t0 = Clock::now();
  Rng rng(0xACC1);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index ns = 2 + static_cast<Index>(rng.below(49));
    const Index nt = 2 + static_cast<Index>(rng.below(49));
    const Index d = 1 + static_cast<Index>(rng.below(8));
    Matrix xs = test::random_matrix(rng, ns, d);
    Matrix xt = test::random_matrix(rng, nt, d, 1.4);
    xt.array() += 0.5;

    // Fixed bandwidth against the plain double-loop sum.
    const double sigma = 0.4 + 2.0 * rng.uniform();
    const double got_fixed = transfer::mmd(xs, xt, transfer::MmdConfig::fixed(sigma));
    const double want_fixed = std::max(0.0, oracle_gaussian_mmd(xs, xt, sigma));
    worst = std::max(worst,
                     std::fabs(got_fixed - want_fixed) / std::max(std::fabs(want_fixed), 1e-30));

    // Median heuristic, with the bandwidth recomputed independently.
    const double got_med = transfer::mmd(xs, xt);
    const double want_med =
        std::max(0.0, oracle_gaussian_mmd(xs, xt, oracle_median_bandwidth(xs, xt)));
    worst =
        std::max(worst, std::fabs(got_med - want_med) / std::max(std::fabs(want_med), 1e-30));
  }
  require(worst <= 1e-12, fmt("worst relative error %.3e > 1e-12", worst));

  Rng rng2(0xACC2);
  const Matrix a = test::random_matrix(rng2, 30, 4);
  require(transfer::mmd(a, a) == 0.0, "mmd(a, a) must clamp to exactly zero");
  const double secs = seconds_since(t0);
  require(secs < 5.0, fmt("runtime %.1f s exceeds 5 s budget", secs));
  return fmt("worst rel err %.2e over 100 cases", worst);
}

std::string check_gradients() {
  const auto t0 = Clock::now();
  double worst_mse = 0.0;
  Rng rng(0xACC3);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<Index> sizes{1 + static_cast<Index>(rng.below(4))};
    const std::size_t hidden = 1 + rng.below(2);  // <= 3 layers total
    for (std::size_t i = 0; i < hidden; ++i) sizes.push_back(1 + static_cast<Index>(rng.below(8)));
    sizes.push_back(1 + static_cast<Index>(rng.below(2)));
    const auto act = (rep % 2 == 0) ? model::Activation::Tanh : model::Activation::Relu;
    const Index n = 3 + static_cast<Index>(rng.below(5));
    model::MlpModel m;
    Matrix x, y;
    // Central differences need a smooth loss: resample relu nets until all
    // pre-activations clear the kink by more than the perturbation reach.
    for (std::uint64_t bump = 0;; ++bump) {
      m = model::make_mlp(sizes, act, 3000 + static_cast<std::uint64_t>(rep) + 1000 * bump);
      x = test::random_matrix(rng, n, sizes.front());
      y = test::random_matrix(rng, n, sizes.back());
      if (act == model::Activation::Tanh) break;
      const auto cache = model::forward_cache(m, x);
      double closest = 1e300;
      for (std::size_t li = 0; li < m.layers.size(); ++li) {
        if (m.layers[li].activation == model::Activation::Relu) {
          closest = std::min(closest, cache.pre[li].array().abs().minCoeff());
        }
      }
      if (closest > 1e-3) break;
    }
    const auto grads = model::gradients(m, x, y);
    const auto loss = [&] { return model::mse_loss(model::forward(m, x), y); };
    worst_mse = std::max(worst_mse, test::max_grad_rel_err(m, grads, loss));
  }
  require(worst_mse < 1e-4, fmt("task-loss gradient rel err %.3e >= 1e-4", worst_mse));

  double worst_dda = 0.0;
  for (int rep = 0; rep < 25; ++rep) {
    const Index d = 2 + static_cast<Index>(rng.below(3));
    const Index e = 2 + static_cast<Index>(rng.below(3));
    const Index h = 2 + static_cast<Index>(rng.below(6));
    model::MlpModel enc = model::make_mlp({d, h, e}, model::Activation::Tanh,
                                          4000 + static_cast<std::uint64_t>(rep),
                                          model::Activation::Tanh);
    model::MlpModel head = model::make_mlp({e, 1 + static_cast<Index>(rng.below(4)), 1},
                                           model::Activation::Tanh,
                                           5000 + static_cast<std::uint64_t>(rep));
    model::MlpModel dec = model::make_mlp({e, h, d}, model::Activation::Tanh,
                                          6000 + static_cast<std::uint64_t>(rep));
    const Index ns = 3 + static_cast<Index>(rng.below(5));
    const Index nt = 3 + static_cast<Index>(rng.below(5));
    const Matrix xs = test::random_matrix(rng, ns, d);
    const Matrix xt = test::random_matrix(rng, nt, d, 1.2);
    const Matrix yt = test::random_matrix(rng, nt, 1);
    transfer::DdaConfig cfg;
    cfg.alpha = 0.5 + rng.uniform();
    cfg.beta = 0.5 + rng.uniform();
    cfg.gamma = 0.25 + 0.5 * rng.uniform();
    cfg.delta = 1e-3 * (0.5 + rng.uniform());
    const double sigma = 1.0 + rng.uniform();

    const auto got = transfer::dda_composite_gradients(enc, head, dec, xs, xt, yt, cfg, sigma);
    const auto composite = [&] {
      const Matrix es = model::forward(enc, xs);
      const Matrix et = model::forward(enc, xt);
      double l2 = 0.0;
      for (const auto& layer : enc.layers) l2 += layer.weights.squaredNorm();
      for (const auto& layer : head.layers) l2 += layer.weights.squaredNorm();
      return cfg.alpha * model::mse_loss(model::forward(head, et), yt) +
             cfg.beta * std::max(0.0, oracle_gaussian_mmd(es, et, sigma)) +
             cfg.gamma * 0.5 *
                 (model::mse_loss(model::forward(dec, es), xs) +
                  model::mse_loss(model::forward(dec, et), xt)) +
             cfg.delta * l2;
    };
    require(std::fabs(got.loss - composite()) <= 1e-12 * std::max(1.0, std::fabs(got.loss)),
            "composite loss disagrees with the independent evaluation");
    worst_dda = std::max(worst_dda, test::max_grad_rel_err(enc, got.encoder, composite));
    worst_dda = std::max(worst_dda, test::max_grad_rel_err(head, got.head, composite));
  }
  require(worst_dda < 1e-4, fmt("composite gradient rel err %.3e >= 1e-4", worst_dda));
  const double secs = seconds_since(t0);
  require(secs < 30.0, fmt("runtime %.1f s exceeds 30 s budget", secs));
  return fmt("worst rel err: task %.2e, composite %.2e", worst_mse, worst_dda);
}

std::string check_eigensolver() {
  const auto t0 = Clock::now();
  Rng rng(0xACC4);
  double worst_recon = 0.0;
  double worst_orth = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index n = 2 + static_cast<Index>(rng.below(63));
    Matrix a = test::random_matrix(rng, n, n);
    a = ((a + a.transpose()) * 0.5).eval();
    const linalg::Eigh eig = linalg::jacobi_eigh(a);
    const Matrix recon =
        eig.vectors * eig.values.asDiagonal() * eig.vectors.transpose();
    worst_recon = std::max(worst_recon, (a - recon).norm() / std::max(a.norm(), 1e-30));
    const Matrix gram = eig.vectors.transpose() * eig.vectors;
    worst_orth = std::max(
        worst_orth, (gram - Matrix::Identity(n, n)).array().abs().maxCoeff());
  }
  require(worst_recon <= 1e-8, fmt("reconstruction error %.3e > 1e-8", worst_recon));
  require(worst_orth <= 1e-8, fmt("orthonormality error %.3e > 1e-8", worst_orth));

  double worst_gen = 0.0;
  for (int rep = 0; rep < 40; ++rep) {
    const Index n = 2 + static_cast<Index>(rng.below(39));
    Matrix a = test::random_matrix(rng, n, n);
    a = ((a + a.transpose()) * 0.5).eval();
    Matrix b = test::random_matrix(rng, n, n);
    b = (b * b.transpose() + static_cast<double>(n) * Matrix::Identity(n, n)).eval();
    const Index m = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const linalg::GeneralizedEigh gen = linalg::generalized_eigh(a, b, m);
    for (Index c = 0; c < m; ++c) {
      const Vector w = gen.vectors.col(c);
      const double lambda = gen.values(c);
      const double resid = (a * w - lambda * (b * w)).cwiseAbs().maxCoeff();
      const double scale = std::max(1.0, a.norm() + std::fabs(lambda) * b.norm());
      worst_gen = std::max(worst_gen, resid / scale);
    }
  }
  require(worst_gen <= 1e-7, fmt("generalized residual %.3e > 1e-7", worst_gen));
  const double secs = seconds_since(t0);
  require(secs < 60.0, fmt("runtime %.1f s exceeds 60 s budget", secs));
  return fmt("recon %.2e, orth %.2e, generalized %.2e", worst_recon, worst_orth, worst_gen);
}

federation::ModelUpdate scalar_update(std::uint64_t id, std::uint64_t n_k, double relevance,
                                      double w) {
  federation::ModelUpdate u;
  u.client_id = id;
  u.n_k = n_k;
  u.relevance = relevance;
  wire::LayerEntry e;
  e.layer_index = 0;
  e.weights = Matrix::Constant(1, 1, w);
  e.bias = Vector::Constant(1, w);
  u.layers.push_back(std::move(e));
  return u;
}

std::string check_aggregation_algebra() {
  using federation::Aggregation;
  // Hand case: sizes 100/300 with parameter values 1.0/3.0.
  const std::vector<federation::ModelUpdate> hand = {scalar_update(1, 100, 1.0, 1.0),
                                                     scalar_update(2, 300, 3.0, 3.0)};
  const auto wa = federation::aggregation_weights(hand, Aggregation::FedAvg);
  require(wa[0] == 0.25 && wa[1] == 0.75, "size weights must be exactly {0.25, 0.75}");
  require(wa[0] + wa[1] == 1.0, "size weights must sum to exactly 1");
  const auto agg = federation::aggregate(hand, Aggregation::FedAvg);
  require(agg[0].weights(0, 0) == 2.5, "hand aggregation must equal exactly 2.5");
  const auto wr = federation::aggregation_weights(hand, Aggregation::RelevanceWeighted);
  require(std::fabs(wr[0] - 0.1) < 1e-15 && std::fabs(wr[1] - 0.9) < 1e-15,
          "relevance weights must be {0.1, 0.9}");
  require(wr[0] + wr[1] == 1.0, "relevance weights must sum to exactly 1");

  // 1,000 random aggregations: exact weight sum and convex-hull containment.
  Rng rng(0xACC5);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 2 + rng.below(7);
    std::vector<federation::ModelUpdate> updates;
    for (std::size_t i = 0; i < k; ++i) {
      updates.push_back(scalar_update(i, 1 + rng.below(10000), 0.05 + 0.95 * rng.uniform(),
                                      4.0 * rng.normal()));
    }
    for (auto mode : {Aggregation::FedAvg, Aggregation::RelevanceWeighted}) {
      const auto weights = federation::aggregation_weights(updates, mode);
      double sum = 0.0;
      for (const double w : weights) sum += w;
      require(sum == 1.0, "weights must sum to exactly 1");
      const auto out = federation::aggregate(updates, mode);
      double lo = updates[0].layers[0].weights(0, 0);
      double hi = lo;
      for (const auto& u : updates) {
        lo = std::min(lo, u.layers[0].weights(0, 0));
        hi = std::max(hi, u.layers[0].weights(0, 0));
      }
      const double slack = 1e-12 * std::max({1.0, std::fabs(lo), std::fabs(hi)});
      require(out[0].weights(0, 0) >= lo - slack && out[0].weights(0, 0) <= hi + slack,
              "aggregate left the convex hull of the updates");
    }
  }

  // Equal relevance scores reduce RelevanceWeighted to FedAvg within 1 ulp.
  std::uint64_t worst_ulp = 0;
  for (const double r : {1.0, 0.5, 0.25}) {
    std::vector<federation::ModelUpdate> updates;
    for (std::size_t i = 0; i < 5; ++i) {
      updates.push_back(
          scalar_update(i, 37 + 113 * i, r, 2.0 * rng.normal()));
    }
    const auto fa = federation::aggregate(updates, Aggregation::FedAvg);
    const auto rw = federation::aggregate(updates, Aggregation::RelevanceWeighted);
    worst_ulp = std::max(worst_ulp, test::ulp_diff(fa[0].weights(0, 0), rw[0].weights(0, 0)));
    worst_ulp = std::max(worst_ulp, test::ulp_diff(fa[0].bias(0), rw[0].bias(0)));
  }
  require(worst_ulp <= 1, fmt("equal-relevance reduction off by %llu ulp",
                              static_cast<unsigned long long>(worst_ulp)));
  return fmt("hand cases exact, 1000 hulls hold, equal-R ulp %llu",
             static_cast<unsigned long long>(worst_ulp));
}

std::string check_partial_averaging() {
  const model::MlpModel base = model::make_mlp({2, 8, 6, 1}, model::Activation::Tanh, 0xACC6);
  federation::FedConfig cfg = small_fed(3, {true, true, false});

  std::vector<thermal::Dataset> data = {synth2(48, 801), synth2(56, 802, 0.3),
                                        synth2(40, 803, -0.2)};
  std::vector<model::MlpModel> initial_locals;
  for (std::uint64_t id = 0; id < 3; ++id) {
    model::MlpModel local = base;
    model::MlpModel fresh = model::make_mlp({2, 8, 6, 1}, model::Activation::Tanh, 950 + id);
    local.layers[2] = fresh.layers[2];
    initial_locals.push_back(local);
  }

  auto listener = transport::inproc_listen("acc/partial");
  std::vector<model::MlpModel> finals(3);
  std::vector<std::thread> clients;
  for (std::uint64_t id = 0; id < 3; ++id) {
    clients.emplace_back([&, id] {
      auto conn = transport::inproc_connect("acc/partial");
      finals[id] =
          federation::run_client(*conn, id, initial_locals[id], data[id], cfg, 0.9, 60000ms);
    });
  }
  std::vector<federation::ClientEndpoint> endpoints;
  std::vector<test::RecordingConnection*> recorders;
  for (int i = 0; i < 3; ++i) {
    auto ep = federation::accept_client(*listener, 10000ms);
    auto rec = std::make_unique<test::RecordingConnection>(std::move(ep.conn));
    recorders.push_back(rec.get());
    ep.conn = std::move(rec);
    endpoints.push_back(std::move(ep));
  }
  std::sort(endpoints.begin(), endpoints.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  const federation::ServerResult result = federation::server_run(cfg, base, endpoints);
  for (auto& e : endpoints) e.conn->close();
  for (auto& t : clients) t.join();

  // The unmasked head is bit-identical start to finish, everywhere.
  require((result.global.layers[2].weights == base.layers[2].weights) &&
              (result.global.layers[2].bias == base.layers[2].bias),
          "server-side head drifted during the run");
  for (std::uint64_t id = 0; id < 3; ++id) {
    require((finals[id].layers[2].weights == initial_locals[id].layers[2].weights) &&
                (finals[id].layers[2].bias == initial_locals[id].layers[2].bias),
            "client personal head drifted during the run");
    require((finals[id].layers[0].weights != initial_locals[id].layers[0].weights),
            "shared trunk never trained");
  }

  // Every model-carrying frame on the wire holds the masked layers only.
  int broadcasts = 0;
  int updates = 0;
  const auto check_entries = [&](const std::vector<wire::LayerEntry>& layers) {
    require(layers.size() == 2, "wire payload must carry exactly the two masked layers");
    std::set<std::uint32_t> idx;
    for (const auto& e : layers) idx.insert(e.layer_index);
    require(idx == std::set<std::uint32_t>{0, 1},
            "wire payload carried a layer outside the averaging mask");
  };
  for (auto* rec : recorders) {
    for (const auto& msg : rec->sent()) {
      if (msg.type == wire::MsgType::GlobalModel) {
        check_entries(federation::decode_global_model(msg.payload).layers);
        ++broadcasts;
      } else if (msg.type == wire::MsgType::Shutdown) {
        check_entries(federation::decode_shutdown(msg.payload).layers);
      }
    }
    for (const auto& msg : rec->received()) {
      require(msg.type != wire::MsgType::ClientError, "unexpected client error frame");
      if (msg.type == wire::MsgType::UpdateSubmit) {
        check_entries(federation::decode_update(msg.payload).layers);
        ++updates;
      }
    }
  }
  require(broadcasts == 9, "expected one broadcast per client per round");
  require(updates >= 9, "expected one update per client per round");
  for (const auto& entry : result.log.rounds) {
    require(entry.participating.size() == 3 && entry.excluded.empty() && !entry.skipped,
            "round log shows unexpected exclusions");
  }
  return fmt("%d broadcasts and %d updates inspected, head untouched", broadcasts, updates);
}

std::string check_tca_effectiveness() {
  std::vector<double> ratios_gauss;
  for (std::uint64_t seed = 21; seed < 26; ++seed) {
    const auto [xs, xt] = test::shifted_gaussians(seed);
    const double input = transfer::mmd(xs, xt);
    const transfer::TcaMap map = transfer::tca_fit(xs, xt, 2, 1.0);
    const double embedded =
        transfer::mmd(transfer::tca_transform(map, xs), transfer::tca_transform(map, xt));
    require(embedded < input,
            fmt("gaussian pair seed %llu: embedded %.4f >= input %.4f",
                static_cast<unsigned long long>(seed), embedded, input));
    ratios_gauss.push_back(embedded / input);
  }

  thermal::DomainProfile source;
  source.name = "src";
  thermal::DomainProfile target = source;
  target.name = "tgt";
  target.r_th = 0.026;
  target.tau_s = 700;
  target.load = thermal::LoadPattern::partial(0.5);
  target.ambient_lo_c = 25;
  target.ambient_hi_c = 45;
  target.current_max_a = 300;

  std::vector<double> ratios_thermal;
  for (std::uint64_t seed = 31; seed < 36; ++seed) {
    thermal::DomainProfile sp = source;
    sp.seed = mix_seed(seed, 1);
    thermal::DomainProfile tp = target;
    tp.seed = mix_seed(seed, 2);
    const thermal::Dataset ds = thermal::generate(sp, 250);
    const thermal::Dataset dt = thermal::generate(tp, 250);
    const thermal::NormStats stats = thermal::normalize_fit(ds);
    const Matrix xs = thermal::normalize_apply(ds, stats).features;
    const Matrix xt = thermal::normalize_apply(dt, stats).features;
    const double input = transfer::mmd(xs, xt);
    const transfer::TcaMap map = transfer::tca_fit(xs, xt, 4, 1.0);
    const double embedded =
        transfer::mmd(transfer::tca_transform(map, xs), transfer::tca_transform(map, xt));
    require(embedded < input,
            fmt("thermal pair seed %llu: embedded %.4f >= input %.4f",
                static_cast<unsigned long long>(seed), embedded, input));
    ratios_thermal.push_back(embedded / input);
  }
  return fmt("median embedded/input ratio: gaussians %.3f, thermal %.3f",
             median(ratios_gauss), median(ratios_thermal));
}

std::string check_tl_improvement() {
  const auto t0 = Clock::now();
  bench::ScenarioSpec spec;
  spec.name = "tl-pair";
  spec.topology = bench::Topology::Isolated;
  thermal::DomainProfile source;
  source.name = "src";
  thermal::DomainProfile target = source;
  target.name = "tgt";
  target.r_th = 0.026;
  target.tau_s = 650;
  target.load = thermal::LoadPattern::intermittent(0.6, 1800);
  target.ambient_lo_c = 25;
  target.ambient_hi_c = 45;
  target.current_max_a = 300;
  spec.clients = {source, target};
  spec.source_samples = 500;
  spec.target_samples = 300;
  spec.holdout_fraction = 0.3;
  spec.head_spec = {16};
  spec.base_train.epochs = 60;
  spec.base_train.learning_rate = 2e-3;
  spec.base_train.batch_size = 64;
  spec.tl_train.epochs = 100;
  spec.tl_train.learning_rate = 4e-3;
  spec.tl_train.batch_size = 32;
  spec.dda.alpha = 1.0;
  spec.dda.beta = 1.0;
  spec.dda.gamma = 0.5;
  spec.dda.delta = 1e-4;
  spec.dda.encoder_sizes = {16, 8};
  spec.dda.decoder_sizes = {16};
  spec.dda.pretrain.epochs = 50;
  spec.dda.pretrain.learning_rate = 2e-3;
  spec.dda.pretrain.batch_size = 32;
  spec.dda.train.epochs = 120;
  spec.dda.train.learning_rate = 2e-3;
  spec.dda.train.batch_size = 32;

  std::vector<double> base_tgt, ft_tgt, tca_tgt, dda_tgt, ft_src, dda_src;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
    const model::MlpModel base = bench::train_base(spec, seed, cell);
    const thermal::Dataset& tgt_ho = cell.clients[1].holdout;
    const thermal::Dataset& src_ho = cell.clients[0].holdout;
    base_tgt.push_back(model::evaluate(base, tgt_ho).mse);

    bench::ScenarioSpec s_ft = spec;
    s_ft.tl_method = bench::TlMethod::FineTune;
    const bench::TlArtifact ft = bench::client_tl(s_ft, seed, 1, base, cell);
    ft_tgt.push_back(model::evaluate(ft.net, tgt_ho).mse);
    ft_src.push_back(model::evaluate(ft.net, src_ho).mse);

    bench::ScenarioSpec s_tca = spec;
    s_tca.tl_method = bench::TlMethod::Tca;
    const bench::TlArtifact tca = bench::client_tl(s_tca, seed, 1, base, cell);
    thermal::Dataset emb = tgt_ho;
    emb.features = transfer::tca_transform(*tca.tca, tgt_ho.features);
    tca_tgt.push_back(model::evaluate(tca.net, emb).mse);

    bench::ScenarioSpec s_dda = spec;
    s_dda.tl_method = bench::TlMethod::Dda;
    const bench::TlArtifact dda = bench::client_tl(s_dda, seed, 1, base, cell);
    dda_tgt.push_back(model::evaluate(dda.net, tgt_ho).mse);
    dda_src.push_back(model::evaluate(dda.net, src_ho).mse);
  }
  const double mb = median(base_tgt);
  const double mft = median(ft_tgt);
  const double mtca = median(tca_tgt);
  const double mdda = median(dda_tgt);
  require(mft < mb, fmt("fine-tune target mse %.3f !< base %.3f", mft, mb));
  require(mtca < mb, fmt("tca target mse %.3f !< base %.3f", mtca, mb));
  require(mdda < mb, fmt("dda target mse %.3f !< base %.3f", mdda, mb));
  const double sft = median(ft_src);
  const double sdda = median(dda_src);
  require(sdda <= sft, fmt("dda source mse %.3f > fine-tune source mse %.3f", sdda, sft));
  const double secs = seconds_since(t0);
  require(secs < 120.0, fmt("runtime %.1f s exceeds 2 min budget", secs));
  return fmt("target mse base %.2f | ft %.2f tca %.2f dda %.2f; source ft %.2f dda %.2f", mb,
             mft, mtca, mdda, sft, sdda);
}

std::string check_suite_ordering() {
  const SuiteRun& run = ensure_suite();
  require(run.ok, "suite failed: " + run.error);
  // Check the orderings before the wall budget so a slow run still reports
  // whether the science held.
  const auto mean_mse = [](const bench::CellResult& c) { return c.mean_client_mse; };
  const double cen = median(scenario_metric(run.artifacts.report, "centralized", mean_mse));
  const double iso = median(scenario_metric(run.artifacts.report, "isolated", mean_mse));
  const double fl10 = median(scenario_metric(run.artifacts.report, "fl-local-10", mean_mse));
  const double fl100 = median(scenario_metric(run.artifacts.report, "fl-local-100", mean_mse));
  require(cen <= fl100, fmt("centralized %.3f !<= fl-local-100 %.3f", cen, fl100));
  require(fl100 <= fl10, fmt("fl-local-100 %.3f !<= fl-local-10 %.3f", fl100, fl10));
  require(fl100 <= iso, fmt("fl-local-100 %.3f !<= isolated %.3f", fl100, iso));
  require(run.wall_s < 300.0,
          fmt("orderings held (cen %.2f <= fl100 %.2f <= fl10 %.2f; iso %.2f) but the suite "
              "took %.0f s, budget is 300 s",
              cen, fl100, fl10, iso, run.wall_s));
  return fmt("median mse: cen %.2f <= fl100 %.2f <= fl10 %.2f; iso %.2f (%.0f s)", cen, fl100,
             fl10, iso, run.wall_s);
}

std::string check_fault_tolerance() {
  test::WarnCapture warnings;
  const model::MlpModel base = model::make_mlp({2, 8, 1}, model::Activation::Tanh, 0xACC9);
  federation::FedConfig cfg = small_fed(5, {true, false});
  cfg.retry_budget = 3;
  cfg.client_timeout = 150ms;

  std::vector<thermal::Dataset> data = {synth2(40, 811), synth2(40, 812, 0.2),
                                        synth2(40, 813, -0.2)};
  auto listener = transport::inproc_listen("acc/fault");
  const FedOutcome out = run_small_federation(
      cfg, base, data, *listener, [] { return transport::inproc_connect("acc/fault"); },
      [](transport::ConnectionPtr conn, std::uint64_t id) -> transport::ConnectionPtr {
        if (id != 2) return conn;
        transport::LinkModel dead;
        dead.drop_prob = 1.0;
        dead.seed = 9;
        return transport::faulty_link(std::move(conn), dead);
      });

  require(out.log.rounds.size() == 5, "expected all five rounds to complete");
  for (const auto& entry : out.log.rounds) {
    require(!entry.skipped, "no round should be skipped");
    require(entry.excluded == std::vector<std::uint64_t>{2},
            "the unreachable client must be excluded every round");
    require(entry.participating == std::vector<std::uint64_t>({0, 1}),
            "the reachable clients must participate every round");
  }
  bool logged = false;
  for (const auto& msg : warnings.messages()) {
    if (msg.find("client 2") != std::string::npos) logged = true;
  }
  require(logged, "exclusions must be logged");
  return "5/5 rounds, client 2 excluded each time, exclusions logged";
}

std::string check_forgetting() {
  const SuiteRun& run = ensure_suite();
  require(run.ok, "suite failed: " + run.error);
  const auto mean_pct = [](const bench::CellResult& c) {
    double sum = 0.0;
    int count = 0;
    for (const auto& cr : c.clients) {
      if (cr.forgetting_done) {
        sum += cr.forgetting_pct;
        ++count;
      }
    }
    require(count > 0, "no client ran the refit experiment");
    return sum / count;
  };
  const auto pcts = scenario_metric(run.artifacts.report, "fl-local-100", mean_pct);
  require(pcts.size() == 5, "expected five seeds of refit results");
  const double med = median(pcts);
  require(med > 0.0, fmt("median refit improvement %.2f%% is not positive", med));
  return fmt("median refit improvement %.2f%% over 5 seeds", med);
}

std::string check_wire_protocol() {
  // 10,000 random frames and 10,000 model payloads round trip bit-exactly.
  Rng rng(0xACCB);
  const wire::MsgType types[] = {wire::MsgType::Hello,       wire::MsgType::GlobalModel,
                                 wire::MsgType::UpdateSubmit, wire::MsgType::RoundAck,
                                 wire::MsgType::ClientError,  wire::MsgType::Shutdown};
  for (int rep = 0; rep < 10000; ++rep) {
    wire::Message msg;
    msg.type = types[rng.below(6)];
    msg.payload.resize(rng.below(300));
    for (auto& b : msg.payload) b = static_cast<std::uint8_t>(rng.below(256));
    const auto bytes = wire::encode_frame(msg);
    require(wire::decode_frame(bytes) == msg, "frame round trip changed the message");
    require(wire::encode_frame(wire::decode_frame(bytes)) == bytes,
            "frame re-encode changed the bytes");
  }
  for (int rep = 0; rep < 10000; ++rep) {
    wire::ModelPayload payload;
    const std::size_t layers = 1 + rng.below(3);
    for (std::size_t i = 0; i < layers; ++i) {
      wire::LayerEntry e;
      e.layer_index = static_cast<std::uint32_t>(2 * i);
      const Index rows = 1 + static_cast<Index>(rng.below(5));
      const Index cols = 1 + static_cast<Index>(rng.below(5));
      e.weights = test::random_matrix(rng, rows, cols, 3.0);
      e.bias = test::random_matrix(rng, rows, 1).col(0);
      e.activation = static_cast<model::Activation>(rng.below(3));
      e.frozen = rng.below(2) == 1;
      payload.layers.push_back(std::move(e));
    }
    payload.n_k = rng.next_u64();
    payload.relevance = rng.uniform();
    const auto bytes = wire::encode_model_payload(payload);
    const wire::ModelPayload back = wire::decode_model_payload(bytes);
    require(back == payload, "model payload round trip changed the content");
    require(wire::encode_model_payload(back) == bytes, "payload re-encode changed the bytes");
  }

  // One million malformed/random inputs: never crash, always classify.
  std::size_t decoded = 0;
  std::vector<std::uint8_t> buf;
  for (int rep = 0; rep < 800000; ++rep) {
    buf.resize(rng.below(81));
    for (auto& b : buf) b = static_cast<std::uint8_t>(rng.below(256));
    try {
      (void)wire::decode_frame(buf);
      ++decoded;
    } catch (const wire::DecodeError&) {
    }
  }
  wire::Message valid;
  valid.type = wire::MsgType::RoundAck;
  valid.payload = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto valid_bytes = wire::encode_frame(valid);
  for (int rep = 0; rep < 200000; ++rep) {
    buf = valid_bytes;
    const std::size_t flips = 1 + rng.below(3);
    for (std::size_t f = 0; f < flips; ++f) {
      buf[rng.below(buf.size())] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    }
    try {
      (void)wire::decode_frame(buf);
    } catch (const wire::DecodeError&) {
    }
  }

  // The hand-assembled Hello frame, byte for byte.
  wire::Message hello;
  hello.type = wire::MsgType::Hello;
  const std::vector<std::uint8_t> want = {'F', 'T', 'L', '1', 0x01, 0x01, 0x00, 0x00,
                                          0x00, 0x00, 0x00, 0x00, 0x00, 0x00};
  require(wire::encode_frame(hello) == want, "empty Hello frame bytes changed");

  // Identical round logs over the in-process and TCP backends.
  const model::MlpModel base = model::make_mlp({2, 6, 1}, model::Activation::Tanh, 0xACCC);
  federation::FedConfig cfg = small_fed(2, {true, false});
  std::vector<thermal::Dataset> data = {synth2(40, 821), synth2(48, 822, 0.25)};

  auto inproc_listener = transport::inproc_listen("acc/backends");
  const FedOutcome in_out = run_small_federation(cfg, base, data, *inproc_listener, [] {
    return transport::inproc_connect("acc/backends");
  });

  std::uint16_t port = 0;
  auto tcp_listener = transport::tcp_listen("127.0.0.1", 0, &port);
  const FedOutcome tcp_out = run_small_federation(cfg, base, data, *tcp_listener, [port] {
    return transport::tcp_connect("127.0.0.1", port, 5000ms);
  });

  require(in_out.log.rounds.size() == tcp_out.log.rounds.size(), "round counts differ");
  for (std::size_t i = 0; i < in_out.log.rounds.size(); ++i) {
    const auto& a = in_out.log.rounds[i];
    const auto& b = tcp_out.log.rounds[i];
    require(a.round == b.round && a.participating == b.participating &&
                a.excluded == b.excluded && a.skipped == b.skipped &&
                a.aggregate_loss == b.aggregate_loss,
            "round logs differ between backends");
  }
  require(in_out.global_bytes == tcp_out.global_bytes,
          "final global models differ between backends");
  return fmt("20k round trips exact, 1e6 fuzz inputs (%zu parsed), backends agree", decoded);
}

std::string check_load_shift() {
  const SuiteRun& run = ensure_suite();
  require(run.ok, "suite failed: " + run.error);

  std::vector<double> window_r2;
  std::vector<double> spike_ratios;
  for (const auto& ts : run.artifacts.timeseries) {
    if (ts.scenario != "load-shift" || ts.client_id != 1) continue;
    const std::size_t n = ts.measured_k.size();
    require(n >= 100, "time series unexpectedly short");
    const auto lo = static_cast<std::size_t>(std::llround(0.4 * static_cast<double>(n)));
    const auto hi = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));

    // Held-out rows inside the shifted window (interleaved split, stride 3).
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      if (i % 3 == 2) {
        sum += ts.measured_k[i];
        ++count;
      }
    }
    require(count > 10, "not enough held-out rows in the window");
    const double mean = sum / static_cast<double>(count);
    double ss_res = 0.0;
    double ss_tot = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      if (i % 3 != 2) continue;
      const double err = ts.measured_k[i] - ts.predicted_k[i];
      ss_res += err * err;
      const double dev = ts.measured_k[i] - mean;
      ss_tot += dev * dev;
    }
    require(ss_tot > 0.0, "degenerate window targets");
    window_r2.push_back(1.0 - ss_res / ss_tot);

    // Error spike at the window entry against the pre-window error level.
    double boundary_peak = 0.0;
    for (std::size_t i = lo; i < std::min(hi, lo + 30); ++i) {
      boundary_peak = std::max(boundary_peak, std::fabs(ts.measured_k[i] - ts.predicted_k[i]));
    }
    std::vector<double> pre_errs;
    for (std::size_t i = lo / 2; i < lo; ++i) {
      pre_errs.push_back(std::fabs(ts.measured_k[i] - ts.predicted_k[i]));
    }
    spike_ratios.push_back(boundary_peak / std::max(median(pre_errs), 1e-9));
  }
  require(window_r2.size() == 5, "expected five load-shift time series");
  const double med_r2 = median(window_r2);
  require(med_r2 > 0.9, fmt("median window r2 %.3f <= 0.9", med_r2));
  const double med_spike = median(spike_ratios);
  require(med_spike > 2.0,
          fmt("boundary error spike %.1fx not clearly above the pre-window level", med_spike));
  return fmt("median window r2 %.3f, boundary spike %.1fx the pre-window error", med_r2,
             med_spike);
}

std::string check_determinism() {
  const SuiteRun& first = ensure_suite();
  require(first.ok, "suite failed: " + first.error);
  bench::RunArtifacts second = bench::run_suite(bench::paper_mini_suite(), "", 6);
  second.report.suite = "paper-mini";
  const std::string a = bench::report_without_timing(bench::report_to_json(first.artifacts.report));
  const std::string b = bench::report_without_timing(bench::report_to_json(second.report));
  require(a == b, "re-running the suite changed the timing-stripped report");
  require(!a.empty() && a.find("fl-cloud-100") != std::string::npos,
          "report looks incomplete");
  return fmt("two full suite runs agree on %zu bytes of report", a.size());
}

}  // namespace

int main() {
  std::printf("acceptance checks\n-----------------\n");
  criterion(1, "MMD matches an independent double-loop kernel oracle", check_mmd_oracle);
  criterion(2, "analytic gradients match central finite differences", check_gradients);
  criterion(3, "eigensolver reconstruction and generalized residuals", check_eigensolver);
  criterion(4, "aggregation: hand values, exact sums, convex hulls", check_aggregation_algebra);
  criterion(5, "partial averaging keeps personal heads local", check_partial_averaging);
  criterion(6, "TCA embedding reduces domain MMD on every run", check_tca_effectiveness);
  criterion(7, "every TL method beats the unadapted base on target", check_tl_improvement);
  criterion(8, "benchmark suite reproduces the topology MSE ordering", check_suite_ordering);
  criterion(9, "unreachable client excluded while rounds proceed", check_fault_tolerance);
  criterion(10, "head refit on retained data recovers accuracy", check_forgetting);
  criterion(11, "wire codec round trips, fuzzing, backend parity", check_wire_protocol);
  criterion(12, "load-shift window accuracy and boundary error spike", check_load_shift);
  criterion(13, "suite reruns yield identical reports minus timing", check_determinism);
  std::printf("-----------------\n%d of 13 criteria failed\n", failures);
  return failures;
}

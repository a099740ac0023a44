#include "ftl/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ftl/errors.hpp"
#include "ftl/rng.hpp"

namespace ftl::bench {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// ---- small dataset utilities ----

thermal::Dataset gather_dataset(const thermal::Dataset& d, const std::vector<Index>& rows) {
  thermal::Dataset out;
  out.features.resize(static_cast<Index>(rows.size()), d.features.cols());
  out.targets.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = d.features.row(rows[i]);
    out.targets[static_cast<Index>(i)] = d.targets[rows[i]];
  }
  out.sample_interval = d.sample_interval;
  out.norm = d.norm;
  return out;
}

thermal::Dataset concat_datasets(const std::vector<const thermal::Dataset*>& parts) {
  Index total = 0;
  for (const auto* p : parts) total += p->n();
  thermal::Dataset out;
  out.features.resize(total, thermal::kFeatureCount);
  out.targets.resize(total);
  Index at = 0;
  for (const auto* p : parts) {
    out.features.middleRows(at, p->n()) = p->features;
    out.targets.segment(at, p->n()) = p->targets;
    at += p->n();
  }
  out.sample_interval = parts.empty() ? 60.0 : parts.front()->sample_interval;
  out.norm = parts.empty() ? std::nullopt : parts.front()->norm;
  return out;
}

Matrix subsample_rows(const Matrix& x, Index cap, std::uint64_t seed) {
  if (x.rows() <= cap) return x;
  std::vector<Index> idx(static_cast<std::size_t>(x.rows()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(cap));
  std::sort(idx.begin(), idx.end());
  Matrix out(cap, x.cols());
  for (Index i = 0; i < cap; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

// ---- per-cell evaluation helpers ----

using ClientModel = TlArtifact;

Matrix eval_features(const ClientModel& cm, const Matrix& x) {
  if (cm.tca) return transfer::tca_transform(*cm.tca, x);
  return x;
}

Matrix embed_for_mmd(const ClientModel& cm, const Matrix& x) {
  if (cm.tca) return transfer::tca_transform(*cm.tca, x);
  if (cm.encoder_layers > 0) {
    model::MlpModel enc;
    enc.layers.assign(cm.net.layers.begin(),
                      cm.net.layers.begin() + static_cast<std::ptrdiff_t>(cm.encoder_layers));
    return model::forward(enc, x);
  }
  return x;
}

thermal::Dataset eval_view(const ClientModel& cm, const thermal::Dataset& d) {
  if (!cm.tca) return d;
  thermal::Dataset out;
  out.features = transfer::tca_transform(*cm.tca, d.features);
  out.targets = d.targets;
  out.sample_interval = d.sample_interval;
  out.norm = d.norm;
  return out;
}

// Denormalized (kelvin) residuals over a dataset.
Vector residuals_k(const ClientModel& cm, const thermal::Dataset& d) {
  Matrix pred = model::forward(cm.net, eval_features(cm, d.features));
  Vector p = pred.col(0);
  Vector y = d.targets;
  if (d.norm) {
    p = (p.array() * d.norm->target_std + d.norm->target_mean).matrix();
    y = (y.array() * d.norm->target_std + d.norm->target_mean).matrix();
  }
  return p - y;
}

// ---- federated stage ----

std::uint64_t next_endpoint_serial() {
  static std::atomic<std::uint64_t> serial{0};
  return serial.fetch_add(1, std::memory_order_relaxed);
}

struct FedOutcome {
  model::MlpModel global;
  federation::RoundLog log;
};

FedOutcome run_federation(const ScenarioSpec& spec, std::uint64_t seed,
                          const model::MlpModel& base_global, std::vector<ClientModel>& locals,
                          const std::vector<PreparedClient>& data) {
  const std::size_t k = locals.size();
  const std::size_t shared = base_global.layers.size() - 1;  // trunk; output layer stays personal

  transport::ListenerPtr listener;
  std::string ep_name;
  std::uint16_t port = 0;
  if (spec.backend == "tcp") {
    listener = transport::tcp_listen("127.0.0.1", 0, &port);
  } else {
    ep_name = "bench/" + spec.name + "/" + std::to_string(seed) + "/" +
              std::to_string(next_endpoint_serial());
    listener = transport::inproc_listen(ep_name);
  }

  const auto idle = std::chrono::milliseconds(std::max<std::int64_t>(
      10000, spec.fed.client_timeout.count() * (spec.fed.retry_budget + 1) * 4));

  std::vector<std::optional<model::MlpModel>> finals(k);
  std::vector<std::string> client_errors(k);
  std::vector<std::thread> workers;
  workers.reserve(k);
  for (std::size_t ci = 0; ci < k; ++ci) {
    workers.emplace_back([&spec, &locals, &data, &finals, &client_errors, &ep_name, port, seed,
                          shared, idle, ci] {
      try {
        transport::ConnectionPtr conn =
            spec.backend == "tcp"
                ? transport::tcp_connect("127.0.0.1", port, std::chrono::seconds(10))
                : transport::inproc_connect(ep_name);
        federation::FedConfig cfg = spec.fed;
        cfg.trainable_mask.assign(locals[ci].net.layers.size(), false);
        for (std::size_t i = 0; i < shared; ++i) cfg.trainable_mask[i] = true;
        cfg.local_train.seed = mix_seed(seed, streams::kFedTrain + ci);
        finals[ci] = federation::run_client(*conn, ci, locals[ci].net, data[ci].train, cfg,
                                            data[ci].relevance, idle);
        conn->close();
      } catch (const std::exception& e) {
        client_errors[ci] = e.what();
      }
    });
  }

  std::vector<federation::ClientEndpoint> endpoints;
  federation::ServerResult result;
  try {
    endpoints.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      endpoints.push_back(federation::accept_client(*listener, std::chrono::seconds(10)));
    }
    std::sort(endpoints.begin(), endpoints.end(),
              [](const federation::ClientEndpoint& a, const federation::ClientEndpoint& b) {
                return a.client_id < b.client_id;
              });
    if (spec.topology == Topology::FlCloud) {
      for (auto& ep : endpoints) {
        transport::LinkModel link = *spec.link;
        link.seed = mix_seed(seed, streams::kLink + ep.client_id);
        ep.conn = transport::faulty_link(std::move(ep.conn), link);
      }
    }
    federation::FedConfig scfg = spec.fed;
    scfg.trainable_mask.assign(base_global.layers.size(), false);
    for (std::size_t i = 0; i < shared; ++i) scfg.trainable_mask[i] = true;
    result = federation::server_run(scfg, base_global, endpoints);
  } catch (...) {
    for (auto& ep : endpoints) {
      if (ep.conn) ep.conn->close();
    }
    listener->close();
    for (auto& w : workers) {
      if (w.joinable()) w.join();
    }
    throw;
  }
  // Unblock any client still waiting (e.g. one whose link dropped everything).
  for (auto& ep : endpoints) {
    if (ep.conn) ep.conn->close();
  }
  listener->close();
  for (auto& w : workers) w.join();

  for (std::size_t ci = 0; ci < k; ++ci) {
    if (finals[ci].has_value()) {
      locals[ci].net = std::move(*finals[ci]);
    } else {
      warn("bench: client " + std::to_string(ci) +
           " ended without a final model: " + client_errors[ci]);
    }
  }
  return FedOutcome{std::move(result.global), std::move(result.log)};
}

// ---- one (scenario, seed) cell ----

struct CellBundle {
  CellResult cell;
  std::vector<TimeSeries> timeseries;
  ErrorSample errors;
};

CellBundle run_cell(const ScenarioSpec& spec, std::uint64_t seed) {
  CellBundle out;
  out.cell.scenario = spec.name;
  out.cell.seed = seed;
  out.errors.scenario = spec.name;
  out.errors.seed = seed;
  const auto t0 = Clock::now();
  try {
    const std::size_t k = spec.clients.size();
    const PreparedCell prepared = prepare_cell(spec, seed);
    const std::vector<PreparedClient>& data = prepared.clients;
    const Matrix& reference = prepared.reference;

    // Models.
    std::vector<ClientModel> locals(k);
    model::MlpModel global_model;
    if (spec.topology == Topology::Centralized) {
      std::vector<const thermal::Dataset*> parts;
      parts.reserve(k);
      for (const auto& cd : data) parts.push_back(&cd.train);
      const thermal::Dataset pooled = concat_datasets(parts);
      model::MlpModel net = model::make_base_model(mix_seed(seed, streams::kBaseInit));
      model::TrainConfig tc = spec.base_train;
      tc.seed = mix_seed(seed, streams::kBaseTrain);
      net = model::train(net, pooled, tc).model;
      global_model = net;
      for (std::size_t ci = 0; ci < k; ++ci) locals[ci].net = net;
    } else {
      const model::MlpModel base = train_base(spec, seed, prepared);

      for (std::size_t ci = 0; ci < k; ++ci) {
        locals[ci] = client_tl(spec, seed, ci, base, prepared);
      }

      if (spec.topology == Topology::FlLocal || spec.topology == Topology::FlCloud) {
        FedOutcome fed = run_federation(spec, seed, base, locals, data);
        global_model = std::move(fed.global);
        out.cell.round_log = std::move(fed.log);
        for (const auto& r : out.cell.round_log.rounds) {
          if (r.skipped) {
            ++out.cell.rounds_skipped;
          } else {
            ++out.cell.rounds_completed;
          }
          out.cell.exclusion_count += static_cast<int>(r.excluded.size());
        }
      } else {
        global_model = base;  // the shared artifact of isolated runs
      }
    }

    // Per-client metrics on the holdout split.
    double mse_sum = 0.0;
    for (std::size_t ci = 0; ci < k; ++ci) {
      const ClientModel& cm = locals[ci];
      const thermal::Dataset view = eval_view(cm, data[ci].holdout);
      const model::EvalMetrics m = model::evaluate(cm.net, view);

      ClientResult cr;
      cr.client_id = ci;
      cr.domain = data[ci].profile.name;
      cr.mse = m.mse;
      cr.r2 = m.r2;
      cr.r2_defined = m.r2_defined;
      cr.relevance = data[ci].relevance;
      cr.input_mmd = data[ci].input_mmd;
      if (cm.tca || cm.encoder_layers > 0) {
        cr.embedded_mmd = transfer::mmd(embed_for_mmd(cm, data[ci].train.features),
                                        embed_for_mmd(cm, reference));
      } else {
        cr.embedded_mmd = cr.input_mmd;
      }

      if (spec.forgetting_refit &&
          (spec.topology == Topology::FlLocal || spec.topology == Topology::FlCloud)) {
        model::TrainConfig rc = spec.refit_train;
        rc.seed = mix_seed(seed, streams::kRefit + ci);
        cr.forgetting_pct = forgetting_experiment(cm.net, data[ci].train, data[ci].holdout, rc,
                                                  &cr.mse_before_refit, &cr.mse_after_refit);
        cr.forgetting_done = true;
      }

      const Vector err = residuals_k(cm, data[ci].holdout);
      out.errors.errors_k.insert(out.errors.errors_k.end(), err.data(), err.data() + err.size());

      if (spec.emit_timeseries) {
        TimeSeries ts;
        ts.scenario = spec.name;
        ts.seed = seed;
        ts.client_id = ci;
        const thermal::Dataset& full = data[ci].full_norm;
        Matrix pred = model::forward(cm.net, eval_features(cm, full.features));
        Vector p = pred.col(0);
        if (full.norm) {
          p = (p.array() * full.norm->target_std + full.norm->target_mean).matrix();
        }
        const Index n = full.n();
        ts.time_s.resize(static_cast<std::size_t>(n));
        ts.measured_k.resize(static_cast<std::size_t>(n));
        ts.predicted_k.resize(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
          ts.time_s[static_cast<std::size_t>(i)] =
              static_cast<double>(i) * data[ci].raw.sample_interval;
          ts.measured_k[static_cast<std::size_t>(i)] = data[ci].raw.targets[i];
          ts.predicted_k[static_cast<std::size_t>(i)] = p[i];
        }
        out.timeseries.push_back(std::move(ts));
      }

      mse_sum += cr.mse;
      out.cell.clients.push_back(std::move(cr));
    }
    out.cell.mean_client_mse = mse_sum / static_cast<double>(k);

    // One shared model over the pooled holdout.
    std::vector<const thermal::Dataset*> hold_parts;
    hold_parts.reserve(k);
    for (const auto& cd : data) hold_parts.push_back(&cd.holdout);
    const thermal::Dataset pooled_holdout = concat_datasets(hold_parts);
    const model::EvalMetrics gm = model::evaluate(global_model, pooled_holdout);
    out.cell.global_mse = gm.mse;
    out.cell.global_r2 = gm.r2;
    out.cell.global_r2_defined = gm.r2_defined;

    out.cell.ok = true;
  } catch (const std::exception& e) {
    out.cell.ok = false;
    out.cell.error = e.what();
    out.cell.clients.clear();
    out.timeseries.clear();
    out.errors.errors_k.clear();
  }
  out.cell.train_wall_ms = elapsed_ms(t0);
  return out;
}

}  // namespace

// ---- enum names ----

std::string to_string(Topology t) {
  switch (t) {
    case Topology::Centralized: return "centralized";
    case Topology::Isolated: return "isolated";
    case Topology::FlLocal: return "fl-local";
    case Topology::FlCloud: return "fl-cloud";
  }
  throw ConfigError("bench: unknown topology value");
}

std::string to_string(TlMethod m) {
  switch (m) {
    case TlMethod::FineTune: return "fine-tune";
    case TlMethod::Tca: return "tca";
    case TlMethod::Dda: return "dda";
    case TlMethod::None: return "none";
  }
  throw ConfigError("bench: unknown transfer method value");
}

Topology topology_from_string(const std::string& s) {
  if (s == "centralized") return Topology::Centralized;
  if (s == "isolated") return Topology::Isolated;
  if (s == "fl-local") return Topology::FlLocal;
  if (s == "fl-cloud") return Topology::FlCloud;
  throw ConfigError("bench: unknown topology '" + s + "'");
}

TlMethod tl_method_from_string(const std::string& s) {
  if (s == "fine-tune") return TlMethod::FineTune;
  if (s == "tca") return TlMethod::Tca;
  if (s == "dda") return TlMethod::Dda;
  if (s == "none") return TlMethod::None;
  throw ConfigError("bench: unknown transfer method '" + s + "'");
}

// ---- spec validation ----

void ScenarioSpec::validate(const std::string& path) const {
  const auto fail = [&](const std::string& field, const std::string& msg) {
    throw ConfigError(path + "." + field + ": " + msg);
  };
  if (name.empty()) fail("name", "must not be empty");
  if (clients.empty()) fail("clients", "need at least one domain profile");
  for (std::size_t i = 0; i < clients.size(); ++i) {
    try {
      clients[i].validate();
    } catch (const ConfigError& e) {
      fail("clients[" + std::to_string(i) + "]", e.what());
    }
  }
  if (seeds.empty()) fail("seeds", "need at least one seed");

  const bool federated = topology == Topology::FlLocal || topology == Topology::FlCloud;
  if (federated && clients.size() < 2) {
    fail("clients", "federated topologies need at least 2 clients");
  }
  if (topology == Topology::FlCloud && !link.has_value()) {
    fail("link", "fl-cloud needs a link model");
  }
  if (link) {
    try {
      link->validate();
    } catch (const ConfigError& e) {
      fail("link", e.what());
    }
  }
  if (federated && tl_method != TlMethod::FineTune && tl_method != TlMethod::None) {
    fail("tl_method",
         "federated topologies support 'fine-tune' or 'none'; embedding methods change "
         "the shared trunk shape");
  }
  if (federated) {
    if (fed.rounds < 1) fail("fed.rounds", "need at least one round");
    if (fed.local_epochs < 1) fail("fed.local_epochs", "need at least one epoch");
    if (fed.retry_budget < 0) fail("fed.retry_budget", "must be >= 0");
    if (fed.client_timeout.count() <= 0) fail("fed.client_timeout", "must be positive");
    try {
      fed.local_train.validate();
    } catch (const ConfigError& e) {
      fail("fed.local_train", e.what());
    }
  }
  if (source_samples < 20) fail("source_samples", "need at least 20 rows");
  if (target_samples < 20) fail("target_samples", "need at least 20 rows");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 0.9)) {
    fail("holdout_fraction", "must lie in (0, 0.9)");
  }
  if (tl_method == TlMethod::FineTune && head_spec.empty()) {
    fail("head_spec", "fine-tune needs at least one hidden width");
  }
  for (std::size_t i = 0; i < head_spec.size(); ++i) {
    if (head_spec[i] < 1) fail("head_spec[" + std::to_string(i) + "]", "widths must be >= 1");
  }
  try {
    base_train.validate();
  } catch (const ConfigError& e) {
    fail("base_train", e.what());
  }
  try {
    tl_train.validate();
  } catch (const ConfigError& e) {
    fail("tl_train", e.what());
  }
  if (forgetting_refit) {
    try {
      refit_train.validate();
    } catch (const ConfigError& e) {
      fail("refit_train", e.what());
    }
  }
  if (tl_method == TlMethod::Dda) {
    try {
      dda.validate(thermal::kFeatureCount);
    } catch (const ConfigError& e) {
      fail("dda", e.what());
    }
  }
  if (load_shift) {
    if (!(load_shift->factor > 0.0)) fail("load_shift.factor", "must be positive");
    if (!(load_shift->window_lo_frac >= 0.0 && load_shift->window_lo_frac < load_shift->window_hi_frac &&
          load_shift->window_hi_frac <= 1.0)) {
      fail("load_shift", "window fractions must satisfy 0 <= lo < hi <= 1");
    }
  }
  if (backend != "inproc" && backend != "tcp") {
    fail("backend", "must be 'inproc' or 'tcp'");
  }
}

// ---- deterministic per-cell pipeline ----

PreparedCell prepare_cell(const ScenarioSpec& spec, std::uint64_t seed) {
  const std::size_t k = spec.clients.size();
  PreparedCell cell;
  cell.clients.resize(k);

  // Data generation per client; load shift applies to target clients only.
  for (std::size_t ci = 0; ci < k; ++ci) {
    thermal::DomainProfile prof = spec.clients[ci];
    prof.seed = mix_seed(seed, streams::kProfile + ci);
    const Index n = (ci == 0) ? spec.source_samples : spec.target_samples;
    thermal::Dataset raw = thermal::generate(prof, n);
    if (spec.load_shift && ci > 0) {
      const auto lo = static_cast<Index>(
          std::llround(spec.load_shift->window_lo_frac * static_cast<double>(n)));
      const auto hi = static_cast<Index>(
          std::llround(spec.load_shift->window_hi_frac * static_cast<double>(n)));
      raw = thermal::load_shift(raw, prof, spec.load_shift->factor, lo, hi);
    }
    cell.clients[ci].profile = std::move(prof);
    cell.clients[ci].raw = std::move(raw);
  }

  // Normalization statistics come from the source train split alone.
  const Split source_split =
      split_dataset(cell.clients[0].raw, spec.holdout_fraction, spec.split);
  cell.stats = thermal::normalize_fit(source_split.train);
  for (std::size_t ci = 0; ci < k; ++ci) {
    const Split s = (ci == 0)
                        ? source_split
                        : split_dataset(cell.clients[ci].raw, spec.holdout_fraction, spec.split);
    cell.clients[ci].train = thermal::normalize_apply(s.train, cell.stats);
    cell.clients[ci].holdout = thermal::normalize_apply(s.holdout, cell.stats);
    cell.clients[ci].full_norm = thermal::normalize_apply(cell.clients[ci].raw, cell.stats);
  }

  // Domain-distance bookkeeping against a fixed source reference sample.
  cell.reference =
      subsample_rows(cell.clients[0].train.features, 256, mix_seed(seed, streams::kReference));
  for (std::size_t ci = 0; ci < k; ++ci) {
    cell.clients[ci].input_mmd = transfer::mmd(cell.clients[ci].train.features, cell.reference);
    cell.clients[ci].relevance = std::exp(-cell.clients[ci].input_mmd);
  }
  return cell;
}

model::MlpModel train_base(const ScenarioSpec& spec, std::uint64_t seed,
                           const PreparedCell& cell) {
  if (cell.clients.empty()) throw ConfigError("bench: prepared cell has no clients");
  model::MlpModel base = model::make_base_model(mix_seed(seed, streams::kBaseInit));
  model::TrainConfig tc = spec.base_train;
  tc.seed = mix_seed(seed, streams::kBaseTrain);
  return model::train(base, cell.clients[0].train, tc).model;
}

TlArtifact client_tl(const ScenarioSpec& spec, std::uint64_t seed, std::size_t client_index,
                     const model::MlpModel& base, const PreparedCell& cell) {
  if (client_index >= cell.clients.size()) {
    throw ConfigError("bench: client index out of range");
  }
  TlArtifact art;
  const std::uint64_t tl_seed = mix_seed(seed, streams::kTlTrain + client_index);
  if (client_index == 0 || spec.tl_method == TlMethod::None) {
    // The source domain already matches the base model; no adaptation.
    art.net = base;
    return art;
  }
  const thermal::Dataset& source_train = cell.clients[0].train;
  const thermal::Dataset& client_train = cell.clients[client_index].train;
  model::TrainConfig tc = spec.tl_train;
  tc.seed = tl_seed;
  switch (spec.tl_method) {
    case TlMethod::FineTune:
      art.net = transfer::fine_tune(base, client_train, spec.head_spec, tc);
      return art;
    case TlMethod::Tca: {
      transfer::TcaMap map =
          transfer::tca_fit(source_train.features, client_train.features,
                            transfer::kTcaDefaultComponents, transfer::kTcaDefaultMu, {},
                            transfer::kTcaMaxPerDomain, mix_seed(tl_seed, 1));
      thermal::Dataset embedded;
      embedded.features = transfer::tca_transform(map, client_train.features);
      embedded.targets = client_train.targets;
      embedded.sample_interval = client_train.sample_interval;
      embedded.norm = client_train.norm;
      std::vector<Index> sizes;
      sizes.push_back(map.m);
      sizes.insert(sizes.end(), spec.head_spec.begin(), spec.head_spec.end());
      sizes.push_back(1);
      model::MlpModel net = model::make_mlp(sizes, model::Activation::Tanh, mix_seed(tl_seed, 2));
      tc.seed = mix_seed(tl_seed, 3);
      art.net = model::train(net, embedded, tc).model;
      art.tca = std::move(map);
      return art;
    }
    case TlMethod::Dda: {
      transfer::DdaConfig dc = spec.dda;
      dc.pretrain.seed = mix_seed(tl_seed, 1);
      dc.train.seed = mix_seed(tl_seed, 2);
      art.net = transfer::dda_train(source_train, client_train, dc);
      art.encoder_layers = dc.encoder_sizes.size();
      return art;
    }
    case TlMethod::None:
      break;  // handled above
  }
  throw ConfigError("bench: unhandled transfer method");
}

// ---- splitting ----

Split split_dataset(const thermal::Dataset& data, double holdout_fraction, SplitKind kind) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("split: holdout fraction must lie in (0, 1)");
  }
  const Index n = data.n();
  if (n < 2) throw ConfigError("split: need at least 2 rows");

  std::vector<Index> train_rows;
  std::vector<Index> hold_rows;
  if (kind == SplitKind::Chronological) {
    Index n_hold = static_cast<Index>(std::llround(holdout_fraction * static_cast<double>(n)));
    n_hold = std::clamp<Index>(n_hold, 1, n - 1);
    for (Index i = 0; i < n - n_hold; ++i) train_rows.push_back(i);
    for (Index i = n - n_hold; i < n; ++i) hold_rows.push_back(i);
  } else {
    const Index stride =
        std::max<Index>(2, static_cast<Index>(std::llround(1.0 / holdout_fraction)));
    for (Index i = 0; i < n; ++i) {
      if (i % stride == stride - 1) {
        hold_rows.push_back(i);
      } else {
        train_rows.push_back(i);
      }
    }
    if (hold_rows.empty()) {
      hold_rows.push_back(n - 1);
      train_rows.pop_back();
    }
  }
  return Split{gather_dataset(data, train_rows), gather_dataset(data, hold_rows)};
}

// ---- forgetting ----

double forgetting_experiment(const model::MlpModel& fl_model, const thermal::Dataset& refit_train,
                             const thermal::Dataset& holdout, const model::TrainConfig& cfg,
                             double* mse_before, double* mse_after) {
  fl_model.validate();
  if (cfg.epochs < 0) throw ConfigError("forgetting: epochs must be >= 0");
  const double before = model::evaluate(fl_model, holdout).mse;
  double after = before;
  if (cfg.epochs > 0) {
    model::MlpModel m = fl_model;
    for (auto& layer : m.layers) layer.frozen = !layer.frozen;
    if (!m.any_trainable()) {
      throw ConfigError("forgetting: model has no refit layers (nothing was frozen)");
    }
    m = model::train(m, refit_train, cfg).model;
    after = model::evaluate(m, holdout).mse;
  }
  if (mse_before != nullptr) *mse_before = before;
  if (mse_after != nullptr) *mse_after = after;
  if (!(before > 0.0)) return 0.0;
  return 100.0 * (before - after) / before;
}

// ---- suite runners ----

RunArtifacts run_suite(const std::vector<ScenarioSpec>& suite, const std::string& only_scenario,
                       int parallel) {
  std::vector<const ScenarioSpec*> chosen;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    suite[i].validate("scenarios[" + std::to_string(i) + "]");
    if (only_scenario.empty() || suite[i].name == only_scenario) chosen.push_back(&suite[i]);
  }
  if (!only_scenario.empty() && chosen.empty()) {
    throw ConfigError("bench: no scenario named '" + only_scenario + "'");
  }
  if (parallel < 1) throw ConfigError("bench: parallel must be >= 1");

  struct Job {
    const ScenarioSpec* spec;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto* spec : chosen) {
    for (const std::uint64_t seed : spec->seeds) jobs.push_back(Job{spec, seed});
  }

  std::vector<CellBundle> bundles(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= jobs.size()) break;
      bundles[i] = run_cell(*jobs[i].spec, jobs[i].seed);
    }
  };
  const std::size_t thread_count =
      std::min<std::size_t>(static_cast<std::size_t>(parallel), std::max<std::size_t>(jobs.size(), 1));
  if (thread_count <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(thread_count);
    for (std::size_t i = 0; i < thread_count; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  RunArtifacts artifacts;
  artifacts.report.cells.reserve(bundles.size());
  for (auto& b : bundles) {
    artifacts.report.cells.push_back(std::move(b.cell));
    for (auto& ts : b.timeseries) artifacts.timeseries.push_back(std::move(ts));
    if (!b.errors.errors_k.empty()) artifacts.errors.push_back(std::move(b.errors));
  }
  return artifacts;
}

RunArtifacts run_scenario(const ScenarioSpec& spec) {
  std::vector<ScenarioSpec> suite{spec};
  RunArtifacts artifacts = run_suite(suite, "", 1);
  artifacts.report.suite = spec.name;
  return artifacts;
}

// ---- shipped default suite ----

std::vector<ScenarioSpec> paper_mini_suite() {
  using thermal::DomainProfile;
  using thermal::LoadPattern;

  DomainProfile source;
  source.name = "source-dc-station";
  source.load = LoadPattern::steady();
  source.r_th = 0.020;
  source.tau_s = 900;
  source.current_max_a = 400;
  source.freq_lo_hz = 30;
  source.freq_hi_hz = 60;
  source.power_max_kw = 250;
  source.ambient_lo_c = 15;
  source.ambient_hi_c = 35;

  DomainProfile t1 = source;
  t1.name = "target-traction";
  t1.load = LoadPattern::intermittent(0.6, 1800);
  t1.r_th = 0.022;
  t1.current_max_a = 320;
  t1.freq_lo_hz = 35;
  t1.freq_hi_hz = 55;
  t1.ambient_lo_c = 20;
  t1.ambient_hi_c = 40;

  DomainProfile t2 = source;
  t2.name = "target-pv-inverter";
  t2.load = LoadPattern::partial(0.55);
  t2.r_th = 0.019;
  t2.tau_s = 1100;
  t2.current_max_a = 450;
  t2.freq_lo_hz = 25;
  t2.freq_hi_hz = 50;

  DomainProfile t3 = source;
  t3.name = "target-crane-drive";
  t3.load = LoadPattern::intermittent(0.35, 3600);
  t3.tau_s = 700;
  t3.current_max_a = 380;
  t3.freq_lo_hz = 40;
  t3.freq_hi_hz = 60;
  t3.ambient_lo_c = 10;
  t3.ambient_hi_c = 30;

  DomainProfile t4 = source;
  t4.name = "target-compact-ups";
  t4.load = LoadPattern::steady();
  t4.r_th = 0.024;
  t4.current_max_a = 280;
  t4.freq_lo_hz = 30;
  t4.freq_hi_hz = 45;
  t4.power_max_kw = 180;
  t4.ambient_lo_c = 25;
  t4.ambient_hi_c = 45;

  // Forced-air drive with a small thermal mass: the temperature settles within
  // a couple of samples, which makes the step response at the load-shift
  // window boundary sharp and the in-window regime quasi-static.
  DomainProfile t5 = source;
  t5.name = "target-air-drive";
  t5.load = LoadPattern::partial(0.6);
  t5.tau_s = 120;
  t5.current_max_a = 450;
  t5.ambient_lo_c = 20;
  t5.ambient_hi_c = 40;

  ScenarioSpec common;
  common.clients = {source, t1, t2, t3, t4};
  common.seeds = {1, 2, 3, 4, 5};
  common.tl_method = TlMethod::FineTune;
  common.source_samples = 2000;
  common.target_samples = 400;
  common.holdout_fraction = 0.3;
  common.split = SplitKind::Chronological;
  common.head_spec = {16};

  common.base_train.learning_rate = 2e-3;
  common.base_train.epochs = 60;
  common.base_train.batch_size = 64;

  common.tl_train.learning_rate = 4e-3;
  common.tl_train.epochs = 90;
  common.tl_train.batch_size = 32;

  common.fed.local_epochs = 3;
  common.fed.aggregation = federation::Aggregation::FedAvg;
  common.fed.retry_budget = 3;
  common.fed.client_timeout = std::chrono::milliseconds(5000);
  common.fed.local_train.learning_rate = 5e-4;
  common.fed.local_train.batch_size = 32;

  std::vector<ScenarioSpec> suite;

  // Declared first so its cells start first under parallel execution: the
  // lossy-link rounds spend most of their wall time sleeping, which lets the
  // compute-bound cells below share the cores instead of queueing behind them.
  ScenarioSpec cloud = common;
  cloud.name = "fl-cloud-100";
  cloud.topology = Topology::FlCloud;
  cloud.fed.rounds = 100;
  cloud.fed.local_epochs = 2;  // constrained links favor shorter local bursts
  cloud.fed.client_timeout = std::chrono::milliseconds(900);
  transport::LinkModel link;
  link.latency_lo = std::chrono::milliseconds(50);
  link.latency_hi = std::chrono::milliseconds(200);
  link.drop_prob = 0.2;
  cloud.link = link;
  suite.push_back(cloud);

  ScenarioSpec fl100 = common;
  fl100.name = "fl-local-100";
  fl100.topology = Topology::FlLocal;
  fl100.fed.rounds = 100;
  fl100.forgetting_refit = true;
  suite.push_back(fl100);

  ScenarioSpec fl10 = common;
  fl10.name = "fl-local-10";
  fl10.topology = Topology::FlLocal;
  fl10.fed.rounds = 10;
  suite.push_back(fl10);

  ScenarioSpec centralized = common;
  centralized.name = "centralized";
  centralized.topology = Topology::Centralized;
  suite.push_back(centralized);

  ScenarioSpec isolated = common;
  isolated.name = "isolated";
  isolated.topology = Topology::Isolated;
  suite.push_back(isolated);

  ScenarioSpec shift = common;
  shift.name = "load-shift";
  shift.topology = Topology::Isolated;
  shift.clients = {source, t5};
  shift.target_samples = 3000;
  shift.split = SplitKind::Interleaved;
  shift.load_shift = LoadShiftSpec{};
  shift.emit_timeseries = true;
  suite.push_back(shift);

  return suite;
}

}  // namespace ftl::bench

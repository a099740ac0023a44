#include "ftl/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>
#include <utility>

#include "ftl/errors.hpp"
#include "ftl/rng.hpp"

namespace ftl::federation {

namespace {

using Clock = std::chrono::steady_clock;

std::string layer_shape_error(std::uint64_t client_id, const std::string& detail) {
  return "aggregate: client " + std::to_string(client_id) + ": " + detail;
}

}  // namespace

void FedConfig::validate(std::size_t layer_count) const {
  if (rounds < 1) throw ConfigError("federation: rounds must be >= 1");
  if (local_epochs < 1) throw ConfigError("federation: local_epochs must be >= 1");
  if (retry_budget < 0) throw ConfigError("federation: retry_budget must be >= 0");
  if (client_timeout.count() <= 0) throw ConfigError("federation: client_timeout must be > 0");
  if (trainable_mask.size() != layer_count) {
    throw ConfigError("federation: trainable_mask has " + std::to_string(trainable_mask.size()) +
                      " entries for a model of " + std::to_string(layer_count) + " layers");
  }
  if (std::none_of(trainable_mask.begin(), trainable_mask.end(), [](bool b) { return b; })) {
    throw ConfigError("federation: trainable_mask selects no layers");
  }
  local_train.validate();
}

std::vector<double> aggregation_weights(const std::vector<ModelUpdate>& updates,
                                        Aggregation mode) {
  if (updates.empty()) throw std::invalid_argument("aggregate: empty update set");
  std::vector<double> raw(updates.size());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const ModelUpdate& u = updates[i];
    if (u.n_k < 1) {
      throw std::invalid_argument(layer_shape_error(u.client_id, "n_k must be >= 1"));
    }
    double w = static_cast<double>(u.n_k);
    if (mode == Aggregation::RelevanceWeighted) {
      if (!std::isfinite(u.relevance) || u.relevance <= 0.0) {
        throw std::invalid_argument(
            layer_shape_error(u.client_id, "relevance must be finite and > 0"));
      }
      w *= u.relevance;
    }
    raw[i] = w;
  }
  double total = 0.0;
  for (double w : raw) total += w;
  std::vector<double> weights(updates.size());
  double partial = 0.0;
  for (std::size_t i = 0; i + 1 < updates.size(); ++i) {
    weights[i] = raw[i] / total;
    partial += weights[i];
  }
  // The last weight absorbs the rounding remainder so the sum is exactly 1.
  weights.back() = 1.0 - partial;
  return weights;
}

std::vector<wire::LayerEntry> aggregate(const std::vector<ModelUpdate>& updates,
                                        Aggregation mode) {
  std::vector<double> weights = aggregation_weights(updates, mode);
  const std::vector<wire::LayerEntry>& first = updates.front().layers;
  if (first.empty()) {
    throw std::invalid_argument(layer_shape_error(updates.front().client_id, "empty payload"));
  }
  for (const ModelUpdate& u : updates) {
    if (u.layers.size() != first.size()) {
      throw std::invalid_argument(layer_shape_error(u.client_id, "layer count differs"));
    }
    for (std::size_t li = 0; li < first.size(); ++li) {
      const wire::LayerEntry& a = first[li];
      const wire::LayerEntry& b = u.layers[li];
      if (b.layer_index != a.layer_index || b.weights.rows() != a.weights.rows() ||
          b.weights.cols() != a.weights.cols() || b.bias.size() != a.bias.size() ||
          b.activation != a.activation) {
        throw std::invalid_argument(
            layer_shape_error(u.client_id, "shape mismatch in layer " +
                                               std::to_string(a.layer_index)));
      }
    }
  }

  std::vector<wire::LayerEntry> out = first;
  for (wire::LayerEntry& entry : out) {
    entry.weights *= weights[0];
    entry.bias *= weights[0];
  }
  for (std::size_t ui = 1; ui < updates.size(); ++ui) {
    for (std::size_t li = 0; li < out.size(); ++li) {
      out[li].weights += weights[ui] * updates[ui].layers[li].weights;
      out[li].bias += weights[ui] * updates[ui].layers[li].bias;
    }
  }
  return out;
}

std::vector<wire::LayerEntry> masked_layers(const model::MlpModel& m,
                                            const std::vector<bool>& mask) {
  if (mask.size() != m.layers.size()) {
    throw std::invalid_argument("masked_layers: mask/model layer count mismatch");
  }
  std::vector<wire::LayerEntry> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!mask[i]) continue;
    wire::LayerEntry entry;
    entry.layer_index = static_cast<std::uint32_t>(i);
    entry.weights = m.layers[i].weights;
    entry.bias = m.layers[i].bias;
    entry.activation = m.layers[i].activation;
    entry.frozen = m.layers[i].frozen;
    out.push_back(std::move(entry));
  }
  return out;
}

model::MlpModel partial_merge(const model::MlpModel& global,
                              const std::vector<wire::LayerEntry>& aggregated,
                              const std::vector<bool>& mask) {
  if (mask.size() != global.layers.size()) {
    throw std::invalid_argument("partial_merge: mask/model layer count mismatch");
  }
  std::size_t expected = 0;
  for (bool b : mask) expected += b ? 1 : 0;
  if (aggregated.size() != expected) {
    throw std::invalid_argument("partial_merge: payload has " +
                                std::to_string(aggregated.size()) + " layers, mask selects " +
                                std::to_string(expected));
  }

  model::MlpModel out = global;
  std::vector<bool> seen(global.layers.size(), false);
  for (const wire::LayerEntry& entry : aggregated) {
    if (entry.layer_index >= global.layers.size() || !mask[entry.layer_index]) {
      throw std::invalid_argument("partial_merge: payload layer " +
                                  std::to_string(entry.layer_index) + " is not in the mask");
    }
    if (seen[entry.layer_index]) {
      throw std::invalid_argument("partial_merge: duplicate payload layer " +
                                  std::to_string(entry.layer_index));
    }
    seen[entry.layer_index] = true;
    model::Layer& l = out.layers[entry.layer_index];
    if (entry.weights.rows() != l.weights.rows() || entry.weights.cols() != l.weights.cols() ||
        entry.bias.size() != l.bias.size() || entry.activation != l.activation) {
      throw std::invalid_argument("partial_merge: payload layer " +
                                  std::to_string(entry.layer_index) +
                                  " does not match the model shape");
    }
    l.weights = entry.weights;
    l.bias = entry.bias;
  }
  return out;
}

ModelUpdate client_step(model::MlpModel& local_model, const thermal::Dataset& data,
                        const FedConfig& cfg, const std::vector<wire::LayerEntry>& global_layers,
                        int round, std::uint64_t client_id, double relevance_score) {
  cfg.validate(local_model.layers.size());
  if (round < 0) throw ConfigError("client_step: round must be >= 0");

  // Install the broadcast layers, then swap the roles: the shared layers
  // train, the personal head freezes.
  local_model = partial_merge(local_model, global_layers, cfg.trainable_mask);
  for (std::size_t i = 0; i < local_model.layers.size(); ++i) {
    local_model.layers[i].frozen = !cfg.trainable_mask[i];
  }

  model::TrainConfig tc = cfg.local_train;
  tc.epochs = cfg.local_epochs;
  tc.seed = mix_seed(cfg.local_train.seed, static_cast<std::uint64_t>(round));
  model::TrainResult result = model::train(local_model, data, tc);
  local_model = std::move(result.model);

  ModelUpdate update;
  update.client_id = client_id;
  update.round = round;
  update.layers = masked_layers(local_model, cfg.trainable_mask);
  update.n_k = static_cast<std::uint64_t>(data.n());
  update.relevance = relevance_score;
  update.local_loss = result.loss_history.empty() ? 0.0 : result.loss_history.back();
  return update;
}

// ---- payload codecs ----

std::vector<std::uint8_t> encode_hello(std::uint64_t client_id) {
  std::vector<std::uint8_t> out;
  wire::put_u64(out, client_id);
  return out;
}

std::uint64_t decode_hello(std::span<const std::uint8_t> payload) {
  wire::ByteReader r(payload);
  std::uint64_t id = r.u64();
  r.expect_end();
  return id;
}

namespace {

std::vector<std::uint8_t> encode_round_layers(int round,
                                              const std::vector<wire::LayerEntry>& layers) {
  std::vector<std::uint8_t> out;
  wire::put_u32(out, static_cast<std::uint32_t>(round));
  wire::ModelPayload payload;
  payload.layers = layers;
  std::vector<std::uint8_t> body = wire::encode_model_payload(payload);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

GlobalModelMsg decode_round_layers(std::span<const std::uint8_t> payload) {
  wire::ByteReader r(payload);
  GlobalModelMsg msg;
  msg.round = static_cast<int>(r.u32());
  msg.layers = wire::decode_model_payload(r.rest()).layers;
  return msg;
}

}  // namespace

std::vector<std::uint8_t> encode_global_model(int round,
                                              const std::vector<wire::LayerEntry>& layers) {
  return encode_round_layers(round, layers);
}

GlobalModelMsg decode_global_model(std::span<const std::uint8_t> payload) {
  return decode_round_layers(payload);
}

std::vector<std::uint8_t> encode_shutdown(int final_round,
                                          const std::vector<wire::LayerEntry>& layers) {
  return encode_round_layers(final_round, layers);
}

GlobalModelMsg decode_shutdown(std::span<const std::uint8_t> payload) {
  return decode_round_layers(payload);
}

std::vector<std::uint8_t> encode_update(const ModelUpdate& update) {
  std::vector<std::uint8_t> out;
  wire::put_u64(out, update.client_id);
  wire::put_u32(out, static_cast<std::uint32_t>(update.round));
  wire::put_f64(out, update.local_loss);
  wire::ModelPayload payload;
  payload.layers = update.layers;
  payload.n_k = update.n_k;
  payload.relevance = update.relevance;
  std::vector<std::uint8_t> body = wire::encode_model_payload(payload);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

ModelUpdate decode_update(std::span<const std::uint8_t> payload) {
  wire::ByteReader r(payload);
  ModelUpdate update;
  update.client_id = r.u64();
  update.round = static_cast<int>(r.u32());
  update.local_loss = r.f64();
  wire::ModelPayload body = wire::decode_model_payload(r.rest());
  update.layers = std::move(body.layers);
  update.n_k = body.n_k;
  update.relevance = body.relevance;
  return update;
}

std::vector<std::uint8_t> encode_round_ack(int round) {
  std::vector<std::uint8_t> out;
  wire::put_u32(out, static_cast<std::uint32_t>(round));
  return out;
}

int decode_round_ack(std::span<const std::uint8_t> payload) {
  wire::ByteReader r(payload);
  int round = static_cast<int>(r.u32());
  r.expect_end();
  return round;
}

std::vector<std::uint8_t> encode_client_error(std::uint64_t client_id, int round,
                                              const std::string& message) {
  std::vector<std::uint8_t> out;
  wire::put_u64(out, client_id);
  wire::put_u32(out, static_cast<std::uint32_t>(round));
  wire::put_string(out, message);
  return out;
}

ClientErrorMsg decode_client_error(std::span<const std::uint8_t> payload) {
  wire::ByteReader r(payload);
  ClientErrorMsg msg;
  msg.client_id = r.u64();
  msg.round = static_cast<int>(r.u32());
  msg.message = r.string();
  r.expect_end();
  return msg;
}

// ---- orchestration ----

ClientEndpoint accept_client(transport::Listener& listener, std::chrono::milliseconds timeout) {
  transport::ConnectionPtr conn = listener.accept(timeout);
  if (!conn) throw transport::TransportError("accept_client: no connection within deadline");
  std::optional<wire::Message> hello = conn->receive(timeout);
  if (!hello) throw transport::TransportError("accept_client: no Hello within deadline");
  if (hello->type != wire::MsgType::Hello) {
    throw transport::TransportError("accept_client: expected Hello");
  }
  ClientEndpoint endpoint;
  endpoint.client_id = decode_hello(hello->payload);
  endpoint.conn = std::move(conn);
  return endpoint;
}

namespace {

// One server-side round trip with a single client: broadcast the round's
// layers, wait for this round's update, retry on silence. Returns the update
// or nothing (with `failure` explaining why the client sat the round out).
std::optional<ModelUpdate> exchange_round(transport::Connection& conn, const FedConfig& cfg,
                                          int round,
                                          const std::vector<std::uint8_t>& global_bytes,
                                          std::string& failure) {
  const int attempts = 1 + cfg.retry_budget;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    try {
      conn.send(wire::Message{wire::MsgType::GlobalModel, global_bytes});
    } catch (const std::exception& e) {
      failure = e.what();
      return std::nullopt;  // dead connection; retrying cannot help
    }
    const auto deadline = Clock::now() + cfg.client_timeout;
    for (;;) {
      auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      if (left.count() <= 0) break;  // this attempt timed out
      std::optional<wire::Message> msg;
      try {
        msg = conn.receive(left);
      } catch (const std::exception& e) {
        failure = e.what();
        return std::nullopt;
      }
      if (!msg) break;
      try {
        if (msg->type == wire::MsgType::UpdateSubmit) {
          ModelUpdate update = decode_update(msg->payload);
          if (update.round == round) return update;
          continue;  // stale reply from an earlier attempt/round
        }
        if (msg->type == wire::MsgType::ClientError) {
          ClientErrorMsg err = decode_client_error(msg->payload);
          if (err.round == round) {
            failure = "client error: " + err.message;
            return std::nullopt;
          }
          continue;
        }
      } catch (const wire::DecodeError& e) {
        failure = std::string("protocol error: ") + e.what();
        return std::nullopt;
      }
      // Anything else (duplicate Hello, stray ack) is ignored.
    }
  }
  failure = "timeout after " + std::to_string(attempts) + " attempts";
  return std::nullopt;
}

}  // namespace

ServerResult server_run(const FedConfig& cfg, const model::MlpModel& initial_global,
                        std::vector<ClientEndpoint>& clients,
                        const thermal::Dataset* eval_set) {
  initial_global.validate();
  cfg.validate(initial_global.layers.size());
  if (clients.empty()) throw ConfigError("server_run: no registered clients");

  ServerResult result;
  result.global = initial_global;
  bool any_update_ever = false;

  for (int round = 0; round < cfg.rounds; ++round) {
    const auto started = Clock::now();
    std::vector<std::uint8_t> global_bytes =
        encode_global_model(round, masked_layers(result.global, cfg.trainable_mask));

    std::vector<std::optional<ModelUpdate>> slots(clients.size());
    std::vector<std::string> failures(clients.size());
    {
      std::vector<std::thread> workers;
      workers.reserve(clients.size());
      for (std::size_t ci = 0; ci < clients.size(); ++ci) {
        workers.emplace_back([&, ci] {
          try {
            slots[ci] = exchange_round(*clients[ci].conn, cfg, round, global_bytes,
                                       failures[ci]);
          } catch (const std::exception& e) {
            failures[ci] = e.what();
            slots[ci] = std::nullopt;
          }
        });
      }
      for (std::thread& w : workers) w.join();
    }

    RoundEntry entry;
    entry.round = round;
    std::vector<ModelUpdate> updates;
    for (std::size_t ci = 0; ci < clients.size(); ++ci) {
      if (slots[ci]) {
        entry.participating.push_back(clients[ci].client_id);
        updates.push_back(std::move(*slots[ci]));
      } else {
        entry.excluded.push_back(clients[ci].client_id);
        warn("round " + std::to_string(round) + ": client " +
             std::to_string(clients[ci].client_id) + " excluded (" + failures[ci] + ")");
      }
    }

    if (updates.empty()) {
      entry.skipped = true;
      warn("round " + std::to_string(round) + " skipped: no client delivered an update");
    } else {
      any_update_ever = true;
      std::vector<double> weights = aggregation_weights(updates, cfg.aggregation);
      result.global =
          partial_merge(result.global, aggregate(updates, cfg.aggregation), cfg.trainable_mask);
      entry.aggregate_loss = 0.0;
      for (std::size_t i = 0; i < updates.size(); ++i) {
        entry.aggregate_loss += weights[i] * updates[i].local_loss;
      }
      if (cfg.eval_each_round && eval_set != nullptr) {
        entry.eval = model::evaluate(result.global, *eval_set);
        entry.eval_done = true;
      }
      wire::Message ack{wire::MsgType::RoundAck, encode_round_ack(round)};
      for (std::size_t ci = 0; ci < clients.size(); ++ci) {
        if (!slots[ci].has_value()) continue;  // excluded this round
        try {
          clients[ci].conn->send(ack);
        } catch (const std::exception&) {
          // The ack is best-effort; a lost ack only costs a duplicate reply.
        }
      }
    }
    entry.duration_ms =
        std::chrono::duration<double, std::milli>(Clock::now() - started).count();
    result.log.rounds.push_back(std::move(entry));
  }

  if (!any_update_ever) {
    throw std::runtime_error("federation failed: no client was ever reachable");
  }

  // Final sync: ship the last aggregate inside Shutdown, repeated a few times
  // so lossy links still deliver it with high probability.
  std::vector<std::uint8_t> shutdown_bytes =
      encode_shutdown(cfg.rounds, masked_layers(result.global, cfg.trainable_mask));
  wire::Message shutdown{wire::MsgType::Shutdown, shutdown_bytes};
  {
    std::vector<std::thread> workers;
    workers.reserve(clients.size());
    for (std::size_t ci = 0; ci < clients.size(); ++ci) {
      workers.emplace_back([&, ci] {
        for (int copy = 0; copy < 1 + cfg.retry_budget; ++copy) {
          try {
            clients[ci].conn->send(shutdown);
          } catch (const std::exception&) {
            return;
          }
        }
      });
    }
    for (std::thread& w : workers) w.join();
  }
  return result;
}

model::MlpModel run_client(transport::Connection& conn, std::uint64_t client_id,
                           model::MlpModel local_model, const thermal::Dataset& data,
                           const FedConfig& cfg, double relevance_score,
                           std::chrono::milliseconds idle_timeout) {
  cfg.validate(local_model.layers.size());
  conn.send(wire::Message{wire::MsgType::Hello, encode_hello(client_id)});

  int last_round = -1;
  std::vector<std::uint8_t> cached_update;
  for (;;) {
    std::optional<wire::Message> msg = conn.receive(idle_timeout);
    if (!msg) {
      // Server went silent (e.g. the final sync was lost); keep the local
      // state rather than hanging forever.
      warn("client " + std::to_string(client_id) + ": server idle timeout, leaving federation");
      return local_model;
    }
    switch (msg->type) {
      case wire::MsgType::GlobalModel: {
        GlobalModelMsg gm = decode_global_model(msg->payload);
        if (gm.round == last_round && !cached_update.empty()) {
          conn.send(wire::Message{wire::MsgType::UpdateSubmit, cached_update});
          break;
        }
        if (gm.round < last_round) break;  // stale rebroadcast of an old round
        try {
          ModelUpdate update = client_step(local_model, data, cfg, gm.layers, gm.round,
                                           client_id, relevance_score);
          last_round = gm.round;
          cached_update = encode_update(update);
          conn.send(wire::Message{wire::MsgType::UpdateSubmit, cached_update});
        } catch (const transport::TransportError&) {
          throw;
        } catch (const std::exception& e) {
          last_round = gm.round;
          cached_update.clear();
          conn.send(wire::Message{wire::MsgType::ClientError,
                                  encode_client_error(client_id, gm.round, e.what())});
        }
        break;
      }
      case wire::MsgType::RoundAck:
        break;  // our update landed; wait for the next round
      case wire::MsgType::Shutdown: {
        GlobalModelMsg final_sync = decode_shutdown(msg->payload);
        local_model = partial_merge(local_model, final_sync.layers, cfg.trainable_mask);
        return local_model;
      }
      default:
        break;  // unexpected message; ignore
    }
  }
}

}  // namespace ftl::federation

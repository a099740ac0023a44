#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftl/model.hpp"
#include "ftl/thermal.hpp"
#include "ftl/transport.hpp"
#include "ftl/types.hpp"
#include "ftl/wire.hpp"

namespace ftl::federation {

enum class Aggregation : std::uint8_t { FedAvg = 0, RelevanceWeighted = 1 };

// One client's contribution to a round: its shared (averaged) layers plus the
// weighting inputs. The personal head never appears here.
struct ModelUpdate {
  std::uint64_t client_id = 0;
  int round = 0;
  std::vector<wire::LayerEntry> layers;  // shared layers only, tagged by index
  std::uint64_t n_k = 0;                 // local training-set size
  double relevance = 1.0;                // R_k in (0, 1]
  double local_loss = 0.0;               // final local training loss
};

struct FedConfig {
  int rounds = 10;
  int local_epochs = 5;
  Aggregation aggregation = Aggregation::FedAvg;
  std::vector<bool> trainable_mask;  // which layers the FL phase averages
  int retry_budget = 3;              // re-sends after a missed reply
  std::chrono::milliseconds client_timeout{5000};
  bool eval_each_round = false;
  model::TrainConfig local_train;    // per-client optimizer settings; epochs
                                     // taken from local_epochs, seed mixed per round

  void validate(std::size_t layer_count) const;  // throws ConfigError
};

struct RoundEntry {
  int round = 0;
  std::vector<std::uint64_t> participating;
  std::vector<std::uint64_t> excluded;
  bool skipped = false;         // nobody delivered an update
  double aggregate_loss = 0.0;  // weight-averaged client local losses
  model::EvalMetrics eval;
  bool eval_done = false;
  double duration_ms = 0.0;     // wall clock; excluded from determinism checks
};

struct RoundLog {
  std::vector<RoundEntry> rounds;
};

// Weighted per-parameter mean of the updates. FedAvg weighs by n_k alone,
// RelevanceWeighted by n_k * R_k; either way the weights are normalized to
// sum to exactly 1 (the last weight absorbs the rounding remainder).
std::vector<wire::LayerEntry> aggregate(const std::vector<ModelUpdate>& updates, Aggregation mode);

// The aggregation weights themselves, in update order.
std::vector<double> aggregation_weights(const std::vector<ModelUpdate>& updates, Aggregation mode);

// Replaces exactly the masked layers of `global` with the aggregated payload;
// every other layer stays bit-identical.
model::MlpModel partial_merge(const model::MlpModel& global,
                              const std::vector<wire::LayerEntry>& aggregated,
                              const std::vector<bool>& mask);

// The masked layers of a model, tagged with their indices, ready for the wire.
std::vector<wire::LayerEntry> masked_layers(const model::MlpModel& m,
                                            const std::vector<bool>& mask);

// One client-side round: install the broadcast layers into the masked slots,
// freeze everything else (the personal head sits out the averaging), train
// local_epochs on the local data, and emit the masked layers as an update.
// The training seed mixes cfg.local_train.seed with the round index, so a
// re-run of the same round reproduces the same update.
ModelUpdate client_step(model::MlpModel& local_model, const thermal::Dataset& data,
                        const FedConfig& cfg, const std::vector<wire::LayerEntry>& global_layers,
                        int round, std::uint64_t client_id, double relevance_score);

// ---- message payloads (request/response bodies inside wire frames) ----

std::vector<std::uint8_t> encode_hello(std::uint64_t client_id);
std::uint64_t decode_hello(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_global_model(int round,
                                              const std::vector<wire::LayerEntry>& layers);
struct GlobalModelMsg {
  int round = 0;
  std::vector<wire::LayerEntry> layers;
};
GlobalModelMsg decode_global_model(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_update(const ModelUpdate& update);
ModelUpdate decode_update(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_round_ack(int round);
int decode_round_ack(std::span<const std::uint8_t> payload);

std::vector<std::uint8_t> encode_client_error(std::uint64_t client_id, int round,
                                              const std::string& message);
struct ClientErrorMsg {
  std::uint64_t client_id = 0;
  int round = 0;
  std::string message;
};
ClientErrorMsg decode_client_error(std::span<const std::uint8_t> payload);

// Shutdown carries the final shared layers so every client ends on the last
// aggregate even if it missed the final round.
std::vector<std::uint8_t> encode_shutdown(int final_round,
                                          const std::vector<wire::LayerEntry>& layers);
GlobalModelMsg decode_shutdown(std::span<const std::uint8_t> payload);

// ---- orchestration ----

struct ClientEndpoint {
  std::uint64_t client_id = 0;
  transport::ConnectionPtr conn;
};

// Accepts one connection and reads its Hello to learn the client id.
ClientEndpoint accept_client(transport::Listener& listener, std::chrono::milliseconds timeout);

struct ServerResult {
  model::MlpModel global;
  RoundLog log;
};

// Round-based server loop: broadcast the masked global layers, collect client
// updates concurrently (retrying up to retry_budget times per client, then
// excluding the client for this round only), aggregate, merge, optionally
// evaluate. A round nobody answers is skipped; a run nobody ever answers is
// an error ("federation failed").
ServerResult server_run(const FedConfig& cfg, const model::MlpModel& initial_global,
                        std::vector<ClientEndpoint>& clients,
                        const thermal::Dataset* eval_set = nullptr);

// Client-side protocol loop: Hello, then serve rounds (train on GlobalModel,
// resend the cached update on duplicates, install the final aggregate from
// Shutdown). Returns the final personal model: shared trunk from the last
// aggregate plus the locally kept head. Training failures are reported to the
// server as ClientError messages for that round.
model::MlpModel run_client(transport::Connection& conn, std::uint64_t client_id,
                           model::MlpModel local_model, const thermal::Dataset& data,
                           const FedConfig& cfg, double relevance_score,
                           std::chrono::milliseconds idle_timeout = std::chrono::minutes(10));

}  // namespace ftl::federation

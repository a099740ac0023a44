#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftl/federation.hpp"
#include "ftl/model.hpp"
#include "ftl/thermal.hpp"
#include "ftl/transfer.hpp"
#include "ftl/transport.hpp"
#include "ftl/types.hpp"

namespace ftl::bench {

enum class Topology : std::uint8_t { Centralized, Isolated, FlLocal, FlCloud };
enum class TlMethod : std::uint8_t { FineTune, Tca, Dda, None };

std::string to_string(Topology t);
std::string to_string(TlMethod m);
Topology topology_from_string(const std::string& s);
TlMethod tl_method_from_string(const std::string& s);

// Scales current and power by `factor` over a mid-series window (fractions of
// the run length) on every target client, regenerating the temperatures.
struct LoadShiftSpec {
  double factor = 1.25;
  double window_lo_frac = 0.4;
  double window_hi_frac = 0.6;
};

// How a client's rows split into train and holdout.
enum class SplitKind : std::uint8_t {
  Chronological,  // last holdout_fraction of the rows held out
  Interleaved,    // every k-th row held out, spread across the series
};

struct ScenarioSpec {
  std::string name;
  Topology topology = Topology::Isolated;
  std::vector<thermal::DomainProfile> clients;  // first entry = source domain
  TlMethod tl_method = TlMethod::FineTune;
  federation::FedConfig fed;                    // masks are derived at run time
  std::optional<transport::LinkModel> link;     // required for FlCloud
  std::vector<std::uint64_t> seeds;
  std::optional<LoadShiftSpec> load_shift;
  bool forgetting_refit = false;

  Index source_samples = 2000;                  // the data-rich source domain
  Index target_samples = 400;                   // each data-poor target client
  double holdout_fraction = 0.3;
  SplitKind split = SplitKind::Chronological;
  std::vector<Index> head_spec = {16};          // fine-tune head hidden widths
  model::TrainConfig base_train;                // source base-model training
  model::TrainConfig tl_train;                  // per-client TL training
  // Brief personal-head refit used by the forgetting probe. Kept deliberately
  // small: enough to realign the head with the federated trunk, not enough to
  // refit onto the retained split's sampling noise (which would measure
  // overfitting rather than recoverable accuracy).
  model::TrainConfig refit_train{1e-3, 5, 32};
  transfer::DdaConfig dda;                      // when tl_method == Dda
  std::string backend = "inproc";               // "inproc" | "tcp" (FL only)
  bool emit_timeseries = false;                 // per-client measured-vs-predicted file

  void validate(const std::string& path) const;  // errors carry field paths
};

// Seed streams mixed with the cell seed; public so tests can replay any stage
// of the pipeline in isolation.
namespace streams {
inline constexpr std::uint64_t kProfile = 100;    // + client index
inline constexpr std::uint64_t kReference = 300;
inline constexpr std::uint64_t kBaseTrain = 401;
inline constexpr std::uint64_t kTlTrain = 500;    // + client index
inline constexpr std::uint64_t kFedTrain = 700;   // + client index
inline constexpr std::uint64_t kLink = 800;       // + client id
inline constexpr std::uint64_t kRefit = 900;      // + client index
inline constexpr std::uint64_t kBaseInit = 400;
}  // namespace streams

struct ClientResult {
  std::uint64_t client_id = 0;
  std::string domain;
  double mse = 0.0;
  double r2 = 0.0;
  bool r2_defined = false;
  double relevance = 1.0;
  double input_mmd = 0.0;        // against the source reference sample
  double embedded_mmd = 0.0;     // after TCA/DDA embedding (else == input_mmd)
  bool forgetting_done = false;
  double forgetting_pct = 0.0;   // 100*(before-after)/before on the holdout
  double mse_before_refit = 0.0;
  double mse_after_refit = 0.0;
};

// One (scenario, seed) execution.
struct CellResult {
  std::string scenario;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;

  std::vector<ClientResult> clients;
  double global_mse = 0.0;        // one model over the pooled holdout
  double global_r2 = 0.0;
  bool global_r2_defined = false;
  double mean_client_mse = 0.0;   // scenario-level headline metric

  int rounds_completed = 0;       // rounds that aggregated at least one update
  int rounds_skipped = 0;
  int exclusion_count = 0;
  federation::RoundLog round_log;

  double train_wall_ms = 0.0;     // wall clock; reported under "timing"
};

struct BenchReport {
  std::string suite;
  std::vector<CellResult> cells;
};

// Series emitted for the load-shift figure: one row per sample.
struct TimeSeries {
  std::string scenario;
  std::uint64_t seed = 0;
  std::uint64_t client_id = 0;
  std::vector<double> time_s;
  std::vector<double> measured_k;
  std::vector<double> predicted_k;
};

// Pooled holdout prediction errors of one cell, feeding the histogram files.
struct ErrorSample {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<double> errors_k;
};

struct RunArtifacts {
  BenchReport report;
  std::vector<TimeSeries> timeseries;
  std::vector<ErrorSample> errors;
};

// ---- deterministic per-cell pipeline (shared with the CLI subcommands) ----

// One client's prepared data inside a (scenario, seed) cell: generated series,
// optional load shift, split, and normalization by the source train stats.
struct PreparedClient {
  thermal::DomainProfile profile;  // with the cell-derived seed filled in
  thermal::Dataset raw;            // unnormalized full series
  thermal::Dataset full_norm;      // normalized full series
  thermal::Dataset train;          // normalized train split
  thermal::Dataset holdout;        // normalized holdout split
  double input_mmd = 0.0;          // against the source reference sample
  double relevance = 1.0;          // exp(-input_mmd)
};

struct PreparedCell {
  std::vector<PreparedClient> clients;
  thermal::NormStats stats;  // fitted on the source train split
  Matrix reference;          // subsampled normalized source train inputs
};

PreparedCell prepare_cell(const ScenarioSpec& spec, std::uint64_t seed);

// Source-domain base model of the cell (ignores the Centralized pooling).
model::MlpModel train_base(const ScenarioSpec& spec, std::uint64_t seed,
                           const PreparedCell& cell);

// One client's transfer-learning artifact. TCA models consume embedded
// features; DDA models carry their encoder as the first `encoder_layers`
// layers of the fused net.
struct TlArtifact {
  model::MlpModel net;
  std::optional<transfer::TcaMap> tca;
  std::size_t encoder_layers = 0;
};

TlArtifact client_tl(const ScenarioSpec& spec, std::uint64_t seed, std::size_t client_index,
                     const model::MlpModel& base, const PreparedCell& cell);

// Runs every seed of one scenario. Failures of one seed are recorded in its
// cell and do not abort the remaining seeds.
RunArtifacts run_scenario(const ScenarioSpec& spec);

// Runs a whole suite, optionally filtered by scenario name, spreading
// (scenario, seed) cells over `parallel` worker threads.
RunArtifacts run_suite(const std::vector<ScenarioSpec>& suite, const std::string& only_scenario,
                       int parallel);

// Percent MSE improvement from re-fine-tuning the head on the retained
// initial data; evaluated on the held-out split only. The head is whatever
// set of layers is marked frozen on `fl_model` (their flags are flipped for
// the refit). `cfg.epochs == 0` is allowed here and means "no refit" (0%).
// Optional out-params expose the raw before/after holdout MSE.
double forgetting_experiment(const model::MlpModel& fl_model, const thermal::Dataset& refit_train,
                             const thermal::Dataset& holdout, const model::TrainConfig& cfg,
                             double* mse_before = nullptr, double* mse_after = nullptr);

// The shipped default suite: 1 source + 4 targets, fine-tune TL, scenarios
// fl-cloud-100 (latency 50-200 ms, drop 0.2) / fl-local-100 / fl-local-10 /
// centralized / isolated, 5 seeds each, plus a load-shift scenario on a
// fast-settling forced-air drive profile.
std::vector<ScenarioSpec> paper_mini_suite();

// Deterministic train/holdout split of a raw dataset.
struct Split {
  thermal::Dataset train;
  thermal::Dataset holdout;
};
Split split_dataset(const thermal::Dataset& data, double holdout_fraction, SplitKind kind);

// ---- report I/O (report.cpp) ----

// Canonical JSON: stable key order, wall-clock values confined to "timing"
// subtrees. Parsing and re-emitting reproduces the bytes exactly.
std::string report_to_json(const BenchReport& report);
BenchReport report_from_json(const std::string& json_text);

// One row per scenario x seed x client.
std::string report_to_csv(const BenchReport& report);

// Strips every "timing" subtree; what determinism comparisons look at.
std::string report_without_timing(const std::string& json_text);

// Writes report.json / report.csv / figures/ under out_dir, honoring the
// requested formats ("json", "csv").
void emit_report(const RunArtifacts& artifacts, const std::string& out_dir,
                 const std::vector<std::string>& formats);

// Histogram helper shared by the figure emitter: equal-width bins over
// [min, max]; bin counts always sum to the sample count.
struct Histogram {
  std::vector<double> edges;   // bins + 1 entries
  std::vector<long> counts;    // bins entries
};
Histogram make_histogram(const std::vector<double>& values, int bins);

// ---- config I/O (report.cpp) ----

std::vector<ScenarioSpec> suite_from_json(const std::string& json_text, std::string* suite_name);

}  // namespace ftl::bench

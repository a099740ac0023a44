#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ftl/bench.hpp"
#include "ftl/errors.hpp"
#include "json.hpp"

namespace ftl::bench {

namespace {

using nlohmann::json;

// Non-finite doubles have no JSON representation; map them to null and back.
json num(double v) { return std::isfinite(v) ? json(v) : json(); }

double get_num(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

std::string fmt_double(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

json client_to_json(const ClientResult& c) {
  json j;
  j["client_id"] = c.client_id;
  j["domain"] = c.domain;
  j["mse"] = num(c.mse);
  j["r2"] = num(c.r2);
  j["r2_defined"] = c.r2_defined;
  j["relevance"] = num(c.relevance);
  j["input_mmd"] = num(c.input_mmd);
  j["embedded_mmd"] = num(c.embedded_mmd);
  json f;
  f["done"] = c.forgetting_done;
  f["pct"] = num(c.forgetting_pct);
  f["mse_before"] = num(c.mse_before_refit);
  f["mse_after"] = num(c.mse_after_refit);
  j["forgetting"] = f;
  return j;
}

ClientResult client_from_json(const json& j) {
  ClientResult c;
  c.client_id = j.at("client_id").get<std::uint64_t>();
  c.domain = j.at("domain").get<std::string>();
  c.mse = get_num(j.at("mse"));
  c.r2 = get_num(j.at("r2"));
  c.r2_defined = j.at("r2_defined").get<bool>();
  c.relevance = get_num(j.at("relevance"));
  c.input_mmd = get_num(j.at("input_mmd"));
  c.embedded_mmd = get_num(j.at("embedded_mmd"));
  const json& f = j.at("forgetting");
  c.forgetting_done = f.at("done").get<bool>();
  c.forgetting_pct = get_num(f.at("pct"));
  c.mse_before_refit = get_num(f.at("mse_before"));
  c.mse_after_refit = get_num(f.at("mse_after"));
  return c;
}

json cell_to_json(const CellResult& c) {
  json j;
  j["scenario"] = c.scenario;
  j["seed"] = c.seed;
  j["ok"] = c.ok;
  j["error"] = c.error;
  json clients = json::array();
  for (const auto& cr : c.clients) clients.push_back(client_to_json(cr));
  j["clients"] = clients;
  json g;
  g["mse"] = num(c.global_mse);
  g["r2"] = num(c.global_r2);
  g["r2_defined"] = c.global_r2_defined;
  j["global"] = g;
  j["mean_client_mse"] = num(c.mean_client_mse);
  json r;
  r["completed"] = c.rounds_completed;
  r["skipped"] = c.rounds_skipped;
  r["exclusions"] = c.exclusion_count;
  j["rounds"] = r;
  json log = json::array();
  json round_ms = json::array();
  for (const auto& e : c.round_log.rounds) {
    json je;
    je["round"] = e.round;
    je["participating"] = e.participating;
    je["excluded"] = e.excluded;
    je["skipped"] = e.skipped;
    je["aggregate_loss"] = num(e.aggregate_loss);
    je["eval_done"] = e.eval_done;
    je["eval_mse"] = num(e.eval.mse);
    je["eval_r2"] = num(e.eval.r2);
    je["eval_r2_defined"] = e.eval.r2_defined;
    log.push_back(je);
    round_ms.push_back(num(e.duration_ms));
  }
  j["round_log"] = log;
  json timing;
  timing["train_wall_ms"] = num(c.train_wall_ms);
  timing["round_ms"] = round_ms;
  j["timing"] = timing;
  return j;
}

CellResult cell_from_json(const json& j) {
  CellResult c;
  c.scenario = j.at("scenario").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.ok = j.at("ok").get<bool>();
  c.error = j.at("error").get<std::string>();
  for (const auto& cj : j.at("clients")) c.clients.push_back(client_from_json(cj));
  const json& g = j.at("global");
  c.global_mse = get_num(g.at("mse"));
  c.global_r2 = get_num(g.at("r2"));
  c.global_r2_defined = g.at("r2_defined").get<bool>();
  c.mean_client_mse = get_num(j.at("mean_client_mse"));
  const json& r = j.at("rounds");
  c.rounds_completed = r.at("completed").get<int>();
  c.rounds_skipped = r.at("skipped").get<int>();
  c.exclusion_count = r.at("exclusions").get<int>();
  const json& timing = j.at("timing");
  c.train_wall_ms = get_num(timing.at("train_wall_ms"));
  const json& round_ms = timing.at("round_ms");
  std::size_t i = 0;
  for (const auto& ej : j.at("round_log")) {
    federation::RoundEntry e;
    e.round = ej.at("round").get<int>();
    e.participating = ej.at("participating").get<std::vector<std::uint64_t>>();
    e.excluded = ej.at("excluded").get<std::vector<std::uint64_t>>();
    e.skipped = ej.at("skipped").get<bool>();
    e.aggregate_loss = get_num(ej.at("aggregate_loss"));
    e.eval_done = ej.at("eval_done").get<bool>();
    e.eval.mse = get_num(ej.at("eval_mse"));
    e.eval.r2 = get_num(ej.at("eval_r2"));
    e.eval.r2_defined = ej.at("eval_r2_defined").get<bool>();
    if (i < round_ms.size()) e.duration_ms = get_num(round_ms.at(i));
    ++i;
    c.round_log.rounds.push_back(std::move(e));
  }
  return c;
}

void strip_timing(json& j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [key, value] : j.items()) {
      (void)key;
      strip_timing(value);
    }
  } else if (j.is_array()) {
    for (auto& value : j) strip_timing(value);
  }
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  out.flush();
  if (!out.good()) {
    throw std::runtime_error("report: failed to write " + path.string());
  }
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b + 1 < h.edges.size(); ++b) {
    out += fmt_double(h.edges[b]) + "," + fmt_double(h.edges[b + 1]) + "," +
           std::to_string(h.counts[b]) + "\n";
  }
  return out;
}

std::string timeseries_csv(const TimeSeries& ts) {
  std::string out = "time_s,measured_k,predicted_k\n";
  for (std::size_t i = 0; i < ts.time_s.size(); ++i) {
    out += fmt_double(ts.time_s[i]) + "," + fmt_double(ts.measured_k[i]) + "," +
           fmt_double(ts.predicted_k[i]) + "\n";
  }
  return out;
}

// ---- config parsing helpers ----

[[noreturn]] void bad_field(const std::string& path, const std::string& msg) {
  throw ConfigError(path + ": " + msg);
}

template <typename T>
T get_as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    bad_field(path, e.what());
  }
}

template <typename T>
T field_or(const json& j, const std::string& path, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return get_as<T>(j.at(key), path + "." + key);
}

double num_or(const json& j, const std::string& path, const char* key, double fallback) {
  return field_or<double>(j, path, key, fallback);
}

const json& require(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) bad_field(path, std::string("missing required field '") + key + "'");
  return j.at(key);
}

model::TrainConfig train_config_from_json(const json& j, const std::string& path,
                                          const model::TrainConfig& defaults) {
  if (!j.is_object()) bad_field(path, "expected an object");
  model::TrainConfig tc = defaults;
  tc.learning_rate = num_or(j, path, "learning_rate", tc.learning_rate);
  tc.epochs = field_or<int>(j, path, "epochs", tc.epochs);
  tc.batch_size = field_or<int>(j, path, "batch_size", tc.batch_size);
  tc.l2_weight = num_or(j, path, "l2_weight", tc.l2_weight);
  tc.seed = field_or<std::uint64_t>(j, path, "seed", tc.seed);
  if (j.contains("optimizer")) {
    const auto name = get_as<std::string>(j.at("optimizer"), path + ".optimizer");
    if (name == "adam") tc.optimizer = model::Optimizer::Adam;
    else if (name == "sgd") tc.optimizer = model::Optimizer::Sgd;
    else bad_field(path + ".optimizer", "must be 'adam' or 'sgd'");
  }
  return tc;
}

thermal::LoadPattern load_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) bad_field(path, "expected an object");
  const auto kind = field_or<std::string>(j, path, "kind", "steady");
  if (kind == "steady") return thermal::LoadPattern::steady();
  if (kind == "intermittent") {
    return thermal::LoadPattern::intermittent(num_or(j, path, "duty", 0.5),
                                              num_or(j, path, "period_s", 1800.0));
  }
  if (kind == "partial") {
    return thermal::LoadPattern::partial(num_or(j, path, "fraction", 0.5));
  }
  bad_field(path + ".kind", "must be 'steady', 'intermittent' or 'partial'");
}

thermal::DomainProfile profile_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) bad_field(path, "expected an object");
  thermal::DomainProfile p;
  p.name = field_or<std::string>(j, path, "name", p.name);
  p.r_th = num_or(j, path, "r_th", p.r_th);
  p.tau_s = num_or(j, path, "tau_s", p.tau_s);
  p.k1 = num_or(j, path, "k1", p.k1);
  p.k2 = num_or(j, path, "k2", p.k2);
  p.k3 = num_or(j, path, "k3", p.k3);
  p.ambient_lo_c = num_or(j, path, "ambient_lo_c", p.ambient_lo_c);
  p.ambient_hi_c = num_or(j, path, "ambient_hi_c", p.ambient_hi_c);
  p.noise_std_k = num_or(j, path, "noise_std_k", p.noise_std_k);
  p.seed = field_or<std::uint64_t>(j, path, "seed", p.seed);
  p.sample_interval_s = num_or(j, path, "sample_interval_s", p.sample_interval_s);
  p.current_max_a = num_or(j, path, "current_max_a", p.current_max_a);
  p.freq_lo_hz = num_or(j, path, "freq_lo_hz", p.freq_lo_hz);
  p.freq_hi_hz = num_or(j, path, "freq_hi_hz", p.freq_hi_hz);
  p.power_max_kw = num_or(j, path, "power_max_kw", p.power_max_kw);
  if (j.contains("load")) p.load = load_from_json(j.at("load"), path + ".load");
  return p;
}

federation::FedConfig fed_from_json(const json& j, const std::string& path,
                                    const federation::FedConfig& defaults) {
  if (!j.is_object()) bad_field(path, "expected an object");
  federation::FedConfig f = defaults;
  f.rounds = field_or<int>(j, path, "rounds", f.rounds);
  f.local_epochs = field_or<int>(j, path, "local_epochs", f.local_epochs);
  f.retry_budget = field_or<int>(j, path, "retry_budget", f.retry_budget);
  f.client_timeout = std::chrono::milliseconds(
      field_or<std::int64_t>(j, path, "client_timeout_ms", f.client_timeout.count()));
  f.eval_each_round = field_or<bool>(j, path, "eval_each_round", f.eval_each_round);
  if (j.contains("aggregation")) {
    const auto name = get_as<std::string>(j.at("aggregation"), path + ".aggregation");
    if (name == "fedavg") f.aggregation = federation::Aggregation::FedAvg;
    else if (name == "relevance-weighted") f.aggregation = federation::Aggregation::RelevanceWeighted;
    else bad_field(path + ".aggregation", "must be 'fedavg' or 'relevance-weighted'");
  }
  if (j.contains("local_train")) {
    f.local_train = train_config_from_json(j.at("local_train"), path + ".local_train", f.local_train);
  }
  return f;
}

transport::LinkModel link_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) bad_field(path, "expected an object");
  transport::LinkModel link;
  link.latency_lo =
      std::chrono::milliseconds(field_or<std::int64_t>(j, path, "latency_lo_ms", 0));
  link.latency_hi =
      std::chrono::milliseconds(field_or<std::int64_t>(j, path, "latency_hi_ms", 0));
  link.drop_prob = num_or(j, path, "drop_prob", 0.0);
  link.seed = field_or<std::uint64_t>(j, path, "seed", 0);
  return link;
}

transfer::DdaConfig dda_from_json(const json& j, const std::string& path,
                                  const transfer::DdaConfig& defaults) {
  if (!j.is_object()) bad_field(path, "expected an object");
  transfer::DdaConfig d = defaults;
  d.alpha = num_or(j, path, "alpha", d.alpha);
  d.beta = num_or(j, path, "beta", d.beta);
  d.gamma = num_or(j, path, "gamma", d.gamma);
  d.delta = num_or(j, path, "delta", d.delta);
  if (j.contains("encoder_sizes")) {
    d.encoder_sizes = get_as<std::vector<Index>>(j.at("encoder_sizes"), path + ".encoder_sizes");
  }
  if (j.contains("decoder_sizes")) {
    d.decoder_sizes = get_as<std::vector<Index>>(j.at("decoder_sizes"), path + ".decoder_sizes");
  }
  if (j.contains("pretrain")) {
    d.pretrain = train_config_from_json(j.at("pretrain"), path + ".pretrain", d.pretrain);
  }
  if (j.contains("train")) {
    d.train = train_config_from_json(j.at("train"), path + ".train", d.train);
  }
  return d;
}

ScenarioSpec scenario_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) bad_field(path, "expected an object");
  ScenarioSpec s;
  s.name = get_as<std::string>(require(j, path, "name"), path + ".name");
  try {
    s.topology = topology_from_string(
        get_as<std::string>(require(j, path, "topology"), path + ".topology"));
  } catch (const ConfigError& e) {
    bad_field(path + ".topology", e.what());
  }
  const json& clients = require(j, path, "clients");
  if (!clients.is_array()) bad_field(path + ".clients", "expected an array");
  for (std::size_t i = 0; i < clients.size(); ++i) {
    s.clients.push_back(
        profile_from_json(clients.at(i), path + ".clients[" + std::to_string(i) + "]"));
  }
  if (j.contains("tl_method")) {
    try {
      s.tl_method =
          tl_method_from_string(get_as<std::string>(j.at("tl_method"), path + ".tl_method"));
    } catch (const ConfigError& e) {
      bad_field(path + ".tl_method", e.what());
    }
  }
  if (j.contains("fed")) s.fed = fed_from_json(j.at("fed"), path + ".fed", s.fed);
  if (j.contains("link")) s.link = link_from_json(j.at("link"), path + ".link");
  s.seeds = field_or<std::vector<std::uint64_t>>(j, path, "seeds", {1});
  if (j.contains("load_shift")) {
    const json& ls = j.at("load_shift");
    if (!ls.is_object()) bad_field(path + ".load_shift", "expected an object");
    LoadShiftSpec spec;
    spec.factor = num_or(ls, path + ".load_shift", "factor", spec.factor);
    spec.window_lo_frac = num_or(ls, path + ".load_shift", "window_lo_frac", spec.window_lo_frac);
    spec.window_hi_frac = num_or(ls, path + ".load_shift", "window_hi_frac", spec.window_hi_frac);
    s.load_shift = spec;
  }
  s.forgetting_refit = field_or<bool>(j, path, "forgetting_refit", s.forgetting_refit);
  s.source_samples = field_or<Index>(j, path, "source_samples", s.source_samples);
  s.target_samples = field_or<Index>(j, path, "target_samples", s.target_samples);
  s.holdout_fraction = num_or(j, path, "holdout_fraction", s.holdout_fraction);
  if (j.contains("split")) {
    const auto split = get_as<std::string>(j.at("split"), path + ".split");
    if (split == "chronological") s.split = SplitKind::Chronological;
    else if (split == "interleaved") s.split = SplitKind::Interleaved;
    else bad_field(path + ".split", "must be 'chronological' or 'interleaved'");
  }
  if (j.contains("head_spec")) {
    s.head_spec = get_as<std::vector<Index>>(j.at("head_spec"), path + ".head_spec");
  }
  if (j.contains("base_train")) {
    s.base_train = train_config_from_json(j.at("base_train"), path + ".base_train", s.base_train);
  }
  if (j.contains("tl_train")) {
    s.tl_train = train_config_from_json(j.at("tl_train"), path + ".tl_train", s.tl_train);
  }
  if (j.contains("refit_train")) {
    s.refit_train =
        train_config_from_json(j.at("refit_train"), path + ".refit_train", s.refit_train);
  }
  if (j.contains("dda")) s.dda = dda_from_json(j.at("dda"), path + ".dda", s.dda);
  s.backend = field_or<std::string>(j, path, "backend", s.backend);
  s.emit_timeseries = field_or<bool>(j, path, "emit_timeseries", s.emit_timeseries);
  return s;
}

}  // namespace

std::string report_to_json(const BenchReport& report) {
  json j;
  j["suite"] = report.suite;
  json cells = json::array();
  for (const auto& c : report.cells) cells.push_back(cell_to_json(c));
  j["cells"] = cells;
  return j.dump(2) + "\n";
}

BenchReport report_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report: invalid JSON: ") + e.what());
  }
  try {
    BenchReport report;
    report.suite = j.at("suite").get<std::string>();
    for (const auto& cj : j.at("cells")) report.cells.push_back(cell_from_json(cj));
    return report;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report: unexpected structure: ") + e.what());
  }
}

std::string report_without_timing(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report: invalid JSON: ") + e.what());
  }
  strip_timing(j);
  return j.dump(2) + "\n";
}

std::string report_to_csv(const BenchReport& report) {
  std::string out =
      "scenario,seed,ok,error,client_id,domain,mse,r2,r2_defined,relevance,input_mmd,"
      "embedded_mmd,forgetting_done,forgetting_pct,mse_before_refit,mse_after_refit,"
      "global_mse,global_r2,mean_client_mse,rounds_completed,rounds_skipped,exclusions,"
      "train_wall_ms\n";
  for (const auto& c : report.cells) {
    const std::string cell_prefix = csv_escape(c.scenario) + "," + std::to_string(c.seed) + "," +
                                    (c.ok ? "true" : "false") + "," + csv_escape(c.error) + ",";
    const std::string cell_suffix =
        fmt_double(c.global_mse) + "," + fmt_double(c.global_r2) + "," +
        fmt_double(c.mean_client_mse) + "," + std::to_string(c.rounds_completed) + "," +
        std::to_string(c.rounds_skipped) + "," + std::to_string(c.exclusion_count) + "," +
        fmt_double(c.train_wall_ms) + "\n";
    if (c.clients.empty()) {
      out += cell_prefix + ",,,,,,,,,,,," + cell_suffix;
      continue;
    }
    for (const auto& cr : c.clients) {
      out += cell_prefix + std::to_string(cr.client_id) + "," + csv_escape(cr.domain) + "," +
             fmt_double(cr.mse) + "," + fmt_double(cr.r2) + "," +
             (cr.r2_defined ? "true" : "false") + "," + fmt_double(cr.relevance) + "," +
             fmt_double(cr.input_mmd) + "," + fmt_double(cr.embedded_mmd) + "," +
             (cr.forgetting_done ? "true" : "false") + "," + fmt_double(cr.forgetting_pct) + "," +
             fmt_double(cr.mse_before_refit) + "," + fmt_double(cr.mse_after_refit) + "," +
             cell_suffix;
    }
  }
  return out;
}

Histogram make_histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw ConfigError("histogram: bins must be >= 1");
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  double lo = 0.0;
  double hi = 1.0;
  if (!values.empty()) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
    if (!(hi > lo)) hi = lo + 1.0;
  }
  h.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b < bins; ++b) {
    h.edges[static_cast<std::size_t>(b)] =
        lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  }
  h.edges.back() = hi;  // exact, not rebuilt from the bin width
  for (const double v : values) {
    std::size_t idx = 0;
    if (!(v > lo)) {
      idx = 0;
    } else if (v >= hi) {
      idx = static_cast<std::size_t>(bins - 1);
    } else {
      idx = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      if (idx >= static_cast<std::size_t>(bins)) idx = static_cast<std::size_t>(bins - 1);
    }
    ++h.counts[idx];
  }
  return h;
}

void emit_report(const RunArtifacts& artifacts, const std::string& out_dir,
                 const std::vector<std::string>& formats) {
  bool want_json = false;
  bool want_csv = false;
  for (const auto& f : formats) {
    if (f == "json") want_json = true;
    else if (f == "csv") want_csv = true;
    else throw ConfigError("report: unknown format '" + f + "' (expected 'json' or 'csv')");
  }
  if (!want_json && !want_csv) throw ConfigError("report: no output format requested");

  namespace fs = std::filesystem;
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw std::runtime_error("report: cannot create " + root.string() + ": " + ec.message());

  if (want_json) write_file(root / "report.json", report_to_json(artifacts.report));
  if (want_csv) write_file(root / "report.csv", report_to_csv(artifacts.report));

  if (!artifacts.errors.empty() || !artifacts.timeseries.empty()) {
    const fs::path figures = root / "figures";
    fs::create_directories(figures, ec);
    if (ec) {
      throw std::runtime_error("report: cannot create " + figures.string() + ": " + ec.message());
    }
    for (const auto& es : artifacts.errors) {
      const Histogram h = make_histogram(es.errors_k, 40);
      write_file(figures / ("errors-" + es.scenario + "-seed" + std::to_string(es.seed) + ".csv"),
                 histogram_csv(h));
    }
    for (const auto& ts : artifacts.timeseries) {
      write_file(figures / ("timeseries-" + ts.scenario + "-seed" + std::to_string(ts.seed) +
                            "-client" + std::to_string(ts.client_id) + ".csv"),
                 timeseries_csv(ts));
    }
  }
}

std::vector<ScenarioSpec> suite_from_json(const std::string& json_text, std::string* suite_name) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (suite_name != nullptr) {
    *suite_name = field_or<std::string>(j, "config", "suite", "custom");
  }
  const json& scenarios = require(j, "config", "scenarios");
  if (!scenarios.is_array() || scenarios.empty()) {
    bad_field("config.scenarios", "expected a non-empty array");
  }
  std::vector<ScenarioSpec> suite;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    suite.push_back(
        scenario_from_json(scenarios.at(i), "scenarios[" + std::to_string(i) + "]"));
  }
  return suite;
}

}  // namespace ftl::bench

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ftl/bench.hpp"
#include "ftl/errors.hpp"
#include "ftl/federation.hpp"
#include "ftl/rng.hpp"
#include "ftl/transport.hpp"

namespace {

using namespace ftl;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ConfigError("config: cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Suite {
  std::string name;
  std::vector<bench::ScenarioSpec> scenarios;
};

Suite load_suite(const std::string& config_path) {
  Suite suite;
  if (config_path.empty()) {
    suite.name = "paper-mini";
    suite.scenarios = bench::paper_mini_suite();
  } else {
    suite.scenarios = bench::suite_from_json(read_file(config_path), &suite.name);
  }
  return suite;
}

const bench::ScenarioSpec& pick_scenario(const Suite& suite, const std::string& name) {
  if (name.empty()) return suite.scenarios.front();
  for (const auto& s : suite.scenarios) {
    if (s.name == name) return s;
  }
  throw ConfigError("config: no scenario named '" + name + "'");
}

std::vector<std::string> split_formats(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(csv);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create " + p.string() + ": " + ec.message());
  return p;
}

std::vector<bool> trunk_mask(std::size_t layer_count, std::size_t shared) {
  std::vector<bool> mask(layer_count, false);
  for (std::size_t i = 0; i < shared && i < layer_count; ++i) mask[i] = true;
  return mask;
}

std::chrono::milliseconds client_idle(const federation::FedConfig& cfg) {
  return std::chrono::milliseconds(std::max<std::int64_t>(
      10000, cfg.client_timeout.count() * (cfg.retry_budget + 1) * 4));
}

int cmd_generate_data(const Suite& suite, const std::string& scenario, std::uint64_t seed,
                      const std::string& out_dir) {
  const bench::ScenarioSpec& spec = pick_scenario(suite, scenario);
  spec.validate("scenario");
  const auto dir = ensure_dir(out_dir);
  const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
  for (std::size_t ci = 0; ci < cell.clients.size(); ++ci) {
    const auto path = dir / (spec.name + "-seed" + std::to_string(seed) + "-client" +
                             std::to_string(ci) + ".csv");
    thermal::save_csv(cell.clients[ci].raw, path.string());
    std::cout << "wrote " << path.string() << " (" << cell.clients[ci].raw.n() << " rows, domain "
              << cell.clients[ci].profile.name << ")\n";
  }
  return 0;
}

int cmd_train_base(const Suite& suite, const std::string& scenario, std::uint64_t seed,
                   const std::string& out_dir) {
  const bench::ScenarioSpec& spec = pick_scenario(suite, scenario);
  spec.validate("scenario");
  const auto dir = ensure_dir(out_dir);
  const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
  const model::MlpModel base = bench::train_base(spec, seed, cell);
  const model::EvalMetrics m = model::evaluate(base, cell.clients[0].holdout);
  const auto path = dir / (spec.name + "-seed" + std::to_string(seed) + "-base.ftlm");
  model::save_model(base, path.string());
  std::cout << "wrote " << path.string() << "\n"
            << "source holdout: mse=" << m.mse << " r2=" << m.r2 << "\n";
  return 0;
}

int cmd_transfer(const Suite& suite, const std::string& scenario, std::uint64_t seed,
                 const std::string& out_dir) {
  const bench::ScenarioSpec& spec = pick_scenario(suite, scenario);
  spec.validate("scenario");
  const auto dir = ensure_dir(out_dir);
  const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
  const model::MlpModel base = bench::train_base(spec, seed, cell);
  for (std::size_t ci = 0; ci < cell.clients.size(); ++ci) {
    const bench::TlArtifact art = bench::client_tl(spec, seed, ci, base, cell);
    thermal::Dataset view = cell.clients[ci].holdout;
    if (art.tca) view.features = transfer::tca_transform(*art.tca, view.features);
    const model::EvalMetrics m = model::evaluate(art.net, view);
    const auto path = dir / (spec.name + "-seed" + std::to_string(seed) + "-client" +
                             std::to_string(ci) + ".ftlm");
    model::save_model(art.net, path.string());
    std::cout << "client " << ci << " (" << cell.clients[ci].profile.name
              << "): holdout mse=" << m.mse << " r2=" << m.r2 << " -> " << path.string() << "\n";
  }
  return 0;
}

int cmd_fed_serve(const Suite& suite, const std::string& scenario, std::uint64_t seed,
                  const std::string& out_dir, const std::string& host, std::uint16_t port) {
  const bench::ScenarioSpec& spec = pick_scenario(suite, scenario);
  spec.validate("scenario");
  if (spec.topology != bench::Topology::FlLocal && spec.topology != bench::Topology::FlCloud) {
    throw ConfigError("fed-serve: scenario '" + spec.name + "' is not a federated topology");
  }
  const auto dir = ensure_dir(out_dir);
  const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
  const model::MlpModel base = bench::train_base(spec, seed, cell);
  const std::size_t k = cell.clients.size();

  std::uint16_t bound = 0;
  transport::ListenerPtr listener = transport::tcp_listen(host, port, &bound);
  std::cout << "listening on " << host << ":" << bound << ", waiting for " << k << " clients\n"
            << std::flush;

  std::vector<federation::ClientEndpoint> endpoints;
  endpoints.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    endpoints.push_back(federation::accept_client(*listener, std::chrono::minutes(5)));
    std::cout << "client " << endpoints.back().client_id << " connected\n" << std::flush;
  }
  std::sort(endpoints.begin(), endpoints.end(),
            [](const federation::ClientEndpoint& a, const federation::ClientEndpoint& b) {
              return a.client_id < b.client_id;
            });
  if (spec.topology == bench::Topology::FlCloud) {
    for (auto& ep : endpoints) {
      transport::LinkModel link = *spec.link;
      link.seed = mix_seed(seed, bench::streams::kLink + ep.client_id);
      ep.conn = transport::faulty_link(std::move(ep.conn), link);
    }
  }

  federation::FedConfig cfg = spec.fed;
  cfg.trainable_mask = trunk_mask(base.layers.size(), base.layers.size() - 1);
  const federation::ServerResult result = federation::server_run(cfg, base, endpoints);
  for (auto& ep : endpoints) ep.conn->close();
  listener->close();

  const auto model_path = dir / (spec.name + "-seed" + std::to_string(seed) + "-global.ftlm");
  model::save_model(result.global, model_path.string());
  int completed = 0;
  int skipped = 0;
  for (const auto& r : result.log.rounds) {
    if (r.skipped) ++skipped;
    else ++completed;
  }
  std::cout << "federation finished: " << completed << " rounds aggregated, " << skipped
            << " skipped; wrote " << model_path.string() << "\n";
  return 0;
}

int cmd_fed_client(const Suite& suite, const std::string& scenario, std::uint64_t seed,
                   std::size_t client_index, const std::string& host, std::uint16_t port) {
  const bench::ScenarioSpec& spec = pick_scenario(suite, scenario);
  spec.validate("scenario");
  if (client_index >= spec.clients.size()) {
    throw ConfigError("fed-client: client index out of range (have " +
                      std::to_string(spec.clients.size()) + " clients)");
  }
  const bench::PreparedCell cell = bench::prepare_cell(spec, seed);
  const model::MlpModel base = bench::train_base(spec, seed, cell);
  const bench::TlArtifact art = bench::client_tl(spec, seed, client_index, base, cell);

  federation::FedConfig cfg = spec.fed;
  cfg.trainable_mask = trunk_mask(art.net.layers.size(), base.layers.size() - 1);
  cfg.local_train.seed = mix_seed(seed, bench::streams::kFedTrain + client_index);

  transport::ConnectionPtr conn = transport::tcp_connect(host, port, std::chrono::seconds(30));
  const model::MlpModel final_model =
      federation::run_client(*conn, client_index, art.net, cell.clients[client_index].train, cfg,
                             cell.clients[client_index].relevance, client_idle(cfg));
  conn->close();

  const model::EvalMetrics m = model::evaluate(final_model, cell.clients[client_index].holdout);
  std::cout << "client " << client_index << " (" << cell.clients[client_index].profile.name
            << ") final holdout: mse=" << m.mse << " r2=" << m.r2 << "\n";
  return 0;
}

int cmd_bench(const Suite& suite, const std::string& scenario, bool seed_given,
              std::uint64_t seed, int parallel, const std::string& format,
              const std::string& out_dir) {
  std::vector<bench::ScenarioSpec> scenarios = suite.scenarios;
  if (seed_given) {
    for (auto& s : scenarios) s.seeds = {seed};
  }
  bench::RunArtifacts artifacts = bench::run_suite(scenarios, scenario, parallel);
  artifacts.report.suite = suite.name;
  bench::emit_report(artifacts, out_dir, split_formats(format));

  int failures = 0;
  for (const auto& cell : artifacts.report.cells) {
    if (cell.ok) {
      std::cout << cell.scenario << " seed " << cell.seed
                << ": mean client mse=" << cell.mean_client_mse << " global mse=" << cell.global_mse
                << " (" << cell.train_wall_ms << " ms)\n";
    } else {
      ++failures;
      std::cout << cell.scenario << " seed " << cell.seed << ": FAILED: " << cell.error << "\n";
    }
  }
  std::cout << "wrote " << out_dir << "\n";
  if (failures > 0) {
    std::cerr << failures << " cell(s) failed\n";
    return 2;
  }
  return 0;
}

int cmd_report(const std::string& input, const std::string& format, const std::string& out_dir) {
  if (input.empty()) throw ConfigError("report: --config with the input report.json is required");
  bench::RunArtifacts artifacts;
  artifacts.report = bench::report_from_json(read_file(input));
  bench::emit_report(artifacts, out_dir, split_formats(format));
  std::cout << "wrote " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated transfer-learning benchmark for power-converter thermal models"};
  app.require_subcommand(1);

  std::string config_path;
  std::string scenario;
  std::string out_dir = "out";
  std::string format = "json,csv";
  std::string host = "127.0.0.1";
  std::uint64_t seed = 1;
  std::size_t client_index = 0;
  int parallel = 1;
  std::uint16_t port = 0;

  auto* gen = app.add_subcommand("generate-data", "Write each client's raw dataset as CSV");
  gen->add_option("--config", config_path, "Suite config JSON (default: built-in paper-mini)");
  gen->add_option("--scenario", scenario, "Scenario name (default: first in the suite)");
  gen->add_option("--seed", seed, "Cell seed");
  gen->add_option("--out", out_dir, "Output directory");

  auto* base = app.add_subcommand("train-base", "Train the source-domain base model");
  base->add_option("--config", config_path, "Suite config JSON");
  base->add_option("--scenario", scenario, "Scenario name");
  base->add_option("--seed", seed, "Cell seed");
  base->add_option("--out", out_dir, "Output directory");

  auto* tl = app.add_subcommand("transfer", "Run per-client transfer learning from the base");
  tl->add_option("--config", config_path, "Suite config JSON");
  tl->add_option("--scenario", scenario, "Scenario name");
  tl->add_option("--seed", seed, "Cell seed");
  tl->add_option("--out", out_dir, "Output directory");

  auto* serve = app.add_subcommand("fed-serve", "Run the federation server over TCP");
  serve->add_option("--config", config_path, "Suite config JSON");
  serve->add_option("--scenario", scenario, "Scenario name");
  serve->add_option("--seed", seed, "Cell seed");
  serve->add_option("--out", out_dir, "Output directory");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Bind port (0 = ephemeral, printed on start)");

  auto* cli = app.add_subcommand("fed-client", "Run one federation client over TCP");
  cli->add_option("--config", config_path, "Suite config JSON");
  cli->add_option("--scenario", scenario, "Scenario name");
  cli->add_option("--seed", seed, "Cell seed");
  cli->add_option("--client", client_index, "Client index within the scenario")->required();
  cli->add_option("--host", host, "Server address");
  cli->add_option("--port", port, "Server port")->required();

  auto* bench_cmd = app.add_subcommand("bench", "Run scenarios and emit the report");
  bench_cmd->add_option("--config", config_path, "Suite config JSON");
  bench_cmd->add_option("--scenario", scenario, "Only run this scenario");
  auto* seed_opt = bench_cmd->add_option("--seed", seed, "Run a single seed instead of the spec's list");
  bench_cmd->add_option("--parallel", parallel, "Concurrent (scenario, seed) cells");
  bench_cmd->add_option("--format", format, "Comma-separated output formats: json,csv");
  bench_cmd->add_option("--out", out_dir, "Output directory");

  auto* rep = app.add_subcommand("report", "Re-emit an existing report.json");
  rep->add_option("--config", config_path, "Input report.json path")->required();
  rep->add_option("--format", format, "Comma-separated output formats: json,csv");
  rep->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand(gen)) {
      return cmd_generate_data(load_suite(config_path), scenario, seed, out_dir);
    }
    if (app.got_subcommand(base)) {
      return cmd_train_base(load_suite(config_path), scenario, seed, out_dir);
    }
    if (app.got_subcommand(tl)) {
      return cmd_transfer(load_suite(config_path), scenario, seed, out_dir);
    }
    if (app.got_subcommand(serve)) {
      return cmd_fed_serve(load_suite(config_path), scenario, seed, out_dir, host, port);
    }
    if (app.got_subcommand(cli)) {
      return cmd_fed_client(load_suite(config_path), scenario, seed, client_index, host, port);
    }
    if (app.got_subcommand(bench_cmd)) {
      return cmd_bench(load_suite(config_path), scenario, seed_opt->count() > 0, seed, parallel,
                       format, out_dir);
    }
    if (app.got_subcommand(rep)) {
      return cmd_report(config_path, format, out_dir);
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

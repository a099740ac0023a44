#include "ftl/thermal.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "ftl/errors.hpp"
#include "ftl/rng.hpp"

namespace ftl::thermal {

namespace {

constexpr std::uint64_t kInputStream = 0;
constexpr std::uint64_t kNoiseStream = 1;

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

double pattern_level(const LoadPattern& load, double t_s) {
  switch (load.kind) {
    case LoadPattern::Kind::Steady:
      return 0.7;
    case LoadPattern::Kind::Intermittent: {
      double phase = std::fmod(t_s, load.period_s) / load.period_s;
      return phase < load.duty ? 0.9 : 0.08;
    }
    case LoadPattern::Kind::PartialLoad:
      return load.fraction;
  }
  return 0.0;
}

}  // namespace

const char* feature_name(Index column) {
  switch (column) {
    case kCurrent: return "current_a";
    case kAmbient: return "ambient_c";
    case kFrequency: return "frequency_hz";
    case kPower: return "power_kw";
    default: return "unknown";
  }
}

void DomainProfile::validate() const {
  if (!(r_th > 0)) throw ConfigError(name + ": r_th must be > 0");
  if (!(tau_s > 0)) throw ConfigError(name + ": tau must be > 0");
  if (!(noise_std_k >= 0)) throw ConfigError(name + ": noise_std must be >= 0");
  if (!(sample_interval_s > 0)) throw ConfigError(name + ": sample_interval must be > 0");
  if (load.kind == LoadPattern::Kind::Intermittent) {
    if (!(load.duty > 0 && load.duty <= 1)) throw ConfigError(name + ": duty must be in (0,1]");
    if (!(load.period_s > 0)) throw ConfigError(name + ": period must be > 0");
  }
  if (load.kind == LoadPattern::Kind::PartialLoad && !(load.fraction > 0 && load.fraction <= 1)) {
    throw ConfigError(name + ": load fraction must be in (0,1]");
  }
  if (!(ambient_lo_c <= ambient_hi_c)) throw ConfigError(name + ": ambient range inverted");
  if (!(current_max_a > 0) || !(power_max_kw > 0)) throw ConfigError(name + ": ratings must be > 0");
  if (!(freq_lo_hz > 0) || !(freq_lo_hz <= freq_hi_hz)) throw ConfigError(name + ": frequency range invalid");
}

Vector simulate_targets(const Matrix& features, const DomainProfile& profile, double dt_s) {
  const Index n = features.rows();
  Vector t_rel(n);
  double t = 0.0;
  const double a = dt_s / profile.tau_s;
  for (Index i = 0; i < n; ++i) {
    t_rel(i) = t;
    double current = features(i, kCurrent);
    double freq = features(i, kFrequency);
    double power_w = features(i, kPower) * 1000.0;
    double p_loss = profile.k1 * current * current +
                    profile.k2 * current * freq / kFrequencyRef + profile.k3 * power_w;
    t += a * (profile.r_th * p_loss - t);
  }
  return t_rel;
}

Dataset generate(const DomainProfile& profile, Index n_samples) {
  profile.validate();
  if (n_samples < 1) throw ConfigError(profile.name + ": n_samples must be >= 1");

  Rng input(mix_seed(profile.seed, kInputStream));
  Rng noise(mix_seed(profile.seed, kNoiseStream));

  const double dt = profile.sample_interval_s;
  Matrix features(n_samples, kFeatureCount);

  double walk = 0.0;
  double ambient = input.uniform(profile.ambient_lo_c, profile.ambient_hi_c);
  const double amb_step = 0.02 * (profile.ambient_hi_c - profile.ambient_lo_c);

  for (Index i = 0; i < n_samples; ++i) {
    walk = clamp(walk + 0.05 * input.normal(), -0.25, 0.25);
    ambient = clamp(ambient + amb_step * input.normal(), profile.ambient_lo_c, profile.ambient_hi_c);
    double level = clamp(pattern_level(profile.load, static_cast<double>(i) * dt) + walk, 0.02, 1.0);
    double freq = clamp(profile.freq_lo_hz + level * (profile.freq_hi_hz - profile.freq_lo_hz) +
                            0.2 * input.normal(),
                        profile.freq_lo_hz, profile.freq_hi_hz);
    double current = std::max(0.0, level * profile.current_max_a * (1.0 + 0.02 * input.normal()));
    double power = std::max(0.0, level * profile.power_max_kw * (freq / profile.freq_hi_hz) *
                                     (1.0 + 0.02 * input.normal()));
    features(i, kCurrent) = current;
    features(i, kAmbient) = ambient;
    features(i, kFrequency) = freq;
    features(i, kPower) = power;
  }

  Dataset out;
  out.features = std::move(features);
  out.targets = simulate_targets(out.features, profile, dt);
  for (Index i = 0; i < n_samples; ++i) {
    out.targets(i) += profile.noise_std_k * noise.normal();
  }
  out.sample_interval = dt;
  return out;
}

Dataset load_shift(const Dataset& data, const DomainProfile& profile, double factor,
                   Index window_lo, Index window_hi) {
  if (!(factor > 0)) throw ConfigError("load_shift: factor must be > 0");
  if (window_lo < 0 || window_hi > data.n() || window_lo >= window_hi) {
    throw ConfigError("load_shift: window [" + std::to_string(window_lo) + ", " +
                      std::to_string(window_hi) + ") out of range for " + std::to_string(data.n()) +
                      " samples");
  }
  Dataset out = data;
  out.features.block(window_lo, kCurrent, window_hi - window_lo, 1) *= factor;
  out.features.block(window_lo, kPower, window_hi - window_lo, 1) *= factor;
  out.targets = simulate_targets(out.features, profile, data.sample_interval);
  Rng noise(mix_seed(profile.seed, kNoiseStream));
  for (Index i = 0; i < out.n(); ++i) {
    out.targets(i) += profile.noise_std_k * noise.normal();
  }
  return out;
}

NormStats normalize_fit(const Dataset& data) {
  const Index n = data.n();
  if (n < 2) throw ConfigError("normalize_fit: need at least 2 samples");
  NormStats stats;
  for (Index c = 0; c < kFeatureCount; ++c) {
    double mean = data.features.col(c).mean();
    double var = (data.features.col(c).array() - mean).square().sum() / static_cast<double>(n - 1);
    if (!(var > 0)) {
      throw ConfigError(std::string("normalize_fit: zero variance in column ") + feature_name(c));
    }
    stats.feature_mean(c) = mean;
    stats.feature_std(c) = std::sqrt(var);
  }
  stats.target_mean = data.targets.mean();
  double tvar = (data.targets.array() - stats.target_mean).square().sum() / static_cast<double>(n - 1);
  if (!(tvar > 0)) throw ConfigError("normalize_fit: zero variance in column temp_rel_k");
  stats.target_std = std::sqrt(tvar);
  return stats;
}

Dataset normalize_apply(const Dataset& data, const NormStats& stats) {
  for (Index c = 0; c < kFeatureCount; ++c) {
    if (!(stats.feature_std(c) > 0)) {
      throw ConfigError(std::string("normalize_apply: non-positive std for ") + feature_name(c));
    }
  }
  if (!(stats.target_std > 0)) throw ConfigError("normalize_apply: non-positive target std");
  Dataset out = data;
  for (Index c = 0; c < kFeatureCount; ++c) {
    out.features.col(c) = ((data.features.col(c).array() - stats.feature_mean(c)) / stats.feature_std(c)).matrix();
  }
  out.targets = ((data.targets.array() - stats.target_mean) / stats.target_std).matrix();
  out.norm = stats;
  return out;
}

Dataset denormalize(const Dataset& data) {
  if (!data.norm) return data;
  const NormStats& stats = *data.norm;
  Dataset out = data;
  for (Index c = 0; c < kFeatureCount; ++c) {
    out.features.col(c) = (data.features.col(c).array() * stats.feature_std(c) + stats.feature_mean(c)).matrix();
  }
  out.targets = (data.targets.array() * stats.target_std + stats.target_mean).matrix();
  out.norm.reset();
  return out;
}

void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_csv: cannot open " + path);
  out << "timestamp,current_a,ambient_c,frequency_hz,power_kw,temp_rel_k\n";
  char buf[512];
  for (Index i = 0; i < data.n(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<double>(i) * data.sample_interval, data.features(i, kCurrent),
                  data.features(i, kAmbient), data.features(i, kFrequency), data.features(i, kPower),
                  data.targets(i));
    out << buf;
  }
  if (!out) throw ConfigError("save_csv: write failed for " + path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& cell, int line_no, const std::string& column) {
  std::string trimmed = cell;
  trimmed.erase(0, trimmed.find_first_not_of(" \t\r"));
  trimmed.erase(trimmed.find_last_not_of(" \t\r") + 1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(trimmed.data(), trimmed.data() + trimmed.size(), value);
  if (ec != std::errc{} || ptr != trimmed.data() + trimmed.size()) {
    throw ConfigError("csv line " + std::to_string(line_no) + ": non-numeric value '" + cell +
                      "' in column " + column);
  }
  if (!std::isfinite(value)) {
    throw ConfigError("csv line " + std::to_string(line_no) + ": non-finite value in column " + column);
  }
  return value;
}

}  // namespace

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ConfigError("load_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> required = {"timestamp", "current_a",  "ambient_c",
                                             "frequency_hz", "power_kw", "temp_rel_k"};
  std::vector<std::string> header = split_csv_line(line);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < header.size(); ++i) position[header[i]] = i;
  for (const auto& name : required) {
    if (!position.count(name)) throw ConfigError("load_csv: missing column '" + name + "' in " + path);
  }

  std::vector<std::array<double, 6>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ConfigError("csv line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    std::array<double, 6> row{};
    for (std::size_t k = 0; k < required.size(); ++k) {
      row[k] = parse_cell(cells[position[required[k]]], line_no, required[k]);
    }
    rows.push_back(row);
  }
  if (rows.empty()) throw ConfigError("load_csv: no data rows in " + path);

  Dataset out;
  out.features.resize(static_cast<Index>(rows.size()), kFeatureCount);
  out.targets.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Index r = static_cast<Index>(i);
    out.features(r, kCurrent) = rows[i][1];
    out.features(r, kAmbient) = rows[i][2];
    out.features(r, kFrequency) = rows[i][3];
    out.features(r, kPower) = rows[i][4];
    out.targets(r) = rows[i][5];
  }
  out.sample_interval = rows.size() >= 2 ? rows[1][0] - rows[0][0] : 60.0;
  return out;
}

}  // namespace ftl::thermal

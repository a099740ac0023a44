#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ftl/types.hpp"

namespace ftl::thermal {

// Feature column order is fixed across the whole pipeline.
inline constexpr Index kCurrent = 0;
inline constexpr Index kAmbient = 1;
inline constexpr Index kFrequency = 2;
inline constexpr Index kPower = 3;
inline constexpr Index kFeatureCount = 4;
inline constexpr double kFrequencyRef = 50.0;  // Hz, switching-loss reference

const char* feature_name(Index column);

// Per-column z-score statistics for the four features plus the target.
struct NormStats {
  Vector feature_mean{kFeatureCount};
  Vector feature_std{kFeatureCount};
  double target_mean = 0.0;
  double target_std = 1.0;
};

// Feature matrix (current A, ambient degC, frequency Hz, power kW) with
// relative-temperature targets (K, module minus ambient).
struct Dataset {
  Matrix features;  // N x 4
  Vector targets;   // N
  double sample_interval = 60.0;  // seconds
  std::optional<NormStats> norm;  // present once normalize_apply ran

  Index n() const { return features.rows(); }
};

struct LoadPattern {
  enum class Kind { Steady, Intermittent, PartialLoad };
  Kind kind = Kind::Steady;
  double duty = 0.5;       // Intermittent: on-fraction of the period, (0,1]
  double period_s = 1800;  // Intermittent: cycle length
  double fraction = 0.5;   // PartialLoad: sustained load level

  static LoadPattern steady() { return {Kind::Steady, 0, 0, 0}; }
  static LoadPattern intermittent(double duty, double period_s) {
    return {Kind::Intermittent, duty, period_s, 0};
  }
  static LoadPattern partial(double fraction) {
    return {Kind::PartialLoad, 0, 0, fraction};
  }
};

// Single-RC lumped thermal model of one converter deployment plus the load
// profile that drives it.
struct DomainProfile {
  std::string name = "domain";
  double r_th = 0.02;   // K/W
  double tau_s = 900;   // thermal time constant
  double k1 = 5e-3;     // conduction loss, W per A^2
  double k2 = 0.5;      // switching loss, W per A at reference frequency
  double k3 = 4e-3;     // fraction of shaft power dissipated
  LoadPattern load;
  double ambient_lo_c = 15;
  double ambient_hi_c = 35;
  double noise_std_k = 0.3;
  std::uint64_t seed = 1;
  double sample_interval_s = 60;
  double current_max_a = 400;
  double freq_lo_hz = 30;
  double freq_hi_hz = 60;
  double power_max_kw = 250;

  void validate() const;  // throws ConfigError
};

// Synthesizes a seeded operating history and runs it through the thermal
// model. Two calls with the same profile are bit-identical.
Dataset generate(const DomainProfile& profile, Index n_samples);

// Relative-temperature trajectory implied by a feature history:
//   P_loss = k1*I^2 + k2*I*f/f_ref + k3*P*1000
//   T[t+1] = T[t] + dt/tau * (r_th * P_loss[t] - T[t]),  T[0] = 0
Vector simulate_targets(const Matrix& features, const DomainProfile& profile, double dt_s);

// Scales current and power by `factor` on [window_lo, window_hi) and
// regenerates the targets through the thermal model, re-applying the
// profile-seeded noise stream so factor == 1 reproduces the input exactly.
Dataset load_shift(const Dataset& data, const DomainProfile& profile, double factor,
                   Index window_lo, Index window_hi);

NormStats normalize_fit(const Dataset& data);
Dataset normalize_apply(const Dataset& data, const NormStats& stats);
Dataset denormalize(const Dataset& data);

void save_csv(const Dataset& data, const std::string& path);
Dataset load_csv(const std::string& path);

}  // namespace ftl::thermal

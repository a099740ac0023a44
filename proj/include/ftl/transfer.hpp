#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ftl/model.hpp"
#include "ftl/thermal.hpp"
#include "ftl/types.hpp"

namespace ftl::transfer {

struct MmdConfig {
  // Gaussian kernel bandwidth; empty selects the median heuristic.
  std::optional<double> sigma;

  static MmdConfig median() { return {}; }
  static MmdConfig fixed(double sigma) { return {sigma}; }
};

// Squared maximum mean discrepancy, biased V-statistic with Gaussian kernel
// k(x,y) = exp(-||x-y||^2 / (2 sigma^2)). Result clamped to >= 0.
double mmd(const Matrix& xs, const Matrix& xt, const MmdConfig& cfg = {});

// Median of pairwise Euclidean distances over the pooled sample, clamped to
// >= 1e-6; pools above 1000 points are subsampled deterministically.
double median_bandwidth(const Matrix& xs, const Matrix& xt);

// Relevance score R = exp(-MMD(client, reference)) in (0, 1].
double relevance(const Matrix& client_data, const Matrix& reference, const MmdConfig& cfg = {});

// Fine-tuning: freeze the base, attach a fresh head, train it on the target.
model::MlpModel fine_tune(const model::MlpModel& base, const thermal::Dataset& target,
                          const std::vector<Index>& head_spec, const model::TrainConfig& cfg);

// Learned kernel projection onto transfer components.
struct TcaMap {
  Matrix training_points;  // pooled fit inputs, n x d
  Matrix w;                // n x m projection
  double sigma = 1.0;
  double mu = 1.0;
  Index m = 0;
};

inline constexpr Index kTcaDefaultComponents = 8;
inline constexpr double kTcaDefaultMu = 1.0;
inline constexpr Index kTcaMaxPerDomain = 500;

// Fits the transfer components from pooled source/target inputs: with kernel
// K, domain-contrast L and centering H, the columns of W solve
// (K H K) w = lambda (K L K + mu I) w. Domains larger than max_per_domain are
// subsampled with the given seed.
TcaMap tca_fit(const Matrix& xs, const Matrix& xt, Index m, double mu, const MmdConfig& cfg = {},
               Index max_per_domain = kTcaMaxPerDomain, std::uint64_t subsample_seed = 0);

// Out-of-sample embedding: kernel row against the stored points times W.
Matrix tca_transform(const TcaMap& map, const Matrix& x);

struct DdaConfig {
  double alpha = 1.0;    // task MSE on the target
  double beta = 1.0;     // MMD between encoded domains
  double gamma = 0.5;    // frozen-decoder reconstruction MSE
  double delta = 1e-4;   // L2 on trainable weights
  std::vector<Index> encoder_sizes = {16, 8};
  std::vector<Index> decoder_sizes = {16};
  model::TrainConfig pretrain;  // autoencoder stage
  model::TrainConfig train;     // adaptation stage

  void validate(Index input_dim) const;
};

// Parameter gradients of the composite adaptation loss
//   L = alpha * mse(head(enc(xt)), yt) + beta * mmd(enc(xs), enc(xt))
//     + gamma * (mse(dec(enc(xs)), xs) + mse(dec(enc(xt)), xt)) / 2
//     + delta * sum ||W_trainable||^2
// for a fixed kernel bandwidth. The decoder is frozen and gets no gradients.
struct DdaLossGrads {
  double loss = 0.0;
  std::vector<model::LayerGrads> encoder;
  std::vector<model::LayerGrads> head;
};
DdaLossGrads dda_composite_gradients(const model::MlpModel& encoder, const model::MlpModel& head,
                                     const model::MlpModel& frozen_decoder, const Matrix& xs,
                                     const Matrix& xt, const Matrix& yt, const DdaConfig& cfg,
                                     double sigma);

// Two-stage deep domain adaptation; returns encoder + regression head fused
// into one model.
model::MlpModel dda_train(const thermal::Dataset& source, const thermal::Dataset& target,
                          const DdaConfig& cfg);

}  // namespace ftl::transfer

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ftl/thermal.hpp"
#include "ftl/types.hpp"

namespace ftl::model {

enum class Activation : std::uint8_t { Tanh = 0, Relu = 1, Linear = 2 };

struct Layer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::Linear;
  bool frozen = false;

  Index in_dim() const { return weights.cols(); }
  Index out_dim() const { return weights.rows(); }
};

// Plain feed-forward network; doubles as base model, fine-tuned model and
// DDA encoder/decoder/regressor.
struct MlpModel {
  std::vector<Layer> layers;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  bool any_trainable() const;
  void validate() const;  // dimension chaining, finite parameters
};

enum class Optimizer : std::uint8_t { Sgd = 0, Adam = 1 };

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 64;
  Optimizer optimizer = Optimizer::Adam;
  double l2_weight = 0.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Adam moment constants; the paper-facing configuration keeps them fixed.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Xavier-uniform initialized network. sizes = {in, h1, ..., out}; hidden
// layers use `hidden`, the final layer defaults to Linear.
MlpModel make_mlp(const std::vector<Index>& sizes, Activation hidden, std::uint64_t seed,
                  Activation final_activation = Activation::Linear);

// Default thermal base architecture: 4 -> 32 -> 32 -> 1, Tanh hidden.
MlpModel make_base_model(std::uint64_t seed);

Matrix forward(const MlpModel& model, const Matrix& x);

// Per-layer activations retained for backpropagation.
struct ForwardCache {
  Matrix input;
  std::vector<Matrix> pre;   // z = a_prev W^T + b
  std::vector<Matrix> post;  // act(z)
};
ForwardCache forward_cache(const MlpModel& model, const Matrix& x);

struct LayerGrads {
  Matrix dw;  // empty for frozen layers
  Vector db;
};

// Backpropagates an arbitrary output gradient. Frozen layers propagate the
// chain rule but report no parameter gradients.
struct BackpropResult {
  std::vector<LayerGrads> grads;
  Matrix input_grad;  // dL/dx, filled when want_input_grad
};
BackpropResult backward(const MlpModel& model, const ForwardCache& cache,
                        const Matrix& output_grad, bool want_input_grad = false);

// mse(pred, target) = ||pred - target||^2 / N_rows (summed over outputs).
double mse_loss(const Matrix& pred, const Matrix& target);

// MSE gradients, (2/N)(yhat - y) seed; y is N x output_dim.
std::vector<LayerGrads> gradients(const MlpModel& model, const Matrix& x, const Matrix& y);

struct TrainResult {
  MlpModel model;
  std::vector<double> loss_history;  // mean batch task loss per epoch
};

// Adam update state for one model; moment buffers follow the model's layer
// layout and layers with empty gradient blocks (frozen) are skipped.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const MlpModel& model);
  void step(MlpModel& model, const std::vector<LayerGrads>& grads, double learning_rate);

 private:
  std::vector<LayerGrads> m_;
  std::vector<LayerGrads> v_;
  long t_ = 0;
};

// Seeded mini-batch training; frozen layers are bit-identical afterwards.
TrainResult train(const MlpModel& model, const thermal::Dataset& data, const TrainConfig& cfg);

// Same loop for matrix-valued targets (y is n x output_dim), e.g. a network
// learning to reproduce its own input.
TrainResult train_xy(const MlpModel& model, const Matrix& x, const Matrix& y,
                     const TrainConfig& cfg);

struct EvalMetrics {
  double mse = 0.0;  // denormalized target units (K^2) when stats present
  double r2 = 0.0;
  bool r2_defined = true;
};
EvalMetrics evaluate(const MlpModel& model, const thermal::Dataset& data);

// Freezes every base layer, drops the base output layer and appends a fresh
// trainable head: one hidden layer per entry of head_spec plus the output.
MlpModel extend_for_finetune(const MlpModel& base, const std::vector<Index>& head_spec,
                             std::uint64_t seed, Activation head_activation = Activation::Tanh);

// Binary round trip; format shared with the federation wire payload.
std::vector<std::uint8_t> serialize(const MlpModel& model);
MlpModel deserialize(std::span<const std::uint8_t> bytes);

void save_model(const MlpModel& model, const std::string& path);
MlpModel load_model(const std::string& path);

}  // namespace ftl::model

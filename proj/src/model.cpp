#include "ftl/model.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ftl/errors.hpp"
#include "ftl/rng.hpp"

namespace ftl::model {

namespace {

Matrix apply_activation(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Linear: return z;
  }
  throw std::invalid_argument("unknown activation");
}

// Derivative evaluated from the pre-activation z.
Matrix activation_grad(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Tanh: return (1.0 - z.array().tanh().square()).matrix();
    case Activation::Relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::Linear: return Matrix::Ones(z.rows(), z.cols());
  }
  throw std::invalid_argument("unknown activation");
}

Layer xavier_layer(Index out, Index in, Activation act, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Layer layer;
  layer.weights.resize(out, in);
  for (Index r = 0; r < out; ++r) {
    for (Index c = 0; c < in; ++c) layer.weights(r, c) = rng.uniform(-limit, limit);
  }
  layer.bias = Vector::Zero(out);
  layer.activation = act;
  return layer;
}

}  // namespace

bool MlpModel::any_trainable() const {
  for (const Layer& l : layers) {
    if (!l.frozen) return true;
  }
  return false;
}

void MlpModel::validate() const {
  if (layers.empty()) throw ConfigError("model has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.bias.size() != l.out_dim()) {
      throw ConfigError("layer " + std::to_string(i) + ": bias size mismatch");
    }
    if (i > 0 && l.in_dim() != layers[i - 1].out_dim()) {
      throw ConfigError("layer " + std::to_string(i) + ": input dim does not chain");
    }
    if (!l.weights.allFinite() || !l.bias.allFinite()) {
      throw ConfigError("layer " + std::to_string(i) + ": non-finite parameter");
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (l2_weight < 0) throw ConfigError("l2_weight must be >= 0");
}

MlpModel make_mlp(const std::vector<Index>& sizes, Activation hidden, std::uint64_t seed,
                  Activation final_activation) {
  if (sizes.size() < 2) throw ConfigError("make_mlp: need at least input and output sizes");
  Rng rng(seed);
  MlpModel m;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    Activation act = (i + 2 == sizes.size()) ? final_activation : hidden;
    m.layers.push_back(xavier_layer(sizes[i + 1], sizes[i], act, rng));
  }
  return m;
}

MlpModel make_base_model(std::uint64_t seed) {
  return make_mlp({4, 32, 32, 1}, Activation::Tanh, seed);
}

Matrix forward(const MlpModel& model, const Matrix& x) {
  if (x.cols() != model.input_dim()) {
    throw std::invalid_argument("forward: input has " + std::to_string(x.cols()) +
                                " columns, model expects " + std::to_string(model.input_dim()));
  }
  Matrix a = x;
  for (const Layer& l : model.layers) {
    Matrix z = a * l.weights.transpose();
    z.rowwise() += l.bias.transpose();
    a = apply_activation(l.activation, z);
  }
  return a;
}

ForwardCache forward_cache(const MlpModel& model, const Matrix& x) {
  if (x.cols() != model.input_dim()) {
    throw std::invalid_argument("forward_cache: input has " + std::to_string(x.cols()) +
                                " columns, model expects " + std::to_string(model.input_dim()));
  }
  ForwardCache cache;
  cache.input = x;
  cache.pre.reserve(model.layers.size());
  cache.post.reserve(model.layers.size());
  const Matrix* a = &cache.input;
  for (const Layer& l : model.layers) {
    Matrix z = (*a) * l.weights.transpose();
    z.rowwise() += l.bias.transpose();
    cache.pre.push_back(z);
    cache.post.push_back(apply_activation(l.activation, z));
    a = &cache.post.back();
  }
  return cache;
}

BackpropResult backward(const MlpModel& model, const ForwardCache& cache,
                        const Matrix& output_grad, bool want_input_grad) {
  const auto n_layers = model.layers.size();
  if (cache.pre.size() != n_layers) throw std::invalid_argument("backward: cache/model mismatch");
  if (output_grad.rows() != cache.input.rows() || output_grad.cols() != model.output_dim()) {
    throw std::invalid_argument("backward: output gradient shape mismatch");
  }

  BackpropResult result;
  result.grads.resize(n_layers);
  Matrix delta = output_grad;
  for (std::size_t li = n_layers; li-- > 0;) {
    const Layer& l = model.layers[li];
    Matrix dz = delta.cwiseProduct(activation_grad(l.activation, cache.pre[li]));
    const Matrix& a_prev = (li == 0) ? cache.input : cache.post[li - 1];
    if (!l.frozen) {
      result.grads[li].dw = dz.transpose() * a_prev;
      result.grads[li].db = dz.colwise().sum().transpose();
    }
    if (li > 0 || want_input_grad) {
      delta = dz * l.weights;
    }
  }
  if (want_input_grad) result.input_grad = std::move(delta);
  return result;
}

double mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("mse_loss: shape mismatch");
  }
  if (pred.rows() == 0) throw std::invalid_argument("mse_loss: empty input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

std::vector<LayerGrads> gradients(const MlpModel& model, const Matrix& x, const Matrix& y) {
  if (y.rows() != x.rows() || y.cols() != model.output_dim()) {
    throw std::invalid_argument("gradients: target shape mismatch");
  }
  ForwardCache cache = forward_cache(model, x);
  Matrix seed = (2.0 / static_cast<double>(x.rows())) * (cache.post.back() - y);
  return backward(model, cache, seed).grads;
}

AdamOptimizer::AdamOptimizer(const MlpModel& model) {
  m_.resize(model.layers.size());
  v_.resize(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    if (model.layers[li].frozen) continue;
    m_[li].dw = Matrix::Zero(model.layers[li].out_dim(), model.layers[li].in_dim());
    m_[li].db = Vector::Zero(model.layers[li].out_dim());
    v_[li] = m_[li];
  }
}

void AdamOptimizer::step(MlpModel& model, const std::vector<LayerGrads>& grads,
                         double learning_rate) {
  if (grads.size() != m_.size() || model.layers.size() != m_.size()) {
    throw std::invalid_argument("AdamOptimizer::step: layer count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (l.frozen || grads[li].dw.size() == 0) continue;
    LayerGrads& m = m_[li];
    LayerGrads& v = v_[li];
    m.dw = kAdamBeta1 * m.dw + (1.0 - kAdamBeta1) * grads[li].dw;
    m.db = kAdamBeta1 * m.db + (1.0 - kAdamBeta1) * grads[li].db;
    v.dw = kAdamBeta2 * v.dw + (1.0 - kAdamBeta2) * grads[li].dw.cwiseProduct(grads[li].dw);
    v.db = kAdamBeta2 * v.db + (1.0 - kAdamBeta2) * grads[li].db.cwiseProduct(grads[li].db);
    l.weights.array() -= learning_rate * (m.dw.array() / bc1) /
                         ((v.dw.array() / bc2).sqrt() + kAdamEps);
    l.bias.array() -= learning_rate * (m.db.array() / bc1) /
                      ((v.db.array() / bc2).sqrt() + kAdamEps);
  }
}

namespace {

void sgd_step(MlpModel& model, const std::vector<LayerGrads>& grads, double learning_rate) {
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (l.frozen || grads[li].dw.size() == 0) continue;
    l.weights -= learning_rate * grads[li].dw;
    l.bias -= learning_rate * grads[li].db;
  }
}

}  // namespace

TrainResult train_xy(const MlpModel& model, const Matrix& x, const Matrix& y,
                     const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (!model.any_trainable()) throw ConfigError("train: nothing trainable, all layers frozen");
  if (x.rows() < 1) throw ConfigError("train: empty dataset");
  if (x.cols() != model.input_dim()) {
    throw ConfigError("train: dataset has " + std::to_string(x.cols()) +
                      " features, model expects " + std::to_string(model.input_dim()));
  }
  if (y.rows() != x.rows() || y.cols() != model.output_dim()) {
    throw ConfigError("train: target shape mismatch");
  }

  TrainResult result;
  result.model = model;
  Rng rng(cfg.seed);
  AdamOptimizer adam(model);

  const Index n = x.rows();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      Index count = std::min<Index>(cfg.batch_size, n - start);
      Matrix xb(count, x.cols());
      Matrix yb(count, y.cols());
      for (Index r = 0; r < count; ++r) {
        xb.row(r) = x.row(order[static_cast<std::size_t>(start + r)]);
        yb.row(r) = y.row(order[static_cast<std::size_t>(start + r)]);
      }
      ForwardCache cache = forward_cache(result.model, xb);
      epoch_loss += mse_loss(cache.post.back(), yb);
      ++batches;
      Matrix seed = (2.0 / static_cast<double>(count)) * (cache.post.back() - yb);
      std::vector<LayerGrads> grads = backward(result.model, cache, seed).grads;
      if (cfg.l2_weight > 0) {
        for (std::size_t li = 0; li < result.model.layers.size(); ++li) {
          if (result.model.layers[li].frozen) continue;
          grads[li].dw += 2.0 * cfg.l2_weight * result.model.layers[li].weights;
        }
      }
      if (cfg.optimizer == Optimizer::Adam) {
        adam.step(result.model, grads, cfg.learning_rate);
      } else {
        sgd_step(result.model, grads, cfg.learning_rate);
      }
    }
    result.loss_history.push_back(epoch_loss / std::max(batches, 1));
  }
  return result;
}

TrainResult train(const MlpModel& model, const thermal::Dataset& data, const TrainConfig& cfg) {
  return train_xy(model, data.features, data.targets, cfg);
}

EvalMetrics evaluate(const MlpModel& model, const thermal::Dataset& data) {
  if (data.n() < 1) throw ConfigError("evaluate: empty dataset");
  Matrix pred = forward(model, data.features);
  Vector y = data.targets;
  if (data.norm) {
    pred = (pred.array() * data.norm->target_std + data.norm->target_mean).matrix();
    y = (y.array() * data.norm->target_std + data.norm->target_mean).matrix();
  }
  EvalMetrics metrics;
  Vector err = pred.col(0) - y;
  metrics.mse = err.squaredNorm() / static_cast<double>(data.n());
  double mean = y.mean();
  double ss_tot = (y.array() - mean).square().sum();
  if (ss_tot > 0) {
    metrics.r2 = 1.0 - err.squaredNorm() / ss_tot;
  } else {
    metrics.r2_defined = false;
    metrics.r2 = 0.0;
  }
  return metrics;
}

MlpModel extend_for_finetune(const MlpModel& base, const std::vector<Index>& head_spec,
                             std::uint64_t seed, Activation head_activation) {
  base.validate();
  if (head_spec.empty()) throw ConfigError("extend_for_finetune: empty head_spec");
  if (base.layers.size() < 2) throw ConfigError("extend_for_finetune: base needs a hidden layer");

  MlpModel out;
  // Keep everything up to the last hidden representation, frozen.
  for (std::size_t i = 0; i + 1 < base.layers.size(); ++i) {
    Layer l = base.layers[i];
    l.frozen = true;
    out.layers.push_back(std::move(l));
  }
  Rng rng(seed);
  Index in = out.layers.back().out_dim();
  for (Index width : head_spec) {
    if (width < 1) throw ConfigError("extend_for_finetune: head width must be >= 1");
    out.layers.push_back(xavier_layer(width, in, head_activation, rng));
    in = width;
  }
  out.layers.push_back(xavier_layer(base.output_dim(), in, Activation::Linear, rng));
  return out;
}

void save_model(const MlpModel& model, const std::string& path) {
  std::vector<std::uint8_t> bytes = serialize(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_model: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("save_model: write failed for " + path);
}

MlpModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_model: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace ftl::model

#include "ftl/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "ftl/errors.hpp"
#include "ftl/linalg.hpp"
#include "ftl/rng.hpp"

namespace ftl::transfer {

namespace {

// Seed streams so every derived RNG is independent of the others.
constexpr std::uint64_t kStreamFinetuneHead = 1;
constexpr std::uint64_t kStreamTcaSource = 2;
constexpr std::uint64_t kStreamTcaTarget = 3;
constexpr std::uint64_t kStreamDdaEncoder = 4;
constexpr std::uint64_t kStreamDdaDecoder = 5;
constexpr std::uint64_t kStreamDdaHead = 6;
constexpr std::uint64_t kStreamDdaTargetOrder = 7;
constexpr std::uint64_t kStreamDdaSourceOrder = 8;
constexpr std::uint64_t kMedianSubsampleSeed = 0x6d656469616eULL;

constexpr Index kMedianMaxPoints = 1000;
constexpr double kMinBandwidth = 1e-6;

// D(i,j) = ||a_i - b_j||^2, clamped at zero against rounding.
Matrix pairwise_sqdist(const Matrix& a, const Matrix& b) {
  Matrix d = -2.0 * (a * b.transpose());
  d.colwise() += a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

Matrix gaussian_kernel(const Matrix& sqdist, double sigma) {
  return (-sqdist / (2.0 * sigma * sigma)).array().exp().matrix();
}

// Rows of `x` at `rows`, preserving order.
Matrix gather_rows(const Matrix& x, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

// First `count` indices of a seeded shuffle of 0..n-1, restored to ascending
// order so subsampling keeps the original row order.
std::vector<Index> subsample_indices(Index n, Index count, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (count >= n) return idx;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

double resolve_sigma(const Matrix& xs, const Matrix& xt, const MmdConfig& cfg) {
  if (cfg.sigma) {
    if (!(*cfg.sigma > 0.0)) throw ConfigError("mmd: sigma must be > 0");
    return *cfg.sigma;
  }
  return median_bandwidth(xs, xt);
}

void check_domain_pair(const Matrix& xs, const Matrix& xt, const char* what) {
  if (xs.rows() == 0 || xt.rows() == 0) {
    throw std::invalid_argument(std::string(what) + ": empty domain sample");
  }
  if (xs.cols() != xt.cols()) {
    throw std::invalid_argument(std::string(what) + ": domains have " +
                                std::to_string(xs.cols()) + " and " + std::to_string(xt.cols()) +
                                " columns");
  }
}

}  // namespace

double median_bandwidth(const Matrix& xs, const Matrix& xt) {
  if (xs.rows() > 0 && xt.rows() > 0 && xs.cols() != xt.cols()) {
    throw std::invalid_argument("median_bandwidth: column mismatch");
  }
  const Index total = xs.rows() + xt.rows();
  if (total < 2) throw std::invalid_argument("median_bandwidth: need at least two points");

  Matrix pooled(total, xs.rows() > 0 ? xs.cols() : xt.cols());
  if (xs.rows() > 0) pooled.topRows(xs.rows()) = xs;
  if (xt.rows() > 0) pooled.bottomRows(xt.rows()) = xt;

  if (total > kMedianMaxPoints) {
    std::vector<Index> keep = subsample_indices(total, kMedianMaxPoints, kMedianSubsampleSeed);
    pooled = gather_rows(pooled, keep);
  }

  const Index n = pooled.rows();
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1) / 2);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      dist.push_back((pooled.row(i) - pooled.row(j)).norm());
    }
  }

  const std::size_t cnt = dist.size();
  auto upper = dist.begin() + static_cast<std::ptrdiff_t>(cnt / 2);
  std::nth_element(dist.begin(), upper, dist.end());
  double med = *upper;
  if (cnt % 2 == 0) {
    // Even count: average with the largest value of the lower half.
    double lower = *std::max_element(dist.begin(), upper);
    med = 0.5 * (med + lower);
  }
  if (med < kMinBandwidth) {
    warn("median_bandwidth: degenerate sample, clamping bandwidth to " +
         std::to_string(kMinBandwidth));
    med = kMinBandwidth;
  }
  return med;
}

double mmd(const Matrix& xs, const Matrix& xt, const MmdConfig& cfg) {
  check_domain_pair(xs, xt, "mmd");
  const double sigma = resolve_sigma(xs, xt, cfg);
  const double kss = gaussian_kernel(pairwise_sqdist(xs, xs), sigma).mean();
  const double ktt = gaussian_kernel(pairwise_sqdist(xt, xt), sigma).mean();
  const double kst = gaussian_kernel(pairwise_sqdist(xs, xt), sigma).mean();
  return std::max(0.0, kss + ktt - 2.0 * kst);
}

double relevance(const Matrix& client_data, const Matrix& reference, const MmdConfig& cfg) {
  return std::exp(-mmd(client_data, reference, cfg));
}

model::MlpModel fine_tune(const model::MlpModel& base, const thermal::Dataset& target,
                          const std::vector<Index>& head_spec, const model::TrainConfig& cfg) {
  model::MlpModel extended =
      model::extend_for_finetune(base, head_spec, mix_seed(cfg.seed, kStreamFinetuneHead));
  return model::train(extended, target, cfg).model;
}

TcaMap tca_fit(const Matrix& xs, const Matrix& xt, Index m, double mu, const MmdConfig& cfg,
               Index max_per_domain, std::uint64_t subsample_seed) {
  check_domain_pair(xs, xt, "tca_fit");
  if (m < 1) throw ConfigError("tca_fit: m must be >= 1");
  if (!(mu > 0.0)) throw ConfigError("tca_fit: mu must be > 0");
  if (max_per_domain < 1) throw ConfigError("tca_fit: max_per_domain must be >= 1");

  Matrix s = xs;
  Matrix t = xt;
  if (s.rows() > max_per_domain) {
    s = gather_rows(s, subsample_indices(s.rows(), max_per_domain,
                                         mix_seed(subsample_seed, kStreamTcaSource)));
  }
  if (t.rows() > max_per_domain) {
    t = gather_rows(t, subsample_indices(t.rows(), max_per_domain,
                                         mix_seed(subsample_seed, kStreamTcaTarget)));
  }

  const Index ns = s.rows();
  const Index nt = t.rows();
  const Index n = ns + nt;
  if (m > n) {
    throw ConfigError("tca_fit: m = " + std::to_string(m) + " exceeds pooled sample size " +
                      std::to_string(n));
  }

  Matrix pooled(n, s.cols());
  pooled.topRows(ns) = s;
  pooled.bottomRows(nt) = t;

  const double sigma = cfg.sigma ? *cfg.sigma : median_bandwidth(s, t);
  if (!(sigma > 0.0)) throw ConfigError("tca_fit: sigma must be > 0");

  Matrix sqdist = pairwise_sqdist(pooled, pooled);
  if (sqdist.maxCoeff() <= 0.0) {
    throw std::invalid_argument("tca_fit: degenerate kernel, all pooled points identical");
  }
  Matrix k = gaussian_kernel(sqdist, sigma);

  // Domain-contrast matrix: the quadratic form w^T K L K w is the squared
  // difference of domain means in the projected kernel space.
  Matrix l(n, n);
  const double ss = 1.0 / (static_cast<double>(ns) * static_cast<double>(ns));
  const double tt = 1.0 / (static_cast<double>(nt) * static_cast<double>(nt));
  const double st = -1.0 / (static_cast<double>(ns) * static_cast<double>(nt));
  l.topLeftCorner(ns, ns).setConstant(ss);
  l.bottomRightCorner(nt, nt).setConstant(tt);
  l.topRightCorner(ns, nt).setConstant(st);
  l.bottomLeftCorner(nt, ns).setConstant(st);

  // Centering matrix H = I - (1/n) 1 1^T.
  Matrix h = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));

  Matrix a = k * h * k;
  Matrix b = k * l * k + mu * Matrix::Identity(n, n);

  linalg::GeneralizedEigh ge = linalg::generalized_eigh(a, b, m);

  TcaMap map;
  map.training_points = std::move(pooled);
  map.w = std::move(ge.vectors);
  map.sigma = sigma;
  map.mu = mu;
  map.m = m;
  return map;
}

Matrix tca_transform(const TcaMap& map, const Matrix& x) {
  if (map.w.size() == 0 || map.training_points.size() == 0) {
    throw std::invalid_argument("tca_transform: map is not fitted");
  }
  if (x.cols() != map.training_points.cols()) {
    throw std::invalid_argument("tca_transform: input has " + std::to_string(x.cols()) +
                                " columns, map expects " +
                                std::to_string(map.training_points.cols()));
  }
  Matrix kx = gaussian_kernel(pairwise_sqdist(x, map.training_points), map.sigma);
  return kx * map.w;
}

void DdaConfig::validate(Index input_dim) const {
  if (input_dim < 1) throw ConfigError("dda: input_dim must be >= 1");
  if (alpha < 0 || beta < 0 || gamma < 0 || delta < 0) {
    throw ConfigError("dda: loss weights must be >= 0");
  }
  if (encoder_sizes.empty()) throw ConfigError("dda: encoder_sizes must not be empty");
  for (Index w : encoder_sizes) {
    if (w < 1) throw ConfigError("dda: encoder layer width must be >= 1");
  }
  for (Index w : decoder_sizes) {
    if (w < 1) throw ConfigError("dda: decoder layer width must be >= 1");
  }
  pretrain.validate();
  train.validate();
}

namespace {

// Zero-filled gradient blocks for every trainable layer of `m`.
std::vector<model::LayerGrads> zero_grads(const model::MlpModel& m) {
  std::vector<model::LayerGrads> g(m.layers.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    if (m.layers[li].frozen) continue;
    g[li].dw = Matrix::Zero(m.layers[li].out_dim(), m.layers[li].in_dim());
    g[li].db = Vector::Zero(m.layers[li].out_dim());
  }
  return g;
}

void accumulate(std::vector<model::LayerGrads>& dst, const std::vector<model::LayerGrads>& src) {
  for (std::size_t li = 0; li < dst.size(); ++li) {
    if (dst[li].dw.size() == 0 || src[li].dw.size() == 0) continue;
    dst[li].dw += src[li].dw;
    dst[li].db += src[li].db;
  }
}

// Adds the weight-decay term delta * sum ||W||^2 for trainable layers.
double add_l2(std::vector<model::LayerGrads>& grads, const model::MlpModel& m, double delta) {
  double sum = 0.0;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    if (m.layers[li].frozen) continue;
    sum += m.layers[li].weights.squaredNorm();
    if (delta > 0) grads[li].dw += 2.0 * delta * m.layers[li].weights;
  }
  return delta * sum;
}

}  // namespace

DdaLossGrads dda_composite_gradients(const model::MlpModel& encoder, const model::MlpModel& head,
                                     const model::MlpModel& frozen_decoder, const Matrix& xs,
                                     const Matrix& xt, const Matrix& yt, const DdaConfig& cfg,
                                     double sigma) {
  check_domain_pair(xs, xt, "dda");
  if (xs.cols() != encoder.input_dim()) throw std::invalid_argument("dda: encoder input mismatch");
  if (yt.rows() != xt.rows() || yt.cols() != head.output_dim()) {
    throw std::invalid_argument("dda: target shape mismatch");
  }
  if (head.input_dim() != encoder.output_dim() ||
      frozen_decoder.input_dim() != encoder.output_dim() ||
      frozen_decoder.output_dim() != encoder.input_dim()) {
    throw std::invalid_argument("dda: encoder/head/decoder dimensions do not chain");
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("dda: sigma must be > 0");

  const double ns = static_cast<double>(xs.rows());
  const double nt = static_cast<double>(xt.rows());

  model::ForwardCache cache_s = model::forward_cache(encoder, xs);
  model::ForwardCache cache_t = model::forward_cache(encoder, xt);
  const Matrix& es = cache_s.post.back();
  const Matrix& et = cache_t.post.back();

  DdaLossGrads out;
  out.encoder = zero_grads(encoder);
  out.head = zero_grads(head);
  Matrix d_es = Matrix::Zero(es.rows(), es.cols());
  Matrix d_et = Matrix::Zero(et.rows(), et.cols());

  // Task term on the target domain.
  if (cfg.alpha != 0.0) {
    model::ForwardCache head_cache = model::forward_cache(head, et);
    const Matrix& pred = head_cache.post.back();
    out.loss += cfg.alpha * model::mse_loss(pred, yt);
    Matrix dpred = cfg.alpha * (2.0 / nt) * (pred - yt);
    model::BackpropResult bp = model::backward(head, head_cache, dpred, true);
    accumulate(out.head, bp.grads);
    d_et += bp.input_grad;
  }

  // Domain-discrepancy term between the encoded domains (V-statistic at the
  // fixed bandwidth; not clamped, so the gradient stays exact).
  if (cfg.beta != 0.0) {
    const double inv_s2 = 1.0 / (sigma * sigma);
    Matrix kss = gaussian_kernel(pairwise_sqdist(es, es), sigma);
    Matrix ktt = gaussian_kernel(pairwise_sqdist(et, et), sigma);
    Matrix kst = gaussian_kernel(pairwise_sqdist(es, et), sigma);
    out.loss += cfg.beta * (kss.mean() + ktt.mean() - 2.0 * kst.mean());

    // d/d es_i of mean k(es,es): (2/ns^2) sum_j k_ij (es_j - es_i) / sigma^2,
    // and of -2 mean k(es,et): -(2/(ns nt)) sum_j k_ij (et_j - es_i) / sigma^2.
    Matrix des = (2.0 / (ns * ns)) * (kss * es - kss.rowwise().sum().asDiagonal() * es) -
                 (2.0 / (ns * nt)) * (kst * et - kst.rowwise().sum().asDiagonal() * es);
    Matrix det = (2.0 / (nt * nt)) * (ktt * et - ktt.rowwise().sum().asDiagonal() * et) -
                 (2.0 / (ns * nt)) *
                     (kst.transpose() * es - kst.colwise().sum().asDiagonal() * et);
    d_es += (cfg.beta * inv_s2) * des;
    d_et += (cfg.beta * inv_s2) * det;
  }

  // Reconstruction through the frozen decoder, averaged over both domains.
  if (cfg.gamma != 0.0) {
    model::ForwardCache dec_s = model::forward_cache(frozen_decoder, es);
    model::ForwardCache dec_t = model::forward_cache(frozen_decoder, et);
    const Matrix& rec_s = dec_s.post.back();
    const Matrix& rec_t = dec_t.post.back();
    out.loss += cfg.gamma * 0.5 * (model::mse_loss(rec_s, xs) + model::mse_loss(rec_t, xt));
    Matrix drec_s = (cfg.gamma / ns) * (rec_s - xs);
    Matrix drec_t = (cfg.gamma / nt) * (rec_t - xt);
    d_es += model::backward(frozen_decoder, dec_s, drec_s, true).input_grad;
    d_et += model::backward(frozen_decoder, dec_t, drec_t, true).input_grad;
  }

  accumulate(out.encoder, model::backward(encoder, cache_s, d_es).grads);
  accumulate(out.encoder, model::backward(encoder, cache_t, d_et).grads);

  out.loss += add_l2(out.encoder, encoder, cfg.delta);
  out.loss += add_l2(out.head, head, cfg.delta);
  return out;
}

model::MlpModel dda_train(const thermal::Dataset& source, const thermal::Dataset& target,
                          const DdaConfig& cfg) {
  if (source.n() < 1 || target.n() < 1) throw ConfigError("dda_train: empty dataset");
  if (source.features.cols() != target.features.cols()) {
    throw ConfigError("dda_train: source and target feature widths differ");
  }
  const Index d = source.features.cols();
  cfg.validate(d);

  // Stage 1: autoencoder on source inputs; bounded embedding, linear output.
  std::vector<Index> enc_sizes = {d};
  enc_sizes.insert(enc_sizes.end(), cfg.encoder_sizes.begin(), cfg.encoder_sizes.end());
  const Index latent = enc_sizes.back();
  std::vector<Index> dec_sizes = {latent};
  dec_sizes.insert(dec_sizes.end(), cfg.decoder_sizes.begin(), cfg.decoder_sizes.end());
  dec_sizes.push_back(d);

  model::MlpModel encoder =
      model::make_mlp(enc_sizes, model::Activation::Tanh,
                      mix_seed(cfg.pretrain.seed, kStreamDdaEncoder), model::Activation::Tanh);
  model::MlpModel decoder = model::make_mlp(dec_sizes, model::Activation::Tanh,
                                            mix_seed(cfg.pretrain.seed, kStreamDdaDecoder));

  model::MlpModel autoencoder;
  autoencoder.layers = encoder.layers;
  autoencoder.layers.insert(autoencoder.layers.end(), decoder.layers.begin(),
                            decoder.layers.end());
  autoencoder =
      model::train_xy(autoencoder, source.features, source.features, cfg.pretrain).model;

  const std::size_t enc_count = encoder.layers.size();
  for (std::size_t li = 0; li < autoencoder.layers.size(); ++li) {
    if (li < enc_count) {
      encoder.layers[li] = autoencoder.layers[li];
    } else {
      decoder.layers[li - enc_count] = autoencoder.layers[li];
      decoder.layers[li - enc_count].frozen = true;
    }
  }

  // Stage 2: joint adaptation of encoder + fresh linear head.
  model::MlpModel head = model::make_mlp({latent, 1}, model::Activation::Tanh,
                                         mix_seed(cfg.train.seed, kStreamDdaHead));

  model::AdamOptimizer enc_opt(encoder);
  model::AdamOptimizer head_opt(head);
  Rng order_t_rng(mix_seed(cfg.train.seed, kStreamDdaTargetOrder));
  Rng order_s_rng(mix_seed(cfg.train.seed, kStreamDdaSourceOrder));

  const Index n_t = target.n();
  const Index n_s = source.n();
  std::vector<Index> order_t(static_cast<std::size_t>(n_t));
  std::iota(order_t.begin(), order_t.end(), Index{0});
  std::vector<Index> order_s(static_cast<std::size_t>(n_s));
  std::iota(order_s.begin(), order_s.end(), Index{0});
  std::size_t cursor_s = order_s.size();  // force an initial shuffle

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    order_t_rng.shuffle(order_t);
    for (Index start = 0; start < n_t; start += cfg.train.batch_size) {
      const Index count = std::min<Index>(cfg.train.batch_size, n_t - start);
      Matrix xb_t(count, d);
      Matrix yb_t(count, 1);
      Matrix xb_s(count, d);
      for (Index r = 0; r < count; ++r) {
        Index row_t = order_t[static_cast<std::size_t>(start + r)];
        xb_t.row(r) = target.features.row(row_t);
        yb_t(r, 0) = target.targets(row_t);
        if (cursor_s >= order_s.size()) {
          order_s_rng.shuffle(order_s);
          cursor_s = 0;
        }
        xb_s.row(r) = source.features.row(order_s[cursor_s++]);
      }

      double sigma = 1.0;
      if (cfg.beta != 0.0) {
        sigma = median_bandwidth(model::forward(encoder, xb_s), model::forward(encoder, xb_t));
      }
      DdaLossGrads grads =
          dda_composite_gradients(encoder, head, decoder, xb_s, xb_t, yb_t, cfg, sigma);
      if (cfg.train.optimizer == model::Optimizer::Adam) {
        enc_opt.step(encoder, grads.encoder, cfg.train.learning_rate);
        head_opt.step(head, grads.head, cfg.train.learning_rate);
      } else {
        for (std::size_t li = 0; li < encoder.layers.size(); ++li) {
          encoder.layers[li].weights -= cfg.train.learning_rate * grads.encoder[li].dw;
          encoder.layers[li].bias -= cfg.train.learning_rate * grads.encoder[li].db;
        }
        for (std::size_t li = 0; li < head.layers.size(); ++li) {
          head.layers[li].weights -= cfg.train.learning_rate * grads.head[li].dw;
          head.layers[li].bias -= cfg.train.learning_rate * grads.head[li].db;
        }
      }
    }
  }

  model::MlpModel fused;
  fused.layers = encoder.layers;
  fused.layers.insert(fused.layers.end(), head.layers.begin(), head.layers.end());
  for (model::Layer& l : fused.layers) l.frozen = false;
  return fused;
}

}  // namespace ftl::transfer

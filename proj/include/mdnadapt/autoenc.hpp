#pragma once

// Encoder/decoder networks around an MDN channel: average-power normalized
// constellation, end-to-end training that alternates between fitting the
// channel model and updating encoder/decoder through the relaxed sampler,
// and symbol-error-rate evaluation.

#include "mdnadapt/common.hpp"
#include "mdnadapt/gmm.hpp"
#include "mdnadapt/mdn.hpp"
#include "mdnadapt/neural.hpp"

#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace mdnadapt::autoenc {

using neural::Activation;
using neural::FeedForwardNet;
using neural::NetGradient;

/// Maps one-hot messages to symbols with (1/m) sum_y ||z_y||^2 = power.
class Encoder {
 public:
  Encoder() = default;

  static Encoder create(int m, int d, int hidden, Rng& rng, double power = 1.0) {
    require(m >= 2 && d >= 1 && hidden >= 1, "encoder: invalid sizes");
    require(power > 0.0, "encoder: power must be positive");
    const std::vector<Eigen::Index> dims{m, hidden, d};
    const std::vector<Activation> acts{Activation::relu, Activation::linear};
    return Encoder(FeedForwardNet::glorot(dims, acts, rng), power);
  }

  Encoder(FeedForwardNet net, double power = 1.0) : net_(std::move(net)), power_(power) {
    require(power_ > 0.0, "encoder: power must be positive");
    require(net_.output_dim() >= 1 && net_.input_dim() >= 2, "encoder: invalid network shape");
  }

  int m() const { return static_cast<int>(net_.input_dim()); }
  int d() const { return static_cast<int>(net_.output_dim()); }
  double power() const { return power_; }
  const FeedForwardNet& net() const { return net_; }
  FeedForwardNet& net() { return net_; }

  /// Raw (pre-normalization) outputs for all messages, d x m.
  Matrix raw(neural::ForwardCache* cache = nullptr) const {
    const Matrix eye = Matrix::Identity(m(), m());
    return cache != nullptr ? net_.forward(eye, *cache) : net_.predict(eye);
  }

  /// All m normalized symbols, d x m.
  Matrix symbols() const { return normalize(raw(), power_); }

  gmm::SymbolConstellation constellation() const {
    const Matrix z = symbols();
    std::vector<Vector> s;
    for (Eigen::Index y = 0; y < z.cols(); ++y) s.emplace_back(z.col(y));
    return gmm::SymbolConstellation::uniform(std::move(s));
  }

  Vector encode(int y) const {
    require(y >= 0 && y < m(), "encode: message index out of range");
    return symbols().col(y);
  }

  static Matrix normalize(const Matrix& r, double power) {
    const double total = r.squaredNorm();
    require(total > 0.0 && std::isfinite(total), "encoder: degenerate constellation");
    return r * std::sqrt(power * static_cast<double>(r.cols()) / total);
  }

  /// Gradient through the normalizer: with S = sum ||r||^2, s = sqrt(c m / S),
  /// dr_y = s dz_y - (s / S) (sum_l <dz_l, r_l>) r_y.
  static Matrix normalize_backward(const Matrix& r, const Matrix& dz, double power) {
    const double total = r.squaredNorm();
    const double s = std::sqrt(power * static_cast<double>(r.cols()) / total);
    const double inner = (dz.array() * r.array()).sum();
    return s * dz - (s / total) * inner * r;
  }

  /// Sets the output layer so that the raw outputs reproduce `target`
  /// (least squares over the hidden activations), then rescales to power.
  void fit_to(const gmm::SymbolConstellation& target) {
    require(target.m() == m() && target.d() == d(), "encoder fit: constellation shape mismatch");
    neural::ForwardCache cache;
    raw(&cache);
    require(cache.size() >= 2, "encoder fit: needs a hidden layer");
    const Matrix& h = cache[cache.size() - 2].output;
    Matrix design(h.rows() + 1, h.cols());
    design << h, Matrix::Ones(1, h.cols());
    Matrix q(d(), m());
    for (int y = 0; y < m(); ++y) q.col(y) = target.symbols[static_cast<std::size_t>(y)];
    const Matrix wb = design.transpose().completeOrthogonalDecomposition().solve(q.transpose()).transpose();
    auto& last = net_.layers().back();
    last.weights = wb.leftCols(h.rows());
    last.biases = wb.col(h.rows());
  }

  bool operator==(const Encoder&) const = default;

 private:
  FeedForwardNet net_;
  double power_ = 1.0;
};

struct Decision {
  Vector probs;
  int y_hat = 0;
};

/// d -> hidden (ReLU) -> m (softmax).
class Decoder {
 public:
  Decoder() = default;

  static Decoder create(int m, int d, int hidden, Rng& rng) {
    require(m >= 2 && d >= 1 && hidden >= 1, "decoder: invalid sizes");
    const std::vector<Eigen::Index> dims{d, hidden, m};
    const std::vector<Activation> acts{Activation::relu, Activation::softmax};
    return Decoder(FeedForwardNet::glorot(dims, acts, rng));
  }

  explicit Decoder(FeedForwardNet net) : net_(std::move(net)) {
    require(net_.layers().back().activation == Activation::softmax, "decoder: output layer must be softmax");
  }

  int m() const { return static_cast<int>(net_.output_dim()); }
  int d() const { return static_cast<int>(net_.input_dim()); }
  const FeedForwardNet& net() const { return net_; }
  FeedForwardNet& net() { return net_; }

  /// Class posteriors, one column per input column.
  Matrix probabilities(const Matrix& x) const { return net_.predict(x); }

  Decision decode(const Vector& x) const {
    require(x.allFinite(), "decode: non-finite input");
    Decision out;
    out.probs = net_.predict(x);
    out.y_hat = static_cast<int>(argmax(out.probs));
    return out;
  }

  bool operator==(const Decoder&) const = default;

 private:
  FeedForwardNet net_;
};

struct AutoencoderSystem {
  Encoder encoder;
  mdn::MdnModel mdn;
  Decoder decoder;

  int m() const { return encoder.m(); }
  int d() const { return encoder.d(); }

  void validate() const {
    require(decoder.m() == encoder.m(), "autoencoder: encoder/decoder message count mismatch");
    require(decoder.d() == encoder.d() && mdn.d() == encoder.d(), "autoencoder: symbol dimension mismatch");
  }

  gmm::SymbolConstellation constellation() const { return encoder.constellation(); }
};

struct SystemShape {
  int m = 16;
  int d = 2;
  int k = 5;
  int hidden = 100;
};

inline AutoencoderSystem make_system(const SystemShape& shape, Rng& rng) {
  AutoencoderSystem s;
  s.encoder = Encoder::create(shape.m, shape.d, shape.hidden, rng);
  s.mdn = mdn::MdnModel::create(shape.d, shape.k, shape.hidden, rng);
  s.decoder = Decoder::create(shape.m, shape.d, shape.hidden, rng);
  return s;
}

struct CeGradient {
  double loss = 0.0;
  NetGradient encoder;
  NetGradient decoder;
};

/// Cross-entropy through encoder -> relaxed MDN sampler -> decoder for the
/// given labels and fixed noise (gumbel: k x B, u: d x B). The MDN is only
/// read.
inline CeGradient ce_loss_and_grad(const AutoencoderSystem& system, std::span<const int> labels, const Matrix& gumbel,
                                   const Matrix& u, double tau = mdn::kDefaultTemperature) {
  require(!labels.empty(), "ce_loss_and_grad: empty batch");
  for (int y : labels) require(y >= 0 && y < system.m(), "ce_loss_and_grad: label out of range");
  neural::ForwardCache enc_cache;
  const Matrix r = system.encoder.raw(&enc_cache);
  const Matrix z = Encoder::normalize(r, system.encoder.power());
  const auto sample = mdn::sample_channel_differentiable(system.mdn, z, labels, gumbel, u, tau);
  neural::ForwardCache dec_cache;
  const Matrix probs = system.decoder.net().forward(sample.x, dec_cache);
  CeGradient out;
  Matrix grad_pre;
  out.loss = neural::softmax_cross_entropy(probs, labels, &grad_pre);
  out.decoder = system.decoder.net().backward(dec_cache, grad_pre, neural::GradientAt::pre_activation);
  const auto channel_grad = mdn::differentiable_backward(system.mdn, sample, out.decoder.input, false);
  const Matrix dr = Encoder::normalize_backward(r, channel_grad.input, system.encoder.power());
  out.encoder = system.encoder.net().backward(enc_cache, dr);
  return out;
}

/// Draws channel outputs for symbols z (d x B) with labels; the ground-truth
/// channel used to generate MDN training data.
using ChannelSampler = std::function<Matrix(const Matrix& z, std::span<const int> labels, Rng& rng)>;

struct TrainConfig {
  int n_ae = 50;
  int n_ce = 20;
  int mdn_samples = 20000;
  int ae_samples = 300000;
  int batch_size = 128;
  double lr_start = 0.1;
  double lr_end = 0.005;
  double momentum = 0.9;
  double tau = mdn::kDefaultTemperature;
  mdn::TrainOptions mdn_options{};
};

struct TrainingCurve {
  std::vector<double> ce_loss;        // mean CE per autoencoder epoch
  std::vector<double> mdn_loss;       // final MDN loss per channel round
  std::vector<double> learning_rate;  // per autoencoder epoch
};

inline std::vector<int> uniform_labels(int m, std::size_t n, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, m - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = pick(rng);
  return y;
}

inline Matrix symbols_for(const Matrix& constellation, std::span<const int> labels) {
  Matrix z(constellation.rows(), static_cast<Eigen::Index>(labels.size()));
  for (std::size_t n = 0; n < labels.size(); ++n) z.col(static_cast<Eigen::Index>(n)) = constellation.col(labels[n]);
  return z;
}

/// Fresh (z, x) pairs from the true channel under the current constellation.
inline mdn::ChannelPairs channel_round(const Encoder& encoder, const ChannelSampler& channel, int n, Rng& rng) {
  const auto labels = uniform_labels(encoder.m(), static_cast<std::size_t>(n), rng);
  mdn::ChannelPairs pairs;
  pairs.z = symbols_for(encoder.symbols(), labels);
  pairs.x = channel(pairs.z, labels, rng);
  require(pairs.x.rows() == pairs.z.rows() && pairs.x.cols() == pairs.z.cols(), "channel sampler: shape mismatch");
  return pairs;
}

/// One pass of Nesterov SGD over n_samples uniformly drawn labels; MDN frozen.
inline double autoencoder_epoch(AutoencoderSystem& system, neural::Optimizer& enc_opt, neural::Optimizer& dec_opt,
                                const TrainConfig& cfg, Rng& rng) {
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  const auto total = static_cast<std::size_t>(std::max(0, cfg.ae_samples));
  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t s = 0; s < total; s += batch) {
    const std::size_t nb = std::min(batch, total - s);
    const auto labels = uniform_labels(system.m(), nb, rng);
    const Matrix g = mdn::gumbel_noise(system.mdn.k(), static_cast<Eigen::Index>(nb), rng);
    const Matrix u = mdn::standard_normal(system.d(), static_cast<Eigen::Index>(nb), rng);
    const auto ce = ce_loss_and_grad(system, labels, g, u, cfg.tau);
    std::vector<neural::ParamBlock> enc_blocks;
    neural::append_blocks(enc_blocks, system.encoder.net(), ce.encoder);
    enc_opt.step(enc_blocks);
    std::vector<neural::ParamBlock> dec_blocks;
    neural::append_blocks(dec_blocks, system.decoder.net(), ce.decoder);
    dec_opt.step(dec_blocks);
    loss_sum += ce.loss * static_cast<double>(nb);
    seen += nb;
  }
  return seen == 0 ? 0.0 : loss_sum / static_cast<double>(seen);
}

/// Alternating training: fit the MDN on the initial constellation, then
/// n_ae times {one encoder/decoder epoch with the MDN frozen, fresh channel
/// data under the new constellation, n_ce MDN epochs}.
inline TrainingCurve train_autoencoder(AutoencoderSystem& system, const ChannelSampler& channel, const TrainConfig& cfg,
                                       Rng& rng) {
  system.validate();
  require(static_cast<bool>(channel), "train_autoencoder: channel simulator unavailable");
  require(cfg.n_ae >= 0 && cfg.n_ce >= 0 && cfg.mdn_samples >= 1, "train_autoencoder: invalid configuration");
  TrainingCurve curve;
  auto mdn_opts = cfg.mdn_options;
  mdn_opts.epochs = cfg.n_ce;
  {
    const auto pairs = channel_round(system.encoder, channel, cfg.mdn_samples, rng);
    curve.mdn_loss.push_back(mdn::train_mdn(system.mdn, pairs, mdn_opts, rng).final_loss);
  }
  const neural::ExponentialSchedule schedule{cfg.lr_start, cfg.lr_end, std::max(1, cfg.n_ae - 1)};
  auto enc_opt = neural::Optimizer::sgd_nesterov(cfg.lr_start, cfg.momentum);
  auto dec_opt = neural::Optimizer::sgd_nesterov(cfg.lr_start, cfg.momentum);
  for (int epoch = 0; epoch < cfg.n_ae; ++epoch) {
    const double lr = schedule.at(epoch);
    enc_opt.set_learning_rate(lr);
    dec_opt.set_learning_rate(lr);
    curve.learning_rate.push_back(lr);
    curve.ce_loss.push_back(autoencoder_epoch(system, enc_opt, dec_opt, cfg, rng));
    const auto pairs = channel_round(system.encoder, channel, cfg.mdn_samples, rng);
    curve.mdn_loss.push_back(mdn::train_mdn(system.mdn, pairs, mdn_opts, rng).final_loss);
  }
  return curve;
}

/// Supervised decoder training with Adam on fixed (x, y) data.
inline double train_decoder(Decoder& decoder, const Matrix& x, std::span<const int> labels, int epochs,
                            double learning_rate, int batch_size, Rng& rng) {
  require(x.cols() == static_cast<Eigen::Index>(labels.size()) && x.cols() > 0, "train_decoder: data shape mismatch");
  auto opt = neural::Optimizer::adam(learning_rate);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(std::max(1, batch_size));
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      const std::size_t nb = std::min(batch, order.size() - s);
      Matrix xb(x.rows(), static_cast<Eigen::Index>(nb));
      std::vector<int> yb(nb);
      for (std::size_t t = 0; t < nb; ++t) {
        xb.col(static_cast<Eigen::Index>(t)) = x.col(static_cast<Eigen::Index>(order[s + t]));
        yb[t] = labels[order[s + t]];
      }
      neural::ForwardCache cache;
      const Matrix p = decoder.net().forward(xb, cache);
      Matrix gpre;
      sum += neural::softmax_cross_entropy(p, yb, &gpre) * static_cast<double>(nb);
      const auto g = decoder.net().backward(cache, gpre, neural::GradientAt::pre_activation);
      std::vector<neural::ParamBlock> blocks;
      neural::append_blocks(blocks, decoder.net(), g);
      opt.step(blocks);
    }
    last = sum / static_cast<double>(order.size());
  }
  return last;
}

/// x (d x B) -> class posteriors (m x B).
using Classifier = std::function<Matrix(const Matrix& x)>;

inline Classifier as_classifier(const Decoder& decoder) {
  return [decoder](const Matrix& x) { return decoder.probabilities(x); };
}

struct SerReport {
  double ser = 0.0;
  long long n = 0;
  long long errors = 0;
  std::vector<std::vector<long long>> confusion;  // [true][predicted]
};

/// SER of a classifier on given labeled outputs.
inline SerReport evaluate_ser(const Classifier& classify, const Matrix& x, std::span<const int> labels, int m,
                              Eigen::Index chunk = 4096) {
  require(x.cols() == static_cast<Eigen::Index>(labels.size()) && x.cols() >= 1, "evaluate_ser: need n_test >= 1");
  SerReport rep;
  rep.confusion.assign(static_cast<std::size_t>(m), std::vector<long long>(static_cast<std::size_t>(m), 0));
  for (Eigen::Index s = 0; s < x.cols(); s += chunk) {
    const Eigen::Index nb = std::min(chunk, x.cols() - s);
    const Matrix p = classify(x.middleCols(s, nb));
    require(p.rows() == m && p.cols() == nb, "evaluate_ser: classifier output shape mismatch");
    for (Eigen::Index c = 0; c < nb; ++c) {
      const int y = labels[static_cast<std::size_t>(s + c)];
      const int y_hat = static_cast<int>(argmax(Vector(p.col(c))));
      ++rep.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(y_hat)];
      if (y_hat != y) ++rep.errors;
    }
  }
  rep.n = x.cols();
  rep.ser = static_cast<double>(rep.errors) / static_cast<double>(rep.n);
  return rep;
}

/// Monte-Carlo SER over n_test uniformly drawn messages sent through `channel`.
inline SerReport evaluate_ser(const Classifier& classify, const Encoder& encoder, const ChannelSampler& channel,
                              int n_test, Rng& rng) {
  require(n_test >= 1, "evaluate_ser: n_test must be >= 1");
  const auto labels = uniform_labels(encoder.m(), static_cast<std::size_t>(n_test), rng);
  const Matrix x = channel(symbols_for(encoder.symbols(), labels), labels, rng);
  return evaluate_ser(classify, x, labels, encoder.m());
}

}  // namespace mdnadapt::autoenc

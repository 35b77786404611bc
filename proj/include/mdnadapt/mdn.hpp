#pragma once

// Mixture density network channel model: z -> {alpha_i(z), mu_i(z), sigma^2_i(z)}
// with diagonal covariances, trained by conditional log-likelihood, with hard
// and Gumbel-softmax (differentiable) sampling.

#include "mdnadapt/common.hpp"
#include "mdnadapt/gmm.hpp"
#include "mdnadapt/neural.hpp"

#include <numeric>
#include <vector>

namespace mdnadapt::mdn {

using neural::Activation;
using neural::DenseLayer;
using neural::FeedForwardNet;
using neural::LayerGradient;
using neural::NetGradient;

/// Temperature of the Gumbel-softmax relaxation used during training.
inline constexpr double kDefaultTemperature = 0.01;

/// Channel input/output pairs, one sample per column.
struct ChannelPairs {
  Matrix z;
  Matrix x;

  Eigen::Index size() const { return z.cols(); }
};

class MdnModel {
 public:
  /// Mixture outputs for a batch; row i*d + j of means/variances is
  /// component i, dimension j.
  struct Outputs {
    Matrix means;
    Matrix variances;
    Matrix logits;
  };

  struct Cache {
    neural::ForwardCache trunk;
    Matrix hidden;
    Matrix variance_pre;
    Outputs out;
  };

  struct Gradient {
    NetGradient trunk;
    LayerGradient means;
    LayerGradient variances;
    LayerGradient logits;
    Matrix input;
  };

  MdnModel() = default;

  static MdnModel create(int d, int k, int hidden, Rng& rng) {
    require(d >= 1 && k >= 1 && hidden >= 1, "mdn: d, k and hidden size must be positive");
    MdnModel m;
    const std::vector<Eigen::Index> dims{d, hidden, hidden};
    const std::vector<Activation> acts{Activation::relu, Activation::relu};
    m.trunk_ = FeedForwardNet::glorot(dims, acts, rng);
    m.means_ = DenseLayer::glorot(hidden, k * d, Activation::linear, rng);
    m.variances_ = DenseLayer::glorot(hidden, k * d, Activation::elu_plus_one, rng);
    m.logits_ = DenseLayer::glorot(hidden, k, Activation::linear, rng);
    m.d_ = d;
    m.k_ = k;
    m.hidden_ = hidden;
    return m;
  }

  static MdnModel from_parts(FeedForwardNet trunk, DenseLayer means, DenseLayer variances, DenseLayer logits) {
    MdnModel m;
    m.d_ = static_cast<int>(trunk.input_dim());
    m.hidden_ = static_cast<int>(trunk.output_dim());
    m.k_ = static_cast<int>(logits.out());
    m.trunk_ = std::move(trunk);
    m.means_ = std::move(means);
    m.variances_ = std::move(variances);
    m.logits_ = std::move(logits);
    m.validate();
    return m;
  }

  void validate() const {
    trunk_.validate();
    for (const DenseLayer* h : {&means_, &variances_, &logits_}) {
      require(h->in() == hidden_, "mdn: head input does not match trunk output");
      require(h->weights.allFinite() && h->biases.allFinite(), "mdn: non-finite head parameter");
    }
    require(means_.out() == k_ * d_ && variances_.out() == k_ * d_ && logits_.out() == k_, "mdn: head sizes inconsistent with k, d");
    require(variances_.activation == Activation::elu_plus_one, "mdn: variance head must use elu_plus_one");
  }

  int d() const { return d_; }
  int k() const { return k_; }
  int hidden() const { return hidden_; }
  const FeedForwardNet& trunk() const { return trunk_; }
  FeedForwardNet& trunk() { return trunk_; }
  const DenseLayer& means_head() const { return means_; }
  const DenseLayer& variances_head() const { return variances_; }
  const DenseLayer& logits_head() const { return logits_; }
  DenseLayer& means_head() { return means_; }
  DenseLayer& variances_head() { return variances_; }
  DenseLayer& logits_head() { return logits_; }

  std::size_t parameter_count() const {
    std::size_t n = trunk_.parameter_count();
    for (const DenseLayer* h : {&means_, &variances_, &logits_}) n += static_cast<std::size_t>(h->weights.size() + h->biases.size());
    return n;
  }

  Outputs forward(const Matrix& z, Cache* cache = nullptr) const {
    require(z.rows() == d_, "mdn forward: input dimension mismatch");
    Outputs out;
    Matrix hidden;
    if (cache != nullptr) {
      hidden = trunk_.forward(z, cache->trunk);
    } else {
      hidden = trunk_.predict(z);
    }
    auto head = [&](const DenseLayer& l, Matrix* pre_out) {
      Matrix pre = l.weights * hidden;
      pre.colwise() += l.biases;
      Matrix act = neural::activate(l.activation, pre);
      if (pre_out != nullptr) *pre_out = std::move(pre);
      return act;
    };
    out.means = head(means_, nullptr);
    Matrix var_pre;
    out.variances = head(variances_, &var_pre);
    out.logits = head(logits_, nullptr);
    if (cache != nullptr) {
      cache->hidden = std::move(hidden);
      cache->variance_pre = std::move(var_pre);
      cache->out = out;
    }
    return out;
  }

  /// Backpropagates gradients given at the three head outputs.
  Gradient backward(const Cache& cache, const Matrix& d_means, const Matrix& d_variances, const Matrix& d_logits,
                    bool want_params = true) const {
    Gradient g;
    const Matrix dvar_pre = neural::activation_backward(Activation::elu_plus_one, cache.variance_pre,
                                                        cache.out.variances, d_variances);
    Matrix dh = means_.weights.transpose() * d_means;
    dh.noalias() += variances_.weights.transpose() * dvar_pre;
    dh.noalias() += logits_.weights.transpose() * d_logits;
    if (want_params) {
      g.means = {d_means * cache.hidden.transpose(), d_means.rowwise().sum()};
      g.variances = {dvar_pre * cache.hidden.transpose(), dvar_pre.rowwise().sum()};
      g.logits = {d_logits * cache.hidden.transpose(), d_logits.rowwise().sum()};
    }
    g.trunk = trunk_.backward(cache.trunk, dh, neural::GradientAt::output, want_params);
    g.input = g.trunk.input;
    return g;
  }

  /// Parameter/gradient views for an optimizer; heads only when `heads_only`.
  std::vector<neural::ParamBlock> blocks(const Gradient& g, bool heads_only = false) {
    std::vector<neural::ParamBlock> out;
    if (!heads_only) neural::append_blocks(out, trunk_, g.trunk);
    neural::append_layer_block(out, means_, g.means);
    neural::append_layer_block(out, variances_, g.variances);
    neural::append_layer_block(out, logits_, g.logits);
    return out;
  }

  bool operator==(const MdnModel&) const = default;

 private:
  FeedForwardNet trunk_;
  DenseLayer means_;
  DenseLayer variances_;
  DenseLayer logits_;
  int d_ = 0;
  int k_ = 0;
  int hidden_ = 0;
};

inline gmm::Components components_from_outputs(const MdnModel::Outputs& out, Eigen::Index col, int k, int d) {
  gmm::Components comps;
  comps.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    gmm::GaussianComponent c;
    c.prior_logit = out.logits(i, col);
    c.mean = out.means.col(col).segment(i * d, d);
    c.cov = gmm::Covariance::diagonal(out.variances.col(col).segment(i * d, d));
    comps.push_back(std::move(c));
  }
  return comps;
}

/// phi(z): the k diagonal Gaussian components predicted at z.
inline gmm::Components predict_params(const MdnModel& model, const Vector& z) {
  require(z.size() == model.d() && z.allFinite(), "predict_params: invalid input");
  return components_from_outputs(model.forward(Matrix(z)), 0, model.k(), model.d());
}

/// The per-symbol mixtures predicted at every constellation point.
inline gmm::ConditionalMixture predict_mixture(const MdnModel& model, const gmm::SymbolConstellation& constellation) {
  Matrix z(model.d(), constellation.m());
  for (int y = 0; y < constellation.m(); ++y) z.col(y) = constellation.symbols[static_cast<std::size_t>(y)];
  const auto out = model.forward(z);
  gmm::ConditionalMixture mix;
  for (int y = 0; y < constellation.m(); ++y) mix.per_symbol.push_back(components_from_outputs(out, y, model.k(), model.d()));
  return mix;
}

struct LossAndGradient {
  double loss = 0.0;
  MdnModel::Gradient grad;
};

/// Distinct columns of z plus, for every input column, the index of its
/// distinct representative. Lets batched code run the network once per
/// distinct symbol.
struct UniqueColumns {
  Matrix values;
  std::vector<int> index;
};

inline UniqueColumns unique_columns(const Matrix& z) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(z.cols()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      if (z(r, a) != z(r, b)) return z(r, a) < z(r, b);
    }
    return a < b;
  };
  std::sort(order.begin(), order.end(), less);
  UniqueColumns u;
  u.index.assign(order.size(), 0);
  std::vector<Eigen::Index> reps;
  for (std::size_t t = 0; t < order.size(); ++t) {
    const bool same = t > 0 && z.col(order[t]) == z.col(reps.back());
    if (!same) reps.push_back(order[t]);
    u.index[static_cast<std::size_t>(order[t])] = static_cast<int>(reps.size() - 1);
  }
  u.values = Matrix(z.rows(), static_cast<Eigen::Index>(reps.size()));
  for (std::size_t r = 0; r < reps.size(); ++r) u.values.col(static_cast<Eigen::Index>(r)) = z.col(reps[r]);
  return u;
}

/// Per-sample log P(x | z) under the model, batched.
inline Vector conditional_log_likelihood(const MdnModel& model, const Matrix& z, const Matrix& x) {
  require(z.cols() == x.cols() && x.rows() == model.d() && z.rows() == model.d(), "cll: batch shape mismatch");
  const auto uniq = unique_columns(z);
  const auto out = model.forward(uniq.values);
  const int k = model.k();
  const int d = model.d();
  std::vector<Vector> logw;
  for (Eigen::Index c = 0; c < uniq.values.cols(); ++c) logw.push_back(log_softmax(Vector(out.logits.col(c))));
  Vector ll(z.cols());
  std::vector<double> terms(static_cast<std::size_t>(k));
  for (Eigen::Index n = 0; n < z.cols(); ++n) {
    const int c = uniq.index[static_cast<std::size_t>(n)];
    for (int i = 0; i < k; ++i) {
      double quad = 0.0;
      double logdet = 0.0;
      for (int j = 0; j < d; ++j) {
        const double v = out.variances(i * d + j, c);
        const double r = x(j, n) - out.means(i * d + j, c);
        quad += r * r / v;
        logdet += std::log(v);
      }
      terms[static_cast<std::size_t>(i)] = logw[static_cast<std::size_t>(c)][i] - 0.5 * (d * kLog2Pi + logdet + quad);
    }
    ll[n] = log_sum_exp(terms);
  }
  return ll;
}

/// Mean negative conditional log-likelihood and its exact gradient.
/// Repeated inputs share one network evaluation; grad.input is therefore
/// indexed by distinct input, not by batch column.
inline LossAndGradient cll_loss_and_grad(const MdnModel& model, const Matrix& z, const Matrix& x, bool want_params = true) {
  require(z.cols() > 0, "cll_loss_and_grad: empty batch");
  require(z.cols() == x.cols() && x.rows() == model.d() && z.rows() == model.d(), "cll_loss_and_grad: batch shape mismatch");
  const auto uniq = unique_columns(z);
  MdnModel::Cache cache;
  const auto out = model.forward(uniq.values, &cache);
  const int k = model.k();
  const int d = model.d();
  const auto n_batch = z.cols();
  const auto n_unique = uniq.values.cols();
  const double inv_n = 1.0 / static_cast<double>(n_batch);
  Matrix d_means = Matrix::Zero(k * d, n_unique);
  Matrix d_vars = Matrix::Zero(k * d, n_unique);
  Matrix d_logits = Matrix::Zero(k, n_unique);
  std::vector<Vector> logw(static_cast<std::size_t>(n_unique));
  for (Eigen::Index c = 0; c < n_unique; ++c) logw[static_cast<std::size_t>(c)] = log_softmax(Vector(out.logits.col(c)));
  Vector terms(k);
  double loss = 0.0;
  for (Eigen::Index n = 0; n < n_batch; ++n) {
    const int c = uniq.index[static_cast<std::size_t>(n)];
    const Vector& lw = logw[static_cast<std::size_t>(c)];
    for (int i = 0; i < k; ++i) {
      double quad = 0.0;
      double logdet = 0.0;
      for (int j = 0; j < d; ++j) {
        const double v = out.variances(i * d + j, c);
        const double r = x(j, n) - out.means(i * d + j, c);
        quad += r * r / v;
        logdet += std::log(v);
      }
      terms[i] = lw[i] - 0.5 * (d * kLog2Pi + logdet + quad);
    }
    const double lse = log_sum_exp(terms);
    loss -= lse;
    for (int i = 0; i < k; ++i) {
      const double resp = std::exp(terms[i] - lse);
      d_logits(i, c) -= (resp - std::exp(lw[i])) * inv_n;
      for (int j = 0; j < d; ++j) {
        const double v = out.variances(i * d + j, c);
        const double r = x(j, n) - out.means(i * d + j, c);
        d_means(i * d + j, c) -= resp * r / v * inv_n;
        d_vars(i * d + j, c) -= resp * 0.5 * (r * r / (v * v) - 1.0 / v) * inv_n;
      }
    }
  }
  auto grad = model.backward(cache, d_means, d_vars, d_logits, want_params);
  return {loss * inv_n, std::move(grad)};
}

inline double cll_loss(const MdnModel& model, const ChannelPairs& data) {
  return -conditional_log_likelihood(model, data.z, data.x).mean();
}

struct TrainOptions {
  int epochs = 100;
  double learning_rate = 1e-3;
  int batch_size = 128;
  bool heads_only = false;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
  bool reverted = false;
};

inline ChannelPairs gather_columns(const ChannelPairs& data, std::span<const Eigen::Index> idx) {
  ChannelPairs b{Matrix(data.z.rows(), static_cast<Eigen::Index>(idx.size())),
                 Matrix(data.x.rows(), static_cast<Eigen::Index>(idx.size()))};
  for (std::size_t c = 0; c < idx.size(); ++c) {
    b.z.col(static_cast<Eigen::Index>(c)) = data.z.col(idx[c]);
    b.x.col(static_cast<Eigen::Index>(c)) = data.x.col(idx[c]);
  }
  return b;
}

/// Mini-batch Adam on the negative CLL. If the full-data loss ends above
/// where it started, the starting weights are restored.
inline TrainReport train_mdn(MdnModel& model, const ChannelPairs& data, const TrainOptions& opt, Rng& rng) {
  require(data.size() > 0, "train_mdn: empty dataset");
  require(data.z.rows() == model.d() && data.x.rows() == model.d() && data.x.cols() == data.z.cols(),
          "train_mdn: dataset shape mismatch");
  TrainReport report;
  report.initial_loss = cll_loss(model, data);
  report.final_loss = report.initial_loss;
  if (opt.epochs <= 0) return report;
  const MdnModel start = model;
  auto optimizer = neural::Optimizer::adam(opt.learning_rate);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto batch = static_cast<std::size_t>(std::max(1, opt.batch_size));
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      const std::size_t e = std::min(order.size(), s + batch);
      const auto b = gather_columns(data, std::span<const Eigen::Index>(order.data() + s, e - s));
      auto lg = cll_loss_and_grad(model, b.z, b.x);
      auto blocks = model.blocks(lg.grad, opt.heads_only);
      optimizer.step(blocks);
      epoch_loss += lg.loss * static_cast<double>(e - s);
      seen += e - s;
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }
  report.final_loss = cll_loss(model, data);
  if (!(report.final_loss <= report.initial_loss)) {
    model = start;
    report.final_loss = report.initial_loss;
    report.reverted = true;
  }
  return report;
}

/// Hard sampling: K ~ Cat(pi(z)), x ~ N(mu_K(z), Sigma_K(z)).
inline Vector sample_channel(const MdnModel& model, const Vector& z, Rng& rng) {
  return gmm::sample_mixture(predict_params(model, z), rng).x;
}

/// Batched hard sampling; one column per input symbol.
inline Matrix sample_channel_batch(const MdnModel& model, const Matrix& z, Rng& rng) {
  const auto uniq = unique_columns(z);
  const auto out = model.forward(uniq.values);
  const int d = model.d();
  std::vector<Vector> weights;
  for (Eigen::Index c = 0; c < uniq.values.cols(); ++c) weights.push_back(softmax(Vector(out.logits.col(c))));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(d, z.cols());
  for (Eigen::Index n = 0; n < z.cols(); ++n) {
    const int c = uniq.index[static_cast<std::size_t>(n)];
    const int i = gmm::sample_categorical(weights[static_cast<std::size_t>(c)], rng);
    for (int j = 0; j < d; ++j) {
      x(j, n) = out.means(i * d + j, c) + std::sqrt(out.variances(i * d + j, c)) * normal(rng);
    }
  }
  return x;
}

/// Standard Gumbel draws -log(-log U), with U clamped away from 0 and 1.
inline Matrix gumbel_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Matrix g(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double u = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
      g(r, c) = -std::log(-std::log(u));
    }
  return g;
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix u(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) u(r, c) = normal(rng);
  return u;
}

/// Relaxed channel draw x = sum_i S_i (sigma_i * u + mu_i), S = softmax((G + alpha) / tau).
/// Sample n uses the network outputs of input column `column[n]`. Keeps what
/// backward needs.
struct RelaxedSample {
  Matrix x;
  Matrix selector;  // k x B
  Matrix u;
  double tau = kDefaultTemperature;
  std::vector<int> column;
  MdnModel::Cache cache;
};

inline RelaxedSample sample_channel_differentiable(const MdnModel& model, const Matrix& inputs, std::span<const int> column,
                                                   const Matrix& gumbel, const Matrix& u, double tau = kDefaultTemperature) {
  require(tau > 0.0, "differentiable sampler: temperature must be positive");
  const auto nb = static_cast<Eigen::Index>(column.size());
  require(gumbel.rows() == model.k() && gumbel.cols() == nb, "differentiable sampler: gumbel shape mismatch");
  require(u.rows() == model.d() && u.cols() == nb, "differentiable sampler: noise shape mismatch");
  RelaxedSample s;
  s.u = u;
  s.tau = tau;
  s.column.assign(column.begin(), column.end());
  const auto out = model.forward(inputs, &s.cache);
  const int k = model.k();
  const int d = model.d();
  const Matrix sd = out.variances.cwiseSqrt();
  s.selector = Matrix(k, nb);
  s.x = Matrix::Zero(d, nb);
  for (Eigen::Index n = 0; n < nb; ++n) {
    const int c = column[static_cast<std::size_t>(n)];
    require(c >= 0 && c < inputs.cols(), "differentiable sampler: column index out of range");
    const Vector scaled = (gumbel.col(n) + out.logits.col(c)) / tau;
    s.selector.col(n) = softmax(scaled);
    for (int i = 0; i < k; ++i) {
      const double w = s.selector(i, n);
      for (int j = 0; j < d; ++j) s.x(j, n) += w * (sd(i * d + j, c) * u(j, n) + out.means(i * d + j, c));
    }
  }
  return s;
}

inline RelaxedSample sample_channel_differentiable(const MdnModel& model, const Matrix& z, const Matrix& gumbel,
                                                   const Matrix& u, double tau = kDefaultTemperature) {
  std::vector<int> column(static_cast<std::size_t>(z.cols()));
  std::iota(column.begin(), column.end(), 0);
  return sample_channel_differentiable(model, z, column, gumbel, u, tau);
}

/// Gradients of sum <grad_x, x> through the relaxed sampler, down to the
/// model's head outputs, weights (if requested) and inputs (one column per
/// network input).
inline MdnModel::Gradient differentiable_backward(const MdnModel& model, const RelaxedSample& s, const Matrix& grad_x,
                                                  bool want_params = false) {
  const auto& out = s.cache.out;
  const int k = model.k();
  const int d = model.d();
  const auto n_inputs = out.logits.cols();
  const Matrix sd = out.variances.cwiseSqrt();
  Matrix d_means = Matrix::Zero(k * d, n_inputs);
  Matrix d_vars = Matrix::Zero(k * d, n_inputs);
  Matrix d_logits = Matrix::Zero(k, n_inputs);
  Vector d_sel(k);
  for (Eigen::Index n = 0; n < grad_x.cols(); ++n) {
    const int c = s.column[static_cast<std::size_t>(n)];
    for (int i = 0; i < k; ++i) {
      const double w = s.selector(i, n);
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        const double sdv = sd(i * d + j, c);
        const double g = grad_x(j, n);
        d_means(i * d + j, c) += w * g;
        d_vars(i * d + j, c) += w * g * s.u(j, n) / (2.0 * sdv);
        acc += g * (sdv * s.u(j, n) + out.means(i * d + j, c));
      }
      d_sel[i] = acc;
    }
    const double mean_sel = s.selector.col(n).dot(d_sel);
    for (int i = 0; i < k; ++i) d_logits(i, c) += s.selector(i, n) * (d_sel[i] - mean_sel) / s.tau;
  }
  return model.backward(s.cache, d_means, d_vars, d_logits, want_params);
}

/// Single-symbol form of the relaxed sampler.
inline Vector sample_channel_differentiable(const MdnModel& model, const Vector& z, const Vector& gumbel, const Vector& u,
                                            double tau = kDefaultTemperature) {
  return sample_channel_differentiable(model, Matrix(z), Matrix(gumbel), Matrix(u), tau).x.col(0);
}

}  // namespace mdnadapt::mdn

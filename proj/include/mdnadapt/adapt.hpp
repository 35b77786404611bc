#pragma once

// Few-shot adaptation of a source channel mixture to a target domain through
// per-component affine parameters psi, chosen by BFGS on a KL-regularized
// likelihood objective over a grid of regularization strengths, plus the
// decoder-side feature compensation built from the chosen psi.

#include "mdnadapt/autoenc.hpp"
#include "mdnadapt/bfgs.hpp"
#include "mdnadapt/common.hpp"
#include "mdnadapt/gmm.hpp"

#include <future>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mdnadapt::adapt {

using gmm::AdaptationParams;
using gmm::ConditionalMixture;
using gmm::CovarianceTransform;
using gmm::SymbolConstellation;

enum class Mode { discriminative, generative };

inline std::string to_string(Mode m) { return m == Mode::discriminative ? "discriminative" : "generative"; }

inline Mode mode_from_string(const std::string& s) {
  if (s == "discriminative") return Mode::discriminative;
  if (s == "generative") return Mode::generative;
  throw Error("unknown adaptation mode '" + s + "'");
}

inline std::vector<double> default_lambda_grid() { return {1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0}; }

struct AdaptationConfig {
  std::vector<double> lambda_grid = default_lambda_grid();
  int bfgs_max_iters = 200;
  double bfgs_grad_tol = 1e-6;
  Mode mode = Mode::discriminative;
  CovarianceTransform shape = CovarianceTransform::diagonal;
  /// Grid points evaluated concurrently (1 = sequential).
  int workers = 1;

  void validate() const {
    require(!lambda_grid.empty(), "adaptation config: lambda grid is empty");
    for (double l : lambda_grid) require(l >= 0.0 && std::isfinite(l), "adaptation config: lambda must be finite and >= 0");
    require(bfgs_max_iters >= 0 && bfgs_grad_tol > 0.0, "adaptation config: invalid BFGS settings");
    require(workers >= 1, "adaptation config: workers must be >= 1");
  }
};

/// Labeled target-domain channel outputs; x is d x N, label n indexes the
/// constellation (z_n = constellation[labels[n]]).
struct TargetData {
  Matrix x;
  std::vector<int> labels;

  Eigen::Index size() const { return x.cols(); }

  void validate(int m, Eigen::Index d) const {
    require(x.cols() >= 1, "target data: empty");
    require(x.rows() == d, "target data: dimension mismatch");
    require(static_cast<Eigen::Index>(labels.size()) == x.cols(), "target data: label count mismatch");
    require(x.allFinite(), "target data: non-finite sample");
    for (int y : labels) require(y >= 0 && y < m, "target data: label out of range");
  }
};

struct ObjectiveValue {
  double value = 0.0;
  double data_term = 0.0;
  double kl = 0.0;
  Vector gradient;
};

/// Evaluates J(psi) = data term + lambda * KL for a fixed source mixture and
/// target dataset, with the exact gradient in the AdaptationParams vector
/// layout.
class Objective {
 public:
  Objective(ConditionalMixture source, SymbolConstellation constellation, TargetData data,
            CovarianceTransform shape = CovarianceTransform::diagonal)
      : source_(std::move(source)), constellation_(std::move(constellation)), data_(std::move(data)), shape_(shape) {
    source_.validate();
    constellation_.validate();
    require(constellation_.m() == source_.m(), "objective: symbol count mismatch");
    data_.validate(source_.m(), source_.d());
    m_ = source_.m();
    k_ = source_.k();
    d_ = source_.d();
    log_pz_.resize(m_);
    for (int y = 0; y < m_; ++y) log_pz_[y] = std::log(constellation_.priors[y]);
    source_log_w_.resize(static_cast<std::size_t>(m_));
    for (int y = 0; y < m_; ++y) source_log_w_[static_cast<std::size_t>(y)] = gmm::mixture_log_weights(source_[y]);
  }

  int m() const { return m_; }
  int k() const { return k_; }
  Eigen::Index d() const { return d_; }
  CovarianceTransform shape() const { return shape_; }
  const ConditionalMixture& source() const { return source_; }
  const SymbolConstellation& constellation() const { return constellation_; }
  const TargetData& data() const { return data_; }

  ObjectiveValue evaluate(const AdaptationParams& psi, double lambda, Mode mode, bool want_gradient = true) const {
    require(psi.k() == k_ && psi.d() == d_, "objective: psi shape mismatch");
    const ConditionalMixture target = gmm::apply_param_transform(source_, psi);
    const gmm::PreparedMixture prepared(target, constellation_);
    const auto n_data = data_.size();
    const double inv_n = 1.0 / static_cast<double>(n_data);
    const int mk = m_ * k_;

    // Per-(z, i) sufficient statistics of the data-term weights.
    Vector w_sum = Vector::Zero(mk);
    Matrix s1 = Matrix::Zero(d_, mk);
    std::vector<Matrix> s2(static_cast<std::size_t>(want_gradient ? mk : 0), Matrix::Zero(d_, d_));

    Vector lj(mk);
    Vector w(mk);
    double data_term = 0.0;
    for (Eigen::Index n = 0; n < n_data; ++n) {
      const Vector xn = data_.x.col(n);
      const int zn = data_.labels[static_cast<std::size_t>(n)];
      prepared.log_joint(xn.data(), lj.data());
      const double lse_true = log_sum_exp(std::span<const double>(lj.data() + zn * k_, static_cast<std::size_t>(k_)));
      if (mode == Mode::discriminative) {
        const double lse_all = log_sum_exp(lj);
        data_term -= (lse_true - lse_all) * inv_n;
        if (!want_gradient) continue;
        for (int j = 0; j < mk; ++j) w[j] = std::exp(lj[j] - lse_all) * inv_n;
        for (int i = 0; i < k_; ++i) w[zn * k_ + i] -= std::exp(lj[zn * k_ + i] - lse_true) * inv_n;
      } else {
        data_term -= (lse_true - log_pz_[zn]) * inv_n;
        if (!want_gradient) continue;
        w.setZero();
        for (int i = 0; i < k_; ++i) w[zn * k_ + i] = -std::exp(lj[zn * k_ + i] - lse_true) * inv_n;
      }
      for (int j = 0; j < mk; ++j) {
        if (w[j] == 0.0) continue;
        w_sum[j] += w[j];
        s1.col(j).noalias() += w[j] * xn;
        s2[static_cast<std::size_t>(j)].noalias() += w[j] * (xn * xn.transpose());
      }
    }

    ObjectiveValue out;
    out.data_term = data_term;
    out.kl = lambda != 0.0 || want_gradient ? kl_value(target) : 0.0;
    out.value = data_term + lambda * out.kl;
    if (!std::isfinite(out.value)) out.value = std::numeric_limits<double>::infinity();
    if (!want_gradient) return out;

    AdaptationParams grad = zero_like(psi);
    for (int y = 0; y < m_; ++y) {
      const Vector pi_hat = gmm::mixture_weights(target[y]);
      const Vector& logw_src = source_log_w_[static_cast<std::size_t>(y)];
      const double pz = constellation_.priors[y];
      double w_row = 0.0;
      for (int i = 0; i < k_; ++i) w_row += w_sum[y * k_ + i];
      for (int i = 0; i < k_; ++i) {
        const auto& src = source_[y][static_cast<std::size_t>(i)];
        const auto& tgt = target[y][static_cast<std::size_t>(i)];
        const double pi_src = std::exp(logw_src[i]);
        // Prior logits: data term plus KL term, then chain to beta/gamma.
        double g_alpha = w_sum[y * k_ + i] - pi_hat[i] * w_row;
        g_alpha += lambda * pz * (pi_hat[i] - pi_src);
        grad[i].beta += g_alpha * src.prior_logit;
        grad[i].gamma += g_alpha;

        const Matrix sigma_inv = tgt.cov.inverse();
        const Vector& mu_hat = tgt.mean;
        const double wj = w_sum[y * k_ + i];
        // Data term: sum_n w_n d log N(x_n) / d(mu_hat, Sigma_hat).
        const Vector r1 = s1.col(y * k_ + i) - wj * mu_hat;
        Vector g_mu = sigma_inv * r1;
        const Matrix scatter = s2[static_cast<std::size_t>(y * k_ + i)] - s1.col(y * k_ + i) * mu_hat.transpose() -
                               mu_hat * s1.col(y * k_ + i).transpose() + wj * (mu_hat * mu_hat.transpose());
        Matrix g_sigma = 0.5 * (sigma_inv * scatter * sigma_inv - wj * sigma_inv);
        // KL term.
        const double kw = lambda * pz * pi_src;
        if (kw != 0.0) {
          const Vector delta = mu_hat - src.mean;
          const Vector h = sigma_inv * delta;
          g_mu += kw * h;
          g_sigma += kw * 0.5 * (sigma_inv - sigma_inv * src.cov.matrix() * sigma_inv - h * h.transpose());
        }
        grad[i].A += g_mu * src.mean.transpose();
        grad[i].b += g_mu;
        const Matrix g_c = 2.0 * g_sigma * psi[i].C * src.cov.matrix();
        if (shape_ == CovarianceTransform::diagonal) {
          grad[i].C += Matrix(g_c.diagonal().asDiagonal());
        } else {
          grad[i].C += g_c;
        }
      }
    }
    out.gradient = grad.to_vector();
    return out;
  }

  ObjectiveValue evaluate(const Vector& v, double lambda, Mode mode, bool want_gradient = true) const {
    return evaluate(AdaptationParams::from_vector(v, k_, d_, shape_), lambda, mode, want_gradient);
  }

  /// Closed-form corresponding-component KL between the source and `target`.
  double kl_value(const ConditionalMixture& target) const {
    double total = 0.0;
    for (int y = 0; y < m_; ++y) {
      const double pz = constellation_.priors[y];
      if (pz == 0.0) continue;
      const Vector& lw = source_log_w_[static_cast<std::size_t>(y)];
      const Vector lw_hat = gmm::mixture_log_weights(target[y]);
      double term = 0.0;
      for (int i = 0; i < k_; ++i) {
        const double pi = std::exp(lw[i]);
        if (pi == 0.0) continue;
        term += pi * (lw[i] - lw_hat[i]);
        term += pi * gmm::kl_gaussians(source_[y][static_cast<std::size_t>(i)], target[y][static_cast<std::size_t>(i)]);
      }
      total += pz * term;
    }
    return std::max(total, 0.0);
  }

 private:
  static AdaptationParams zero_like(const AdaptationParams& psi) {
    AdaptationParams g = AdaptationParams::identity(psi.k(), psi.d(), psi.shape());
    for (int i = 0; i < psi.k(); ++i) {
      g[i].A.setZero();
      g[i].b.setZero();
      g[i].C.setZero();
      g[i].beta = 0.0;
      g[i].gamma = 0.0;
    }
    return g;
  }

  ConditionalMixture source_;
  SymbolConstellation constellation_;
  TargetData data_;
  CovarianceTransform shape_;
  int m_ = 0;
  int k_ = 0;
  Eigen::Index d_ = 0;
  Vector log_pz_;
  std::vector<Vector> source_log_w_;
};

/// J_PLL(psi) = -(1/N) sum log P_hat(z_n | x_n) + lambda * KL.
inline ObjectiveValue objective_pll(const AdaptationParams& psi, double lambda, const TargetData& data,
                                    const ConditionalMixture& source, const SymbolConstellation& constellation) {
  return Objective(source, constellation, data, psi.shape()).evaluate(psi, lambda, Mode::discriminative);
}

/// J_CLL(psi) = -(1/N) sum log P_hat(x_n | z_n) + lambda * KL.
inline ObjectiveValue objective_cll(const AdaptationParams& psi, double lambda, const TargetData& data,
                                    const ConditionalMixture& source, const SymbolConstellation& constellation) {
  return Objective(source, constellation, data, psi.shape()).evaluate(psi, lambda, Mode::generative);
}

/// Decoder applied after the expected inverse-affine compensation.
class AdaptedDecoder {
 public:
  AdaptedDecoder(autoenc::Decoder decoder, const ConditionalMixture& source, const AdaptationParams& psi,
                 const SymbolConstellation& constellation)
      : decoder_(std::move(decoder)), compensator_(source, psi, constellation) {
    require(decoder_.m() == source.m() && decoder_.d() == source.d(), "adapted decoder: shape mismatch");
  }

  Matrix compensate(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out.col(c) = compensator_(x.col(c));
    return out;
  }

  Matrix probabilities(const Matrix& x) const { return decoder_.probabilities(compensate(x)); }

  autoenc::Decision decode(const Vector& x) const { return decoder_.decode(compensator_(x)); }

  const autoenc::Decoder& decoder() const { return decoder_; }

 private:
  autoenc::Decoder decoder_;
  gmm::FeatureCompensator compensator_;
};

inline autoenc::Classifier as_classifier(std::shared_ptr<const AdaptedDecoder> d) {
  return [d](const Matrix& x) { return d->probabilities(x); };
}

/// Lower is better. Discriminative: -(1/N) sum log P_dec(y_n | g^{-1}(x_n)).
/// Generative: -(1/N) sum log P_source(g^{-1}(x_n) | z_n).
inline double validation_metric(const AdaptationParams& psi, const TargetData& data, const ConditionalMixture& source,
                                const SymbolConstellation& constellation, Mode mode,
                                const autoenc::Decoder* decoder = nullptr) {
  data.validate(source.m(), source.d());
  const gmm::FeatureCompensator comp(source, psi, constellation);
  Matrix xc(data.x.rows(), data.x.cols());
  for (Eigen::Index n = 0; n < data.size(); ++n) xc.col(n) = comp(data.x.col(n));
  double total = 0.0;
  if (mode == Mode::discriminative) {
    require(decoder != nullptr, "validation metric: discriminative mode needs a decoder");
    const Matrix p = decoder->probabilities(xc);
    for (Eigen::Index n = 0; n < data.size(); ++n) {
      total -= std::log(std::max(p(data.labels[static_cast<std::size_t>(n)], n), std::numeric_limits<double>::min()));
    }
  } else {
    const gmm::PreparedMixture src(source, constellation);
    for (Eigen::Index n = 0; n < data.size(); ++n) {
      const Vector xn = xc.col(n);
      total -= src.conditional_log_pdf(xn.data(), data.labels[static_cast<std::size_t>(n)]);
    }
  }
  return total / static_cast<double>(data.size());
}

struct LambdaRecord {
  double lambda = 0.0;
  AdaptationParams psi;
  double objective = 0.0;
  double kl = 0.0;
  double metric = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  bool failed = false;
  std::string message;
  std::vector<double> trace;
};

struct AdaptationResult {
  AdaptationParams psi_star;
  double lambda_star = 0.0;
  std::size_t best_index = 0;
  std::vector<LambdaRecord> records;
  ConditionalMixture target;
  Mode mode = Mode::discriminative;
};

/// BFGS on one grid point, started from identity psi.
inline LambdaRecord run_lambda(const Objective& objective, double lambda, const AdaptationConfig& cfg,
                               const autoenc::Decoder* decoder) {
  LambdaRecord rec;
  rec.lambda = lambda;
  const auto psi0 = AdaptationParams::identity(objective.k(), objective.d(), cfg.shape);
  try {
    bfgs::Options opt;
    opt.max_iterations = cfg.bfgs_max_iters;
    opt.grad_tol = cfg.bfgs_grad_tol;
    const auto res = bfgs::minimize(
        [&](const Vector& v) {
          try {
            const auto ov = objective.evaluate(v, lambda, cfg.mode);
            return bfgs::ValueAndGradient{ov.value, ov.gradient};
          } catch (const Error&) {
            return bfgs::ValueAndGradient{std::numeric_limits<double>::infinity(), Vector::Zero(v.size())};
          }
        },
        psi0.to_vector(), opt);
    rec.psi = AdaptationParams::from_vector(res.x, objective.k(), objective.d(), cfg.shape);
    rec.psi.validate();
    rec.objective = res.value;
    rec.iterations = res.iterations;
    rec.converged = res.converged;
    rec.trace = res.trace;
    rec.kl = objective.kl_value(gmm::apply_param_transform(objective.source(), rec.psi));
    rec.metric = validation_metric(rec.psi, objective.data(), objective.source(), objective.constellation(), cfg.mode,
                                   decoder);
    if (!std::isfinite(rec.metric)) throw Error("validation metric is not finite");
  } catch (const Error& e) {
    rec.failed = true;
    rec.message = e.what();
    rec.psi = psi0;
    rec.metric = std::numeric_limits<double>::infinity();
  }
  return rec;
}

/// Runs every grid point and keeps the one with the smallest validation
/// metric (lowest index on ties). Network weights are never touched.
inline AdaptationResult adapt(const ConditionalMixture& source, const SymbolConstellation& constellation,
                              const TargetData& data, const AdaptationConfig& cfg,
                              const autoenc::Decoder* decoder = nullptr) {
  cfg.validate();
  if (cfg.mode == Mode::discriminative) require(decoder != nullptr, "adapt: discriminative mode needs the decoder");
  const Objective objective(source, constellation, data, cfg.shape);
  AdaptationResult result;
  result.mode = cfg.mode;
  result.records.resize(cfg.lambda_grid.size());
  if (cfg.workers <= 1) {
    for (std::size_t j = 0; j < cfg.lambda_grid.size(); ++j)
      result.records[j] = run_lambda(objective, cfg.lambda_grid[j], cfg, decoder);
  } else {
    std::size_t next = 0;
    while (next < cfg.lambda_grid.size()) {
      std::vector<std::future<LambdaRecord>> batch;
      const std::size_t start = next;
      for (; next < cfg.lambda_grid.size() && next - start < static_cast<std::size_t>(cfg.workers); ++next) {
        batch.push_back(std::async(std::launch::async, run_lambda, std::cref(objective), cfg.lambda_grid[next],
                                   std::cref(cfg), decoder));
      }
      for (std::size_t t = 0; t < batch.size(); ++t) result.records[start + t] = batch[t].get();
    }
  }
  bool any = false;
  for (std::size_t j = 0; j < result.records.size(); ++j) {
    const auto& r = result.records[j];
    if (r.failed) continue;
    if (!any || r.metric < result.records[result.best_index].metric) {
      result.best_index = j;
      any = true;
    }
  }
  if (!any) {
    std::string msg = "adapt: every lambda run failed";
    for (const auto& r : result.records) msg += "; lambda=" + std::to_string(r.lambda) + ": " + r.message;
    throw Error(msg);
  }
  result.psi_star = result.records[result.best_index].psi;
  result.lambda_star = result.records[result.best_index].lambda;
  result.target = gmm::apply_param_transform(source, result.psi_star);
  return result;
}

inline AdaptedDecoder adapted_decoder(const autoenc::Decoder& decoder, const AdaptationResult& result,
                                      const ConditionalMixture& source, const SymbolConstellation& constellation) {
  return AdaptedDecoder(decoder, source, result.psi_star, constellation);
}

}  // namespace mdnadapt::adapt

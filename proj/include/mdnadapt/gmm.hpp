#pragma once

// Gaussian-mixture mathematics for class-conditional channel models:
// densities, sampling, per-component affine transforms, the closed-form KL
// divergence between index-matched mixtures, and the posterior-weighted
// inverse feature transform used to compensate a decoder's input.

#include "mdnadapt/common.hpp"

#include <array>
#include <atomic>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace mdnadapt::gmm {

/// Lower bound applied to every variance produced by a transform.
inline constexpr double kVarianceFloor = 1e-8;
/// Smallest admissible magnitude of a diagonal entry of C.
inline constexpr double kScaleFloor = 1e-8;
/// Largest admissible condition number of a full C.
inline constexpr double kMaxConditionNumber = 1e12;

class Covariance {
 public:
  Covariance() = default;

  static Covariance diagonal(Vector variances) {
    require(variances.size() > 0, "covariance: empty variance vector");
    require(variances.allFinite(), "covariance: non-finite variance");
    require((variances.array() > 0.0).all(), "covariance: variances must be positive");
    Covariance c;
    c.diagonal_ = true;
    c.variances_ = std::move(variances);
    c.log_det_ = c.variances_.array().log().sum();
    return c;
  }

  static Covariance full(const Matrix& cov) {
    require(cov.rows() == cov.cols() && cov.rows() > 0, "covariance: matrix must be square");
    require(cov.allFinite(), "covariance: non-finite entry");
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + cov.cwiseAbs().maxCoeff()),
            "covariance: matrix must be symmetric");
    Matrix sym = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Matrix> llt(sym);
    require(llt.info() == Eigen::Success, "covariance: matrix is not positive definite");
    Covariance c;
    c.diagonal_ = false;
    c.variances_ = sym.diagonal();
    c.full_ = std::move(sym);
    c.chol_ = llt.matrixL();
    c.log_det_ = 2.0 * c.chol_.diagonal().array().log().sum();
    return c;
  }

  Eigen::Index dim() const { return variances_.size(); }
  bool is_diagonal() const { return diagonal_; }
  /// Diagonal of the covariance matrix (the variances).
  const Vector& variances() const { return variances_; }
  double log_det() const { return log_det_; }

  Matrix matrix() const { return diagonal_ ? Matrix(variances_.asDiagonal()) : full_; }

  Matrix cholesky_lower() const {
    return diagonal_ ? Matrix(variances_.cwiseSqrt().asDiagonal()) : chol_;
  }

  /// Sigma^{-1} v
  Vector solve(const Vector& v) const {
    if (diagonal_) return v.cwiseQuotient(variances_);
    return full_.llt().solve(v);
  }

  Matrix inverse() const {
    if (diagonal_) return Matrix(variances_.cwiseInverse().asDiagonal());
    return full_.llt().solve(Matrix::Identity(dim(), dim()));
  }

  /// L u, where Sigma = L L^T. Maps a standard normal draw onto N(0, Sigma).
  Vector scale(const Vector& u) const {
    if (diagonal_) return variances_.cwiseSqrt().cwiseProduct(u);
    return chol_ * u;
  }

  /// C Sigma C^T, floored. Stays diagonal when both C and Sigma are diagonal.
  Covariance transformed(const Matrix& c) const {
    require(c.rows() == dim() && c.cols() == dim(), "covariance transform: dimension mismatch");
    const bool c_diag = (c - Matrix(c.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
    if (diagonal_ && c_diag) {
      Vector v = c.diagonal().array().square() * variances_.array();
      return diagonal(v.cwiseMax(kVarianceFloor));
    }
    Matrix m = c * matrix() * c.transpose();
    m = 0.5 * (m + m.transpose());
    for (Eigen::Index j = 0; j < m.rows(); ++j) m(j, j) = std::max(m(j, j), kVarianceFloor);
    return full(m);
  }

  bool operator==(const Covariance& o) const {
    if (diagonal_ != o.diagonal_) return false;
    return diagonal_ ? variances_ == o.variances_ : full_ == o.full_;
  }

 private:
  bool diagonal_ = true;
  Vector variances_;
  Matrix full_;
  Matrix chol_;
  double log_det_ = 0.0;
};

struct GaussianComponent {
  double prior_logit = 0.0;
  Vector mean;
  Covariance cov;

  Eigen::Index dim() const { return mean.size(); }

  void validate() const {
    require(std::isfinite(prior_logit), "component: non-finite prior logit");
    require(mean.size() > 0 && mean.allFinite(), "component: invalid mean");
    require(mean.size() == cov.dim(), "component: mean/covariance dimension mismatch");
  }

  bool operator==(const GaussianComponent&) const = default;
};

using Components = std::vector<GaussianComponent>;

/// Component weights pi = softmax(alpha).
inline Vector mixture_weights(std::span<const GaussianComponent> comps) {
  Vector logits(static_cast<Eigen::Index>(comps.size()));
  for (std::size_t i = 0; i < comps.size(); ++i) logits[static_cast<Eigen::Index>(i)] = comps[i].prior_logit;
  return softmax(logits);
}

inline Vector mixture_log_weights(std::span<const GaussianComponent> comps) {
  Vector logits(static_cast<Eigen::Index>(comps.size()));
  for (std::size_t i = 0; i < comps.size(); ++i) logits[static_cast<Eigen::Index>(i)] = comps[i].prior_logit;
  return log_softmax(logits);
}

/// Gaussian prepared for repeated density evaluation without allocation.
class PreparedGaussian {
 public:
  PreparedGaussian() = default;
  explicit PreparedGaussian(const GaussianComponent& c)
      : mean_(c.mean), diagonal_(c.cov.is_diagonal()) {
    const auto d = c.dim();
    log_norm_ = -0.5 * (static_cast<double>(d) * kLog2Pi + c.cov.log_det());
    if (diagonal_) {
      inv_std_ = c.cov.variances().cwiseSqrt().cwiseInverse();
    } else {
      chol_ = c.cov.cholesky_lower();
    }
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }

  double log_pdf(const double* x) const {
    const auto d = mean_.size();
    double quad = 0.0;
    if (diagonal_) {
      for (Eigen::Index j = 0; j < d; ++j) {
        const double r = (x[j] - mean_[j]) * inv_std_[j];
        quad += r * r;
      }
    } else {
      constexpr Eigen::Index kStack = 32;
      std::array<double, kStack> stack{};
      std::vector<double> heap;
      double* y = stack.data();
      if (d > kStack) {
        heap.resize(static_cast<std::size_t>(d));
        y = heap.data();
      }
      for (Eigen::Index j = 0; j < d; ++j) {
        double r = x[j] - mean_[j];
        for (Eigen::Index l = 0; l < j; ++l) r -= chol_(j, l) * y[l];
        y[j] = r / chol_(j, j);
        quad += y[j] * y[j];
      }
    }
    return log_norm_ - 0.5 * quad;
  }

  double log_pdf(const Vector& x) const { return log_pdf(x.data()); }

 private:
  Vector mean_;
  Vector inv_std_;
  Matrix chol_;
  bool diagonal_ = true;
  double log_norm_ = 0.0;
};

inline void check_components(std::span<const GaussianComponent> comps) {
  require(!comps.empty(), "mixture: no components");
  const auto d = comps.front().dim();
  for (const auto& c : comps) {
    c.validate();
    require(c.dim() == d, "mixture: components disagree on dimension");
  }
}

inline double gaussian_log_pdf(const Vector& x, const GaussianComponent& c) {
  require(x.size() == c.dim(), "gaussian_log_pdf: dimension mismatch");
  return PreparedGaussian(c).log_pdf(x);
}

/// log sum_i pi_i N(x | mu_i, Sigma_i), evaluated with log-sum-exp.
inline double mixture_log_pdf(const Vector& x, std::span<const GaussianComponent> comps) {
  check_components(comps);
  require(x.size() == comps.front().dim(), "mixture_log_pdf: dimension mismatch");
  require(x.allFinite(), "mixture_log_pdf: non-finite input");
  const Vector logw = mixture_log_weights(comps);
  Vector terms(logw.size());
  for (Eigen::Index i = 0; i < logw.size(); ++i) {
    terms[i] = logw[i] + PreparedGaussian(comps[static_cast<std::size_t>(i)]).log_pdf(x);
  }
  return log_sum_exp(terms);
}

struct MixtureDraw {
  Vector x;
  int component = 0;
};

/// Draws an index from Cat(weights) using one uniform variate.
inline int sample_categorical(const Vector& weights, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng) * weights.sum();
  double cum = 0.0;
  int last_positive = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    cum += weights[i];
    if (u < cum) return static_cast<int>(i);
  }
  return last_positive;
}

inline MixtureDraw sample_mixture(std::span<const GaussianComponent> comps, Rng& rng) {
  check_components(comps);
  const int idx = sample_categorical(mixture_weights(comps), rng);
  const auto& c = comps[static_cast<std::size_t>(idx)];
  const Vector u = standard_normal_vector(c.dim(), rng);
  return {c.mean + c.cov.scale(u), idx};
}

/// The m symbol vectors z = E(1_y) and their priors p(z). Index == class label.
struct SymbolConstellation {
  std::vector<Vector> symbols;
  Vector priors;

  static SymbolConstellation uniform(std::vector<Vector> symbols) {
    SymbolConstellation c;
    const auto m = static_cast<Eigen::Index>(symbols.size());
    c.symbols = std::move(symbols);
    c.priors = Vector::Constant(m, 1.0 / static_cast<double>(std::max<Eigen::Index>(m, 1)));
    c.validate();
    return c;
  }

  /// Priors from empirical class proportions; uniform when no labels are given.
  static SymbolConstellation from_labels(std::vector<Vector> symbols, std::span<const int> labels) {
    if (labels.empty()) return uniform(std::move(symbols));
    SymbolConstellation c;
    c.priors = Vector::Zero(static_cast<Eigen::Index>(symbols.size()));
    for (int y : labels) {
      require(y >= 0 && y < c.priors.size(), "constellation: label out of range");
      c.priors[y] += 1.0;
    }
    c.priors /= static_cast<double>(labels.size());
    c.symbols = std::move(symbols);
    c.validate();
    return c;
  }

  int m() const { return static_cast<int>(symbols.size()); }
  Eigen::Index d() const { return symbols.empty() ? 0 : symbols.front().size(); }

  void validate() const {
    require(symbols.size() >= 1, "constellation: no symbols");
    require(priors.size() == static_cast<Eigen::Index>(symbols.size()), "constellation: prior count mismatch");
    for (const auto& s : symbols) require(s.size() == d() && s.allFinite(), "constellation: invalid symbol");
    require((priors.array() >= 0.0).all(), "constellation: negative prior");
    require(std::abs(priors.sum() - 1.0) <= 1e-12, "constellation: priors must sum to 1");
  }

  /// Smallest distance from symbol y to any other symbol.
  double min_distance(int y) const {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < m(); ++j) {
      if (j == y) continue;
      best = std::min(best, (symbols[static_cast<std::size_t>(j)] - symbols[static_cast<std::size_t>(y)]).norm());
    }
    return best;
  }

  double average_power() const {
    double p = 0.0;
    for (int y = 0; y < m(); ++y) p += priors[y] * symbols[static_cast<std::size_t>(y)].squaredNorm();
    return p;
  }
};

/// One k-component Gaussian mixture per symbol, index-aligned with a
/// SymbolConstellation.
struct ConditionalMixture {
  std::vector<Components> per_symbol;

  int m() const { return static_cast<int>(per_symbol.size()); }
  int k() const { return per_symbol.empty() ? 0 : static_cast<int>(per_symbol.front().size()); }
  Eigen::Index d() const { return per_symbol.empty() ? 0 : per_symbol.front().front().dim(); }

  const Components& operator[](int y) const { return per_symbol[static_cast<std::size_t>(y)]; }

  void validate() const {
    require(!per_symbol.empty(), "conditional mixture: no symbols");
    const auto k0 = per_symbol.front().size();
    for (const auto& comps : per_symbol) {
      require(comps.size() == k0, "conditional mixture: every symbol needs the same number of components");
      check_components(comps);
      require(comps.front().dim() == d(), "conditional mixture: dimension mismatch across symbols");
    }
  }

  bool operator==(const ConditionalMixture&) const = default;
};

enum class CovarianceTransform { diagonal, full };

/// Affine parameters of one component: mu -> A mu + b, Sigma -> C Sigma C^T,
/// alpha -> beta alpha + gamma.
struct ComponentAffine {
  Matrix A;
  Vector b;
  Matrix C;
  double beta = 1.0;
  double gamma = 0.0;

  bool operator==(const ComponentAffine&) const = default;
};

/// Per-component affine adaptation parameters (psi), shared by all symbols.
///
/// Vectorized layout is component-major; within a component: A (row-major,
/// d*d), b (d), C (diagonal: d entries; full: row-major d*d), beta, gamma.
class AdaptationParams {
 public:
  AdaptationParams() = default;

  static AdaptationParams identity(int k, Eigen::Index d, CovarianceTransform shape = CovarianceTransform::diagonal) {
    require(k >= 1 && d >= 1, "adaptation params: k and d must be positive");
    AdaptationParams p;
    p.shape_ = shape;
    p.d_ = d;
    p.components_.assign(static_cast<std::size_t>(k),
                         ComponentAffine{Matrix::Identity(d, d), Vector::Zero(d), Matrix::Identity(d, d), 1.0, 0.0});
    return p;
  }

  static std::size_t parameter_count(int k, Eigen::Index d, CovarianceTransform shape) {
    const auto dd = static_cast<std::size_t>(d);
    const std::size_t c_count = shape == CovarianceTransform::diagonal ? dd : dd * dd;
    return static_cast<std::size_t>(k) * (dd * dd + dd + c_count + 2);
  }

  int k() const { return static_cast<int>(components_.size()); }
  Eigen::Index d() const { return d_; }
  CovarianceTransform shape() const { return shape_; }
  std::size_t size() const { return parameter_count(k(), d_, shape_); }

  const ComponentAffine& operator[](int i) const { return components_[static_cast<std::size_t>(i)]; }
  ComponentAffine& operator[](int i) { return components_[static_cast<std::size_t>(i)]; }
  const std::vector<ComponentAffine>& components() const { return components_; }

  Vector to_vector() const {
    Vector v(static_cast<Eigen::Index>(size()));
    Eigen::Index o = 0;
    for (const auto& c : components_) {
      for (Eigen::Index r = 0; r < d_; ++r)
        for (Eigen::Index s = 0; s < d_; ++s) v[o++] = c.A(r, s);
      for (Eigen::Index r = 0; r < d_; ++r) v[o++] = c.b[r];
      if (shape_ == CovarianceTransform::diagonal) {
        for (Eigen::Index r = 0; r < d_; ++r) v[o++] = c.C(r, r);
      } else {
        for (Eigen::Index r = 0; r < d_; ++r)
          for (Eigen::Index s = 0; s < d_; ++s) v[o++] = c.C(r, s);
      }
      v[o++] = c.beta;
      v[o++] = c.gamma;
    }
    return v;
  }

  static AdaptationParams from_vector(const Vector& v, int k, Eigen::Index d,
                                      CovarianceTransform shape = CovarianceTransform::diagonal) {
    AdaptationParams p = identity(k, d, shape);
    require(v.size() == static_cast<Eigen::Index>(p.size()), "adaptation params: vector length mismatch");
    Eigen::Index o = 0;
    for (auto& c : p.components_) {
      for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index s = 0; s < d; ++s) c.A(r, s) = v[o++];
      for (Eigen::Index r = 0; r < d; ++r) c.b[r] = v[o++];
      if (shape == CovarianceTransform::diagonal) {
        c.C.setZero();
        for (Eigen::Index r = 0; r < d; ++r) c.C(r, r) = v[o++];
      } else {
        for (Eigen::Index r = 0; r < d; ++r)
          for (Eigen::Index s = 0; s < d; ++s) c.C(r, s) = v[o++];
      }
      c.beta = v[o++];
      c.gamma = v[o++];
    }
    return p;
  }

  /// Checks finiteness and invertibility of every C_i.
  void validate() const {
    for (const auto& c : components_) {
      require(c.A.rows() == d_ && c.A.cols() == d_ && c.b.size() == d_ && c.C.rows() == d_ && c.C.cols() == d_,
              "adaptation params: shape mismatch");
      require(c.A.allFinite() && c.b.allFinite() && c.C.allFinite() && std::isfinite(c.beta) &&
                  std::isfinite(c.gamma),
              "adaptation params: non-finite entry");
      require(c.C.diagonal().cwiseAbs().minCoeff() >= kScaleFloor || shape_ == CovarianceTransform::full,
              "adaptation params: C is singular");
      if (shape_ == CovarianceTransform::full) {
        Eigen::JacobiSVD<Matrix> svd(c.C);
        const Vector s = svd.singularValues();
        require(s[s.size() - 1] > 0.0 && s[0] / s[s.size() - 1] <= kMaxConditionNumber,
                "adaptation params: C is ill-conditioned");
      }
    }
  }

  bool is_identity() const {
    for (const auto& c : components_) {
      if (!c.A.isIdentity(0.0) || !c.b.isZero(0.0) || !c.C.isIdentity(0.0) || c.beta != 1.0 || c.gamma != 0.0)
        return false;
    }
    return true;
  }

  bool operator==(const AdaptationParams&) const = default;

 private:
  std::vector<ComponentAffine> components_;
  Eigen::Index d_ = 0;
  CovarianceTransform shape_ = CovarianceTransform::diagonal;
};

inline GaussianComponent transform_component(const GaussianComponent& c, const ComponentAffine& t) {
  GaussianComponent out;
  out.mean = t.A * c.mean + t.b;
  out.cov = c.cov.transformed(t.C);
  out.prior_logit = t.beta * c.prior_logit + t.gamma;
  return out;
}

/// Applies psi to every symbol's mixture (the same psi for every symbol).
inline ConditionalMixture apply_param_transform(const ConditionalMixture& source, const AdaptationParams& psi) {
  source.validate();
  require(psi.k() == source.k(), "apply_param_transform: component count mismatch");
  require(psi.d() == source.d(), "apply_param_transform: dimension mismatch");
  if (psi.is_identity()) return source;
  ConditionalMixture out;
  out.per_symbol.reserve(source.per_symbol.size());
  for (const auto& comps : source.per_symbol) {
    Components t;
    t.reserve(comps.size());
    for (int i = 0; i < static_cast<int>(comps.size()); ++i) {
      t.push_back(transform_component(comps[static_cast<std::size_t>(i)], psi[i]));
    }
    out.per_symbol.push_back(std::move(t));
  }
  return out;
}

/// KL(N(mu, Sigma) || N(mu_hat, Sigma_hat)).
inline double kl_gaussians(const GaussianComponent& p, const GaussianComponent& q) {
  require(p.dim() == q.dim(), "kl_gaussians: dimension mismatch");
  const auto d = static_cast<double>(p.dim());
  const Vector diff = q.mean - p.mean;
  double trace = 0.0;
  double quad = 0.0;
  if (p.cov.is_diagonal() && q.cov.is_diagonal()) {
    trace = p.cov.variances().cwiseQuotient(q.cov.variances()).sum();
    quad = diff.cwiseAbs2().cwiseQuotient(q.cov.variances()).sum();
  } else {
    const Matrix q_inv = q.cov.inverse();
    trace = (q_inv * p.cov.matrix()).trace();
    quad = diff.dot(q_inv * diff);
  }
  const double kl = 0.5 * (q.cov.log_det() - p.cov.log_det() + trace + quad - d);
  return std::max(kl, 0.0);
}

/// Closed-form KL between P(x, K | z) of the source mixture and of its
/// psi-transformed counterpart, averaged over p(z).
inline double kl_corresponding(const ConditionalMixture& source, const AdaptationParams& psi,
                               const SymbolConstellation& constellation) {
  require(constellation.m() == source.m(), "kl_corresponding: symbol count mismatch");
  const ConditionalMixture target = apply_param_transform(source, psi);
  double total = 0.0;
  for (int y = 0; y < source.m(); ++y) {
    const double pz = constellation.priors[y];
    if (pz == 0.0) continue;
    const Vector logw = mixture_log_weights(source[y]);
    const Vector logw_hat = mixture_log_weights(target[y]);
    double term = 0.0;
    for (int i = 0; i < source.k(); ++i) {
      const double pi = std::exp(logw[i]);
      if (pi == 0.0) continue;
      term += pi * (logw[i] - logw_hat[i]);
      term += pi * kl_gaussians(source[y][static_cast<std::size_t>(i)], target[y][static_cast<std::size_t>(i)]);
    }
    total += pz * term;
  }
  return std::max(total, 0.0);
}

/// Counts posterior evaluations where every joint term was -inf or NaN.
inline std::atomic<std::uint64_t>& posterior_underflow_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// A ConditionalMixture plus symbol priors, prepared for fast evaluation of
/// log p(z) + log pi_i(z) + log N(x | mu_i(z), Sigma_i(z)).
class PreparedMixture {
 public:
  PreparedMixture() = default;
  PreparedMixture(const ConditionalMixture& mix, const SymbolConstellation& constellation)
      : m_(mix.m()), k_(mix.k()), d_(mix.d()) {
    mix.validate();
    require(constellation.m() == mix.m(), "prepared mixture: symbol count mismatch");
    gaussians_.reserve(static_cast<std::size_t>(m_ * k_));
    log_joint_prior_.resize(m_ * k_);
    log_weights_.resize(m_ * k_);
    for (int y = 0; y < m_; ++y) {
      const Vector lw = mixture_log_weights(mix[y]);
      const double lp = std::log(constellation.priors[y]);
      for (int i = 0; i < k_; ++i) {
        gaussians_.emplace_back(mix[y][static_cast<std::size_t>(i)]);
        log_weights_[y * k_ + i] = lw[i];
        log_joint_prior_[y * k_ + i] = lp + lw[i];
      }
    }
  }

  int m() const { return m_; }
  int k() const { return k_; }
  Eigen::Index d() const { return d_; }
  const PreparedGaussian& gaussian(int y, int i) const { return gaussians_[static_cast<std::size_t>(y * k_ + i)]; }
  double log_weight(int y, int i) const { return log_weights_[y * k_ + i]; }

  /// Fills out[y*k + i] with log p(z_y) + log pi_i(z_y) + log N(x | ...).
  void log_joint(const double* x, double* out) const {
    for (int j = 0; j < m_ * k_; ++j) out[j] = log_joint_prior_[j] + gaussians_[static_cast<std::size_t>(j)].log_pdf(x);
  }

  /// log P(x | z_y) for symbol y.
  double conditional_log_pdf(const double* x, int y) const {
    constexpr int kStack = 64;
    std::array<double, kStack> stack{};
    std::vector<double> heap;
    double* t = stack.data();
    if (k_ > kStack) {
      heap.resize(static_cast<std::size_t>(k_));
      t = heap.data();
    }
    for (int i = 0; i < k_; ++i) t[i] = log_weights_[y * k_ + i] + gaussian(y, i).log_pdf(x);
    return log_sum_exp(std::span<const double>(t, static_cast<std::size_t>(k_)));
  }

  /// Posterior P(z, i | x) as an m x k table, computed in log space.
  Matrix posterior(const Vector& x) const {
    require(x.size() == d_, "posterior: dimension mismatch");
    Vector lj(m_ * k_);
    log_joint(x.data(), lj.data());
    return normalized(lj);
  }

  Matrix normalized(const Vector& log_joint_values) const {
    Matrix out(m_, k_);
    const double hi = log_joint_values.maxCoeff();
    if (!std::isfinite(hi)) {
      ++posterior_underflow_counter();
      out.setConstant(1.0 / static_cast<double>(m_ * k_));
      return out;
    }
    double total = 0.0;
    for (int y = 0; y < m_; ++y)
      for (int i = 0; i < k_; ++i) {
        const double w = std::exp(log_joint_values[y * k_ + i] - hi);
        out(y, i) = w;
        total += w;
      }
    return out / total;
  }

 private:
  int m_ = 0;
  int k_ = 0;
  Eigen::Index d_ = 0;
  std::vector<PreparedGaussian> gaussians_;
  Vector log_joint_prior_;
  Vector log_weights_;
};

/// P(z, i | x) under the target mixture and symbol priors.
inline Matrix joint_posterior(const Vector& x, const ConditionalMixture& target,
                              const SymbolConstellation& constellation) {
  return PreparedMixture(target, constellation).posterior(x);
}

/// Symbol posterior log P(z | x) under a mixture, via Bayes on the conditionals.
inline Vector symbol_log_posterior(const Vector& x, const PreparedMixture& mix) {
  Vector lp(mix.m());
  std::vector<double> lj(static_cast<std::size_t>(mix.m() * mix.k()));
  mix.log_joint(x.data(), lj.data());
  for (int y = 0; y < mix.m(); ++y) {
    lp[y] = log_sum_exp(std::span<const double>(lj.data() + y * mix.k(), static_cast<std::size_t>(mix.k())));
  }
  return lp.array() - log_sum_exp(lp);
}

inline Matrix invert_scale(const Matrix& c, CovarianceTransform shape) {
  if (shape == CovarianceTransform::diagonal) {
    require(c.diagonal().cwiseAbs().minCoeff() >= kScaleFloor, "inverse transform: C is singular");
    return Matrix(c.diagonal().cwiseInverse().asDiagonal());
  }
  Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector s = svd.singularValues();
  require(s[s.size() - 1] > 0.0 && s[0] / s[s.size() - 1] <= kMaxConditionNumber,
          "inverse transform: C is ill-conditioned");
  return svd.matrixV() * s.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
}

/// g^{-1}_{z i}(x) = C_i^{-1} (x - A_i mu_i(z) - b_i) + mu_i(z).
inline Vector inverse_component_transform(const Vector& x, int z_index, int comp, const AdaptationParams& psi,
                                          const ConditionalMixture& source) {
  require(z_index >= 0 && z_index < source.m(), "inverse transform: symbol index out of range");
  require(comp >= 0 && comp < source.k() && comp < psi.k(), "inverse transform: component out of range");
  const auto& mu = source[z_index][static_cast<std::size_t>(comp)].mean;
  require(x.size() == mu.size(), "inverse transform: dimension mismatch");
  const auto& t = psi[comp];
  if (t.A.isIdentity(0.0) && t.b.isZero(0.0) && t.C.isIdentity(0.0)) return x;
  const Matrix c_inv = invert_scale(t.C, psi.shape());
  return c_inv * (x - t.A * mu - t.b) + mu;
}

/// Posterior-weighted inverse affine map from target-domain channel outputs
/// back toward the source domain. Precomputes everything that does not
/// depend on x.
class FeatureCompensator {
 public:
  FeatureCompensator(const ConditionalMixture& source, const AdaptationParams& psi,
                     const SymbolConstellation& constellation)
      : FeatureCompensator(source, psi, apply_param_transform(source, psi), constellation) {}

  FeatureCompensator(const ConditionalMixture& source, const AdaptationParams& psi, const ConditionalMixture& target,
                     const SymbolConstellation& constellation)
      : target_(target, constellation), identity_(psi.is_identity()) {
    require(psi.k() == source.k() && target.k() == source.k() && target.m() == source.m(),
            "feature compensator: shape mismatch");
    const int m = source.m();
    const int k = source.k();
    const auto d = source.d();
    c_inv_.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) c_inv_.push_back(invert_scale(psi[i].C, psi.shape()));
    offsets_ = Matrix(d, m * k);
    for (int y = 0; y < m; ++y)
      for (int i = 0; i < k; ++i) {
        const auto& mu = source[y][static_cast<std::size_t>(i)].mean;
        offsets_.col(y * k + i) = mu - c_inv_[static_cast<std::size_t>(i)] * (psi[i].A * mu + psi[i].b);
      }
  }

  const PreparedMixture& target() const { return target_; }

  Matrix posterior(const Vector& x) const { return target_.posterior(x); }

  Vector operator()(const Vector& x) const {
    if (identity_) return x;
    const Matrix post = target_.posterior(x);
    const int k = target_.k();
    Vector out = Vector::Zero(x.size());
    for (int i = 0; i < k; ++i) {
      const double wi = post.col(i).sum();
      if (wi != 0.0) out.noalias() += wi * (c_inv_[static_cast<std::size_t>(i)] * x);
    }
    for (int y = 0; y < target_.m(); ++y)
      for (int i = 0; i < k; ++i) out.noalias() += post(y, i) * offsets_.col(y * k + i);
    return out;
  }

 private:
  PreparedMixture target_;
  std::vector<Matrix> c_inv_;
  Matrix offsets_;
  bool identity_ = false;
};

/// g^{-1}(x) = sum_{z,i} P(z, i | x) g^{-1}_{z i}(x), posterior under the target mixture.
inline Vector expected_inverse_transform(const Vector& x, const AdaptationParams& psi,
                                         const ConditionalMixture& source, const ConditionalMixture& target,
                                         const SymbolConstellation& constellation) {
  require(x.size() == source.d(), "expected inverse transform: dimension mismatch");
  return FeatureCompensator(source, psi, target, constellation)(x);
}

}  // namespace mdnadapt::gmm

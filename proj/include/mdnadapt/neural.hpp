#pragma once

// Dense feed-forward networks with exact batched backpropagation, plus Adam
// and Nesterov-momentum SGD. Batches are stored column-wise: one sample per
// column.

#include "mdnadapt/common.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mdnadapt::neural {

enum class Activation { linear, relu, elu_plus_one, softmax };

/// The epsilon in ELU(x) + 1 + eps, keeping predicted variances positive.
inline constexpr double kEluEpsilon = 1e-6;

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::elu_plus_one: return "elu_plus_one";
    case Activation::softmax: return "softmax";
  }
  return "linear";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "linear") return Activation::linear;
  if (s == "relu") return Activation::relu;
  if (s == "elu_plus_one") return Activation::elu_plus_one;
  if (s == "softmax") return Activation::softmax;
  throw Error("unknown activation: " + std::string(s));
}

inline Matrix activate(Activation a, const Matrix& pre) {
  switch (a) {
    case Activation::linear: return pre;
    case Activation::relu: return pre.cwiseMax(0.0);
    case Activation::elu_plus_one:
      return pre.unaryExpr([](double v) { return (v > 0.0 ? v + 1.0 : std::exp(v)) + kEluEpsilon; });
    case Activation::softmax: {
      Matrix out(pre.rows(), pre.cols());
      for (Eigen::Index c = 0; c < pre.cols(); ++c) {
        out.col(c) = (pre.col(c).array() - pre.col(c).maxCoeff()).exp();
        out.col(c) /= out.col(c).sum();
      }
      return out;
    }
  }
  return pre;
}

/// Maps d(loss)/d(output) to d(loss)/d(pre-activation).
inline Matrix activation_backward(Activation a, const Matrix& pre, const Matrix& out, const Matrix& grad_out) {
  switch (a) {
    case Activation::linear: return grad_out;
    case Activation::relu: return grad_out.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    case Activation::elu_plus_one:
      return grad_out.cwiseProduct(pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); }));
    case Activation::softmax: {
      Matrix g(out.rows(), out.cols());
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        const double dot = out.col(c).dot(grad_out.col(c));
        g.col(c) = out.col(c).cwiseProduct(grad_out.col(c).array().matrix() - Vector::Constant(out.rows(), dot));
      }
      return g;
    }
  }
  return grad_out;
}

struct DenseLayer {
  Matrix weights;  // out x in
  Vector biases;   // out
  Activation activation = Activation::linear;

  Eigen::Index in() const { return weights.cols(); }
  Eigen::Index out() const { return weights.rows(); }

  /// Uniform Glorot initialization, zero biases.
  static DenseLayer glorot(Eigen::Index in, Eigen::Index out, Activation act, Rng& rng) {
    require(in > 0 && out > 0, "dense layer: dimensions must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> unif(-limit, limit);
    DenseLayer l;
    l.weights = Matrix(out, in);
    for (Eigen::Index c = 0; c < in; ++c)
      for (Eigen::Index r = 0; r < out; ++r) l.weights(r, c) = unif(rng);
    l.biases = Vector::Zero(out);
    l.activation = act;
    return l;
  }

  bool operator==(const DenseLayer&) const = default;
};

struct LayerCache {
  Matrix input;
  Matrix pre;
  Matrix output;
};

using ForwardCache = std::vector<LayerCache>;

struct LayerGradient {
  Matrix weights;
  Vector biases;
};

struct NetGradient {
  std::vector<LayerGradient> layers;
  Matrix input;  // d(loss)/d(network input), one column per sample

  NetGradient& operator+=(const NetGradient& o) {
    require(o.layers.size() == layers.size(), "gradient: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].weights += o.layers[i].weights;
      layers[i].biases += o.layers[i].biases;
    }
    return *this;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) s += l.weights.squaredNorm() + l.biases.squaredNorm();
    return s;
  }
};

/// Where the incoming gradient of backward() is taken.
enum class GradientAt { output, pre_activation };

class FeedForwardNet {
 public:
  FeedForwardNet() = default;
  explicit FeedForwardNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

  /// Builds dims[0] -> dims[1] -> ... with the given activation per layer.
  static FeedForwardNet glorot(std::span<const Eigen::Index> dims, std::span<const Activation> acts, Rng& rng) {
    require(dims.size() >= 2 && acts.size() == dims.size() - 1, "feed-forward net: bad layer specification");
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers.push_back(DenseLayer::glorot(dims[i], dims[i + 1], acts[i], rng));
    return FeedForwardNet(std::move(layers));
  }

  void validate() const {
    require(!layers_.empty(), "feed-forward net: no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      require(l.biases.size() == l.out(), "feed-forward net: bias length mismatch");
      require(l.weights.allFinite() && l.biases.allFinite(), "feed-forward net: non-finite parameter");
      if (i > 0) require(layers_[i - 1].out() == l.in(), "feed-forward net: layer dimensions do not chain");
    }
  }

  Eigen::Index input_dim() const { return layers_.front().in(); }
  Eigen::Index output_dim() const { return layers_.back().out(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.biases.size());
    return n;
  }

  Matrix forward(const Matrix& input, ForwardCache& cache) const {
    require(input.rows() == input_dim(), "forward: input dimension mismatch");
    cache.resize(layers_.size());
    const Matrix* x = &input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      auto& c = cache[i];
      c.input = *x;
      c.pre.noalias() = l.weights * c.input;
      c.pre.colwise() += l.biases;
      c.output = activate(l.activation, c.pre);
      x = &c.output;
    }
    return cache.back().output;
  }

  Matrix predict(const Matrix& input) const {
    require(input.rows() == input_dim(), "predict: input dimension mismatch");
    Matrix x = input;
    for (const auto& l : layers_) {
      Matrix pre = l.weights * x;
      pre.colwise() += l.biases;
      x = activate(l.activation, pre);
    }
    return x;
  }

  Vector predict(const Vector& input) const { return predict(Matrix(input)).col(0); }

  /// Exact gradients of sum over columns of <grad, output> (or of the last
  /// pre-activation when `at == pre_activation`).
  NetGradient backward(const ForwardCache& cache, const Matrix& grad, GradientAt at = GradientAt::output,
                       bool want_params = true) const {
    require(cache.size() == layers_.size(), "backward: cache does not match network");
    require(grad.rows() == output_dim() && grad.cols() == cache.back().output.cols(), "backward: gradient shape mismatch");
    NetGradient g;
    g.layers.resize(layers_.size());
    Matrix upstream = grad;
    for (std::size_t r = layers_.size(); r-- > 0;) {
      const auto& l = layers_[r];
      const auto& c = cache[r];
      Matrix dpre = (r + 1 == layers_.size() && at == GradientAt::pre_activation)
                        ? upstream
                        : activation_backward(l.activation, c.pre, c.output, upstream);
      if (want_params) {
        g.layers[r].weights.noalias() = dpre * c.input.transpose();
        g.layers[r].biases = dpre.rowwise().sum();
      } else {
        g.layers[r].weights = Matrix::Zero(l.out(), l.in());
        g.layers[r].biases = Vector::Zero(l.out());
      }
      upstream.noalias() = l.weights.transpose() * dpre;
    }
    g.input = std::move(upstream);
    return g;
  }

  NetGradient zero_gradient() const {
    NetGradient g;
    for (const auto& l : layers_) g.layers.push_back({Matrix::Zero(l.out(), l.in()), Vector::Zero(l.out())});
    return g;
  }

  bool operator==(const FeedForwardNet&) const = default;

 private:
  std::vector<DenseLayer> layers_;
};

/// A parameter array and its gradient, viewed as flat spans.
struct ParamBlock {
  std::span<double> value;
  std::span<const double> grad;
};

inline void append_blocks(std::vector<ParamBlock>& out, FeedForwardNet& net, const NetGradient& g) {
  require(g.layers.size() == net.layers().size(), "param blocks: gradient does not match network");
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    auto& l = net.layers()[i];
    const auto& gl = g.layers[i];
    require(gl.weights.rows() == l.weights.rows() && gl.weights.cols() == l.weights.cols() &&
                gl.biases.size() == l.biases.size(),
            "param blocks: shape mismatch");
    out.push_back({{l.weights.data(), static_cast<std::size_t>(l.weights.size())},
                   {gl.weights.data(), static_cast<std::size_t>(gl.weights.size())}});
    out.push_back({{l.biases.data(), static_cast<std::size_t>(l.biases.size())},
                   {gl.biases.data(), static_cast<std::size_t>(gl.biases.size())}});
  }
}

inline void append_layer_block(std::vector<ParamBlock>& out, DenseLayer& l, const LayerGradient& g) {
  out.push_back({{l.weights.data(), static_cast<std::size_t>(l.weights.size())},
                 {g.weights.data(), static_cast<std::size_t>(g.weights.size())}});
  out.push_back({{l.biases.data(), static_cast<std::size_t>(l.biases.size())},
                 {g.biases.data(), static_cast<std::size_t>(g.biases.size())}});
}

/// Geometric interpolation between two learning rates over `steps` epochs.
struct ExponentialSchedule {
  double start = 0.1;
  double end = 0.005;
  int steps = 1;

  double at(int epoch) const {
    if (steps <= 0) return start;
    const double t = static_cast<double>(std::clamp(epoch, 0, steps)) / static_cast<double>(steps);
    return start * std::pow(end / start, t);
  }
};

/// Adam or Nesterov-momentum SGD. Moment/velocity buffers are created on the
/// first step and must keep the same shapes afterwards.
class Optimizer {
 public:
  enum class Kind { adam, sgd_nesterov };

  static Optimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    Optimizer o;
    o.kind_ = Kind::adam;
    o.lr_ = lr;
    o.beta1_ = beta1;
    o.beta2_ = beta2;
    o.eps_ = eps;
    return o;
  }

  static Optimizer sgd_nesterov(double lr, double momentum = 0.9) {
    Optimizer o;
    o.kind_ = Kind::sgd_nesterov;
    o.lr_ = lr;
    o.beta1_ = momentum;
    return o;
  }

  Kind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long long steps() const { return t_; }

  void step(std::span<const ParamBlock> blocks) {
    if (first_.empty()) {
      for (const auto& b : blocks) {
        first_.emplace_back(b.value.size(), 0.0);
        if (kind_ == Kind::adam) second_.emplace_back(b.value.size(), 0.0);
      }
    }
    require(first_.size() == blocks.size(), "optimizer: parameter block count changed");
    ++t_;
    if (kind_ == Kind::adam) {
      const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        require(b.value.size() == first_[i].size() && b.grad.size() == b.value.size(), "optimizer: shape mismatch");
        auto& m = first_[i];
        auto& v = second_[i];
        for (std::size_t j = 0; j < b.value.size(); ++j) {
          const double g = b.grad[j];
          m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
          v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
          b.value[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
        }
      }
    } else {
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        require(b.value.size() == first_[i].size() && b.grad.size() == b.value.size(), "optimizer: shape mismatch");
        auto& vel = first_[i];
        for (std::size_t j = 0; j < b.value.size(); ++j) {
          const double g = b.grad[j];
          vel[j] = beta1_ * vel[j] - lr_ * g;
          b.value[j] += beta1_ * vel[j] - lr_ * g;
        }
      }
    }
  }

 private:
  Kind kind_ = Kind::adam;
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long long t_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// Row-wise cross-entropy of softmax outputs against integer labels, with the
/// gradient at the softmax pre-activation (probs - one_hot) / N.
inline double softmax_cross_entropy(const Matrix& probs, std::span<const int> labels, Matrix* grad_pre = nullptr) {
  require(probs.cols() == static_cast<Eigen::Index>(labels.size()) && !labels.empty(), "cross entropy: label count mismatch");
  const double n = static_cast<double>(labels.size());
  double loss = 0.0;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    const int y = labels[static_cast<std::size_t>(c)];
    require(y >= 0 && y < probs.rows(), "cross entropy: label out of range");
    loss -= std::log(std::max(probs(y, c), std::numeric_limits<double>::min()));
  }
  if (grad_pre != nullptr) {
    *grad_pre = probs / n;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) (*grad_pre)(labels[static_cast<std::size_t>(c)], c) -= 1.0 / n;
  }
  return loss / n;
}

}  // namespace mdnadapt::neural

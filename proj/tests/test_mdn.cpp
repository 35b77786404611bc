#include "mdnadapt/channels.hpp"
#include "mdnadapt/mdn.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace mdnadapt;
using namespace mdnadapt::mdn;
using mdnadapt::testing::max_relative_error;

namespace {

MdnModel tiny_model(Rng& rng, int k = 2, int hidden = 8) {
  auto m = MdnModel::create(2, k, hidden, rng);
  // Non-zero biases so that every path carries gradient.
  for (auto& l : m.trunk().layers()) l.biases = mdnadapt::testing::random_vector(l.out(), rng, 0.0, 0.3);
  m.logits_head().biases = mdnadapt::testing::random_vector(k, rng, -0.5, 0.5);
  m.means_head().biases = mdnadapt::testing::random_vector(k * 2, rng, -0.5, 0.5);
  return m;
}

/// Central-difference check of `analytic` (aligned with model.blocks()) for a
/// scalar function of the model parameters.
double fd_check(MdnModel& model, const MdnModel::Gradient& analytic, const std::function<double()>& f, double h = 1e-5) {
  auto blocks = model.blocks(analytic);
  std::vector<double> a, fd;
  for (auto& b : blocks) {
    for (std::size_t j = 0; j < b.value.size(); ++j) {
      const double keep = b.value[j];
      b.value[j] = keep + h;
      const double fp = f();
      b.value[j] = keep - h;
      const double fm = f();
      b.value[j] = keep;
      a.push_back(b.grad[j]);
      fd.push_back((fp - fm) / (2 * h));
    }
  }
  return max_relative_error(Eigen::Map<Vector>(a.data(), static_cast<Eigen::Index>(a.size())),
                            Eigen::Map<Vector>(fd.data(), static_cast<Eigen::Index>(fd.size())), 1e-7);
}

std::vector<Vector> qam_points() { return channels::qam_constellation(16).symbols; }

ChannelPairs awgn_pairs(const std::vector<Vector>& pts, double sd, int n, Rng& rng) {
  ChannelPairs p{Matrix(2, n), Matrix(2, n)};
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pts.size()) - 1);
  for (int s = 0; s < n; ++s) {
    p.z.col(s) = pts[static_cast<std::size_t>(pick(rng))];
    p.x.col(s) = p.z.col(s) + sd * standard_normal_vector(2, rng);
  }
  return p;
}

/// Ground truth: x | z ~ 0.4 N(z + (1, 0), 0.5^2 I) + 0.6 N(z - (0, 1), 0.8^2 I).
struct KnownMixture {
  gmm::Components at(const Vector& z) const {
    Vector o1(2), o2(2);
    o1 << 1.0, 0.0;
    o2 << 0.0, -1.0;
    return {{std::log(0.4), z + o1, gmm::Covariance::diagonal(Vector::Constant(2, 0.25))},
            {std::log(0.6), z + o2, gmm::Covariance::diagonal(Vector::Constant(2, 0.64))}};
  }

  ChannelPairs sample(const std::vector<Vector>& zs, int n, Rng& rng) const {
    ChannelPairs p{Matrix(2, n), Matrix(2, n)};
    for (int s = 0; s < n; ++s) {
      const Vector z = zs[static_cast<std::size_t>(s) % zs.size()];
      p.z.col(s) = z;
      p.x.col(s) = gmm::sample_mixture(at(z), rng).x;
    }
    return p;
  }

  double mean_cll(const ChannelPairs& p) const {
    double t = 0.0;
    for (Eigen::Index s = 0; s < p.size(); ++s) t += gmm::mixture_log_pdf(p.x.col(s), at(p.z.col(s)));
    return t / static_cast<double>(p.size());
  }
};

}  // namespace

TEST(PredictParams, FreshModelGivesValidMixtures) {
  Rng rng(1);
  const auto model = MdnModel::create(2, 5, 100, rng);
  for (int t = 0; t < 100; ++t) {
    const auto comps = predict_params(model, mdnadapt::testing::random_vector(2, rng, -3, 3));
    ASSERT_EQ(comps.size(), 5u);
    gmm::check_components(comps);
    for (const auto& c : comps) EXPECT_GT(c.cov.variances().minCoeff(), 0.0);
    EXPECT_NEAR(gmm::mixture_weights(comps).sum(), 1.0, 1e-12);
  }
}

TEST(PredictParams, Deterministic) {
  Rng rng(2);
  const auto model = MdnModel::create(2, 3, 16, rng);
  const Vector z = Vector::Constant(2, 0.3);
  EXPECT_EQ(predict_params(model, z), predict_params(model, z));
}

TEST(PredictParams, ParameterCountPerComponent) {
  Rng rng(3);
  const auto model = MdnModel::create(2, 5, 100, rng);
  // Heads: k d means, k d variances, k logits -> k (2d + 1) outputs.
  EXPECT_EQ(model.means_head().out() + model.variances_head().out() + model.logits_head().out(), 5 * (2 * 2 + 1));
}

TEST(CllLossAndGrad, MatchesFiniteDifferences) {
  Rng rng(4);
  auto model = tiny_model(rng);
  const Matrix z = Matrix::NullaryExpr(2, 4, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  const Matrix x = Matrix::NullaryExpr(2, 4, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  const auto lg = cll_loss_and_grad(model, z, x);
  EXPECT_NEAR(lg.loss, -conditional_log_likelihood(model, z, x).mean(), 1e-14);
  EXPECT_LT(fd_check(model, lg.grad, [&] { return cll_loss_and_grad(model, z, x, false).loss; }), 1e-4);
}

TEST(CllLossAndGrad, InputGradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto model = tiny_model(rng);
  Matrix z = Matrix::NullaryExpr(2, 3, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  const Matrix x = Matrix::NullaryExpr(2, 3, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  const auto uniq = unique_columns(z);
  ASSERT_EQ(uniq.values.cols(), 3);
  const auto lg = cll_loss_and_grad(model, z, x);
  for (Eigen::Index c = 0; c < 3; ++c)
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double keep = z(j, c);
      z(j, c) = keep + 1e-6;
      const double fp = cll_loss_and_grad(model, z, x, false).loss;
      z(j, c) = keep - 1e-6;
      const double fm = cll_loss_and_grad(model, z, x, false).loss;
      z(j, c) = keep;
      // grad.input is indexed by distinct input.
      const double a = lg.grad.input(j, uniq.index[static_cast<std::size_t>(c)]);
      EXPECT_NEAR(a, (fp - fm) / 2e-6, 1e-4 * std::max(1.0, std::abs(a)));
    }
}

TEST(CllLossAndGrad, DuplicatedRowsLeaveLossUnchanged) {
  Rng rng(6);
  const auto model = tiny_model(rng, 3, 16);
  const Matrix z = Matrix::NullaryExpr(2, 10, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  const Matrix x = Matrix::NullaryExpr(2, 10, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
  Matrix z2(2, 20), x2(2, 20);
  z2 << z, z;
  x2 << x, x;
  EXPECT_NEAR(cll_loss_and_grad(model, z, x).loss, cll_loss_and_grad(model, z2, x2).loss, 1e-13);
}

TEST(CllLossAndGrad, FullBatchAdamDecreasesMonotonically) {
  Rng rng(7);
  auto model = MdnModel::create(2, 3, 32, rng);
  const auto data = awgn_pairs(qam_points(), 0.2, 512, rng);
  auto opt = neural::Optimizer::adam(1e-3);
  double prev = cll_loss(model, data);
  for (int s = 0; s < 10; ++s) {
    auto lg = cll_loss_and_grad(model, data.z, data.x);
    opt.step(model.blocks(lg.grad));
    const double now = cll_loss(model, data);
    EXPECT_LT(now, prev) << "step " << s;
    prev = now;
  }
}

TEST(CllLossAndGrad, RejectsEmptyBatch) {
  Rng rng(8);
  const auto model = tiny_model(rng);
  EXPECT_THROW(cll_loss_and_grad(model, Matrix(2, 0), Matrix(2, 0)), Error);
}

TEST(TrainMdn, AwgnDominantVarianceMatchesNoise) {
  // A single component makes "dominant" identifiable; with redundant
  // components the split of one Gaussian is arbitrary.
  Rng rng(9);
  const double sd = 0.15;
  auto model = MdnModel::create(2, 1, 100, rng);
  const auto pts = qam_points();
  const auto data = awgn_pairs(pts, sd, 20000, rng);
  train_mdn(model, data, TrainOptions{}, rng);
  for (const auto& z : pts) {
    const auto comps = predict_params(model, z);
    const auto w = gmm::mixture_weights(comps);
    Eigen::Index top = 0;
    w.maxCoeff(&top);
    for (int j = 0; j < 2; ++j)
      EXPECT_NEAR(comps[static_cast<std::size_t>(top)].cov.variances()[j], sd * sd, 0.2 * sd * sd);
  }
}

TEST(TrainMdn, AwgnMixtureCovarianceMatchesNoise) {
  Rng rng(9);
  const double sd = 0.15;
  auto model = MdnModel::create(2, 5, 100, rng);
  const auto pts = qam_points();
  const auto data = awgn_pairs(pts, sd, 20000, rng);
  train_mdn(model, data, TrainOptions{}, rng);
  for (const auto& z : pts) {
    const auto comps = predict_params(model, z);
    const auto w = gmm::mixture_weights(comps);
    Vector mean = Vector::Zero(2);
    for (std::size_t i = 0; i < comps.size(); ++i) mean += w[static_cast<Eigen::Index>(i)] * comps[i].mean;
    Matrix cov = Matrix::Zero(2, 2);
    for (std::size_t i = 0; i < comps.size(); ++i) {
      const Vector r = comps[i].mean - mean;
      cov += w[static_cast<Eigen::Index>(i)] * (comps[i].cov.matrix() + r * r.transpose());
    }
    EXPECT_LT((mean - z).norm(), 0.5 * sd);
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(cov(j, j), sd * sd, 0.2 * sd * sd);
  }
}

TEST(TrainMdn, RecoversKnownMixtureLikelihood) {
  Rng rng(10);
  const KnownMixture truth;
  std::vector<Vector> zs;
  for (double a : {-1.0, 1.0})
    for (double b : {-1.0, 1.0}) zs.push_back((Vector(2) << a, b).finished());
  const auto train = truth.sample(zs, 20000, rng);
  const auto held = truth.sample(zs, 20000, rng);
  auto model = MdnModel::create(2, 2, 32, rng);
  TrainOptions opt;
  opt.epochs = 60;
  const auto rep = train_mdn(model, train, opt, rng);
  EXPECT_LE(rep.final_loss, rep.initial_loss);
  const double true_cll = truth.mean_cll(held);
  const double model_cll = conditional_log_likelihood(model, held.z, held.x).mean();
  EXPECT_NEAR(model_cll, true_cll, 0.05 * std::abs(true_cll));
}

TEST(TrainMdn, ZeroEpochsLeavesModelUnchanged) {
  Rng rng(11);
  auto model = MdnModel::create(2, 2, 8, rng);
  const auto before = model;
  const auto data = awgn_pairs(qam_points(), 0.3, 100, rng);
  TrainOptions opt;
  opt.epochs = 0;
  train_mdn(model, data, opt, rng);
  EXPECT_EQ(model, before);
}

TEST(TrainMdn, FinalLossNeverAboveInitialAndSeeded) {
  for (std::uint64_t seed : {12u, 13u, 14u}) {
    Rng rng(seed);
    auto model = MdnModel::create(2, 2, 8, rng);
    const auto data = awgn_pairs(qam_points(), 0.3, 300, rng);
    TrainOptions opt;
    opt.epochs = 3;
    opt.batch_size = 16;
    auto a = model, b = model;
    Rng ra(seed + 100), rb(seed + 100);
    const auto rep = train_mdn(a, data, opt, ra);
    train_mdn(b, data, opt, rb);
    EXPECT_LE(rep.final_loss, rep.initial_loss);
    EXPECT_EQ(a, b);
  }
}

TEST(TrainMdn, HeadsOnlyLeavesTrunkBitIdentical) {
  Rng rng(15);
  auto model = MdnModel::create(2, 3, 16, rng);
  const auto trunk = model.trunk();
  const auto data = awgn_pairs(qam_points(), 0.3, 500, rng);
  TrainOptions opt;
  opt.epochs = 5;
  opt.heads_only = true;
  opt.learning_rate = 1e-2;
  train_mdn(model, data, opt, rng);
  EXPECT_EQ(model.trunk(), trunk);
}

TEST(TrainMdn, RejectsEmptyDataset) {
  Rng rng(16);
  auto model = MdnModel::create(2, 2, 8, rng);
  EXPECT_THROW(train_mdn(model, ChannelPairs{Matrix(2, 0), Matrix(2, 0)}, TrainOptions{}, rng), Error);
}

TEST(SampleChannel, SeededDeterminism) {
  Rng g(17);
  const auto model = tiny_model(g, 3, 16);
  Rng a(5), b(5);
  const Vector z = Vector::Constant(2, 0.5);
  for (int t = 0; t < 50; ++t) EXPECT_EQ(sample_channel(model, z, a), sample_channel(model, z, b));
}

TEST(SampleChannel, MeanWithinThreeSigma) {
  Rng g(18);
  const auto model = tiny_model(g, 3, 16);
  const Vector z = Vector::Constant(2, -0.4);
  const auto comps = predict_params(model, z);
  const Vector w = gmm::mixture_weights(comps);
  Vector mean = Vector::Zero(2), second = Vector::Zero(2);
  for (int i = 0; i < 3; ++i) {
    const auto& c = comps[static_cast<std::size_t>(i)];
    mean += w[i] * c.mean;
    second += w[i] * (c.cov.variances() + c.mean.cwiseAbs2());
  }
  const Vector var = second - mean.cwiseAbs2();
  const int n = 100000;
  Matrix zs = z.replicate(1, n);
  Rng rng(19);
  const Matrix x = sample_channel_batch(model, zs, rng);
  const Vector emp = x.rowwise().mean();
  for (int j = 0; j < 2; ++j) EXPECT_NEAR(emp[j], mean[j], 3.0 * std::sqrt(var[j] / n));
}

TEST(SampleChannel, SingleComponentIsGaussian) {
  // Jarque-Bera on standardized residuals; chi^2(2) critical value at 0.01 is 9.21.
  Rng g(20);
  const auto model = tiny_model(g, 1, 16);
  const Vector z = Vector::Constant(2, 0.2);
  const auto c = predict_params(model, z)[0];
  Rng rng(21);
  const int n = 100000;
  const Matrix x = sample_channel_batch(model, z.replicate(1, n), rng);
  for (int j = 0; j < 2; ++j) {
    const Eigen::ArrayXd r = (x.row(j).transpose().array() - c.mean[j]) / std::sqrt(c.cov.variances()[j]);
    const double m = r.mean();
    const Eigen::ArrayXd cen = r - m;
    const double m2 = cen.square().mean();
    const double skew = cen.cube().mean() / std::pow(m2, 1.5);
    const double kurt = cen.square().square().mean() / (m2 * m2);
    const double jb = n / 6.0 * (skew * skew + (kurt - 3.0) * (kurt - 3.0) / 4.0);
    EXPECT_LT(jb, 9.21) << "dimension " << j;
  }
}

TEST(DifferentiableSampler, HighTemperatureSelectorIsUniform) {
  Rng rng(22);
  const auto model = tiny_model(rng, 4, 16);
  const Matrix z = Matrix::Constant(2, 1, 0.1);
  const auto s = sample_channel_differentiable(model, z, gumbel_noise(4, 1, rng), standard_normal(2, 1, rng), 1e12);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(s.selector(i, 0), 0.25, 1e-9);
}

TEST(DifferentiableSampler, GradientsMatchFiniteDifferences) {
  Rng rng(23);
  for (double tau : {1.0, 0.1, kDefaultTemperature}) {
    auto model = tiny_model(rng, 3, 8);
    const Matrix z = Matrix::NullaryExpr(2, 3, [&]() { return mdnadapt::testing::uniform(rng, -1, 1); });
    const Matrix g = gumbel_noise(3, 3, rng);
    const Matrix u = standard_normal(2, 3, rng);
    const Matrix proj = Matrix::Random(2, 3);
    auto f = [&] { return (sample_channel_differentiable(model, z, g, u, tau).x.array() * proj.array()).sum(); };
    const auto s = sample_channel_differentiable(model, z, g, u, tau);
    const auto grad = differentiable_backward(model, s, proj, true);
    EXPECT_LT(fd_check(model, grad, f, 1e-6 * tau), 1e-4) << "tau " << tau;
    // Input gradient.
    Matrix zz = z;
    for (Eigen::Index c = 0; c < 3; ++c)
      for (Eigen::Index j = 0; j < 2; ++j) {
        const double h = 1e-6 * tau;
        zz(j, c) = z(j, c) + h;
        const double fp = (sample_channel_differentiable(model, zz, g, u, tau).x.array() * proj.array()).sum();
        zz(j, c) = z(j, c) - h;
        const double fm = (sample_channel_differentiable(model, zz, g, u, tau).x.array() * proj.array()).sum();
        zz(j, c) = z(j, c);
        EXPECT_NEAR(grad.input(j, c), (fp - fm) / (2 * h), 1e-4 * std::max(1.0, std::abs(grad.input(j, c))));
      }
  }
}

TEST(DifferentiableSampler, PriorLogitGradientMatchesFiniteDifferences) {
  // The logits-head bias shifts alpha directly, so its gradient is dx/dalpha.
  Rng rng(24);
  auto model = tiny_model(rng, 3, 8);
  const Matrix z = Matrix::Constant(2, 1, 0.3);
  const Matrix g = gumbel_noise(3, 1, rng);
  const Matrix u = standard_normal(2, 1, rng);
  const double tau = 0.5;
  for (int j = 0; j < 2; ++j) {
    Matrix up = Matrix::Zero(2, 1);
    up(j, 0) = 1.0;
    const auto grad = differentiable_backward(model, sample_channel_differentiable(model, z, g, u, tau), up, true);
    for (int i = 0; i < 3; ++i) {
      auto& b = model.logits_head().biases[i];
      const double keep = b;
      b = keep + 1e-6;
      const double xp = sample_channel_differentiable(model, z, g, u, tau).x(j, 0);
      b = keep - 1e-6;
      const double xm = sample_channel_differentiable(model, z, g, u, tau).x(j, 0);
      b = keep;
      EXPECT_NEAR(grad.logits.biases[i], (xp - xm) / 2e-6, 1e-4 * std::max(1.0, std::abs(grad.logits.biases[i])));
    }
  }
}

TEST(DifferentiableSampler, GumbelMaxFrequenciesFollowPriors) {
  Rng rng(25);
  const auto model = tiny_model(rng, 3, 8);
  const Matrix z = Matrix::Constant(2, 1, -0.2);
  const Vector pi = gmm::mixture_weights(predict_params(model, z.col(0)));
  const int n = 100000;
  std::vector<int> column(static_cast<std::size_t>(n), 0);
  const auto s = sample_channel_differentiable(model, z, column, gumbel_noise(3, n, rng), standard_normal(2, n, rng));
  std::array<int, 3> count{};
  for (int c = 0; c < n; ++c) ++count[static_cast<std::size_t>(argmax(Vector(s.selector.col(c))))];
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(count[static_cast<std::size_t>(i)] / double(n), pi[i], 3.0 * std::sqrt(pi[i] * (1 - pi[i]) / n));
}

TEST(DifferentiableSampler, MomentsAgreeWithHardSampling) {
  Rng rng(26);
  const auto model = tiny_model(rng, 3, 16);
  const Matrix z = Matrix::Constant(2, 1, 0.4);
  const int n = 100000;
  std::vector<int> column(static_cast<std::size_t>(n), 0);
  const Matrix soft = sample_channel_differentiable(model, z, column, gumbel_noise(3, n, rng), standard_normal(2, n, rng)).x;
  const Matrix hard = sample_channel_batch(model, z.replicate(1, n), rng);
  for (int j = 0; j < 2; ++j) {
    const double ms = soft.row(j).mean(), mh = hard.row(j).mean();
    const double vs = (soft.row(j).array() - ms).square().mean();
    const double vh = (hard.row(j).array() - mh).square().mean();
    EXPECT_NEAR(ms, mh, 0.02 * std::sqrt(vh));
    EXPECT_NEAR(vs, vh, 0.02 * vh);
  }
}

TEST(DifferentiableSampler, RejectsNonPositiveTemperature) {
  Rng rng(27);
  const auto model = tiny_model(rng);
  const Matrix zero = Matrix::Zero(2, 1);
  EXPECT_THROW(sample_channel_differentiable(model, zero, zero, zero, 0.0), Error);
}

TEST(UniqueColumns, MapsEveryColumnToItsRepresentative) {
  Matrix z(2, 5);
  z << 1, 0, 1, 2, 0, 3, 0, 3, 2, 0;
  const auto u = unique_columns(z);
  EXPECT_EQ(u.values.cols(), 3);
  for (Eigen::Index c = 0; c < 5; ++c) EXPECT_EQ(u.values.col(u.index[static_cast<std::size_t>(c)]), z.col(c));
}

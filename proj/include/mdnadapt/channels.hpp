#pragma once

// Simulated channels used to generate source/target data: AWGN, uniform
// fading, Ricean/Rayleigh fading, random class-conditional Gaussian mixtures,
// and optional per-sample phase rotation and IQ imbalance on top.
//
// Noise convention: E||n||^2 = sigma0^2 in total, i.e. n ~ N(0, sigma0^2/d I),
// so that Eb/N0 = E||signal||^2 / (2 R E||n||^2) holds with the SNR formulas
// below verbatim.

#include "mdnadapt/common.hpp"
#include "mdnadapt/gmm.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mdnadapt::channels {

struct Awgn {
  double sigma0 = 0.0;
};

struct UniformFading {
  double a = 1.0;
  double sigma0 = 0.0;
};

struct Ricean {
  double nu = 0.0;
  double sigma_a = 1.0;
  double sigma0 = 0.0;
};

/// Per-class Gaussian mixtures defined around a reference constellation.
/// For a symbol z of class y the mixture is translated by z - reference[y],
/// so the channel follows the encoder when its constellation moves.
struct RandomGmm {
  gmm::SymbolConstellation reference;
  gmm::ConditionalMixture mixture;
  std::uint64_t seed = 0;
};

using BaseChannel = std::variant<Awgn, UniformFading, Ricean, RandomGmm>;

struct ChannelSpec {
  BaseChannel base = Awgn{};
  /// Maximum phase rotation in radians; angle ~ Unif[-phase_max, phase_max] per sample.
  double phase_max = 0.0;
  /// Simulated IQ imbalance level epsilon (not a hardware model).
  double iq_imbalance = 0.0;
  /// Bits per channel use.
  double rate = 2.0;
  /// Average power of the channel input.
  double p_avg = 1.0;

  std::string kind() const {
    return std::visit(
        [](const auto& b) -> std::string {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, Awgn>) return "awgn";
          else if constexpr (std::is_same_v<T, UniformFading>) return "uniform_fading";
          else if constexpr (std::is_same_v<T, Ricean>) return "ricean";
          else return "random_gmm";
        },
        base);
  }

  bool is_composite() const { return phase_max != 0.0 || iq_imbalance != 0.0; }

  void validate() const {
    require(rate > 0.0 && p_avg > 0.0, "channel: rate and average power must be positive");
    require(phase_max >= 0.0 && phase_max <= std::numbers::pi, "channel: phase_max must lie in [0, pi]");
    require(iq_imbalance >= 0.0 && iq_imbalance < 1.0, "channel: iq imbalance must lie in [0, 1)");
    std::visit(
        [](const auto& b) {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, Awgn>) {
            require(b.sigma0 >= 0.0, "awgn: sigma0 must be non-negative");
          } else if constexpr (std::is_same_v<T, UniformFading>) {
            require(b.a > 0.0 && b.sigma0 >= 0.0, "uniform fading: a > 0 and sigma0 >= 0 required");
          } else if constexpr (std::is_same_v<T, Ricean>) {
            require(b.sigma_a > 0.0 && b.nu >= 0.0 && b.sigma0 >= 0.0, "ricean: sigma_a > 0, nu >= 0 required");
          } else {
            b.mixture.validate();
            require(b.mixture.m() == b.reference.m(), "random gmm: mixture/reference symbol count mismatch");
          }
        },
        base);
  }
};

// ---------------------------------------------------------------------------
// SNR calibration

/// sigma0 = sqrt(p_avg / (2 R Eb/N0))
inline double awgn_sigma0(double ebn0_db, double p_avg, double rate) {
  require(p_avg > 0.0 && rate > 0.0, "awgn_sigma0: p_avg and rate must be positive");
  return std::sqrt(p_avg / (2.0 * rate * db_to_linear(ebn0_db)));
}

/// a = sqrt(6 R sigma0^2 (Eb/N0) / p_avg)
inline double uniform_fading_scale(double ebn0_db, double p_avg, double rate, double sigma0) {
  require(p_avg > 0.0 && rate > 0.0 && sigma0 > 0.0, "uniform_fading_scale: invalid arguments");
  return std::sqrt(6.0 * rate * sigma0 * sigma0 * db_to_linear(ebn0_db) / p_avg);
}

struct RiceParams {
  double sigma_a = 0.0;
  double nu = 0.0;
};

/// sigma_a fixed by the smallest SNR of interest, nu by the target:
/// 2 sigma_a^2 = 2 R sigma0^2 S_min / p_avg,  nu^2 = 2 R sigma0^2 (Eb/N0 - S_min) / p_avg.
inline RiceParams ricean_params(double ebn0_db, double p_avg, double rate, double sigma0, double s_min_db) {
  require(p_avg > 0.0 && rate > 0.0 && sigma0 > 0.0, "ricean_params: invalid arguments");
  const double ebn0 = db_to_linear(ebn0_db);
  const double s_min = db_to_linear(s_min_db);
  require(ebn0 >= s_min * (1.0 - 1e-12), "ricean_params: target Eb/N0 is below S_min");
  const double k = 2.0 * rate * sigma0 * sigma0 / p_avg;
  RiceParams p;
  p.sigma_a = std::sqrt(0.5 * k * s_min);
  p.nu = std::sqrt(std::max(0.0, k * (ebn0 - s_min)));
  return p;
}

/// Builds a parametric channel at a target Eb/N0. Fading channels take their
/// noise level from `sigma0`; when absent, uniform fading uses the AWGN
/// sigma0 at the same SNR and Ricean uses the AWGN sigma0 at S_min.
inline ChannelSpec make_snr_channel(const std::string& kind, double ebn0_db, double p_avg = 1.0, double rate = 2.0,
                                    std::optional<double> sigma0 = std::nullopt, double s_min_db = 10.0) {
  ChannelSpec spec;
  spec.rate = rate;
  spec.p_avg = p_avg;
  if (kind == "awgn") {
    spec.base = Awgn{awgn_sigma0(ebn0_db, p_avg, rate)};
  } else if (kind == "uniform_fading") {
    const double s0 = sigma0.value_or(awgn_sigma0(ebn0_db, p_avg, rate));
    spec.base = UniformFading{uniform_fading_scale(ebn0_db, p_avg, rate, s0), s0};
  } else if (kind == "ricean" || kind == "rayleigh") {
    const double s0 = sigma0.value_or(awgn_sigma0(s_min_db, p_avg, rate));
    const auto rp = ricean_params(kind == "rayleigh" ? s_min_db : ebn0_db, p_avg, rate, s0, s_min_db);
    spec.base = Ricean{rp.nu, rp.sigma_a, s0};
  } else {
    throw Error("make_snr_channel: unknown channel kind '" + kind + "'");
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Sampling

inline double sample_rice(double nu, double sigma_a, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double g1 = normal(rng);
  const double g2 = normal(rng);
  return std::hypot(nu + sigma_a * g1, sigma_a * g2);
}

/// One channel use split into its parts; x = distort(signal + noise).
struct ChannelDraw {
  Vector x;
  Vector signal;
  Vector noise;
};

inline Vector gaussian_noise(Eigen::Index d, double sigma0, Rng& rng) {
  if (sigma0 == 0.0) return Vector::Zero(d);
  return standard_normal_vector(d, rng) * (sigma0 / std::sqrt(static_cast<double>(d)));
}

/// Rotates every IQ pair (x_{2p}, x_{2p+1}) by the same angle.
inline Vector rotate_pairs(const Vector& x, double angle) {
  Vector out = x;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (Eigen::Index p = 0; p + 1 < x.size(); p += 2) {
    out[p] = c * x[p] - s * x[p + 1];
    out[p + 1] = s * x[p] + c * x[p + 1];
  }
  return out;
}

/// I' = (1 + eps) I,  Q' = (1 - eps) Q cos(eps * pi / 4), per IQ pair.
inline Vector apply_iq_imbalance(const Vector& x, double eps) {
  Vector out = x;
  const double skew = eps * std::numbers::pi / 4.0;
  for (Eigen::Index p = 0; p + 1 < x.size(); p += 2) {
    out[p] = (1.0 + eps) * x[p];
    out[p + 1] = (1.0 - eps) * x[p + 1] * std::cos(skew);
  }
  return out;
}

inline int nearest_symbol(const gmm::SymbolConstellation& c, const Vector& z) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int y = 0; y < c.m(); ++y) {
    const double dist = (c.symbols[static_cast<std::size_t>(y)] - z).squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = y;
    }
  }
  return best;
}

/// Draws x given z. `class_hint` selects the mixture of a RandomGmm channel;
/// without it the nearest reference symbol is used.
inline ChannelDraw draw_channel(const ChannelSpec& spec, const Vector& z, Rng& rng, std::optional<int> class_hint = std::nullopt) {
  const auto d = z.size();
  ChannelDraw out;
  std::visit(
      [&](const auto& b) {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, Awgn>) {
          out.signal = z;
          out.noise = gaussian_noise(d, b.sigma0, rng);
        } else if constexpr (std::is_same_v<T, UniformFading>) {
          std::uniform_real_distribution<double> unif(0.0, b.a);
          out.signal = unif(rng) * z;
          out.noise = gaussian_noise(d, b.sigma0, rng);
        } else if constexpr (std::is_same_v<T, Ricean>) {
          require(d % 2 == 0, "ricean channel: symbol dimension must be even (IQ pairs)");
          out.signal = z;
          for (Eigen::Index p = 0; p < d; p += 2) {
            const double a = sample_rice(b.nu, b.sigma_a, rng);
            out.signal[p] *= a;
            out.signal[p + 1] *= a;
          }
          out.noise = gaussian_noise(d, b.sigma0, rng);
        } else {
          require(d == b.reference.d(), "random gmm channel: dimension mismatch");
          const int y = class_hint.value_or(nearest_symbol(b.reference, z));
          require(y >= 0 && y < b.mixture.m(), "random gmm channel: class out of range");
          const auto draw = gmm::sample_mixture(b.mixture[y], rng);
          out.signal = z;
          out.noise = draw.x - b.reference.symbols[static_cast<std::size_t>(y)];
        }
      },
      spec.base);
  out.x = out.signal + out.noise;
  if (spec.phase_max > 0.0) {
    std::uniform_real_distribution<double> angle(-spec.phase_max, spec.phase_max);
    out.x = rotate_pairs(out.x, angle(rng));
  }
  if (spec.iq_imbalance > 0.0) out.x = apply_iq_imbalance(out.x, spec.iq_imbalance);
  return out;
}

inline Vector apply_channel(const ChannelSpec& spec, const Vector& z, Rng& rng, std::optional<int> class_hint = std::nullopt) {
  return draw_channel(spec, z, rng, class_hint).x;
}

/// E||signal||^2 / (2 R E||noise||^2) over n draws with uniformly chosen symbols.
inline double empirical_ebn0_db(const ChannelSpec& spec, const gmm::SymbolConstellation& constellation, std::size_t n,
                                Rng& rng) {
  std::uniform_int_distribution<int> pick(0, constellation.m() - 1);
  double sig = 0.0;
  double noise = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const int y = pick(rng);
    const auto draw = draw_channel(spec, constellation.symbols[static_cast<std::size_t>(y)], rng, y);
    sig += draw.signal.squaredNorm();
    noise += draw.noise.squaredNorm();
  }
  return linear_to_db(sig / (2.0 * spec.rate * noise));
}

// ---------------------------------------------------------------------------
// Constellations and random mixtures

/// Gray-coded square M-QAM with unit average power.
inline gmm::SymbolConstellation qam_constellation(int m) {
  const int levels = static_cast<int>(std::lround(std::sqrt(static_cast<double>(m))));
  require(levels >= 2 && levels * levels == m && (levels & (levels - 1)) == 0,
          "qam_constellation: m must be a square power of two >= 4");
  int bits = 0;
  while ((1 << bits) < levels) ++bits;
  auto position = [](int gray) {
    int b = gray;
    for (int shift = gray >> 1; shift != 0; shift >>= 1) b ^= shift;
    return b;
  };
  std::vector<Vector> symbols;
  double power = 0.0;
  for (int y = 0; y < m; ++y) {
    const int hi = y >> bits;
    const int lo = y & (levels - 1);
    Vector s(2);
    s[0] = 2.0 * position(hi) - (levels - 1);
    s[1] = 2.0 * position(lo) - (levels - 1);
    power += s.squaredNorm();
    symbols.push_back(s);
  }
  const double scale = std::sqrt(static_cast<double>(m) / power);
  for (auto& s : symbols) s *= scale;
  return gmm::SymbolConstellation::uniform(std::move(symbols));
}

/// Random class-conditional mixture around each symbol z: sigma = d_min(z)/4,
/// priors ~ Unif(0.05, 0.95) normalized, means ~ N(z, sigma^2 I), per-dimension
/// standard deviations ~ Unif(0.2 sigma, sigma).
inline gmm::ConditionalMixture make_random_gmm_channel(const gmm::SymbolConstellation& constellation, int k, Rng& rng) {
  require(constellation.m() >= 2, "random gmm: need at least two symbols");
  require(k >= 1, "random gmm: k must be positive");
  const auto d = constellation.d();
  std::uniform_real_distribution<double> prior_dist(0.05, 0.95);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  gmm::ConditionalMixture mix;
  for (int y = 0; y < constellation.m(); ++y) {
    const double dmin = constellation.min_distance(y);
    require(dmin > 0.0, "random gmm: coincident symbols");
    const double sigma = dmin / 4.0;
    const Vector& z = constellation.symbols[static_cast<std::size_t>(y)];
    Vector priors(k);
    for (int i = 0; i < k; ++i) priors[i] = prior_dist(rng);
    priors /= priors.sum();
    gmm::Components comps;
    for (int i = 0; i < k; ++i) {
      gmm::GaussianComponent c;
      c.prior_logit = std::log(priors[i]);
      c.mean = z;
      for (Eigen::Index j = 0; j < d; ++j) c.mean[j] += sigma * normal(rng);
      Vector var(d);
      for (Eigen::Index j = 0; j < d; ++j) {
        const double s = sigma * (0.2 + 0.8 * unit(rng));
        var[j] = s * s;
      }
      c.cov = gmm::Covariance::diagonal(var);
      comps.push_back(std::move(c));
    }
    mix.per_symbol.push_back(std::move(comps));
  }
  return mix;
}

inline ChannelSpec make_random_gmm_spec(const gmm::SymbolConstellation& constellation, int k, std::uint64_t seed,
                                        double rate = 2.0) {
  Rng rng(seed);
  ChannelSpec spec;
  spec.base = RandomGmm{constellation, make_random_gmm_channel(constellation, k, rng), seed};
  spec.rate = rate;
  spec.p_avg = constellation.average_power();
  return spec;
}

// ---------------------------------------------------------------------------
// Datasets

/// (x, y, z) with z == constellation[y].
struct LabeledSample {
  Vector x;
  int y = 0;
  Vector z;
};

using Dataset = std::vector<LabeledSample>;

/// Balanced dataset, class-major order: n_per_class draws for each class.
inline Dataset generate_dataset(const ChannelSpec& spec, const gmm::SymbolConstellation& constellation, int n_per_class,
                                Rng& rng) {
  require(n_per_class >= 1, "generate_dataset: n_per_class must be >= 1");
  spec.validate();
  Dataset out;
  out.reserve(static_cast<std::size_t>(n_per_class * constellation.m()));
  for (int y = 0; y < constellation.m(); ++y) {
    const Vector& z = constellation.symbols[static_cast<std::size_t>(y)];
    for (int n = 0; n < n_per_class; ++n) out.push_back({apply_channel(spec, z, rng, y), y, z});
  }
  return out;
}

/// Balanced dataset drawn directly from a conditional mixture.
inline Dataset generate_dataset(const gmm::ConditionalMixture& mixture, const gmm::SymbolConstellation& constellation,
                                int n_per_class, Rng& rng) {
  require(n_per_class >= 1, "generate_dataset: n_per_class must be >= 1");
  require(mixture.m() == constellation.m(), "generate_dataset: symbol count mismatch");
  Dataset out;
  out.reserve(static_cast<std::size_t>(n_per_class * constellation.m()));
  for (int y = 0; y < constellation.m(); ++y) {
    const Vector& z = constellation.symbols[static_cast<std::size_t>(y)];
    for (int n = 0; n < n_per_class; ++n) out.push_back({gmm::sample_mixture(mixture[y], rng).x, y, z});
  }
  return out;
}

inline std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const auto& s : data) y.push_back(s.y);
  return y;
}

/// Picks n_per_class samples of every class without replacement.
inline Dataset stratified_subsample(const Dataset& data, int m, int n_per_class, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data[i].y)].push_back(i);
  Dataset out;
  for (auto& idx : by_class) {
    require(static_cast<int>(idx.size()) >= n_per_class, "stratified_subsample: not enough samples in a class");
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int n = 0; n < n_per_class; ++n) out.push_back(data[idx[static_cast<std::size_t>(n)]]);
  }
  return out;
}

}  // namespace mdnadapt::channels

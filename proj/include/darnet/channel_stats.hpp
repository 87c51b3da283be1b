#pragma once

// Per-channel feature statistics, AdaIN restyling and channel-statistics
// disruption (CSD). All functions operate on C x N matrices where each row is
// one channel's spatial samples.

#include <darnet/tensor.hpp>

#include <cmath>
#include <random>
#include <set>

namespace darnet {

inline constexpr double kStatsEpsilon = 1e-5;

template <typename Scalar = double>
struct ChannelStats {
  Vector<Scalar> mu;
  Vector<Scalar> sigma;  // sqrt(var + eps)
};

template <typename Derived>
ChannelStats<typename Derived::Scalar> channel_stats(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.cols() < 1) throw ShapeError("channel_stats: empty spatial extent");
  ChannelStats<Scalar> s;
  s.mu = x.rowwise().mean();
  const Vector<Scalar> var = (x.colwise() - s.mu).array().square().rowwise().mean().matrix();
  s.sigma = (var.array() + Scalar(kStatsEpsilon)).sqrt().matrix();
  return s;
}

template <typename Scalar>
ChannelStats<Scalar> channel_stats(const FeatureMap<Scalar>& x) {
  return channel_stats(x.data);
}

/// AdaIN(x, y) = sigma(y) * (x - mu(x)) / sigma(x) + mu(y), per channel.
template <typename Scalar>
FeatureMap<Scalar> adain(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& y) {
  if (x.channels() != y.channels())
    throw ShapeError("adain: channel mismatch " + std::to_string(x.channels()) + " vs " +
                     std::to_string(y.channels()));
  const auto sx = channel_stats(x);
  const auto sy = channel_stats(y);
  FeatureMap<Scalar> out = x;
  const Vector<Scalar> scale = sy.sigma.cwiseQuotient(sx.sigma);
  out.data = (scale.asDiagonal() * (x.data.colwise() - sx.mu)).colwise() + sy.mu;
  return out;
}

enum class CsdSampling { kPerChannel, kPerMap };

struct CsdConfig {
  double apply_probability = 0.5;
  double noise_std = 0.75;
  std::set<int> target_blocks{0, 1};
  CsdSampling sampling = CsdSampling::kPerChannel;
  std::uint64_t seed = 0;
};

/// One draw of the CSD coefficients for a C-channel map. `applied` false
/// means the draw decided to leave the map untouched.
template <typename Scalar = double>
struct CsdDraw {
  bool applied = false;
  Vector<Scalar> scale;  // multiplies sigma(x)
  Vector<Scalar> shift;  // multiplies mu(x)
};

template <typename Scalar = double, typename Rng>
CsdDraw<Scalar> sample_csd(const CsdConfig& cfg, int channels, Rng& rng) {
  if (cfg.apply_probability < 0.0 || cfg.apply_probability > 1.0)
    throw std::invalid_argument("csd: apply_probability must lie in [0, 1]");
  CsdDraw<Scalar> draw;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (!(coin(rng) < cfg.apply_probability)) return draw;
  draw.applied = true;
  std::normal_distribution<double> noise(1.0, cfg.noise_std);
  draw.scale.resize(channels);
  draw.shift.resize(channels);
  if (cfg.sampling == CsdSampling::kPerMap) {
    draw.scale.setConstant(Scalar(noise(rng)));
    draw.shift.setConstant(Scalar(noise(rng)));
  } else {
    for (int c = 0; c < channels; ++c) {
      draw.scale(c) = Scalar(noise(rng));
      draw.shift(c) = Scalar(noise(rng));
    }
  }
  return draw;
}

/// CSD(x) = scale * sigma(x) * (x - mu(x)) / sigma(x) + shift * mu(x).
template <typename Derived>
Matrix<typename Derived::Scalar> csd_apply(const Eigen::MatrixBase<Derived>& x,
                                           const Vector<typename Derived::Scalar>& scale,
                                           const Vector<typename Derived::Scalar>& shift) {
  using Scalar = typename Derived::Scalar;
  if (scale.size() != x.rows() || shift.size() != x.rows())
    throw ShapeError("csd: coefficient length does not match channel count");
  const auto s = channel_stats(x);
  const Matrix<Scalar> normalized = s.sigma.cwiseInverse().asDiagonal() * (x.colwise() - s.mu);
  return (scale.cwiseProduct(s.sigma).asDiagonal() * normalized).colwise() + shift.cwiseProduct(s.mu);
}

/// Backward of csd_apply for fixed coefficients. Because sigma cancels,
/// y = scale * (x - mean(x)) + shift * mean(x), so
/// dx = scale * (g - mean(g)) + shift * mean(g) per channel.
template <typename Scalar>
Matrix<Scalar> csd_backward(const Matrix<Scalar>& upstream, const CsdDraw<Scalar>& draw) {
  if (!draw.applied) return upstream;
  const Vector<Scalar> g_mean = upstream.rowwise().mean();
  return (draw.scale.asDiagonal() * (upstream.colwise() - g_mean)).colwise() + draw.shift.cwiseProduct(g_mean);
}

enum class Mode { kEval, kTrain };

/// Train-time channel statistics disruption of a feature map.
template <typename Scalar, typename Rng>
FeatureMap<Scalar> csd_perturb(const FeatureMap<Scalar>& x, const CsdConfig& cfg, Rng& rng, Mode mode,
                               CsdDraw<Scalar>* drawn = nullptr) {
  if (mode != Mode::kTrain) throw std::logic_error("csd_perturb: channel statistics disruption is train-only");
  CsdDraw<Scalar> draw = sample_csd<Scalar>(cfg, x.channels(), rng);
  FeatureMap<Scalar> out = x;
  if (draw.applied) out.data = csd_apply(x.data, draw.scale, draw.shift);
  if (drawn) *drawn = std::move(draw);
  return out;
}

}  // namespace darnet

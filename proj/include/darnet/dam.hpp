#pragma once

// Distribution alignment module: an efficient-channel-attention gate followed
// by a square 1x1 convolution, with its exact backward pass.
//
//   s = mean_spatial(x)                       (C)
//   z = conv1d(s, kernel), zero padded        (C)
//   g = sigmoid(z)
//   y = diag(g) x
//   out = W y + b

#include <darnet/tensor.hpp>

#include <random>

namespace darnet {

template <typename Scalar = double>
struct DamParams {
  Vector<Scalar> eca_kernel;
  Matrix<Scalar> weight;
  Vector<Scalar> bias;

  int channels() const { return static_cast<int>(bias.size()); }
  int kernel_size() const { return static_cast<int>(eca_kernel.size()); }
  bool all_finite() const { return eca_kernel.allFinite() && weight.allFinite() && bias.allFinite(); }

  template <typename Other>
  DamParams<Other> cast() const {
    return {eca_kernel.template cast<Other>(), weight.template cast<Other>(), bias.template cast<Other>()};
  }
};

template <typename Scalar = double>
struct DamGradients {
  Vector<Scalar> eca_kernel;
  Matrix<Scalar> weight;
  Vector<Scalar> bias;
  Matrix<Scalar> input;  // d/dx, same shape as the forward input data
  double kappa = 0.0;
  double lambda_mix = 0.0;

  static DamGradients zeros_like(const DamParams<Scalar>& p, Eigen::Index pixels = 0) {
    DamGradients g;
    g.eca_kernel = Vector<Scalar>::Zero(p.eca_kernel.size());
    g.weight = Matrix<Scalar>::Zero(p.weight.rows(), p.weight.cols());
    g.bias = Vector<Scalar>::Zero(p.bias.size());
    g.input = Matrix<Scalar>::Zero(p.channels(), pixels);
    return g;
  }
  DamGradients& operator+=(const DamGradients& o) {
    eca_kernel += o.eca_kernel;
    weight += o.weight;
    bias += o.bias;
    kappa += o.kappa;
    lambda_mix += o.lambda_mix;
    return *this;
  }
};

struct DamOptions {
  bool bypass_gate = false;  // gate fixed at 1; isolates the 1x1 convolution
};

enum class DamInit { kIdentity, kRandom };

inline void validate_kernel_size(int k) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("dam: ECA kernel size must be odd and >= 1, got " + std::to_string(k));
}

template <typename Scalar = double>
DamParams<Scalar> init_dam(int channels, int kernel_size, DamInit mode, std::uint64_t seed = 0) {
  validate_kernel_size(kernel_size);
  if (channels < 1) throw std::invalid_argument("dam: channels must be >= 1");
  DamParams<Scalar> p;
  p.bias = Vector<Scalar>::Zero(channels);
  if (mode == DamInit::kIdentity) {
    // zero kernel gives a uniform 0.5 gate; the doubled diagonal undoes it
    p.eca_kernel = Vector<Scalar>::Zero(kernel_size);
    p.weight = Matrix<Scalar>::Identity(channels, channels) * Scalar(2);
    return p;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> kernel_noise(0.0, 0.1);
  std::normal_distribution<double> weight_noise(0.0, 1.0 / std::sqrt(double(channels)));
  p.eca_kernel = Vector<Scalar>::NullaryExpr(kernel_size, [&] { return Scalar(kernel_noise(rng)); });
  p.weight = Matrix<Scalar>::NullaryExpr(channels, channels, [&] { return Scalar(weight_noise(rng)); });
  return p;
}

namespace detail {

template <typename Scalar>
Vector<Scalar> eca_conv(const Vector<Scalar>& s, const Vector<Scalar>& kernel) {
  const Eigen::Index c = s.size();
  const Eigen::Index r = kernel.size() / 2;
  Vector<Scalar> z = Vector<Scalar>::Zero(c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < kernel.size(); ++j) {
      const Eigen::Index src = i + j - r;
      if (src >= 0 && src < c) z(i) += kernel(j) * s(src);
    }
  return z;
}

}  // namespace detail

/// Channel gate in (0, 1) for input x.
template <typename Scalar>
Vector<Scalar> dam_gate(const Matrix<Scalar>& x, const DamParams<Scalar>& p, const DamOptions& opt = {}) {
  if (opt.bypass_gate) return Vector<Scalar>::Ones(x.rows());
  const Vector<Scalar> s = x.rowwise().mean();
  const Vector<Scalar> z = detail::eca_conv(s, p.eca_kernel);
  return z.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
}

template <typename Scalar>
FeatureMap<Scalar> dam_forward(const FeatureMap<Scalar>& x, const DamParams<Scalar>& p, const DamOptions& opt = {}) {
  if (x.channels() != p.channels())
    throw ShapeError("dam_forward: input has " + std::to_string(x.channels()) + " channels, module expects " +
                     std::to_string(p.channels()));
  validate_kernel_size(p.kernel_size());
  const Vector<Scalar> g = dam_gate(x.data, p, opt);
  FeatureMap<Scalar> out = x;
  out.data.noalias() = p.weight * (g.asDiagonal() * x.data);
  out.data.colwise() += p.bias;
  return out;
}

/// Exact gradients of <upstream, dam_forward(x, p)> with respect to every
/// parameter and the input.
template <typename Scalar>
DamGradients<Scalar> dam_backward(const FeatureMap<Scalar>& x, const DamParams<Scalar>& p,
                                  const Matrix<Scalar>& upstream, const DamOptions& opt = {}) {
  if (upstream.rows() != x.data.rows() || upstream.cols() != x.data.cols())
    throw ShapeError("dam_backward: upstream shape mismatch");
  const Eigen::Index n = x.pixels();
  const Vector<Scalar> g = dam_gate(x.data, p, opt);
  const Matrix<Scalar> y = g.asDiagonal() * x.data;

  DamGradients<Scalar> grad;
  grad.weight.noalias() = upstream * y.transpose();
  grad.bias = upstream.rowwise().sum();
  const Matrix<Scalar> dy = p.weight.transpose() * upstream;
  grad.input = g.asDiagonal() * dy;
  grad.eca_kernel = Vector<Scalar>::Zero(p.eca_kernel.size());
  if (opt.bypass_gate) return grad;

  const Vector<Scalar> dg = dy.cwiseProduct(x.data).rowwise().sum();
  const Vector<Scalar> dz = dg.cwiseProduct(g.cwiseProduct((Vector<Scalar>::Ones(g.size()) - g)));
  const Vector<Scalar> s = x.data.rowwise().mean();
  const Eigen::Index c = s.size();
  const Eigen::Index r = p.eca_kernel.size() / 2;
  Vector<Scalar> ds = Vector<Scalar>::Zero(c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < p.eca_kernel.size(); ++j) {
      const Eigen::Index src = i + j - r;
      if (src < 0 || src >= c) continue;
      grad.eca_kernel(j) += dz(i) * s(src);
      ds(src) += dz(i) * p.eca_kernel(j);
    }
  grad.input.colwise() += ds / Scalar(n);
  return grad;
}

}  // namespace darnet

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace darnet {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
/// H x W grid, row-major so that the flat index of (y, x) is y * W + x.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary {0, 1} mask over an H x W grid.
using BinaryMask = Grid<std::uint8_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an episode has no usable foreground or background evidence.
class DegenerateEpisode : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// C x H x W tensor stored as a C x (H*W) matrix; column p is the feature
/// vector of pixel (p / W, p % W).
template <typename Scalar = double>
struct FeatureMap {
  Matrix<Scalar> data;
  int height = 0;
  int width = 0;
  int stride = 1;

  FeatureMap() = default;
  FeatureMap(int channels, int h, int w, int s = 1)
      : data(Matrix<Scalar>::Zero(channels, Eigen::Index(h) * w)), height(h), width(w), stride(s) {}
  FeatureMap(Matrix<Scalar> d, int h, int w, int s = 1) : data(std::move(d)), height(h), width(w), stride(s) {
    if (data.cols() != Eigen::Index(h) * w) throw ShapeError("feature map: column count != H*W");
  }

  int channels() const { return static_cast<int>(data.rows()); }
  Eigen::Index pixels() const { return data.cols(); }
  Scalar& at(int c, int y, int x) { return data(c, Eigen::Index(y) * width + x); }
  Scalar at(int c, int y, int x) const { return data(c, Eigen::Index(y) * width + x); }
  bool all_finite() const { return data.allFinite(); }

  template <typename Other>
  FeatureMap<Other> cast() const {
    return FeatureMap<Other>(data.template cast<Other>(), height, width, stride);
  }
};

/// An RGB image in [0, 1] is a three-channel map at stride 1.
using Image = FeatureMap<float>;

template <typename Scalar = double>
struct ConfidenceMap {
  Grid<Scalar> fg;
  Grid<Scalar> bg;

  int height() const { return static_cast<int>(fg.rows()); }
  int width() const { return static_cast<int>(fg.cols()); }
};

/// Ternary labels produced by confidence thresholding.
enum Label : std::uint8_t { kBackground = 0, kForeground = 1, kLost = 2 };
using TernaryMask = Grid<std::uint8_t>;

template <typename A, typename B>
void require_same_grid(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": resolution mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

template <typename Scalar>
void require_grid(const FeatureMap<Scalar>& f, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (f.height != rows || f.width != cols)
    throw ShapeError(std::string(what) + ": mask " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " does not match feature grid " + std::to_string(f.height) + "x" +
                     std::to_string(f.width));
}

/// Flat view of a row-major grid, in feature-column order.
template <typename Scalar>
auto flat(const Grid<Scalar>& g) {
  return Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.data(), g.size());
}
template <typename Scalar>
auto flat(Grid<Scalar>& g) {
  return Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.data(), g.size());
}

/// Nearest-neighbour resampling of a mask (half-pixel centres).
inline BinaryMask resize_nearest(const BinaryMask& m, int height, int width) {
  if (m.rows() == height && m.cols() == width) return m;
  BinaryMask out(height, width);
  const double sy = double(m.rows()) / height;
  const double sx = double(m.cols()) / width;
  for (int y = 0; y < height; ++y) {
    const auto yi = std::min<Eigen::Index>(static_cast<Eigen::Index>((y + 0.5) * sy), m.rows() - 1);
    for (int x = 0; x < width; ++x) {
      const auto xi = std::min<Eigen::Index>(static_cast<Eigen::Index>((x + 0.5) * sx), m.cols() - 1);
      out(y, x) = m(yi, xi);
    }
  }
  return out;
}

/// Bilinear resampling of a scalar grid (half-pixel centres, edge clamp).
template <typename Scalar>
Grid<Scalar> resize_bilinear(const Grid<Scalar>& g, int height, int width) {
  if (g.rows() == height && g.cols() == width) return g;
  Grid<Scalar> out(height, width);
  const double sy = double(g.rows()) / height;
  const double sx = double(g.cols()) / width;
  const auto last_y = g.rows() - 1;
  const auto last_x = g.cols() - 1;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(last_y));
    const auto y0 = static_cast<Eigen::Index>(fy);
    const auto y1 = std::min(y0 + 1, last_y);
    const Scalar wy = Scalar(fy - double(y0));
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(last_x));
      const auto x0 = static_cast<Eigen::Index>(fx);
      const auto x1 = std::min(x0 + 1, last_x);
      const Scalar wx = Scalar(fx - double(x0));
      const Scalar top = g(y0, x0) * (Scalar(1) - wx) + g(y0, x1) * wx;
      const Scalar bottom = g(y1, x0) * (Scalar(1) - wx) + g(y1, x1) * wx;
      out(y, x) = top * (Scalar(1) - wy) + bottom * wy;
    }
  }
  return out;
}

}  // namespace darnet

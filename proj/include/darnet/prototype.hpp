#pragma once

// Prototype matching primitives: masked average pooling, cosine similarity
// maps, two-way softmax confidences, threshold filtering and self-matching.

#include <darnet/tensor.hpp>

#include <cmath>

namespace darnet {

inline constexpr double kCosineEpsilon = 1e-8;

/// A pooled C-vector. count == 0 marks the vector as invalid.
template <typename Scalar = double>
struct PooledVector {
  Vector<Scalar> value;
  Eigen::Index count = 0;
  bool valid() const { return count > 0; }
};

template <typename Scalar = double>
struct Prototype {
  Vector<Scalar> fg;
  Vector<Scalar> bg;
  Eigen::Index fg_count = 0;
  Eigen::Index bg_count = 0;

  bool fg_valid() const { return fg_count > 0; }
  bool bg_valid() const { return bg_count > 0; }
  bool valid() const { return fg_valid() && bg_valid(); }
};

/// Mean of the feature columns selected by `selected` (nonzero entries).
template <typename Scalar, typename MaskScalar>
PooledVector<Scalar> masked_average_pool(const FeatureMap<Scalar>& f, const Grid<MaskScalar>& selected) {
  require_grid(f, selected.rows(), selected.cols(), "masked_average_pool");
  PooledVector<Scalar> out;
  out.value = Vector<Scalar>::Zero(f.channels());
  const auto sel = flat(selected);
  for (Eigen::Index p = 0; p < f.pixels(); ++p) {
    if (sel(p) != MaskScalar(0)) {
      out.value += f.data.col(p);
      ++out.count;
    }
  }
  if (out.count > 0) out.value /= Scalar(out.count);
  return out;
}

template <typename Scalar>
Prototype<Scalar> support_prototype(const FeatureMap<Scalar>& f, const BinaryMask& mask) {
  const BinaryMask background = (mask == 0).template cast<std::uint8_t>();
  const auto fg = masked_average_pool(f, mask);
  const auto bg = masked_average_pool(f, background);
  return {fg.value, bg.value, fg.count, bg.count};
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  return a.dot(b) / (a.norm() * b.norm() + Scalar(kCosineEpsilon));
}

/// Per-pixel cosine similarity between `p` and every feature column.
template <typename Scalar>
Grid<Scalar> cosine_map(const Vector<Scalar>& p, const FeatureMap<Scalar>& f) {
  if (p.size() != f.channels()) throw ShapeError("cosine_map: prototype length != channels");
  const Scalar pn = p.norm();
  if (!(pn > Scalar(0)) || !p.allFinite()) throw std::invalid_argument("cosine_map: invalid prototype");
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> dots = (p.transpose() * f.data).array();
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> norms = f.data.colwise().norm().array();
  Grid<Scalar> out(f.height, f.width);
  flat(out) = (dots / (norms * pn + Scalar(kCosineEpsilon))).transpose();
  return out;
}

/// Accumulates d(cosine_map)/d(p) and d/d(f) given upstream d/d(cos) per pixel.
template <typename Scalar>
void cosine_map_backward(const Vector<Scalar>& p, const FeatureMap<Scalar>& f, const Grid<Scalar>& upstream,
                         Vector<Scalar>& grad_p, Matrix<Scalar>* grad_f) {
  const Scalar pn = p.norm();
  const auto up = flat(upstream);
  for (Eigen::Index i = 0; i < f.pixels(); ++i) {
    const Scalar g = up(i);
    if (g == Scalar(0)) continue;
    const auto col = f.data.col(i);
    const Scalar fn = col.norm();
    const Scalar denom = pn * fn + Scalar(kCosineEpsilon);
    const Scalar dot = p.dot(col);
    const Scalar k = dot / (denom * denom);
    if (pn > Scalar(0)) grad_p += g * (col / denom - k * (fn / pn) * p);
    if (grad_f && fn > Scalar(0)) grad_f->col(i) += g * (p / denom - k * (pn / fn) * col);
  }
}

template <typename Scalar>
Grid<Scalar> sigmoid(const Grid<Scalar>& z) {
  return z.unaryExpr([](Scalar v) {
    if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
}

/// Two-way softmax over temperature-scaled fg/bg similarity maps.
template <typename Scalar>
ConfidenceMap<Scalar> softmax_confidence(const Grid<Scalar>& cos_fg, const Grid<Scalar>& cos_bg, Scalar temperature) {
  require_same_grid(cos_fg, cos_bg, "softmax_confidence");
  const Grid<Scalar> z = temperature * (cos_fg - cos_bg);
  return {sigmoid<Scalar>(z), sigmoid<Scalar>(-z)};
}

template <typename Scalar>
ConfidenceMap<Scalar> predict_confidence(const Prototype<Scalar>& p, const FeatureMap<Scalar>& f, Scalar temperature) {
  if (!p.fg_valid() || !p.bg_valid())
    throw std::invalid_argument("predict_confidence: prototype half is invalid");
  return softmax_confidence<Scalar>(cosine_map(p.fg, f), cosine_map(p.bg, f), temperature);
}

/// FG where fg > tau_fg, BG where bg > tau_bg, LOST otherwise. A pixel that
/// qualifies for both takes the side with the larger confidence (BG on ties).
template <typename Scalar>
TernaryMask threshold_filter(const ConfidenceMap<Scalar>& cm, double tau_fg, double tau_bg) {
  TernaryMask out(cm.height(), cm.width());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const Scalar fg = cm.fg.data()[i];
    const Scalar bg = cm.bg.data()[i];
    const bool is_fg = fg > tau_fg;
    const bool is_bg = bg > tau_bg;
    std::uint8_t label = kLost;
    if (is_fg && is_bg)
      label = fg > bg ? kForeground : kBackground;
    else if (is_fg)
      label = kForeground;
    else if (is_bg)
      label = kBackground;
    out.data()[i] = label;
  }
  return out;
}

template <typename Scalar>
Scalar fg_bg_similarity(const Prototype<Scalar>& p) {
  if (!p.valid()) throw std::invalid_argument("fg_bg_similarity: prototype half is invalid");
  return cosine(p.fg, p.bg);
}

template <typename Scalar>
Prototype<Scalar> build_query_prototype(const FeatureMap<Scalar>& f_q, const TernaryMask& tm) {
  const BinaryMask fg_sel = (tm == kForeground).template cast<std::uint8_t>();
  const BinaryMask bg_sel = (tm == kBackground).template cast<std::uint8_t>();
  const auto fg = masked_average_pool(f_q, fg_sel);
  const auto bg = masked_average_pool(f_q, bg_sel);
  if (!fg.valid() && !bg.valid())
    throw DegenerateEpisode("build_query_prototype: no confident foreground or background pixels");
  return {fg.value, bg.value, fg.count, bg.count};
}

/// alpha * a + beta * b per half; a half that is invalid on one side falls
/// back to the other side alone.
template <typename Scalar>
Prototype<Scalar> blend_prototypes(const Prototype<Scalar>& a, const Prototype<Scalar>& b, Scalar alpha, Scalar beta) {
  if (alpha < Scalar(0) || beta < Scalar(0)) throw std::invalid_argument("self_match: alpha, beta must be >= 0");
  auto half = [&](const Vector<Scalar>& va, Eigen::Index ca, const Vector<Scalar>& vb, Eigen::Index cb,
                  Vector<Scalar>& out, Eigen::Index& count) {
    if (ca > 0 && cb > 0 && beta != Scalar(0)) {
      out = alpha * va + beta * vb;
    } else if (ca > 0) {
      out = va;
    } else if (cb > 0) {
      out = vb;
    } else {
      throw std::invalid_argument("self_match: both prototypes invalid on one half");
    }
    count = ca + cb;
  };
  Prototype<Scalar> out;
  half(a.fg, a.fg_count, b.fg, b.fg_count, out.fg, out.fg_count);
  half(a.bg, a.bg_count, b.bg, b.bg_count, out.bg, out.bg_count);
  return out;
}

template <typename Scalar>
ConfidenceMap<Scalar> self_match(const Prototype<Scalar>& p_s, const Prototype<Scalar>& p_q_star,
                                 const FeatureMap<Scalar>& f_q, Scalar alpha, Scalar beta, Scalar temperature) {
  return predict_confidence(blend_prototypes(p_s, p_q_star, alpha, beta), f_q, temperature);
}

/// Backward of masked_average_pool: scatters d/d(mean) over the pooled columns.
template <typename Scalar, typename MaskScalar>
void masked_average_pool_backward(const Vector<Scalar>& grad_mean, const Grid<MaskScalar>& selected, Matrix<Scalar>& grad_f,
                                  Scalar extra_scale = Scalar(1)) {
  const auto sel = flat(selected);
  Eigen::Index count = 0;
  for (Eigen::Index p = 0; p < sel.size(); ++p) count += sel(p) != MaskScalar(0);
  if (count == 0) return;
  const Vector<Scalar> share = grad_mean * (extra_scale / Scalar(count));
  for (Eigen::Index p = 0; p < sel.size(); ++p)
    if (sel(p) != MaskScalar(0)) grad_f.col(p) += share;
}

/// Backward of predict_confidence given d/dz per pixel, z = T (cos_fg - cos_bg).
template <typename Scalar>
void predict_confidence_backward(const Prototype<Scalar>& p, const FeatureMap<Scalar>& f, const Grid<Scalar>& grad_logit,
                                 Scalar temperature, Vector<Scalar>& grad_fg, Vector<Scalar>& grad_bg,
                                 Matrix<Scalar>* grad_f) {
  const Grid<Scalar> up = temperature * grad_logit;
  cosine_map_backward<Scalar>(p.fg, f, up, grad_fg, grad_f);
  cosine_map_backward<Scalar>(p.bg, f, Grid<Scalar>(-up), grad_bg, grad_f);
}

inline constexpr double kDefaultTauFg = 0.8;
inline constexpr double kDefaultTauBg = 0.6;

template <typename Scalar = double>
struct Branch1Result {
  ConfidenceMap<Scalar> m0;
  ConfidenceMap<Scalar> m1;
  Prototype<Scalar> p_s;
  Prototype<Scalar> p_q_star;
  TernaryMask filtered;
  bool degenerate = false;  // no confident query pixels; m1 falls back to m0
};

/// Support matching (M0) followed by one self-matching pass (M1).
template <typename Scalar>
Branch1Result<Scalar> branch1_forward(const Prototype<Scalar>& p_s, const FeatureMap<Scalar>& f_q, Scalar temperature,
                                      double tau_fg = kDefaultTauFg, double tau_bg = kDefaultTauBg) {
  Branch1Result<Scalar> r;
  r.p_s = p_s;
  r.m0 = predict_confidence(p_s, f_q, temperature);
  r.filtered = threshold_filter(r.m0, tau_fg, tau_bg);
  r.p_q_star = build_query_prototype(f_q, r.filtered);
  r.m1 = self_match(p_s, r.p_q_star, f_q, Scalar(0.5), Scalar(0.5), temperature);
  return r;
}

template <typename Scalar>
Branch1Result<Scalar> branch1_forward(const FeatureMap<Scalar>& f_s, const BinaryMask& m_s,
                                      const FeatureMap<Scalar>& f_q, Scalar temperature) {
  const Prototype<Scalar> p_s = support_prototype(f_s, m_s);
  if (!p_s.valid()) throw DegenerateEpisode("branch1_forward: support mask lacks foreground or background");
  return branch1_forward(p_s, f_q, temperature);
}

}  // namespace darnet

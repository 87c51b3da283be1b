#pragma once

// Training and test-time adaptation losses with their gradients with respect
// to the foreground probability (bg = 1 - fg).

#include <darnet/tensor.hpp>

#include <cmath>
#include <span>

namespace darnet {

inline constexpr double kProbClampLow = 1e-7;
inline constexpr double kProbClampHigh = 1.0 - 1e-7;

struct TrainLossWeights {
  double l1 = 1.0;
  double l2 = 1.0;
  double l3 = 0.3;
};

struct TtaLossWeights {
  double bce = 0.7;
  double att = 0.3;
};

struct LossReport {
  double l1 = 0, l2 = 0, l3 = 0, l_train = 0;
  double l_bce = 0, l_att = 0, l_tta = 0;
  TrainLossWeights train_weights;
  TtaLossWeights tta_weights;
};

/// Per-pixel BCE, probabilities clamped to [1e-7, 1 - 1e-7].
template <typename Scalar>
Grid<Scalar> bce_pixels(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt) {
  require_same_grid(pred.fg, gt, "bce_loss");
  require_same_grid(pred.bg, gt, "bce_loss");
  const Grid<Scalar> pf = pred.fg.cwiseMax(Scalar(kProbClampLow)).cwiseMin(Scalar(kProbClampHigh));
  const Grid<Scalar> pb = pred.bg.cwiseMax(Scalar(kProbClampLow)).cwiseMin(Scalar(kProbClampHigh));
  const Grid<Scalar> m = gt.template cast<Scalar>();
  return -(m * pf.log() + (Scalar(1) - m) * pb.log());
}

template <typename Scalar>
Scalar bce_loss(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt) {
  return bce_pixels(pred, gt).mean();
}

/// d bce_loss / d p_fg with p_bg = 1 - p_fg. Zero where the clamp is active.
template <typename Scalar>
Grid<Scalar> bce_grad_fg(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt) {
  require_same_grid(pred.fg, gt, "bce_grad_fg");
  const Scalar n = Scalar(gt.size());
  Grid<Scalar> g(gt.rows(), gt.cols());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const Scalar pf = pred.fg.data()[i];
    const Scalar pb = pred.bg.data()[i];
    if (gt.data()[i]) {
      g.data()[i] = (pf > Scalar(kProbClampLow) && pf < Scalar(kProbClampHigh)) ? -Scalar(1) / (pf * n) : Scalar(0);
    } else {
      g.data()[i] = (pb > Scalar(kProbClampLow) && pb < Scalar(kProbClampHigh)) ? Scalar(1) / (pb * n) : Scalar(0);
    }
  }
  return g;
}

/// Attention-weighted BCE for one sample: sum (1 + a A) BCE / sum (1 + a A).
template <typename Scalar>
Scalar attention_loss(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt, const Grid<Scalar>& attention,
                      Scalar alpha) {
  require_same_grid(attention, gt, "attention_loss");
  if (alpha < Scalar(0)) throw std::invalid_argument("attention_loss: alpha must be >= 0");
  const Grid<Scalar> w = Scalar(1) + alpha * attention;
  return (w * bce_pixels(pred, gt)).sum() / w.sum();
}

template <typename Scalar>
struct AttentionSample {
  const ConfidenceMap<Scalar>* pred;
  const BinaryMask* gt;
  const Grid<Scalar>* attention;
};

/// Batch form: mean over the N samples of the per-sample attention loss.
template <typename Scalar>
Scalar attention_loss(std::span<const AttentionSample<Scalar>> batch, Scalar alpha) {
  if (batch.empty()) return Scalar(0);
  Scalar total = 0;
  for (const auto& s : batch) total += attention_loss(*s.pred, *s.gt, *s.attention, alpha);
  return total / Scalar(batch.size());
}

template <typename Scalar>
Grid<Scalar> attention_grad_fg(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt, const Grid<Scalar>& attention,
                               Scalar alpha) {
  const Grid<Scalar> w = Scalar(1) + alpha * attention;
  // bce_grad_fg carries a 1/N factor; replace it by the normalized weight
  return bce_grad_fg(pred, gt) * w * (Scalar(gt.size()) / w.sum());
}

template <typename Scalar>
LossReport train_loss(const ConfidenceMap<Scalar>& m_pre, const ConfidenceMap<Scalar>& out1,
                      const ConfidenceMap<Scalar>& support_pred, const BinaryMask& gt_query,
                      const BinaryMask& gt_support, const TrainLossWeights& w = {}) {
  LossReport r;
  r.train_weights = w;
  r.l1 = double(bce_loss(m_pre, gt_query));
  r.l2 = double(bce_loss(out1, gt_query));
  r.l3 = double(bce_loss(support_pred, gt_support));
  r.l_train = w.l1 * r.l1 + w.l2 * r.l2 + w.l3 * r.l3;
  return r;
}

template <typename Scalar>
LossReport tta_loss(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt_support, const Grid<Scalar>& attention,
                    Scalar alpha, const TtaLossWeights& w = {}) {
  LossReport r;
  r.tta_weights = w;
  r.l_bce = double(bce_loss(pred, gt_support));
  r.l_att = double(attention_loss(pred, gt_support, attention, alpha));
  r.l_tta = w.bce * r.l_bce + w.att * r.l_att;
  return r;
}

template <typename Scalar>
Grid<Scalar> tta_grad_fg(const ConfidenceMap<Scalar>& pred, const BinaryMask& gt_support, const Grid<Scalar>& attention,
                         Scalar alpha, const TtaLossWeights& w = {}) {
  return Scalar(w.bce) * bce_grad_fg(pred, gt_support) +
         Scalar(w.att) * attention_grad_fg(pred, gt_support, attention, alpha);
}

/// Chain d/d p_fg through the two-way softmax p_fg = sigmoid(z) to d/dz.
template <typename Scalar>
Grid<Scalar> grad_fg_to_logit(const ConfidenceMap<Scalar>& pred, const Grid<Scalar>& grad_fg) {
  return grad_fg * pred.fg * pred.bg;
}

}  // namespace darnet

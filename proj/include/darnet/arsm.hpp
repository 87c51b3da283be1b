#pragma once

// Adaptive refine self-matching: indistinguishable-pixel detection, the
// episode-adaptive threshold shift and the staged refinement loop.

#include <darnet/prototype.hpp>

#include <limits>
#include <string>
#include <vector>

namespace darnet {

inline constexpr double kTauMin = 0.05;
inline constexpr double kTauMax = 0.99;
inline constexpr double kStageStep = 0.05;
inline constexpr double kMaxShiftPerKappa = 0.2;

/// Threshold state for one episode. lambda_mix is stored as a logit so that
/// any optimizer update keeps it inside (0, 1).
struct ThresholdState {
  double tau_fg = kDefaultTauFg;
  double tau_bg = kDefaultTauBg;
  double tau_initial = 0.7;
  double kappa = 1.0;
  double lambda_logit = 0.0;
  double delta = 0.0;

  double lambda_mix() const { return 1.0 / (1.0 + std::exp(-lambda_logit)); }
  void set_lambda_mix(double v) {
    v = std::clamp(v, 1e-9, 1.0 - 1e-9);
    lambda_logit = std::log(v / (1.0 - v));
  }
  double max_shift() const { return kMaxShiftPerKappa * kappa; }
};

inline double clamp_tau(double t) { return std::clamp(t, kTauMin, kTauMax); }

template <typename Scalar = double>
struct AverageSimilarity {
  Scalar ave_fg = 0;
  Scalar ave_bg = 0;
  bool fg_valid = false;
  bool bg_valid = false;
};

template <typename Scalar>
AverageSimilarity<Scalar> average_similarity(const Prototype<Scalar>& p_q, const FeatureMap<Scalar>& f_q,
                                             const TernaryMask& tm) {
  require_grid(f_q, tm.rows(), tm.cols(), "average_similarity");
  AverageSimilarity<Scalar> out;
  const auto labels = flat(tm);
  auto region_mean = [&](const Vector<Scalar>& proto, std::uint8_t label, Scalar& ave, bool& valid) {
    const Grid<Scalar> cos = cosine_map(proto, f_q);
    const auto c = flat(cos);
    Scalar sum = 0;
    Eigen::Index n = 0;
    for (Eigen::Index i = 0; i < labels.size(); ++i)
      if (labels(i) == label) {
        sum += c(i);
        ++n;
      }
    valid = n > 0;
    ave = valid ? sum / Scalar(n) : Scalar(0);
  };
  if (p_q.fg_valid()) region_mean(p_q.fg, kForeground, out.ave_fg, out.fg_valid);
  if (p_q.bg_valid()) region_mean(p_q.bg, kBackground, out.ave_bg, out.bg_valid);
  return out;
}

/// LOST pixels whose similarity to both query prototype halves exceeds the
/// corresponding average similarity.
template <typename Scalar>
BinaryMask similar_pixel_mask(const FeatureMap<Scalar>& f_q, const Prototype<Scalar>& p_q, const TernaryMask& tm,
                              Scalar ave_fg, Scalar ave_bg) {
  require_grid(f_q, tm.rows(), tm.cols(), "similar_pixel_mask");
  BinaryMask out = BinaryMask::Zero(tm.rows(), tm.cols());
  if (!p_q.valid()) return out;
  const Grid<Scalar> cf = cosine_map(p_q.fg, f_q);
  const Grid<Scalar> cb = cosine_map(p_q.bg, f_q);
  out = ((tm == kLost) && (cf > ave_fg) && (cb > ave_bg)).template cast<std::uint8_t>();
  return out;
}

struct DeltaResult {
  double delta = 0.0;
  double ratio_term = 0.0;    // (FB_q - FB_s) / FB_q after clamping to [-1, 1]
  double count_term = 0.0;    // Sim_num / Union_num
  bool fb_q_zero = false;     // ratio term dropped because FB_q == 0
  bool clamped = false;       // final delta hit +-max_shift
  double d_kappa = 0.0;       // d delta / d kappa
  double d_lambda = 0.0;      // d delta / d lambda_mix
};

/// delta = 0.2 kappa (lambda (FB_q - FB_s) / FB_q + (1 - lambda) Sim / Union).
inline DeltaResult adaptive_delta(double fb_q, double fb_s, long sim_num, long union_num, double kappa,
                                  double lambda_mix) {
  if (union_num <= 0) throw DegenerateEpisode("adaptive_delta: union of query foreground and background is empty");
  DeltaResult r;
  if (fb_q == 0.0 || !std::isfinite(fb_q)) {
    r.fb_q_zero = true;
  } else {
    r.ratio_term = std::clamp((fb_q - fb_s) / fb_q, -1.0, 1.0);
  }
  r.count_term = double(sim_num) / double(union_num);
  const double max_shift = kMaxShiftPerKappa * kappa;
  const double inner = lambda_mix * r.ratio_term + (1.0 - lambda_mix) * r.count_term;
  const double raw = max_shift * inner;
  r.delta = std::clamp(raw, -std::abs(max_shift), std::abs(max_shift));
  r.clamped = r.delta != raw;
  r.d_kappa = kMaxShiftPerKappa * (r.clamped ? (raw > 0 ? 1.0 : -1.0) : inner);
  r.d_lambda = r.clamped ? 0.0 : max_shift * (r.ratio_term - r.count_term);
  return r;
}

enum class StopReason { kFbNotDecreasing, kMaxStages, kDegenerate };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::kFbNotDecreasing:
      return "fb_not_decreasing";
    case StopReason::kMaxStages:
      return "max_stages";
    case StopReason::kDegenerate:
      return "degenerate";
  }
  return "unknown";
}

struct StageRecord {
  int stage = 0;
  double tau_fg = 0.0;
  double tau_bg = 0.0;
  double fb_q = std::numeric_limits<double>::quiet_NaN();
  double iou = std::numeric_limits<double>::quiet_NaN();  // filled by callers that know the ground truth
};

struct RefineTrace {
  std::vector<StageRecord> stages;
  StopReason stop_reason = StopReason::kMaxStages;
  int selected_stage = 0;
  int self_match_calls = 0;
  double delta = 0.0;
  long sim_num = 0;
  long union_num = 0;
  bool fb_q_zero = false;
};

/// How the stage-0 threshold shift is chosen.
struct ShiftPolicy {
  enum class Kind { kAdaptive, kFixed } kind = Kind::kAdaptive;
  double fixed_shift = 0.0;  // used by kFixed (0 reproduces the unadjusted thresholds)
};

struct RefineOptions {
  int max_stages = 4;
  ShiftPolicy shift;
  double alpha = 0.5;
  double beta = 0.5;
  // Each stage blends into the previous stage's support prototype instead of
  // the original one.
  bool chain_prototypes = true;
};

/// One accepted refinement stage, kept for differentiation.
template <typename Scalar = double>
struct StageState {
  ConfidenceMap<Scalar> input;  // confidences that were thresholded
  TernaryMask filter;
  Prototype<Scalar> p_q_star;
  Prototype<Scalar> support;    // prototype blended with p_q_star
  double tau_fg = 0.0;
  double tau_bg = 0.0;
  bool tau_active = false;      // thresholds depend on delta (not clamped)
};

/// Everything needed to differentiate through the selected stage.
template <typename Scalar = double>
struct RefineResult {
  ConfidenceMap<Scalar> m2;
  RefineTrace trace;
  Prototype<Scalar> p_s;
  Prototype<Scalar> p_q_initial;           // from the unshifted filter of M_pre
  BinaryMask similar;                      // M_similar at feature resolution
  std::vector<StageState<Scalar>> path;    // stages 0..selected
  DeltaResult shift_info;
  bool adaptive = false;                   // delta came from adaptive_delta
  bool used_self_match() const { return !path.empty(); }
};

template <typename Scalar>
RefineResult<Scalar> refine_loop(const FeatureMap<Scalar>& f_q, const Prototype<Scalar>& p_s,
                                 const ThresholdState& state, const RefineOptions& opt, Scalar temperature) {
  if (opt.max_stages < 1) throw std::invalid_argument("refine_loop: max_stages must be >= 1");
  if (!p_s.valid()) throw DegenerateEpisode("refine_loop: support prototype lacks foreground or background");
  RefineResult<Scalar> r;
  r.p_s = p_s;
  r.similar = BinaryMask::Zero(f_q.height, f_q.width);
  const ConfidenceMap<Scalar> m_pre = predict_confidence(p_s, f_q, temperature);
  r.m2 = m_pre;

  const TernaryMask initial = threshold_filter(m_pre, state.tau_fg, state.tau_bg);
  try {
    r.p_q_initial = build_query_prototype(f_q, initial);
  } catch (const DegenerateEpisode&) {
    r.trace.stop_reason = StopReason::kDegenerate;
    r.trace.stages.push_back({0, state.tau_fg, state.tau_bg});
    return r;
  }

  double shift = 0.0;
  if (opt.shift.kind == ShiftPolicy::Kind::kAdaptive) {
    const auto ave = average_similarity(r.p_q_initial, f_q, initial);
    if (ave.fg_valid && ave.bg_valid)
      r.similar = similar_pixel_mask(f_q, r.p_q_initial, initial, ave.ave_fg, ave.ave_bg);
    r.trace.sim_num = static_cast<long>(r.similar.template cast<long>().sum());
    r.trace.union_num = static_cast<long>((initial != kLost).template cast<long>().sum());
    const double fb_q = r.p_q_initial.valid() ? double(fg_bg_similarity(r.p_q_initial)) : 0.0;
    const double fb_s = double(fg_bg_similarity(p_s));
    const DeltaResult d =
        adaptive_delta(fb_q, fb_s, r.trace.sim_num, r.trace.union_num, state.kappa, state.lambda_mix());
    r.trace.fb_q_zero = d.fb_q_zero;
    r.shift_info = d;
    shift = d.delta;
  } else {
    shift = opt.shift.fixed_shift;
  }
  r.trace.delta = shift;

  ConfidenceMap<Scalar> current = m_pre;
  Prototype<Scalar> support = p_s;
  double prev_fb = std::numeric_limits<double>::infinity();
  const Scalar alpha(opt.alpha), beta(opt.beta);
  r.adaptive = opt.shift.kind == ShiftPolicy::Kind::kAdaptive;
  for (int stage = 0; stage < opt.max_stages; ++stage) {
    const double raw_fg = state.tau_fg + shift + kStageStep * stage;
    const double raw_bg = state.tau_bg + shift - kStageStep * stage;
    const double tau_fg = clamp_tau(raw_fg);
    const double tau_bg = clamp_tau(raw_bg);
    const TernaryMask filtered = threshold_filter(current, tau_fg, tau_bg);
    const bool has_fg = (filtered == kForeground).any();
    const bool has_bg = (filtered == kBackground).any();
    if (!has_fg || !has_bg) {
      if (stage == 0) r.trace.stages.push_back({0, tau_fg, tau_bg});
      r.trace.stop_reason = StopReason::kDegenerate;
      return r;
    }
    const Prototype<Scalar> p_q_star = build_query_prototype(f_q, filtered);
    const Prototype<Scalar> blended = blend_prototypes(support, p_q_star, alpha, beta);
    ConfidenceMap<Scalar> out = predict_confidence(blended, f_q, temperature);
    ++r.trace.self_match_calls;
    const double fb = double(fg_bg_similarity(p_q_star));
    r.trace.stages.push_back({stage, tau_fg, tau_bg, fb});
    if (stage > 0 && !(fb < prev_fb)) {
      r.trace.stop_reason = StopReason::kFbNotDecreasing;
      return r;
    }
    r.path.push_back({current, filtered, p_q_star, support, tau_fg, tau_bg,
                      r.adaptive && raw_fg == tau_fg && raw_bg == tau_bg});
    r.m2 = out;
    r.trace.selected_stage = stage;
    prev_fb = fb;
    current = std::move(out);
    if (opt.chain_prototypes) support = blended;
  }
  r.trace.stop_reason = StopReason::kMaxStages;
  return r;
}

}  // namespace darnet

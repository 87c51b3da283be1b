#include <darnet/pipeline.hpp>

#include <sstream>

namespace darnet {

Model Model::create(const ExtractorConfig& cfg, const PipelineConfig& pipeline) {
  Model m;
  m.extractor = Extractor(cfg);
  m.pipeline = pipeline;
  m.dam = init_dam<double>(m.extractor.out_channels(), pipeline.eca_kernel, DamInit::kIdentity);
  return m;
}

void save_model(const std::filesystem::path& p, const Model& m) {
  auto ts = extractor_tensors(m.extractor);
  ts.push_back(to_tensor("dam.eca_kernel", m.dam.eca_kernel));
  ts.push_back(to_tensor("dam.weight", m.dam.weight));
  ts.push_back(to_tensor("dam.bias", m.dam.bias));
  ts.push_back(to_tensor("thresholds.tau_fg", m.thresholds.tau_fg));
  ts.push_back(to_tensor("thresholds.tau_bg", m.thresholds.tau_bg));
  ts.push_back(to_tensor("thresholds.kappa", m.thresholds.kappa));
  ts.push_back(to_tensor("thresholds.lambda_logit", m.thresholds.lambda_logit));
  save_tensors(p, ts);
}

Model load_model(const std::filesystem::path& p, const ExtractorConfig& cfg, const PipelineConfig& pipeline) {
  const auto ts = load_tensors(p);
  Model m;
  m.extractor = extractor_from_tensors(ts, cfg);
  m.pipeline = pipeline;
  m.dam.eca_kernel = tensor_vector(find_tensor(ts, "dam.eca_kernel"));
  m.dam.weight = tensor_matrix(find_tensor(ts, "dam.weight"));
  m.dam.bias = tensor_vector(find_tensor(ts, "dam.bias"));
  if (m.dam.channels() != m.extractor.out_channels() || m.dam.weight.rows() != m.dam.channels() ||
      m.dam.weight.cols() != m.dam.channels())
    throw FormatError("checkpoint '" + p.string() + "': DAM shape does not match the extractor");
  auto scalar = [&](const char* name) {
    const NamedTensor& t = find_tensor(ts, name);
    if (!t.shape.empty() || t.values.size() != 1) throw FormatError("tensor '" + t.name + "' is not a scalar");
    return double(t.values.front());
  };
  m.thresholds.tau_fg = scalar("thresholds.tau_fg");
  m.thresholds.tau_bg = scalar("thresholds.tau_bg");
  m.thresholds.kappa = scalar("thresholds.kappa");
  m.thresholds.lambda_logit = scalar("thresholds.lambda_logit");
  return m;
}

AblationFlags AblationFlags::parse(const std::string& csv) {
  AblationFlags f;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty() || item == "baseline") continue;
    if (item == "sm")
      f.sm = true;
    else if (item == "csd")
      f.csd = true;
    else if (item == "arsm")
      f.arsm = true;
    else if (item == "tta")
      f.tta = true;
    else
      throw std::invalid_argument("unknown ablation flag '" + item + "' (expected sm, csd, arsm, tta, baseline)");
  }
  return f;
}

std::string AblationFlags::to_string() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += name;
  };
  add(sm, "sm");
  add(csd, "csd");
  add(arsm, "arsm");
  add(tta, "tta");
  return s.empty() ? "baseline" : s;
}

Prototype<double> mean_prototype(const std::vector<FeatureMap<double>>& features, const std::vector<BinaryMask>& masks) {
  if (features.empty() || features.size() != masks.size())
    throw std::invalid_argument("mean_prototype: need one mask per support feature map");
  Prototype<double> out;
  const int c = features.front().channels();
  out.fg = Vector<double>::Zero(c);
  out.bg = Vector<double>::Zero(c);
  int fg_shots = 0, bg_shots = 0;
  for (std::size_t k = 0; k < features.size(); ++k) {
    const Prototype<double> p = support_prototype(features[k], masks[k]);
    if (p.fg_valid()) {
      out.fg += p.fg;
      out.fg_count += p.fg_count;
      ++fg_shots;
    }
    if (p.bg_valid()) {
      out.bg += p.bg;
      out.bg_count += p.bg_count;
      ++bg_shots;
    }
  }
  if (fg_shots > 0) out.fg /= double(fg_shots);
  if (bg_shots > 0) out.bg /= double(bg_shots);
  return out;
}

ConfidenceMap<double> fuse_predictions(const ConfidenceMap<double>& m1, const ConfidenceMap<double>& m2, double w1,
                                       double w2) {
  require_same_grid(m1.fg, m2.fg, "fuse_predictions");
  if (w1 < 0 || w2 < 0 || !(w1 + w2 > 0)) throw std::invalid_argument("fuse_predictions: weights must be >= 0 with positive sum");
  if (w2 == 0) return m1;
  if (w1 == 0) return m2;
  const double a = w1 / (w1 + w2), b = w2 / (w1 + w2);
  ConfidenceMap<double> out{a * m1.fg + b * m2.fg, a * m1.bg + b * m2.bg};
  const Grid<double> total = out.fg + out.bg;
  out.fg /= total;
  out.bg = 1.0 - out.fg;
  return out;
}

RefineOptions refine_options_for(const Model& model, const AblationFlags& flags) {
  if (flags.arsm) return model.pipeline.refine;
  RefineOptions single = model.pipeline.refine;
  single.max_stages = 1;
  single.shift.kind = ShiftPolicy::Kind::kFixed;
  single.shift.fixed_shift = 0.0;
  return single;
}

Prediction predict(const Model& model, const SupportSet& support, const FeatureMap<double>& query,
                   const AblationFlags& flags, PipelineCounters* counters) {
  const double t = model.pipeline.temperature;
  const Prototype<double> p_s = mean_prototype(support.features, support.masks);
  if (!p_s.valid()) throw DegenerateEpisode("predict: support masks lack foreground or background at feature resolution");
  Prediction pred;
  pred.m0 = predict_confidence(p_s, query, t);
  pred.m1 = pred.m0;
  if (flags.sm) {
    try {
      pred.m1 = branch1_forward(p_s, query, t).m1;
    } catch (const DegenerateEpisode&) {
      pred.branch1_degenerate = true;
    }
  }
  const ConfidenceMap<double>& first = flags.sm ? pred.m1 : pred.m0;
  if (!flags.branch2()) {
    pred.final = first;
    return pred;
  }
  if (counters) {
    counters->dam_calls += 1;
    counters->refine_calls += 1;
  }
  std::vector<FeatureMap<double>> aligned;
  aligned.reserve(support.features.size());
  for (const auto& f : support.features) aligned.push_back(dam_forward(f, model.dam));
  const FeatureMap<double> q_aligned = dam_forward(query, model.dam);
  const Prototype<double> p_aligned = mean_prototype(aligned, support.masks);
  if (!p_aligned.valid()) throw DegenerateEpisode("predict: aligned support prototype is invalid");
  auto refined = refine_loop(q_aligned, p_aligned, model.thresholds, refine_options_for(model, flags), t);
  pred.m2 = std::move(refined.m2);
  pred.trace = std::move(refined.trace);
  // No stage could run: branch 2 holds plain support matching, so branch 1 stands alone.
  if (pred.trace->self_match_calls == 0)
    pred.final = first;
  else
    pred.final = fuse_predictions(first, *pred.m2, model.pipeline.fuse_test.m1, model.pipeline.fuse_test.m2);
  return pred;
}

BinaryMask binarize(const ConfidenceMap<double>& cm) { return (cm.fg > cm.bg).cast<std::uint8_t>(); }

ConfidenceMap<double> upsample(const ConfidenceMap<double>& cm, int height, int width) {
  return {resize_bilinear(cm.fg, height, width), resize_bilinear(cm.bg, height, width)};
}

BinaryMask feature_mask(const BinaryMask& image_mask, const FeatureMap<double>& f) {
  return resize_nearest(image_mask, f.height, f.width);
}

namespace {

/// Scatter a prototype-half gradient back over the shots that contributed.
void mean_prototype_backward(const Vector<double>& grad, const std::vector<FeatureMap<double>>& features,
                             const std::vector<BinaryMask>& masks, bool foreground,
                             std::vector<Matrix<double>>& grad_features) {
  std::vector<BinaryMask> selections;
  int valid = 0;
  for (const auto& m : masks) {
    selections.push_back(foreground ? m : BinaryMask((m == 0).cast<std::uint8_t>()));
    valid += selections.back().cast<int>().sum() > 0;
  }
  if (valid == 0) return;
  for (std::size_t k = 0; k < features.size(); ++k)
    masked_average_pool_backward(grad, selections[k], grad_features[k], 1.0 / valid);
}

/// d P / d tau for P = sum_p w_p f_p / sum_p w_p with the straight-through
/// surrogate dw_p/dtau = -slope s (1 - s), s = sigmoid(slope (c_p - tau)).
double threshold_surrogate(const Vector<double>& grad_proto, const Vector<double>& proto, const FeatureMap<double>& f,
                           const Grid<double>& confidence, double tau, Eigen::Index count, double slope) {
  if (count == 0) return 0.0;
  const auto c = flat(confidence);
  double total = 0.0;
  for (Eigen::Index p = 0; p < f.pixels(); ++p) {
    const double s = 1.0 / (1.0 + std::exp(-slope * (c(p) - tau)));
    const double dw = -slope * s * (1.0 - s);
    if (dw == 0.0) continue;
    total += dw * grad_proto.dot(f.data.col(p) - proto) / double(count);
  }
  return total;
}

}  // namespace

Branch2Objective branch2_objective(const Model& model, const SupportSet& support, const FeatureMap<double>& query,
                                   const BinaryMask& query_gt, const Branch2Options& opt) {
  const double t = model.pipeline.temperature;
  std::vector<FeatureMap<double>> aligned;
  for (const auto& f : support.features) aligned.push_back(dam_forward(f, model.dam));
  const FeatureMap<double> q_aligned = dam_forward(query, model.dam);
  const Prototype<double> p_s = mean_prototype(aligned, support.masks);
  if (!p_s.valid()) throw DegenerateEpisode("branch2_objective: support prototype is invalid");

  Branch2Objective out;
  out.refine = refine_loop(q_aligned, p_s, model.thresholds, opt.refine, t);
  const auto& rr = out.refine;
  const Grid<double> attention = rr.similar.cast<double>();
  out.report = tta_loss(rr.m2, query_gt, attention, opt.alpha_att, opt.weights);

  const Grid<double> dz =
      grad_fg_to_logit(rr.m2, tta_grad_fg(rr.m2, query_gt, attention, opt.alpha_att, opt.weights));
  const Prototype<double> used =
      rr.used_self_match()
          ? blend_prototypes(rr.path.back().support, rr.path.back().p_q_star, opt.refine.alpha, opt.refine.beta)
          : p_s;
  Vector<double> d_used_fg = Vector<double>::Zero(p_s.fg.size());
  Vector<double> d_used_bg = Vector<double>::Zero(p_s.bg.size());
  Matrix<double> d_query = Matrix<double>::Zero(q_aligned.channels(), q_aligned.pixels());
  predict_confidence_backward(used, q_aligned, dz, t, d_used_fg, d_used_bg, &d_query);

  // Walk the accepted stages backwards. A chained stage's support prototype is
  // the previous stage's blend; otherwise it is p_s and the walk stops.
  Vector<double> d_ps_fg = d_used_fg, d_ps_bg = d_used_bg;
  double d_delta = 0.0;
  const bool mix = opt.refine.beta != 0.0;
  for (auto j = rr.path.size(); mix && j-- > 0;) {
    const auto& st = rr.path[j];
    const Vector<double> d_pq_fg = opt.refine.beta * d_ps_fg;
    const Vector<double> d_pq_bg = opt.refine.beta * d_ps_bg;
    masked_average_pool_backward(d_pq_fg, BinaryMask((st.filter == kForeground).cast<std::uint8_t>()), d_query);
    masked_average_pool_backward(d_pq_bg, BinaryMask((st.filter == kBackground).cast<std::uint8_t>()), d_query);
    if (st.tau_active) {
      d_delta += threshold_surrogate(d_pq_fg, st.p_q_star.fg, q_aligned, st.input.fg, st.tau_fg, st.p_q_star.fg_count,
                                     opt.surrogate_slope);
      d_delta += threshold_surrogate(d_pq_bg, st.p_q_star.bg, q_aligned, st.input.bg, st.tau_bg, st.p_q_star.bg_count,
                                     opt.surrogate_slope);
    }
    d_ps_fg *= opt.refine.alpha;
    d_ps_bg *= opt.refine.alpha;
    if (!opt.refine.chain_prototypes) break;
  }
  if (rr.adaptive) {
    const double lambda = model.thresholds.lambda_mix();
    out.grad.kappa = d_delta * rr.shift_info.d_kappa;
    out.grad.lambda_mix = d_delta * rr.shift_info.d_lambda;
    out.grad_lambda_logit = out.grad.lambda_mix * lambda * (1.0 - lambda);
  }

  std::vector<Matrix<double>> d_support;
  for (const auto& f : aligned) d_support.push_back(Matrix<double>::Zero(f.channels(), f.pixels()));
  mean_prototype_backward(d_ps_fg, aligned, support.masks, true, d_support);
  mean_prototype_backward(d_ps_bg, aligned, support.masks, false, d_support);

  const double kappa_grad = out.grad.kappa, lambda_grad = out.grad.lambda_mix;
  out.grad = dam_backward(query, model.dam, d_query);
  for (std::size_t k = 0; k < support.features.size(); ++k)
    out.grad += dam_backward(support.features[k], model.dam, d_support[k]);
  out.grad.kappa = kappa_grad;
  out.grad.lambda_mix = lambda_grad;
  return out;
}

}  // namespace darnet

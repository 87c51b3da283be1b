#include <darnet/tta.hpp>

#include <nlohmann/json.hpp>

#include <cmath>

namespace darnet {

void TtaConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("tta: iterations must be >= 1");
  if (optimizer.learning_rate < 0) throw std::invalid_argument("tta: learning_rate must be >= 0");
}

Eigen::VectorXd pack(const AdaptedState& s) {
  const auto k = s.dam.eca_kernel.size(), w = s.dam.weight.size(), b = s.dam.bias.size();
  Eigen::VectorXd v(k + w + b + 2);
  v.segment(0, k) = s.dam.eca_kernel;
  v.segment(k, w) = s.dam.weight.reshaped();
  v.segment(k + w, b) = s.dam.bias;
  v(k + w + b) = s.thresholds.kappa;
  v(k + w + b + 1) = s.thresholds.lambda_logit;
  return v;
}

void unpack(const Eigen::VectorXd& v, AdaptedState& s) {
  const auto k = s.dam.eca_kernel.size(), w = s.dam.weight.size(), b = s.dam.bias.size();
  if (v.size() != k + w + b + 2) throw std::invalid_argument("unpack: parameter vector size mismatch");
  s.dam.eca_kernel = v.segment(0, k);
  s.dam.weight.reshaped() = v.segment(k, w);
  s.dam.bias = v.segment(k + w, b);
  s.thresholds.kappa = v(k + w + b);
  s.thresholds.lambda_logit = v(k + w + b + 1);
}

Model with_state(const Model& base, const AdaptedState& s) {
  Model m = base;
  m.dam = s.dam;
  m.thresholds = s.thresholds;
  return m;
}

namespace {

Eigen::VectorXd pack_gradient(const Branch2Objective& obj) {
  const auto& g = obj.grad;
  const auto k = g.eca_kernel.size(), w = g.weight.size(), b = g.bias.size();
  Eigen::VectorXd v(k + w + b + 2);
  v.segment(0, k) = g.eca_kernel;
  v.segment(k, w) = g.weight.reshaped();
  v.segment(k + w, b) = g.bias;
  v(k + w + b) = g.kappa;
  v(k + w + b + 1) = obj.grad_lambda_logit;
  return v;
}

struct Features {
  FeatureMap<double> f;
  BinaryMask mask;
};

Features features_of(const Extractor& e, const LabeledImage& img) {
  Features out{e.forward(img.image), {}};
  out.mask = feature_mask(img.mask, out.f);
  return out;
}

}  // namespace

TtaResult run_tta_episode(const Model& model, const TtaEpisode& episode, const TtaConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (episode.support.empty()) throw std::invalid_argument("run_tta_episode: empty support set");
  TtaResult result;
  result.adapted = {model.dam, model.thresholds};
  const AdaptedState snapshot = result.adapted;

  Branch2Options opt;
  opt.refine = model.pipeline.refine;
  opt.alpha_att = cfg.alpha_att;
  opt.surrogate_slope = cfg.surrogate_slope;

  std::vector<Features> shots;
  for (const auto& s : episode.support) shots.push_back(features_of(model.extractor, s));

  Optimizer optimizer(cfg.optimizer);
  Eigen::VectorXd params = pack(result.adapted);
  Rng rng(cfg.seed);
  Model working = model;
  long iteration = 0;

  auto step = [&](const SupportSet& support, const Features& held) {
    working.dam = result.adapted.dam;
    working.thresholds = result.adapted.thresholds;
    const Branch2Objective obj = branch2_objective(working, support, held.f, held.mask, opt);
    if (!std::isfinite(obj.report.l_tta)) throw TrainingError("tta: non-finite loss in episode " + episode.id);
    if (result.stats.optimizer_steps == 0) result.stats.first_loss = obj.report.l_tta;
    result.stats.last_loss = obj.report.l_tta;
    optimizer.step(params, pack_gradient(obj));
    unpack(params, result.adapted);
    ++result.stats.optimizer_steps;
    if (log) {
      const auto& st = obj.refine.trace.stages;
      nlohmann::json line{{"episode_id", episode.id},
                          {"iteration", iteration},
                          {"l_tta", obj.report.l_tta},
                          {"kappa", result.adapted.thresholds.kappa},
                          {"lambda_mix", result.adapted.thresholds.lambda_mix()},
                          {"tau_f", st.empty() ? model.thresholds.tau_fg : st.front().tau_fg},
                          {"tau_b", st.empty() ? model.thresholds.tau_bg : st.front().tau_bg}};
      *log << line.dump() << '\n';
    }
    ++iteration;
  };

  try {
    if (shots.size() == 1) {
      // The support pair becomes the tuning query; an augmented copy plays the support.
      result.stats.rounds = 1;
      result.stats.round_support_sizes.push_back(1);
      Features pseudo;
      for (int it = 0; it < cfg.iterations; ++it) {
        if (it == 0 || cfg.fresh_augmentation)
          pseudo = features_of(model.extractor, augment_support(episode.support[0], cfg.augment, rng));
        step(SupportSet{{pseudo.f}, {pseudo.mask}}, shots[0]);
      }
    } else {
      for (std::size_t held = 0; held < shots.size(); ++held) {
        SupportSet support;
        for (std::size_t k = 0; k < shots.size(); ++k) {
          if (k == held) continue;
          support.features.push_back(shots[k].f);
          support.masks.push_back(shots[k].mask);
        }
        ++result.stats.rounds;
        result.stats.round_support_sizes.push_back(static_cast<int>(support.features.size()));
        for (int it = 0; it < cfg.iterations; ++it) step(support, shots[held]);
      }
    }
  } catch (const DegenerateEpisode& e) {
    result.adapted = snapshot;
    result.stats.skipped = true;
    result.stats.skip_reason = e.what();
  }
  return result;
}

Eigen::VectorXd pack(const Extractor& e) {
  Eigen::Index n = 0;
  for (const auto& b : e.blocks()) n += b.weight.size() + b.bias.size();
  Eigen::VectorXd v(n);
  Eigen::Index at = 0;
  for (const auto& b : e.blocks()) {
    v.segment(at, b.weight.size()) = b.weight.reshaped();
    at += b.weight.size();
    v.segment(at, b.bias.size()) = b.bias;
    at += b.bias.size();
  }
  return v;
}

Eigen::VectorXd pack(const Extractor::Gradients& g) {
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < g.weight.size(); ++i) n += g.weight[i].size() + g.bias[i].size();
  Eigen::VectorXd v(n);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    v.segment(at, g.weight[i].size()) = g.weight[i].reshaped();
    at += g.weight[i].size();
    v.segment(at, g.bias[i].size()) = g.bias[i];
    at += g.bias[i].size();
  }
  return v;
}

void unpack(const Eigen::VectorXd& v, Extractor& e) {
  Eigen::Index at = 0;
  for (auto& b : e.blocks()) {
    if (at + b.weight.size() + b.bias.size() > v.size()) throw std::invalid_argument("unpack: vector too short");
    b.weight.reshaped() = v.segment(at, b.weight.size());
    at += b.weight.size();
    b.bias = v.segment(at, b.bias.size());
    at += b.bias.size();
  }
  if (at != v.size()) throw std::invalid_argument("unpack: vector too long");
}

TrainObjective train_objective(const Model& model, const Episode& episode, const CsdConfig* csd, Rng* rng,
                               const TrainLossWeights& weights) {
  if (episode.support.empty() || episode.query.empty()) throw std::invalid_argument("train_objective: empty episode");
  const double t = model.pipeline.temperature;
  const Extractor& ex = model.extractor;

  const std::size_t k_shot = episode.support.size();
  std::vector<Extractor::Tape> s_tapes(k_shot);
  std::vector<FeatureMap<double>> s_feat;
  std::vector<BinaryMask> s_mask;
  for (std::size_t k = 0; k < k_shot; ++k) {
    s_feat.push_back(ex.forward(episode.support[k].image, csd, rng, &s_tapes[k]));
    s_mask.push_back(feature_mask(episode.support[k].mask, s_feat.back()));
  }
  const Prototype<double> p_s = mean_prototype(s_feat, s_mask);
  if (!p_s.valid()) throw DegenerateEpisode("train_objective: support lacks foreground or background");

  TrainObjective out;
  out.grad = ex.zero_gradients();
  Vector<double> d_ps_fg = Vector<double>::Zero(p_s.fg.size()), d_ps_bg = Vector<double>::Zero(p_s.bg.size());
  std::vector<Matrix<double>> d_s;
  for (const auto& f : s_feat) d_s.push_back(Matrix<double>::Zero(f.channels(), f.pixels()));

  const double nq = double(episode.query.size());
  for (const auto& q : episode.query) {
    Extractor::Tape tape;
    const FeatureMap<double> f_q = ex.forward(q.image, csd, rng, &tape);
    const BinaryMask gt = feature_mask(q.mask, f_q);
    Matrix<double> d_q = Matrix<double>::Zero(f_q.channels(), f_q.pixels());

    const ConfidenceMap<double> m_pre = predict_confidence(p_s, f_q, t);
    ConfidenceMap<double> out1 = m_pre;
    bool sm = false;
    Prototype<double> p_q, blended;
    TernaryMask filtered;
    try {
      filtered = threshold_filter(m_pre, model.thresholds.tau_fg, model.thresholds.tau_bg);
      p_q = build_query_prototype(f_q, filtered);
      blended = blend_prototypes(p_s, p_q, 0.5, 0.5);
      out1 = predict_confidence(blended, f_q, t);
      sm = true;
    } catch (const DegenerateEpisode&) {
      out.branch1_degenerate = true;
    }

    // Support self-prediction is shared by all queries; count it once.
    const FeatureMap<double>& f_s0 = s_feat.front();
    const ConfidenceMap<double> s_pred = predict_confidence(p_s, f_s0, t);
    const LossReport r = train_loss(m_pre, out1, s_pred, gt, s_mask.front(), weights);
    out.loss.l1 += r.l1 / nq;
    out.loss.l2 += r.l2 / nq;
    out.loss.l3 = r.l3;
    out.loss.train_weights = weights;

    const Grid<double> dz1 = grad_fg_to_logit(m_pre, Grid<double>(weights.l1 / nq * bce_grad_fg(m_pre, gt)));
    predict_confidence_backward(p_s, f_q, dz1, t, d_ps_fg, d_ps_bg, &d_q);

    const Grid<double> dz2 = grad_fg_to_logit(out1, Grid<double>(weights.l2 / nq * bce_grad_fg(out1, gt)));
    if (sm) {
      Vector<double> db_fg = Vector<double>::Zero(p_s.fg.size()), db_bg = Vector<double>::Zero(p_s.bg.size());
      predict_confidence_backward(blended, f_q, dz2, t, db_fg, db_bg, &d_q);
      // blend falls back to the valid side when a query half is empty
      const double a_fg = p_q.fg_valid() ? 0.5 : 1.0, a_bg = p_q.bg_valid() ? 0.5 : 1.0;
      d_ps_fg += a_fg * db_fg;
      d_ps_bg += a_bg * db_bg;
      if (p_q.fg_valid())
        masked_average_pool_backward(Vector<double>(0.5 * db_fg), BinaryMask((filtered == kForeground).cast<std::uint8_t>()), d_q);
      if (p_q.bg_valid())
        masked_average_pool_backward(Vector<double>(0.5 * db_bg), BinaryMask((filtered == kBackground).cast<std::uint8_t>()), d_q);
    } else {
      predict_confidence_backward(p_s, f_q, dz2, t, d_ps_fg, d_ps_bg, &d_q);
    }
    out.grad += ex.backward(tape, d_q);
  }
  out.loss.l_train = weights.l1 * out.loss.l1 + weights.l2 * out.loss.l2 + weights.l3 * out.loss.l3;

  const ConfidenceMap<double> s_pred = predict_confidence(p_s, s_feat.front(), t);
  const Grid<double> dz3 = grad_fg_to_logit(s_pred, Grid<double>(weights.l3 * bce_grad_fg(s_pred, s_mask.front())));
  predict_confidence_backward(p_s, s_feat.front(), dz3, t, d_ps_fg, d_ps_bg, &d_s.front());

  // Prototype halves average the per-shot pooled vectors.
  int fg_shots = 0, bg_shots = 0;
  for (const auto& m : s_mask) {
    fg_shots += (m != 0).any();
    bg_shots += (m == 0).any();
  }
  for (std::size_t k = 0; k < k_shot; ++k) {
    if ((s_mask[k] != 0).any()) masked_average_pool_backward(d_ps_fg, s_mask[k], d_s[k], 1.0 / fg_shots);
    if ((s_mask[k] == 0).any())
      masked_average_pool_backward(d_ps_bg, BinaryMask((s_mask[k] == 0).cast<std::uint8_t>()), d_s[k], 1.0 / bg_shots);
    out.grad += ex.backward(s_tapes[k], d_s[k]);
  }
  return out;
}

std::vector<TrainStep> train_epoch(Model& model, const std::function<Episode(std::uint64_t)>& make_episode,
                                   const TrainConfig& cfg, std::ostream* log) {
  if (cfg.steps < 0) throw std::invalid_argument("train_epoch: steps must be >= 0");
  model.extractor.set_mode(Mode::kTrain);
  Optimizer optimizer(cfg.optimizer);
  Eigen::VectorXd params = pack(model.extractor);
  Rng rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<TrainStep> steps;
  for (int s = 0; s < cfg.steps; ++s) {
    TrainStep rec;
    rec.step = s;
    rec.episode_seed = episode_seed(cfg.seed, 0, static_cast<std::uint64_t>(s));
    const Episode ep = make_episode(rec.episode_seed);
    TrainObjective obj;
    try {
      obj = train_objective(model, ep, cfg.csd ? &cfg.csd_config : nullptr, &rng, cfg.weights);
    } catch (const DegenerateEpisode&) {
      rec.degenerate = true;
      steps.push_back(rec);
      continue;
    }
    rec.loss = obj.loss;
    if (!std::isfinite(obj.loss.l_train) || !std::isfinite(obj.grad.squared_norm())) {
      model.extractor.set_mode(Mode::kEval);
      throw TrainingError("train_epoch: non-finite loss at step " + std::to_string(s) + ", episode seed " +
                          std::to_string(rec.episode_seed));
    }
    optimizer.step(params, pack(obj.grad));
    unpack(params, model.extractor);
    if (log) {
      nlohmann::json line{{"step", s},           {"episode_seed", rec.episode_seed}, {"l1", obj.loss.l1},
                          {"l2", obj.loss.l2},   {"l3", obj.loss.l3},                {"l_train", obj.loss.l_train},
                          {"csd", cfg.csd}};
      *log << line.dump() << '\n';
    }
    steps.push_back(rec);
  }
  model.extractor.set_mode(Mode::kEval);
  return steps;
}

}  // namespace darnet

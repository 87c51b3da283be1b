#pragma once

// The dual-branch segmentation model: branch 1 (support matching + one
// self-matching pass) on raw features, branch 2 (DAM + adaptive refine
// self-matching) on aligned features, fused by a weighted sum.

#include <darnet/arsm.hpp>
#include <darnet/backbone.hpp>
#include <darnet/dam.hpp>
#include <darnet/losses.hpp>

#include <atomic>
#include <optional>
#include <string>
#include <vector>

namespace darnet {

struct FuseWeights {
  double m1 = 0.5;
  double m2 = 0.5;
};

struct PipelineConfig {
  double temperature = 10.0;
  RefineOptions refine;
  int eca_kernel = 3;
  FuseWeights fuse_train{0.7, 0.3};
  FuseWeights fuse_test{0.3, 0.7};
};

struct Model {
  Extractor extractor;
  DamParams<double> dam;
  ThresholdState thresholds;
  PipelineConfig pipeline;

  /// Extractor from cfg, identity DAM sized to its output, default thresholds.
  static Model create(const ExtractorConfig& cfg, const PipelineConfig& pipeline = {});
};

/// Checkpoint with the extractor, DAM and threshold learnables.
void save_model(const std::filesystem::path& p, const Model& m);
/// `cfg` must describe the same architecture as the checkpoint.
Model load_model(const std::filesystem::path& p, const ExtractorConfig& cfg, const PipelineConfig& pipeline);

/// Component switches for ablation runs.
struct AblationFlags {
  bool sm = false;
  bool csd = false;
  bool arsm = false;
  bool tta = false;

  static AblationFlags parse(const std::string& csv);
  std::string to_string() const;
  bool branch2() const { return arsm || tta; }
};

/// Call counters for the optional components; shared across threads.
struct PipelineCounters {
  std::atomic<long> refine_calls{0};
  std::atomic<long> dam_calls{0};
  std::atomic<long> tta_episodes{0};
};

/// Features and feature-resolution masks of an episode's support set.
struct SupportSet {
  std::vector<FeatureMap<double>> features;
  std::vector<BinaryMask> masks;
};

/// Mean over shots of the per-shot masked-average-pool prototypes.
Prototype<double> mean_prototype(const std::vector<FeatureMap<double>>& features, const std::vector<BinaryMask>& masks);

struct Prediction {
  ConfidenceMap<double> m0;
  ConfidenceMap<double> m1;
  std::optional<ConfidenceMap<double>> m2;
  ConfidenceMap<double> final;
  std::optional<RefineTrace> trace;
  bool branch1_degenerate = false;
};

/// Per-pixel convex combination of two confidence maps; weights are
/// renormalized to sum to 1 and the result satisfies fg + bg = 1.
ConfidenceMap<double> fuse_predictions(const ConfidenceMap<double>& m1, const ConfidenceMap<double>& m2, double w1,
                                       double w2);

/// Inference for one query at feature resolution.
Prediction predict(const Model& model, const SupportSet& support, const FeatureMap<double>& query,
                   const AblationFlags& flags, PipelineCounters* counters = nullptr);

RefineOptions refine_options_for(const Model& model, const AblationFlags& flags);

/// pixel -> 1 iff fg > bg.
BinaryMask binarize(const ConfidenceMap<double>& cm);

/// Upsamples a feature-resolution confidence map to image resolution.
ConfidenceMap<double> upsample(const ConfidenceMap<double>& cm, int height, int width);

BinaryMask feature_mask(const BinaryMask& image_mask, const FeatureMap<double>& f);

/// Branch-2 TTA objective and its gradients with respect to the DAM
/// parameters and the threshold learnables (kappa, lambda_mix logit).
/// Threshold masks are treated as constants except for a sigmoid surrogate
/// (slope `surrogate_slope`) of the selected stage's threshold indicator.
struct Branch2Objective {
  LossReport report;
  DamGradients<double> grad;
  double grad_lambda_logit = 0.0;
  RefineResult<double> refine;
};

struct Branch2Options {
  RefineOptions refine;
  double alpha_att = 1.0;
  double surrogate_slope = 50.0;
  TtaLossWeights weights;
};

Branch2Objective branch2_objective(const Model& model, const SupportSet& support, const FeatureMap<double>& query,
                                   const BinaryMask& query_gt, const Branch2Options& opt);

}  // namespace darnet

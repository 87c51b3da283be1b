#pragma once

// Per-episode test-time adaptation of the DAM and threshold learnables, and
// episodic training of the extractor.

#include <darnet/optim.hpp>
#include <darnet/pipeline.hpp>

#include <functional>
#include <ostream>
#include <string>

namespace darnet {

struct TtaConfig {
  OptimizerConfig optimizer;  // lr 1e-3, Adam
  int iterations = 10;
  bool fresh_augmentation = true;  // 1-shot: new pseudo support each step
  AugmentConfig augment;
  double alpha_att = 1.0;
  double surrogate_slope = 50.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// What run_tta_episode did, for instrumentation.
struct TtaStats {
  long optimizer_steps = 0;
  int rounds = 0;
  std::vector<int> round_support_sizes;  // support shots used per round
  bool skipped = false;
  std::string skip_reason;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// Parameters adapted by TTA. Everything else in the model stays shared.
struct AdaptedState {
  DamParams<double> dam;
  ThresholdState thresholds;
};

/// Flat views used by the optimizer: [eca kernel, W (column-major), b, kappa, lambda logit].
Eigen::VectorXd pack(const AdaptedState& s);
void unpack(const Eigen::VectorXd& v, AdaptedState& s);

struct TtaResult {
  AdaptedState adapted;
  TtaStats stats;
};

/// Episode images with their support masks; features are recomputed from
/// images because 1-shot adaptation needs fresh augmentations.
struct TtaEpisode {
  std::vector<LabeledImage> support;
  std::string id;
};

/// Adapts a private copy of the DAM and threshold state on the support set.
/// The model itself is never modified. `log` receives one JSON line per step.
TtaResult run_tta_episode(const Model& model, const TtaEpisode& episode, const TtaConfig& cfg,
                          std::ostream* log = nullptr);

/// Model with the adapted state swapped in; extractor shared by value copy.
Model with_state(const Model& base, const AdaptedState& s);

struct TrainConfig {
  int steps = 300;
  OptimizerConfig optimizer{OptimizerKind::kAdam, 1e-3};
  bool csd = false;
  CsdConfig csd_config;
  TrainLossWeights weights;
  int k_shot = 1;
  int queries = 1;
  std::uint64_t seed = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainStep {
  int step = 0;
  std::uint64_t episode_seed = 0;
  LossReport loss;
  bool degenerate = false;
};

/// L_train for one episode and its gradient with respect to the extractor.
struct TrainObjective {
  LossReport loss;
  Extractor::Gradients grad;
  bool branch1_degenerate = false;
};

TrainObjective train_objective(const Model& model, const Episode& episode, const CsdConfig* csd, Rng* rng,
                               const TrainLossWeights& weights = {});

Eigen::VectorXd pack(const Extractor& e);
Eigen::VectorXd pack(const Extractor::Gradients& g);
void unpack(const Eigen::VectorXd& v, Extractor& e);

/// Episodic training on generated episodes. Throws TrainingError naming the
/// episode seed if the loss stops being finite.
std::vector<TrainStep> train_epoch(Model& model, const std::function<Episode(std::uint64_t)>& make_episode,
                                   const TrainConfig& cfg, std::ostream* log = nullptr);

}  // namespace darnet

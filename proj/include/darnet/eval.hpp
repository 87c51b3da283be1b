#pragma once

// Benchmark runner: IoU, seeded multi-run averaging, per-episode records and
// overlay rendering.

#include <darnet/tta.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <variant>

namespace darnet {

/// |pred & gt| / |pred | gt|; two empty masks score 1.
double iou(const BinaryMask& pred, const BinaryMask& gt);

struct EpisodeResult {
  std::string episode_id;
  std::uint64_t run_seed = 0;
  int index = 0;
  std::vector<double> query_iou;
  double miou = 0.0;
  std::vector<BinaryMask> prediction;  // image resolution, not serialized
  std::optional<RefineTrace> trace;
  bool degenerate = false;             // prediction impossible; scored with an empty mask
  bool branch1_degenerate = false;
  std::optional<TtaStats> tta;
  double seconds = 0.0;
};

nlohmann::json to_json(const RefineTrace& t);
nlohmann::json to_json(const EpisodeResult& r);

struct RunReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> run_miou;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single run
  std::string fingerprint;
  AblationFlags flags;
  int tasks = 0;
  long degenerate_episodes = 0;
  long skipped_tta = 0;

  nlohmann::json to_json() const;
};

double mean_of(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);

using EpisodeSource = std::variant<SyntheticSpec, const Dataset*>;

struct BenchmarkOptions {
  int tasks = 1200;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  AblationFlags flags;
  int k_shot = 1;
  int queries = 1;
  TtaConfig tta;
  int workers = 1;
  std::string fingerprint;
  std::optional<std::filesystem::path> episodes_jsonl;  // streamed per-episode records
  bool resume = false;                                  // reuse records already in episodes_jsonl
  std::ostream* tta_log = nullptr;
  PipelineCounters* counters = nullptr;
};

/// Episode `index` of the run seeded with `run_seed`.
Episode make_episode(const EpisodeSource& source, std::uint64_t run_seed, int index, int k_shot, int queries);
std::string episode_id(std::uint64_t run_seed, int index);
/// Parses ids produced by episode_id; throws std::invalid_argument otherwise.
std::pair<std::uint64_t, int> parse_episode_id(const std::string& id);

/// Prediction for one episode with the flag-selected pipeline.
EpisodeResult evaluate_episode(const Model& model, const Episode& episode, const AblationFlags& flags,
                               const TtaConfig& tta, PipelineCounters* counters = nullptr,
                               std::ostream* tta_log = nullptr);

RunReport run_benchmark(const Model& model, const EpisodeSource& source, const BenchmarkOptions& opt);

enum class OverlayColor { kRed, kBlue };

/// 0.5 alpha blend of `color` over the pixels where mask is set.
Image overlay(const Image& img, const BinaryMask& mask, OverlayColor color);
void render_overlay(const LabeledImage& img, const BinaryMask& pred, const std::filesystem::path& out,
                    OverlayColor color = OverlayColor::kRed);

}  // namespace darnet

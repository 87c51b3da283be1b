#pragma once

// INI-style run configuration with sections [data], [backbone], [csd],
// [arsm], [dam], [tta], [eval], and synthetic-domain spec files ([synth]).

#include <darnet/eval.hpp>

#include <filesystem>
#include <string>

namespace darnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Config {
  // [data]
  std::string source = "synthetic";  // synthetic | dataset
  SyntheticSpec train_spec;
  SyntheticSpec eval_spec;
  DatasetLayout train_data;
  DatasetLayout eval_data;
  int k_shot = 1;
  int queries = 1;

  // [backbone]
  ExtractorConfig extractor;
  double temperature = 10.0;
  TrainConfig train;
  std::filesystem::path checkpoint = "model.dprm";

  // [csd]
  CsdConfig csd;
  std::filesystem::path csd_checkpoint = "model_csd.dprm";

  // [arsm]
  ThresholdState thresholds;
  RefineOptions refine;

  // [dam]
  int eca_kernel = 3;

  // [tta]
  TtaConfig tta;
  FuseWeights fuse_train{0.7, 0.3};
  FuseWeights fuse_test{0.3, 0.7};

  // [eval]
  int runs = 5;
  int tasks = 1200;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  AblationFlags flags{true, true, true, true};
  int workers = 1;
  std::filesystem::path output_dir = "out";

  std::string fingerprint;  // FNV-1a over the normalized key/value text

  PipelineConfig pipeline() const;
};

Config load_config(const std::filesystem::path& p);
/// `base` resolves relative paths named in the text.
Config parse_config(const std::string& text, const std::filesystem::path& base = ".");

SyntheticSpec load_synthetic_spec(const std::filesystem::path& p);
SyntheticSpec parse_synthetic_spec(const std::string& text);

std::string fnv1a_hex(const std::string& s);

template <typename T>
std::vector<T> parse_list(const std::string& csv);

}  // namespace darnet

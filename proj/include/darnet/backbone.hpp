#pragma once

#include <darnet/channel_stats.hpp>
#include <darnet/episode_store.hpp>

#include <filesystem>
#include <random>
#include <vector>

namespace darnet {

struct ExtractorConfig {
  std::vector<int> widths{32, 64, 128, 256};
  int stride = 8;          // power of two; one 2x2 average pool per leading block
  bool relu_last = false;  // final block is linear by default
  std::uint64_t seed = 7;
};

/// Stack of 3x3 conv blocks: conv -> ReLU -> [CSD] -> [avg-pool 2x2].
/// Support and query always go through the same parameter set.
class Extractor {
 public:
  struct Block {
    Matrix<double> weight;  // out x (in * 9)
    Vector<double> bias;
    bool relu = true;
    bool pool = false;
  };

  struct Gradients {
    std::vector<Matrix<double>> weight;
    std::vector<Vector<double>> bias;
    Gradients& operator+=(const Gradients& o);
    double squared_norm() const;
  };

  /// Per-block activations recorded by forward() for backward().
  struct Tape {
    struct Entry {
      int in_height = 0, in_width = 0;
      Matrix<double> columns;        // im2col of the block input
      Matrix<double> relu_mask;      // 1 where the pre-activation was positive
      CsdDraw<double> csd;
      int conv_height = 0, conv_width = 0;
    };
    std::vector<Entry> entries;
  };

  Extractor() = default;
  explicit Extractor(ExtractorConfig cfg);

  bool initialized() const { return !blocks_.empty(); }
  const ExtractorConfig& config() const { return cfg_; }
  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }
  int stride() const { return cfg_.stride; }
  int out_channels() const;

  /// Forward pass. CSD is applied only in train mode with a config and rng.
  FeatureMap<double> forward(const Image& img, const CsdConfig* csd = nullptr, Rng* rng = nullptr,
                             Tape* tape = nullptr) const;
  /// Parameter gradients of <grad_out, forward(img)> from a recorded tape.
  Gradients backward(const Tape& tape, const Matrix<double>& grad_out) const;

  Gradients zero_gradients() const;
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  bool parameters_equal(const Extractor& other) const;

 private:
  ExtractorConfig cfg_;
  std::vector<Block> blocks_;
  Mode mode_ = Mode::kEval;
};

FeatureMap<double> extract(const Extractor& model, const Image& img, const CsdConfig* csd = nullptr,
                           Rng* rng = nullptr);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Feature file: "DFET", u32 version = 1, u32 C, u32 H, u32 W, then C*H*W
/// little-endian float32 values in channel-major order.
void save_feature_file(const std::filesystem::path& p, const FeatureMap<double>& f);
FeatureMap<double> load_feature_file(const std::filesystem::path& p);

/// Named float32 tensors with shape headers, used for parameter checkpoints.
/// Layout: "DPRM", u32 version = 1, u32 count, then per block:
/// u32 name length, name bytes, u32 rank, u32 dims[rank], float32 values
/// (row-major), all little-endian.
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};
void save_tensors(const std::filesystem::path& p, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& p);

NamedTensor to_tensor(const std::string& name, const Matrix<double>& m);
NamedTensor to_tensor(const std::string& name, const Vector<double>& v);
NamedTensor to_tensor(const std::string& name, double scalar);
const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name);
Matrix<double> tensor_matrix(const NamedTensor& t);
Vector<double> tensor_vector(const NamedTensor& t);

std::vector<NamedTensor> extractor_tensors(const Extractor& e);
Extractor extractor_from_tensors(const std::vector<NamedTensor>& ts, const ExtractorConfig& cfg);

}  // namespace darnet

#pragma once

#include <darnet/tensor.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace darnet {

using Rng = std::mt19937_64;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledImage {
  Image image;        // 3 x (H*W), values in [0, 1]
  BinaryMask mask;    // H x W, values in {0, 1}
  int class_id = 0;
  std::string source_id;

  int height() const { return image.height; }
  int width() const { return image.width; }
  /// Throws ShapeError / DataError when an invariant is broken.
  void validate() const;
};

struct Episode {
  std::vector<LabeledImage> support;
  std::vector<LabeledImage> query;
  int n_way = 1;
  int k_shot = 1;
  std::string id;
};

enum class ShapeFamily { kBlob, kRectangle, kRing };

ShapeFamily parse_shape_family(const std::string& s);
const char* to_string(ShapeFamily f);

struct SyntheticSpec {
  int canvas_size = 64;
  ShapeFamily fg_shape_family = ShapeFamily::kBlob;
  Eigen::Vector3d fg_texture_mean{0.80, 0.35, 0.25};
  Eigen::Vector3d bg_texture_mean{0.25, 0.45, 0.80};
  double fg_bg_similarity = 0.0;
  double intra_class_jitter = 0.0;
  std::uint64_t seed = 0;

  // Texture model: spatially smooth Gaussian field plus white pixel noise.
  double texture_noise = 0.03;
  double smooth_noise = 0.0;
  double smooth_scale = 4.0;  // correlation length in pixels
  // Per-episode (per-class) random offset of both texture means.
  double class_color_std = 0.0;
  // Foreground area fraction range.
  double min_area = 0.12;
  double max_area = 0.40;
  // Domain-level channel statistics: out = gain * img + bias, per channel.
  Eigen::Vector3d channel_gain{1.0, 1.0, 1.0};
  Eigen::Vector3d channel_bias{0.0, 0.0, 0.0};
  // Extra per-episode channel shift applied to query images only:
  // gain ~ 1 + N(0, s), bias ~ N(0, s / 2), per channel.
  double query_shift_std = 0.0;
  // Per-episode query contrast factor drawn uniformly from this range
  // (contrast scaled about the image mean). {1, 1} disables it.
  double query_contrast_min = 1.0;
  double query_contrast_max = 1.0;
  // Ambiguous patches in query backgrounds, colored between the class
  // background and foreground. Coverage of the background area is drawn per
  // episode from [min, max]; {0, 0} disables them.
  double query_distractor_min = 0.0;
  double query_distractor_max = 0.0;
  double distractor_mix = 0.5;  // 0 = background color, 1 = foreground color

  void validate() const;
};

/// Episode drawn from the synthetic generator; fully determined by spec.seed.
Episode generate_synthetic_episode(const SyntheticSpec& spec, int k_shot, int q_size);

/// Seed for episode `index` of a run seeded with `run_seed`.
std::uint64_t episode_seed(std::uint64_t base, std::uint64_t run_seed, std::uint64_t index);

struct DatasetLayout {
  std::filesystem::path root;
  int tile = 0;    // 0 = no tiling
  int resize = 0;  // 0 = keep size
};

/// Immutable record store grouped by class.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<LabeledImage> records, std::vector<std::string> class_names);

  const std::vector<LabeledImage>& records() const { return records_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::size_t size() const { return records_.size(); }
  std::size_t num_classes() const { return class_names_.size(); }
  const std::vector<std::size_t>& indices_of(int class_id) const;

 private:
  std::vector<LabeledImage> records_;
  std::vector<std::string> class_names_;
  std::map<int, std::vector<std::size_t>> by_class_;
};

/// Reads <root>/<class>/images/*.{png,jpg,jpeg} with same-stem masks in
/// <root>/<class>/masks/*.png. Masks are binarized (nonzero -> 1).
Dataset load_dataset(const DatasetLayout& layout);

/// Non-overlapping tiles in row-major order. Tiles whose mask holds a single
/// value are dropped unless keep_uniform is set.
std::vector<LabeledImage> tile_image(const LabeledImage& img, int tile, bool keep_uniform = false);

/// Bilinear image / nearest-neighbour mask resampling to size x size.
LabeledImage resize(const LabeledImage& img, int size);
Image resize_image(const Image& img, int height, int width);

/// 1-way K-shot episode from a uniformly chosen class.
Episode sample_episode(const Dataset& data, int k_shot, int q_size, Rng& rng);
Episode sample_episode(const Dataset& data, int class_id, int k_shot, int q_size, Rng& rng);

struct Rect {
  int y = 0, x = 0, height = 0, width = 0;
};

struct AugmentConfig {
  double brightness_min = 0.6, brightness_max = 1.4;
  double contrast_min = 0.6, contrast_max = 1.4;
  double saturation_min = 0.6, saturation_max = 1.4;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;  // max 0 disables blur
  double grayscale_probability = 0.2;
  bool cutout = true;
  double cutout_min_area = 0.05, cutout_max_area = 0.20;

  static AugmentConfig identity();
};

struct AugmentRecord {
  double brightness = 1, contrast = 1, saturation = 1, blur_sigma = 0;
  bool grayscale = false;
  std::optional<Rect> cutout;
};

/// Pseudo support sample: color jitter, blur, random grayscale, Cutout.
/// The mask is returned unchanged.
LabeledImage augment_support(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng,
                             AugmentRecord* record = nullptr);

Image to_grayscale(const Image& img);
Image gaussian_blur(const Image& img, double sigma);
void apply_cutout(Image& img, const Rect& r);

/// Luma weights used for grayscale conversion.
inline const Eigen::Vector3f kLuma{0.299f, 0.587f, 0.114f};

// Image file IO (PNG/JPEG). Masks load as single channel, nonzero -> 1.
Image read_image(const std::filesystem::path& p);
BinaryMask read_mask(const std::filesystem::path& p);
void write_image(const std::filesystem::path& p, const Image& img);
void write_mask(const std::filesystem::path& p, const BinaryMask& m);

}  // namespace darnet

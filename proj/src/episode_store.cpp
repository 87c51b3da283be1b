#include <darnet/episode_store.hpp>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace darnet {

namespace fs = std::filesystem;

void LabeledImage::validate() const {
  if (image.channels() != 3) throw ShapeError("labeled image: expected 3 channels");
  if (mask.rows() != image.height || mask.cols() != image.width)
    throw ShapeError("labeled image " + source_id + ": mask " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " vs image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width));
  if ((mask > 1).any()) throw DataError("labeled image " + source_id + ": mask values outside {0,1}");
}

ShapeFamily parse_shape_family(const std::string& s) {
  if (s == "blob") return ShapeFamily::kBlob;
  if (s == "rectangle") return ShapeFamily::kRectangle;
  if (s == "ring") return ShapeFamily::kRing;
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

const char* to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kBlob:
      return "blob";
    case ShapeFamily::kRectangle:
      return "rectangle";
    case ShapeFamily::kRing:
      return "ring";
  }
  return "blob";
}

void SyntheticSpec::validate() const {
  if (canvas_size < 16) throw std::invalid_argument("synthetic spec: canvas_size must be >= 16");
  if (fg_bg_similarity < 0.0 || fg_bg_similarity > 1.0)
    throw std::invalid_argument("synthetic spec: fg_bg_similarity must lie in [0, 1]");
  if (intra_class_jitter < 0.0) throw std::invalid_argument("synthetic spec: intra_class_jitter must be >= 0");
  if (!(min_area > 0.0 && min_area <= max_area && max_area < 1.0))
    throw std::invalid_argument("synthetic spec: need 0 < min_area <= max_area < 1");
  if (query_contrast_min > query_contrast_max)
    throw std::invalid_argument("synthetic spec: query_contrast_min > query_contrast_max");
  if (query_distractor_min < 0.0 || query_distractor_max > 1.0 || query_distractor_min > query_distractor_max)
    throw std::invalid_argument("synthetic spec: query_distractor must satisfy 0 <= min <= max <= 1");
  if (distractor_mix < 0.0 || distractor_mix > 1.0)
    throw std::invalid_argument("synthetic spec: distractor_mix must lie in [0, 1]");
}

std::uint64_t episode_seed(std::uint64_t base, std::uint64_t run_seed, std::uint64_t index) {
  // splitmix64 over the three words
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ run_seed) ^ index);
}

namespace {

Eigen::Vector3d normal3(Rng& rng, double std) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Vector3d v;
  for (int i = 0; i < 3; ++i) v(i) = std * n(rng);
  return v;
}

BinaryMask draw_shape(ShapeFamily family, int size, double area_frac, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double area = area_frac * size * size;
  BinaryMask m = BinaryMask::Zero(size, size);
  if (family == ShapeFamily::kRectangle) {
    const double aspect = 0.5 + 1.5 * u(rng);
    const int h = std::clamp(int(std::lround(std::sqrt(area * aspect))), 2, size - 2);
    const int w = std::clamp(int(std::lround(area / h)), 2, size - 2);
    const int y0 = int(u(rng) * (size - h));
    const int x0 = int(u(rng) * (size - w));
    m.block(y0, x0, h, w).setOnes();
    return m;
  }
  double outer = 0.0, inner = 0.0;
  if (family == ShapeFamily::kRing) {
    const double ratio = 0.45 + 0.2 * u(rng);
    outer = std::sqrt(area / (std::numbers::pi * (1.0 - ratio * ratio)));
    inner = ratio * outer;
  } else {
    outer = std::sqrt(area / std::numbers::pi);
  }
  outer = std::min(outer, 0.48 * size);
  const double margin = outer * 0.8;
  const double cy = margin + u(rng) * std::max(1.0, size - 2 * margin);
  const double cx = margin + u(rng) * std::max(1.0, size - 2 * margin);
  double amp[3], phase[3];
  for (int k = 0; k < 3; ++k) {
    amp[k] = family == ShapeFamily::kBlob ? 0.12 * u(rng) : 0.0;
    phase[k] = 2 * std::numbers::pi * u(rng);
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double r = std::hypot(dy, dx);
      const double theta = std::atan2(dy, dx);
      double scale = 1.0;
      for (int k = 0; k < 3; ++k) scale += amp[k] * std::cos((k + 2) * theta + phase[k]);
      if (r < outer * scale && r >= inner) m(y, x) = 1;
    }
  return m;
}

Grid<float> smooth_field(int size, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  cv::Mat white(size, size, CV_32F);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) white.at<float>(y, x) = float(n(rng));
  cv::Mat blurred;
  cv::GaussianBlur(white, blurred, cv::Size(0, 0), scale, scale, cv::BORDER_REFLECT);
  cv::Scalar mean, stddev;
  cv::meanStdDev(blurred, mean, stddev);
  Grid<float> out(size, size);
  const float inv = stddev[0] > 0 ? float(1.0 / stddev[0]) : 0.0f;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out(y, x) = float((blurred.at<float>(y, x) - mean[0]) * inv);
  return out;
}

/// Background pixels covering `coverage` of the background, taken where a
/// smooth random field is highest.
BinaryMask distractor_patches(const BinaryMask& fg, double coverage, double scale, Rng& rng) {
  const int size = int(fg.rows());
  const Grid<float> field = smooth_field(size, 2.0 * scale, rng);
  std::vector<float> values;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (!fg(y, x)) values.push_back(field(y, x));
  BinaryMask out = BinaryMask::Zero(size, size);
  const auto take = static_cast<std::size_t>(coverage * double(values.size()));
  if (take == 0) return out;
  std::nth_element(values.begin(), values.end() - take, values.end());
  const float cut = *(values.end() - take);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out(y, x) = !fg(y, x) && field(y, x) >= cut;
  return out;
}

}  // namespace

Episode generate_synthetic_episode(const SyntheticSpec& spec, int k_shot, int q_size) {
  spec.validate();
  if (k_shot < 1 || q_size < 1) throw std::invalid_argument("synthetic episode: k_shot and q_size must be >= 1");
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);

  const Eigen::Vector3d class_fg = spec.fg_texture_mean + normal3(rng, spec.class_color_std);
  const Eigen::Vector3d class_bg = spec.bg_texture_mean + normal3(rng, spec.class_color_std);
  const Eigen::Vector3d fg_base = (1.0 - spec.fg_bg_similarity) * class_fg + spec.fg_bg_similarity * class_bg;
  Eigen::Vector3d q_gain = Eigen::Vector3d::Ones() + normal3(rng, spec.query_shift_std);
  Eigen::Vector3d q_bias = normal3(rng, spec.query_shift_std / 2);
  const double q_contrast = spec.query_contrast_min + u(rng) * (spec.query_contrast_max - spec.query_contrast_min);
  // Drawn only when enabled so that specs without distractors keep their episodes.
  const double q_distractor =
      spec.query_distractor_max > 0.0
          ? spec.query_distractor_min + u(rng) * (spec.query_distractor_max - spec.query_distractor_min)
          : 0.0;

  Episode ep;
  ep.k_shot = k_shot;
  ep.id = "synth-" + std::to_string(spec.seed);
  const int size = spec.canvas_size;
  for (int i = 0; i < k_shot + q_size; ++i) {
    const bool is_query = i >= k_shot;
    const Eigen::Vector3d fg = fg_base + normal3(rng, spec.intra_class_jitter);
    const Eigen::Vector3d bg = class_bg + normal3(rng, spec.intra_class_jitter);
    const double area = spec.min_area + u(rng) * (spec.max_area - spec.min_area);
    LabeledImage li;
    li.mask = draw_shape(spec.fg_shape_family, size, area, rng);
    li.class_id = 0;
    li.source_id = ep.id + "/" + std::to_string(i);
    li.image = Image(3, size, size);
    BinaryMask distractor = BinaryMask::Zero(size, size);
    if (is_query && q_distractor > 0.0) distractor = distractor_patches(li.mask, q_distractor, spec.smooth_scale, rng);
    const Eigen::Vector3d mid = (1.0 - spec.distractor_mix) * bg + spec.distractor_mix * fg;
    for (int c = 0; c < 3; ++c) {
      Grid<float> field;
      if (spec.smooth_noise > 0) field = smooth_field(size, spec.smooth_scale, rng);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double v = li.mask(y, x) ? fg(c) : distractor(y, x) ? mid(c) : bg(c);
          v += spec.texture_noise * n(rng);
          if (spec.smooth_noise > 0) v += spec.smooth_noise * field(y, x);
          li.image.at(c, y, x) = float(v);
        }
    }
    auto& data = li.image.data;
    if (is_query && q_contrast != 1.0) {
      const Eigen::VectorXf mean = data.rowwise().mean();
      data = ((data.colwise() - mean) * float(q_contrast)).colwise() + mean;
    }
    for (int c = 0; c < 3; ++c) {
      double gain = spec.channel_gain(c), bias = spec.channel_bias(c);
      if (is_query) {
        bias = q_gain(c) * bias + q_bias(c);
        gain *= q_gain(c);
      }
      data.row(c) = (data.row(c).array() * float(gain) + float(bias)).matrix();
    }
    data = data.cwiseMax(0.0f).cwiseMin(1.0f);
    (is_query ? ep.query : ep.support).push_back(std::move(li));
  }
  return ep;
}

Dataset::Dataset(std::vector<LabeledImage> records, std::vector<std::string> class_names)
    : records_(std::move(records)), class_names_(std::move(class_names)) {
  for (std::size_t i = 0; i < records_.size(); ++i) by_class_[records_[i].class_id].push_back(i);
}

const std::vector<std::size_t>& Dataset::indices_of(int class_id) const {
  static const std::vector<std::size_t> empty;
  const auto it = by_class_.find(class_id);
  return it == by_class_.end() ? empty : it->second;
}

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

Dataset load_dataset(const DatasetLayout& layout) {
  if (!fs::is_directory(layout.root)) throw DataError("dataset root '" + layout.root.string() + "' is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(layout.root))
    if (e.is_directory() && fs::is_directory(e.path() / "images")) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());

  std::vector<LabeledImage> records;
  std::vector<std::string> names;
  for (const auto& dir : class_dirs) {
    const int class_id = static_cast<int>(names.size());
    names.push_back(dir.filename().string());
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir / "images"))
      if (e.is_regular_file() && is_image_file(e.path())) images.push_back(e.path());
    std::sort(images.begin(), images.end());
    for (const auto& img_path : images) {
      const std::string stem = img_path.stem().string();
      const fs::path mask_path = dir / "masks" / (stem + ".png");
      if (!fs::exists(mask_path))
        throw DataError("dataset: missing mask for image '" + stem + "' in class '" + names.back() + "'");
      LabeledImage li;
      li.image = read_image(img_path);
      li.mask = read_mask(mask_path);
      li.class_id = class_id;
      li.source_id = names.back() + "/" + stem;
      li.validate();
      std::vector<LabeledImage> pieces;
      if (layout.tile > 0)
        pieces = tile_image(li, layout.tile);
      else
        pieces.push_back(std::move(li));
      for (auto& piece : pieces) records.push_back(layout.resize > 0 ? resize(piece, layout.resize) : std::move(piece));
    }
  }
  return Dataset(std::move(records), std::move(names));
}

std::vector<LabeledImage> tile_image(const LabeledImage& img, int tile, bool keep_uniform) {
  if (tile < 1 || img.height() % tile != 0 || img.width() % tile != 0)
    throw std::invalid_argument("tile_image: tile " + std::to_string(tile) + " does not divide " +
                                std::to_string(img.height()) + "x" + std::to_string(img.width()));
  std::vector<LabeledImage> out;
  int index = 0;
  for (int ty = 0; ty < img.height(); ty += tile)
    for (int tx = 0; tx < img.width(); tx += tile, ++index) {
      LabeledImage t;
      t.mask = img.mask.block(ty, tx, tile, tile);
      const auto ones = t.mask.cast<int>().sum();
      if (!keep_uniform && (ones == 0 || ones == tile * tile)) continue;
      t.image = Image(3, tile, tile);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < tile; ++y)
          for (int x = 0; x < tile; ++x) t.image.at(c, y, x) = img.image.at(c, ty + y, tx + x);
      t.class_id = img.class_id;
      t.source_id = img.source_id + "#t" + std::to_string(index);
      out.push_back(std::move(t));
    }
  return out;
}

Image resize_image(const Image& img, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("resize: target size must be >= 1");
  if (img.height == height && img.width == width) return img;
  Image out(img.channels(), height, width);
  for (int c = 0; c < img.channels(); ++c) {
    Grid<float> g(img.height, img.width);
    flat(g) = img.data.row(c).transpose().array();
    const Grid<float> r = resize_bilinear(g, height, width);
    out.data.row(c) = flat(r).transpose().matrix();
  }
  return out;
}

LabeledImage resize(const LabeledImage& img, int size) {
  LabeledImage out;
  out.image = resize_image(img.image, size, size);
  out.mask = resize_nearest(img.mask, size, size);
  out.class_id = img.class_id;
  out.source_id = img.source_id;
  return out;
}

Episode sample_episode(const Dataset& data, int class_id, int k_shot, int q_size, Rng& rng) {
  if (k_shot < 1 || q_size < 1) throw std::invalid_argument("sample_episode: k_shot and q_size must be >= 1");
  std::vector<std::size_t> pool = data.indices_of(class_id);
  const std::string name =
      class_id >= 0 && std::size_t(class_id) < data.num_classes() ? data.class_names()[class_id] : std::to_string(class_id);
  if (pool.size() < std::size_t(k_shot + q_size))
    throw DataError("sample_episode: class '" + name + "' has " + std::to_string(pool.size()) + " records, need " +
                    std::to_string(k_shot + q_size));
  std::shuffle(pool.begin(), pool.end(), rng);
  Episode ep;
  ep.k_shot = k_shot;
  ep.id = name;
  for (int i = 0; i < k_shot; ++i) ep.support.push_back(data.records()[pool[i]]);
  for (int i = 0; i < q_size; ++i) ep.query.push_back(data.records()[pool[k_shot + i]]);
  std::set<std::string> ids;
  for (const auto& s : ep.support) ids.insert(s.source_id);
  for (const auto& q : ep.query)
    if (ids.count(q.source_id)) throw DataError("sample_episode: duplicate source id '" + q.source_id + "'");
  return ep;
}

Episode sample_episode(const Dataset& data, int k_shot, int q_size, Rng& rng) {
  if (data.num_classes() == 0) throw DataError("sample_episode: dataset is empty");
  std::uniform_int_distribution<int> pick(0, static_cast<int>(data.num_classes()) - 1);
  return sample_episode(data, pick(rng), k_shot, q_size, rng);
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.brightness_min = c.brightness_max = 1.0;
  c.contrast_min = c.contrast_max = 1.0;
  c.saturation_min = c.saturation_max = 1.0;
  c.blur_sigma_min = c.blur_sigma_max = 0.0;
  c.grayscale_probability = 0.0;
  c.cutout = false;
  return c;
}

Image to_grayscale(const Image& img) {
  Image out = img;
  const Eigen::RowVectorXf luma = kLuma.transpose() * img.data;
  for (int c = 0; c < 3; ++c) out.data.row(c) = luma;
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0) return img;
  const int radius = std::max(1, int(std::ceil(3 * sigma)));
  std::vector<float> k(2 * radius + 1);
  float total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = float(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= total;
  const int h = img.height, w = img.width;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Image tmp = img, out = img;
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(c, y, reflect(x + i, w));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(c, reflect(y + i, h), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

void apply_cutout(Image& img, const Rect& r) {
  for (int y = r.y; y < r.y + r.height; ++y)
    for (int x = r.x; x < r.x + r.width; ++x)
      for (int c = 0; c < img.channels(); ++c) img.at(c, y, x) = 0.0f;
}

LabeledImage augment_support(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng, AugmentRecord* record) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  AugmentRecord rec;
  LabeledImage out = img;
  auto& data = out.image.data;

  rec.brightness = draw(cfg.brightness_min, cfg.brightness_max);
  rec.contrast = draw(cfg.contrast_min, cfg.contrast_max);
  rec.saturation = draw(cfg.saturation_min, cfg.saturation_max);
  if (rec.brightness != 1.0) data *= float(rec.brightness);
  if (rec.contrast != 1.0) {
    const float mean = (kLuma.transpose() * data).mean();
    data = ((data.array() - mean) * float(rec.contrast) + mean).matrix();
  }
  if (rec.saturation != 1.0) {
    const Eigen::RowVectorXf gray = kLuma.transpose() * data;
    data = ((data.rowwise() - gray) * float(rec.saturation)).rowwise() + gray;
  }
  data = data.cwiseMax(0.0f).cwiseMin(1.0f);

  if (cfg.blur_sigma_max > 0) {
    rec.blur_sigma = draw(cfg.blur_sigma_min, cfg.blur_sigma_max);
    out.image = gaussian_blur(out.image, rec.blur_sigma);
  }
  if (u(rng) < cfg.grayscale_probability) {
    rec.grayscale = true;
    out.image = to_grayscale(out.image);
  }
  if (cfg.cutout) {
    const double frac = draw(cfg.cutout_min_area, cfg.cutout_max_area);
    const double side = std::sqrt(frac * img.height() * img.width());
    Rect r;
    r.height = std::clamp(int(std::lround(side)), 1, img.height());
    r.width = std::clamp(int(std::lround(side)), 1, img.width());
    r.y = int(u(rng) * (img.height() - r.height + 1));
    r.x = int(u(rng) * (img.width() - r.width + 1));
    r.y = std::min(r.y, img.height() - r.height);
    r.x = std::min(r.x, img.width() - r.width);
    apply_cutout(out.image, r);
    rec.cutout = r;
  }
  if (record) *record = rec;
  return out;
}

Image read_image(const fs::path& p) {
  const cv::Mat bgr = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image '" + p.string() + "'");
  Image img(3, bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = px[2 - c] / 255.0f;
    }
  return img;
}

BinaryMask read_mask(const fs::path& p) {
  const cv::Mat m = cv::imread(p.string(), cv::IMREAD_GRAYSCALE | cv::IMREAD_ANYDEPTH);
  if (m.empty()) throw DataError("cannot read mask '" + p.string() + "'");
  cv::Mat m32;
  m.convertTo(m32, CV_32S);
  BinaryMask out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out(y, x) = m32.at<int>(y, x) != 0 ? 1 : 0;
  return out;
}

namespace {

void write_mat(const fs::path& p, const cv::Mat& m, const char* what) {
  bool ok = false;
  try {
    ok = cv::imwrite(p.string(), m);
  } catch (const cv::Exception& e) {
    throw DataError(std::string("cannot write ") + what + " '" + p.string() + "': " + e.what());
  }
  if (!ok) throw DataError(std::string("cannot write ") + what + " '" + p.string() + "'");
}

}  // namespace

void write_image(const fs::path& p, const Image& img) {
  cv::Mat bgr(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        bgr.at<cv::Vec3b>(y, x)[2 - c] =
            static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  write_mat(p, bgr, "image");
}

void write_mask(const fs::path& p, const BinaryMask& m) {
  cv::Mat out(int(m.rows()), int(m.cols()), CV_8UC1);
  for (int y = 0; y < out.rows; ++y)
    for (int x = 0; x < out.cols; ++x) out.at<unsigned char>(y, x) = m(y, x) ? 255 : 0;
  write_mat(p, out, "mask");
}

}  // namespace darnet

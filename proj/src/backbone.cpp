#include <darnet/backbone.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace darnet {

namespace {

/// 3x3, pad 1 im2col. Row index = c * 9 + ky * 3 + kx.
Matrix<double> im2col(const Matrix<double>& x, int h, int w) {
  const int c_in = static_cast<int>(x.rows());
  Matrix<double> cols = Matrix<double>::Zero(Eigen::Index(c_in) * 9, Eigen::Index(h) * w);
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = Eigen::Index(c) * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            cols(row, Eigen::Index(y) * w + xx) = x(c, Eigen::Index(sy) * w + sx);
          }
        }
      }
  return cols;
}

Matrix<double> col2im(const Matrix<double>& cols, int c_in, int h, int w) {
  Matrix<double> x = Matrix<double>::Zero(c_in, Eigen::Index(h) * w);
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = Eigen::Index(c) * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            x(c, Eigen::Index(sy) * w + sx) += cols(row, Eigen::Index(y) * w + xx);
          }
        }
      }
  return x;
}

Matrix<double> avg_pool2(const Matrix<double>& x, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  Matrix<double> out(x.rows(), Eigen::Index(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      const auto p00 = Eigen::Index(2 * y) * w + 2 * xx;
      out.col(Eigen::Index(y) * ow + xx) =
          0.25 * (x.col(p00) + x.col(p00 + 1) + x.col(p00 + w) + x.col(p00 + w + 1));
    }
  return out;
}

Matrix<double> avg_pool2_backward(const Matrix<double>& g, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  Matrix<double> out = Matrix<double>::Zero(g.rows(), Eigen::Index(h) * w);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      const auto p00 = Eigen::Index(2 * y) * w + 2 * xx;
      const auto q = 0.25 * g.col(Eigen::Index(y) * ow + xx);
      out.col(p00) += q;
      out.col(p00 + 1) += q;
      out.col(p00 + w) += q;
      out.col(p00 + w + 1) += q;
    }
  return out;
}

}  // namespace

Extractor::Extractor(ExtractorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.widths.empty()) throw std::invalid_argument("extractor: at least one block is required");
  if (cfg_.stride < 1 || (cfg_.stride & (cfg_.stride - 1)) != 0)
    throw std::invalid_argument("extractor: stride must be a power of two");
  const int pools = std::countr_zero(static_cast<unsigned>(cfg_.stride));
  if (pools > static_cast<int>(cfg_.widths.size()))
    throw std::invalid_argument("extractor: stride needs more blocks than configured");
  Rng rng(cfg_.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  int c_in = 3;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    Block b;
    const int c_out = cfg_.widths[i];
    const double std = std::sqrt(2.0 / (9.0 * c_in));
    b.weight = Matrix<double>::NullaryExpr(c_out, Eigen::Index(c_in) * 9, [&] { return std * n(rng); });
    b.bias = Vector<double>::Zero(c_out);
    b.relu = i + 1 < cfg_.widths.size() || cfg_.relu_last;
    b.pool = static_cast<int>(i) < pools;
    blocks_.push_back(std::move(b));
    c_in = c_out;
  }
}

int Extractor::out_channels() const { return blocks_.empty() ? 0 : static_cast<int>(blocks_.back().weight.rows()); }

FeatureMap<double> Extractor::forward(const Image& img, const CsdConfig* csd, Rng* rng, Tape* tape) const {
  if (!initialized()) throw std::logic_error("extractor: model is not initialized");
  if (img.channels() != 3) throw ShapeError("extractor: expected a 3-channel image");
  const bool use_csd = csd != nullptr && rng != nullptr && mode_ == Mode::kTrain;
  Matrix<double> x = img.data.cast<double>().array() - 0.5;
  int h = img.height, w = img.width;
  if (tape) tape->entries.assign(blocks_.size(), {});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    Matrix<double> cols = im2col(x, h, w);
    Matrix<double> y = b.weight * cols;
    y.colwise() += b.bias;
    Tape::Entry* e = tape ? &tape->entries[i] : nullptr;
    if (e) {
      e->in_height = h;
      e->in_width = w;
      e->columns = std::move(cols);
    }
    if (b.relu) {
      if (e) e->relu_mask = (y.array() > 0.0).cast<double>().matrix();
      y = y.cwiseMax(0.0);
    }
    if (use_csd && csd->target_blocks.count(static_cast<int>(i))) {
      CsdDraw<double> draw = sample_csd<double>(*csd, static_cast<int>(y.rows()), *rng);
      if (draw.applied) y = csd_apply(y, draw.scale, draw.shift);
      if (e) e->csd = std::move(draw);
    }
    if (e) {
      e->conv_height = h;
      e->conv_width = w;
    }
    if (b.pool) {
      y = avg_pool2(y, h, w);
      h /= 2;
      w /= 2;
    }
    x = std::move(y);
  }
  return FeatureMap<double>(std::move(x), h, w, cfg_.stride);
}

Extractor::Gradients Extractor::backward(const Tape& tape, const Matrix<double>& grad_out) const {
  if (tape.entries.size() != blocks_.size()) throw std::logic_error("extractor: tape does not match model");
  Gradients g = zero_gradients();
  Matrix<double> grad = grad_out;
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    const Block& b = blocks_[k];
    const auto& e = tape.entries[k];
    if (b.pool) grad = avg_pool2_backward(grad, e.conv_height, e.conv_width);
    grad = csd_backward(grad, e.csd);
    if (b.relu) grad = grad.cwiseProduct(e.relu_mask);
    g.weight[k].noalias() = grad * e.columns.transpose();
    g.bias[k] = grad.rowwise().sum();
    if (k > 0) {
      const Matrix<double> dcols = b.weight.transpose() * grad;
      grad = col2im(dcols, static_cast<int>(b.weight.cols() / 9), e.in_height, e.in_width);
    }
  }
  return g;
}

Extractor::Gradients Extractor::zero_gradients() const {
  Gradients g;
  for (const auto& b : blocks_) {
    g.weight.push_back(Matrix<double>::Zero(b.weight.rows(), b.weight.cols()));
    g.bias.push_back(Vector<double>::Zero(b.bias.size()));
  }
  return g;
}

Extractor::Gradients& Extractor::Gradients::operator+=(const Gradients& o) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += o.weight[i];
    bias[i] += o.bias[i];
  }
  return *this;
}

double Extractor::Gradients::squared_norm() const {
  double s = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) s += weight[i].squaredNorm() + bias[i].squaredNorm();
  return s;
}

bool Extractor::parameters_equal(const Extractor& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& a = blocks_[i];
    const auto& b = other.blocks_[i];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
    if (std::memcmp(a.weight.data(), b.weight.data(), sizeof(double) * a.weight.size()) != 0) return false;
    if (std::memcmp(a.bias.data(), b.bias.data(), sizeof(double) * a.bias.size()) != 0) return false;
  }
  return true;
}

FeatureMap<double> extract(const Extractor& model, const Image& img, const CsdConfig* csd, Rng* rng) {
  return model.forward(img, csd, rng);
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

float get_f32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated payload");
  return std::bit_cast<float>(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                              std::uint32_t(b[3]) << 24);
}

void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char m[4];
  if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0) throw FormatError(what + ": bad magic");
}

}  // namespace

void save_feature_file(const std::filesystem::path& p, const FeatureMap<double>& f) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + p.string() + "' for writing");
  os.write("DFET", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(f.channels()));
  put_u32(os, static_cast<std::uint32_t>(f.height));
  put_u32(os, static_cast<std::uint32_t>(f.width));
  for (int c = 0; c < f.channels(); ++c)
    for (Eigen::Index i = 0; i < f.pixels(); ++i) put_f32(os, static_cast<float>(f.data(c, i)));
  if (!os) throw FormatError("write failed for '" + p.string() + "'");
}

FeatureMap<double> load_feature_file(const std::filesystem::path& p) {
  const std::string what = "feature file '" + p.string() + "'";
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError(what + ": cannot open");
  expect_magic(is, "DFET", what);
  if (get_u32(is, what) != 1) throw FormatError(what + ": unsupported version");
  const auto c = get_u32(is, what), h = get_u32(is, what), w = get_u32(is, what);
  if (c == 0 || h == 0 || w == 0) throw FormatError(what + ": zero dimension in header");
  if (std::uint64_t(c) * h * w > (std::uint64_t(1) << 32)) throw FormatError(what + ": header dimensions too large");
  FeatureMap<double> f{int(c), int(h), int(w)};
  for (std::uint32_t ch = 0; ch < c; ++ch)
    for (Eigen::Index i = 0; i < f.pixels(); ++i) {
      const float v = get_f32(is, what);
      if (!std::isfinite(v)) throw FormatError(what + ": non-finite value in payload");
      f.data(ch, i) = v;
    }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(what + ": trailing bytes after payload");
  return f;
}

void save_tensors(const std::filesystem::path& p, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + p.string() + "' for writing");
  os.write("DPRM", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(os, d);
    for (float v : t.values) put_f32(os, v);
  }
  if (!os) throw FormatError("write failed for '" + p.string() + "'");
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& p) {
  const std::string what = "checkpoint '" + p.string() + "'";
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError(what + ": cannot open");
  expect_magic(is, "DPRM", what);
  if (get_u32(is, what) != 1) throw FormatError(what + ": unsupported version");
  const auto count = get_u32(is, what);
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = get_u32(is, what);
    if (len > 4096) throw FormatError(what + ": implausible name length");
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw FormatError(what + ": truncated name");
    const auto rank = get_u32(is, what);
    if (rank > 8) throw FormatError(what + ": implausible rank");
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(get_u32(is, what));
      n *= t.shape.back();
    }
    if (n > (std::uint64_t(1) << 32)) throw FormatError(what + ": tensor too large");
    t.values.resize(n);
    for (auto& v : t.values) v = get_f32(is, what);
    out.push_back(std::move(t));
  }
  return out;
}

NamedTensor to_tensor(const std::string& name, const Matrix<double>& m) {
  NamedTensor t{name, {std::uint32_t(m.rows()), std::uint32_t(m.cols())}, {}};
  t.values.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(float(m(r, c)));
  return t;
}

NamedTensor to_tensor(const std::string& name, const Vector<double>& v) {
  NamedTensor t{name, {std::uint32_t(v.size())}, {}};
  for (Eigen::Index i = 0; i < v.size(); ++i) t.values.push_back(float(v(i)));
  return t;
}

NamedTensor to_tensor(const std::string& name, double scalar) { return {name, {}, {float(scalar)}}; }

const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts)
    if (t.name == name) return t;
  throw FormatError("checkpoint: missing tensor '" + name + "'");
}

Matrix<double> tensor_matrix(const NamedTensor& t) {
  if (t.shape.size() != 2) throw FormatError("tensor '" + t.name + "' is not a matrix");
  Matrix<double> m(t.shape[0], t.shape[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.values[std::size_t(r * m.cols() + c)];
  return m;
}

Vector<double> tensor_vector(const NamedTensor& t) {
  if (t.shape.size() != 1) throw FormatError("tensor '" + t.name + "' is not a vector");
  Vector<double> v(t.shape[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = t.values[std::size_t(i)];
  return v;
}

std::vector<NamedTensor> extractor_tensors(const Extractor& e) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < e.blocks().size(); ++i) {
    out.push_back(to_tensor("block" + std::to_string(i) + ".weight", e.blocks()[i].weight));
    out.push_back(to_tensor("block" + std::to_string(i) + ".bias", e.blocks()[i].bias));
  }
  return out;
}

Extractor extractor_from_tensors(const std::vector<NamedTensor>& ts, const ExtractorConfig& cfg) {
  Extractor e(cfg);
  for (std::size_t i = 0; i < e.blocks().size(); ++i) {
    auto& b = e.blocks()[i];
    Matrix<double> w = tensor_matrix(find_tensor(ts, "block" + std::to_string(i) + ".weight"));
    Vector<double> bias = tensor_vector(find_tensor(ts, "block" + std::to_string(i) + ".bias"));
    if (w.rows() != b.weight.rows() || w.cols() != b.weight.cols() || bias.size() != b.bias.size())
      throw FormatError("checkpoint: block " + std::to_string(i) + " shape does not match the configured extractor");
    b.weight = std::move(w);
    b.bias = std::move(bias);
  }
  return e;
}

}  // namespace darnet

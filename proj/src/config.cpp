#include <darnet/config.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace darnet {

namespace pt = boost::property_tree;

template <typename T>
std::vector<T> parse_list(const std::string& csv) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::stringstream is(item);
    T v;
    if (!(is >> v)) throw ConfigError("cannot parse list element '" + item + "' in '" + csv + "'");
    std::string rest;
    if (is >> rest) throw ConfigError("trailing text in list element '" + item + "'");
    out.push_back(v);
  }
  return out;
}

template std::vector<int> parse_list<int>(const std::string&);
template std::vector<double> parse_list<double>(const std::string&);
template std::vector<std::uint64_t> parse_list<std::uint64_t>(const std::string&);

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

namespace {

/// Typed access to one section; remembers which keys were read so that
/// misspelled keys are reported instead of silently ignored.
class Section {
 public:
  Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!tree_) return;
    const auto v = tree_->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!v) return;
    std::stringstream is(*v);
    T parsed;
    if constexpr (std::is_same_v<T, bool>) {
      std::string s;
      is >> s;
      if (s == "true" || s == "1" || s == "yes" || s == "on")
        parsed = true;
      else if (s == "false" || s == "0" || s == "no" || s == "off")
        parsed = false;
      else
        throw error(key, *v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      parsed = *v;
    } else {
      if (!(is >> parsed)) throw error(key, *v);
      std::string rest;
      if (is >> rest) throw error(key, *v);
    }
    out = parsed;
  }

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    if (!tree_) return std::nullopt;
    const auto v = tree_->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    return v ? std::optional<std::string>(*v) : std::nullopt;
  }

  template <typename T>
  void list(const std::string& key, std::vector<T>& out) {
    if (auto v = raw(key)) {
      try {
        out = parse_list<T>(*v);
      } catch (const ConfigError&) {
        throw error(key, *v);
      }
    }
  }

  void vec3(const std::string& key, Eigen::Vector3d& out) {
    std::vector<double> v;
    list(key, v);
    if (v.empty()) return;
    if (v.size() != 3) throw error(key, "expected three comma-separated numbers");
    out = {v[0], v[1], v[2]};
  }

  void pair(const std::string& key, double& a, double& b) {
    std::vector<double> v;
    list(key, v);
    if (v.empty()) return;
    if (v.size() != 2) throw error(key, "expected two comma-separated numbers");
    a = v[0];
    b = v[1];
  }

  void check_unused() const {
    if (!tree_) return;
    for (const auto& kv : *tree_)
      if (!used_.count(kv.first)) throw ConfigError("unknown key '" + kv.first + "' in section [" + name_ + "]");
  }

 private:
  ConfigError error(const std::string& key, const std::string& value) const {
    return ConfigError("bad value for [" + name_ + "] " + key + ": '" + value + "'");
  }

  const pt::ptree* tree_;
  std::string name_;
  std::set<std::string> used_;
};

pt::ptree read_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  return tree;
}

std::string normalized(const pt::ptree& tree) {
  std::vector<std::string> lines;
  for (const auto& sec : tree)
    for (const auto& kv : sec.second) lines.push_back(sec.first + "." + kv.first + "=" + kv.second.data());
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

const pt::ptree* child(const pt::ptree& tree, const std::string& name) {
  const auto c = tree.get_child_optional(pt::ptree::path_type(name, '\0'));
  return c ? &*c : nullptr;
}

void read_spec(Section& s, SyntheticSpec& spec) {
  s.get("canvas_size", spec.canvas_size);
  if (auto v = s.raw("shape")) {
    try {
      spec.fg_shape_family = parse_shape_family(*v);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  s.vec3("fg_mean", spec.fg_texture_mean);
  s.vec3("bg_mean", spec.bg_texture_mean);
  s.get("fg_bg_similarity", spec.fg_bg_similarity);
  s.get("intra_class_jitter", spec.intra_class_jitter);
  s.get("seed", spec.seed);
  s.get("texture_noise", spec.texture_noise);
  s.get("smooth_noise", spec.smooth_noise);
  s.get("smooth_scale", spec.smooth_scale);
  s.get("class_color_std", spec.class_color_std);
  s.get("min_area", spec.min_area);
  s.get("max_area", spec.max_area);
  s.vec3("channel_gain", spec.channel_gain);
  s.vec3("channel_bias", spec.channel_bias);
  s.get("query_shift_std", spec.query_shift_std);
  s.pair("query_contrast", spec.query_contrast_min, spec.query_contrast_max);
  s.pair("query_distractor", spec.query_distractor_min, spec.query_distractor_max);
  s.get("distractor_mix", spec.distractor_mix);
}

}  // namespace

SyntheticSpec parse_synthetic_spec(const std::string& text) {
  const pt::ptree tree = read_ini(text);
  for (const auto& sec : tree)
    if (sec.first != "synth") throw ConfigError("unknown section [" + sec.first + "] in synthetic spec");
  SyntheticSpec spec;
  Section s(child(tree, "synth"), "synth");
  read_spec(s, spec);
  s.check_unused();
  try {
    spec.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  return spec;
}

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

SyntheticSpec load_synthetic_spec(const std::filesystem::path& p) { return parse_synthetic_spec(slurp(p)); }

PipelineConfig Config::pipeline() const {
  PipelineConfig pc;
  pc.temperature = temperature;
  pc.refine = refine;
  pc.eca_kernel = eca_kernel;
  pc.fuse_train = fuse_train;
  pc.fuse_test = fuse_test;
  return pc;
}

Config parse_config(const std::string& text, const std::filesystem::path& base) {
  const pt::ptree tree = read_ini(text);
  static const std::set<std::string> known{"data", "backbone", "csd", "arsm", "dam", "tta", "eval"};
  for (const auto& sec : tree)
    if (!known.count(sec.first)) throw ConfigError("unknown section [" + sec.first + "]");

  Config c;
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  std::string spec_text;

  Section data(child(tree, "data"), "data");
  data.get("source", c.source);
  if (c.source != "synthetic" && c.source != "dataset")
    throw ConfigError("[data] source must be 'synthetic' or 'dataset'");
  if (auto v = data.raw("train_spec")) {
    const auto p = resolve(*v);
    c.train_spec = load_synthetic_spec(p);
    spec_text += slurp(p);
  }
  if (auto v = data.raw("eval_spec")) {
    const auto p = resolve(*v);
    c.eval_spec = load_synthetic_spec(p);
    spec_text += slurp(p);
  }
  if (auto v = data.raw("train_root")) c.train_data.root = resolve(*v);
  if (auto v = data.raw("eval_root")) c.eval_data.root = resolve(*v);
  data.get("tile", c.eval_data.tile);
  data.get("resize", c.eval_data.resize);
  c.train_data.tile = c.eval_data.tile;
  c.train_data.resize = c.eval_data.resize;
  data.get("k_shot", c.k_shot);
  data.get("queries", c.queries);
  data.check_unused();
  if (c.k_shot < 1 || c.queries < 1) throw ConfigError("[data] k_shot and queries must be >= 1");

  Section bb(child(tree, "backbone"), "backbone");
  bb.list("widths", c.extractor.widths);
  bb.get("stride", c.extractor.stride);
  bb.get("relu_last", c.extractor.relu_last);
  bb.get("seed", c.extractor.seed);
  bb.get("temperature", c.temperature);
  bb.get("train_steps", c.train.steps);
  bb.get("learning_rate", c.train.optimizer.learning_rate);
  bb.get("train_seed", c.train.seed);
  if (auto v = bb.raw("optimizer")) c.train.optimizer.kind = parse_optimizer(*v);
  if (auto v = bb.raw("checkpoint")) c.checkpoint = resolve(*v);
  bb.check_unused();

  Section csd(child(tree, "csd"), "csd");
  csd.get("enabled", c.train.csd);
  csd.get("apply_probability", c.csd.apply_probability);
  csd.get("noise_std", c.csd.noise_std);
  std::vector<int> blocks;
  csd.list("blocks", blocks);
  if (!blocks.empty()) c.csd.target_blocks = std::set<int>(blocks.begin(), blocks.end());
  if (auto v = csd.raw("sampling")) {
    if (*v == "per_channel")
      c.csd.sampling = CsdSampling::kPerChannel;
    else if (*v == "per_map")
      c.csd.sampling = CsdSampling::kPerMap;
    else
      throw ConfigError("[csd] sampling must be per_channel or per_map");
  }
  if (auto v = csd.raw("checkpoint")) c.csd_checkpoint = resolve(*v);
  csd.check_unused();
  c.train.csd_config = c.csd;

  Section arsm(child(tree, "arsm"), "arsm");
  arsm.get("tau_fg", c.thresholds.tau_fg);
  arsm.get("tau_bg", c.thresholds.tau_bg);
  arsm.get("kappa", c.thresholds.kappa);
  double lambda = c.thresholds.lambda_mix();
  arsm.get("lambda_mix", lambda);
  if (!(lambda > 0 && lambda < 1)) throw ConfigError("[arsm] lambda_mix must lie in (0, 1)");
  c.thresholds.set_lambda_mix(lambda);
  arsm.get("max_stages", c.refine.max_stages);
  if (auto v = arsm.raw("strategy")) {
    if (*v == "adaptive")
      c.refine.shift.kind = ShiftPolicy::Kind::kAdaptive;
    else if (*v == "fixed")
      c.refine.shift.kind = ShiftPolicy::Kind::kFixed;
    else
      throw ConfigError("[arsm] strategy must be adaptive or fixed");
  }
  arsm.get("fixed_shift", c.refine.shift.fixed_shift);
  arsm.get("alpha", c.refine.alpha);
  arsm.get("beta", c.refine.beta);
  arsm.get("chain_stages", c.refine.chain_prototypes);
  arsm.check_unused();
  if (c.refine.max_stages < 1) throw ConfigError("[arsm] max_stages must be >= 1");

  Section dam(child(tree, "dam"), "dam");
  dam.get("eca_kernel", c.eca_kernel);
  dam.check_unused();
  try {
    validate_kernel_size(c.eca_kernel);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("[dam] ") + e.what());
  }

  Section tta(child(tree, "tta"), "tta");
  tta.get("learning_rate", c.tta.optimizer.learning_rate);
  tta.get("iterations", c.tta.iterations);
  if (auto v = tta.raw("optimizer")) c.tta.optimizer.kind = parse_optimizer(*v);
  tta.get("fresh_augmentation", c.tta.fresh_augmentation);
  tta.get("alpha_att", c.tta.alpha_att);
  tta.get("surrogate_slope", c.tta.surrogate_slope);
  tta.get("seed", c.tta.seed);
  tta.pair("fuse_train", c.fuse_train.m1, c.fuse_train.m2);
  tta.pair("fuse_test", c.fuse_test.m1, c.fuse_test.m2);
  tta.check_unused();
  try {
    c.tta.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  for (const auto& w : {c.fuse_train, c.fuse_test})
    if (w.m1 < 0 || w.m2 < 0 || !(w.m1 + w.m2 > 0)) throw ConfigError("[tta] fuse weights must be >= 0 with positive sum");

  Section ev(child(tree, "eval"), "eval");
  ev.get("runs", c.runs);
  ev.get("tasks", c.tasks);
  ev.list("seeds", c.seeds);
  if (auto v = ev.raw("flags")) {
    try {
      c.flags = AblationFlags::parse(*v);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  ev.get("workers", c.workers);
  if (auto v = ev.raw("output_dir")) c.output_dir = resolve(*v);
  ev.check_unused();

  c.train.k_shot = c.k_shot;
  c.train.queries = c.queries;
  c.fingerprint = fnv1a_hex(normalized(tree) + spec_text);
  return c;
}

Config load_config(const std::filesystem::path& p) {
  return parse_config(slurp(p), p.has_parent_path() ? p.parent_path() : std::filesystem::path("."));
}

}  // namespace darnet

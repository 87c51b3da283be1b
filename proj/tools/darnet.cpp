// darnet command line: train, eval, synth, overlay.

#include <darnet/config.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace darnet;

namespace {

std::function<Episode(std::uint64_t)> train_episodes(const Config& cfg, std::shared_ptr<Dataset>& keep) {
  if (cfg.source == "synthetic") {
    return [spec = cfg.train_spec, k = cfg.k_shot, q = cfg.queries](std::uint64_t seed) {
      SyntheticSpec s = spec;
      s.seed = seed;
      return generate_synthetic_episode(s, k, q);
    };
  }
  keep = std::make_shared<Dataset>(load_dataset(cfg.train_data));
  return [data = keep, k = cfg.k_shot, q = cfg.queries](std::uint64_t seed) {
    Rng rng(seed);
    return sample_episode(*data, k, q, rng);
  };
}

Model train_model(const Config& cfg, bool csd, std::ostream* log) {
  Model model = Model::create(cfg.extractor, cfg.pipeline());
  model.thresholds = cfg.thresholds;
  TrainConfig tc = cfg.train;
  tc.csd = csd;
  std::shared_ptr<Dataset> keep;
  train_epoch(model, train_episodes(cfg, keep), tc, log);
  return model;
}

/// Loads the checkpoint for the requested variant, training it first when absent.
Model obtain_model(const Config& cfg, bool csd) {
  const fs::path& path = csd ? cfg.csd_checkpoint : cfg.checkpoint;
  if (!fs::exists(path)) {
    std::cerr << "checkpoint " << path << " not found; training" << (csd ? " with CSD" : "") << "\n";
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_model(path, train_model(cfg, csd, nullptr));
  }
  Model m = load_model(path, cfg.extractor, cfg.pipeline());
  m.thresholds = cfg.thresholds;  // training leaves the threshold learnables at their configured values
  return m;
}

int cmd_train(const std::string& config_path, const std::string& csd_override, const std::string& out,
              const std::string& log_path) {
  const Config cfg = load_config(config_path);
  bool csd = cfg.train.csd;
  if (csd_override == "on") csd = true;
  if (csd_override == "off") csd = false;
  fs::path path = out.empty() ? (csd ? cfg.csd_checkpoint : cfg.checkpoint) : fs::path(out);
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw std::runtime_error("cannot open '" + log_path + "'");
  }
  const Model m = train_model(cfg, csd, log.is_open() ? &log : nullptr);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_model(path, m);
  std::cout << "saved " << path.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string config, flags, seeds, out;
  int runs = 0, tasks = 0, workers = 0;
  bool resume = false;
};

int cmd_eval(const EvalArgs& a) {
  Config cfg = load_config(a.config);
  if (!a.flags.empty()) cfg.flags = AblationFlags::parse(a.flags);
  if (!a.seeds.empty()) cfg.seeds = parse_list<std::uint64_t>(a.seeds);
  if (a.runs > 0) {
    if (a.seeds.empty()) {
      cfg.seeds.clear();
      for (int i = 0; i < a.runs; ++i) cfg.seeds.push_back(std::uint64_t(i));
    }
    cfg.runs = a.runs;
  } else {
    cfg.runs = static_cast<int>(cfg.seeds.size());
  }
  if (cfg.runs != int(cfg.seeds.size()))
    throw std::invalid_argument("--runs (" + std::to_string(cfg.runs) + ") must equal the number of seeds (" +
                                std::to_string(cfg.seeds.size()) + ")");
  if (a.tasks > 0) cfg.tasks = a.tasks;
  if (a.workers > 0) cfg.workers = a.workers;
  const fs::path out = a.out.empty() ? cfg.output_dir : fs::path(a.out);
  fs::create_directories(out);

  const Model model = obtain_model(cfg, cfg.flags.csd);
  std::unique_ptr<Dataset> data;
  EpisodeSource source = cfg.eval_spec;
  if (cfg.source == "dataset") {
    data = std::make_unique<Dataset>(load_dataset(cfg.eval_data));
    source = data.get();
  }

  BenchmarkOptions opt;
  opt.tasks = cfg.tasks;
  opt.seeds = cfg.seeds;
  opt.flags = cfg.flags;
  opt.k_shot = cfg.k_shot;
  opt.queries = cfg.queries;
  opt.tta = cfg.tta;
  opt.workers = cfg.workers;
  opt.fingerprint = cfg.fingerprint;
  opt.episodes_jsonl = out / "episodes.jsonl";
  opt.resume = a.resume;
  std::ofstream tta_log;
  if (cfg.flags.tta) {
    tta_log.open(out / "tta_log.jsonl", a.resume ? std::ios::app : std::ios::trunc);
    opt.tta_log = &tta_log;
  }
  const RunReport report = run_benchmark(model, source, opt);
  std::ofstream os(out / "report.json");
  os << report.to_json().dump(2) << "\n";
  if (!os) throw std::runtime_error("cannot write report.json");
  std::cout << "flags=" << report.flags.to_string() << " mIoU=" << report.mean << " std=" << report.std << "\n";
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out, int episodes, int k_shot, int queries) {
  const SyntheticSpec spec = load_synthetic_spec(spec_path);
  if (episodes < 1) throw std::invalid_argument("--episodes must be >= 1");
  for (int e = 0; e < episodes; ++e) {
    SyntheticSpec s = spec;
    s.seed = episode_seed(spec.seed, 0, std::uint64_t(e));
    const Episode ep = generate_synthetic_episode(s, k_shot, queries);
    const fs::path dir = fs::path(out) / ("class_" + std::to_string(e));
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    int n = 0;
    for (const auto* set : {&ep.support, &ep.query})
      for (const auto& img : *set) {
        const std::string stem = "img_" + std::to_string(n++);
        write_image(dir / "images" / (stem + ".png"), img.image);
        write_mask(dir / "masks" / (stem + ".png"), img.mask);
      }
  }
  std::cout << "wrote " << episodes << " classes to " << out << "\n";
  return 0;
}

int cmd_overlay(const std::string& config_path, const std::string& id, const std::string& flags_csv,
                const std::string& out_arg) {
  Config cfg = load_config(config_path);
  if (!flags_csv.empty()) cfg.flags = AblationFlags::parse(flags_csv);
  const auto [seed, index] = parse_episode_id(id);
  std::unique_ptr<Dataset> data;
  EpisodeSource source = cfg.eval_spec;
  if (cfg.source == "dataset") {
    data = std::make_unique<Dataset>(load_dataset(cfg.eval_data));
    source = data.get();
  }
  const Episode ep = make_episode(source, seed, index, cfg.k_shot, cfg.queries);
  const Model model = obtain_model(cfg, cfg.flags.csd);
  const EpisodeResult r = evaluate_episode(model, ep, cfg.flags, cfg.tta);
  const fs::path out = (out_arg.empty() ? cfg.output_dir / "overlays" : fs::path(out_arg));
  fs::create_directories(out);
  for (std::size_t k = 0; k < ep.support.size(); ++k)
    render_overlay(ep.support[k], ep.support[k].mask, out / (id + "_support" + std::to_string(k) + ".png"),
                   OverlayColor::kBlue);
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    render_overlay(ep.query[q], r.prediction[q], out / (id + "_query" + std::to_string(q) + "_pred.png"));
    render_overlay(ep.query[q], ep.query[q].mask, out / (id + "_query" + std::to_string(q) + "_gt.png"));
    std::cout << id << " query " << q << " IoU " << r.query_iou[q] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"darnet: cross-domain few-shot segmentation"};
  app.require_subcommand(1);

  std::string config = "configs/default.ini";

  auto* train = app.add_subcommand("train", "train the feature extractor on the source domain");
  std::string csd_override, train_out, train_log;
  train->add_option("--config", config, "run configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--csd", csd_override, "override [csd] enabled")->check(CLI::IsMember({"on", "off"}));
  train->add_option("--out", train_out, "checkpoint path (default from config)");
  train->add_option("--log", train_log, "per-step loss log (JSON lines)");

  auto* eval = app.add_subcommand("eval", "benchmark on the target domain");
  EvalArgs ea;
  eval->add_option("--config", ea.config, "run configuration")->required()->check(CLI::ExistingFile);
  eval->add_option("--flags", ea.flags, "comma list of sm,csd,arsm,tta (or baseline)");
  eval->add_option("--runs", ea.runs, "number of runs");
  eval->add_option("--tasks", ea.tasks, "episodes per run");
  eval->add_option("--seeds", ea.seeds, "comma list of run seeds");
  eval->add_option("--workers", ea.workers, "parallel episode workers");
  eval->add_option("--out", ea.out, "output directory (default from config)");
  eval->add_flag("--resume", ea.resume, "reuse records already in episodes.jsonl");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset in the on-disk layout");
  std::string spec, synth_out = "synthetic";
  int episodes = 20, k_shot = 1, queries = 1;
  synth->add_option("--spec", spec, "synthetic spec file")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "dataset root");
  synth->add_option("--episodes", episodes, "number of classes (one generated episode each)");
  synth->add_option("--k-shot", k_shot, "support images per class");
  synth->add_option("--queries", queries, "query images per class");

  auto* ov = app.add_subcommand("overlay", "render support and prediction overlays for one episode");
  std::string episode, ov_flags, ov_out;
  ov->add_option("--episode", episode, "episode id, e.g. s0-e12")->required();
  ov->add_option("--config", config, "run configuration")->check(CLI::ExistingFile);
  ov->add_option("--flags", ov_flags, "comma list of sm,csd,arsm,tta (or baseline)");
  ov->add_option("--out", ov_out, "output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, csd_override, train_out, train_log);
    if (*eval) return cmd_eval(ea);
    if (*synth) return cmd_synth(spec, synth_out, episodes, k_shot, queries);
    if (*ov) return cmd_overlay(config, episode, ov_flags, ov_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

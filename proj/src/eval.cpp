#include <darnet/eval.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <thread>

namespace darnet {

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_grid(pred, gt, "iou");
  const long inter = ((pred != 0) && (gt != 0)).cast<long>().sum();
  const long uni = ((pred != 0) || (gt != 0)).cast<long>().sum();
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

nlohmann::json to_json(const RefineTrace& t) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : t.stages) {
    nlohmann::json j{{"stage", s.stage}, {"tau_fg", s.tau_fg}, {"tau_bg", s.tau_bg}};
    j["fb_q"] = std::isfinite(s.fb_q) ? nlohmann::json(s.fb_q) : nlohmann::json(nullptr);
    if (std::isfinite(s.iou)) j["iou"] = s.iou;
    stages.push_back(std::move(j));
  }
  return {{"stages", stages},           {"stop_reason", to_string(t.stop_reason)},
          {"selected_stage", t.selected_stage}, {"self_match_calls", t.self_match_calls},
          {"delta", t.delta},           {"sim_num", t.sim_num},
          {"union_num", t.union_num},   {"fb_q_zero", t.fb_q_zero}};
}

nlohmann::json to_json(const EpisodeResult& r) {
  nlohmann::json j{{"episode_id", r.episode_id}, {"run_seed", r.run_seed}, {"index", r.index},
                   {"query_iou", r.query_iou},   {"miou", r.miou},         {"degenerate", r.degenerate},
                   {"branch1_degenerate", r.branch1_degenerate},           {"seconds", r.seconds}};
  if (r.trace) j["trace"] = to_json(*r.trace);
  if (r.tta) {
    j["tta"] = {{"optimizer_steps", r.tta->optimizer_steps},
                {"rounds", r.tta->rounds},
                {"skipped", r.tta->skipped},
                {"first_loss", r.tta->first_loss},
                {"last_loss", r.tta->last_loss}};
    if (r.tta->skipped) j["tta"]["skip_reason"] = r.tta->skip_reason;
  }
  return j;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1));
}

nlohmann::json RunReport::to_json() const {
  return {{"flags", flags.to_string()}, {"fingerprint", fingerprint}, {"tasks", tasks},
          {"seeds", seeds},             {"run_miou", run_miou},       {"mean", mean},
          {"std", std},                 {"degenerate_episodes", degenerate_episodes},
          {"skipped_tta", skipped_tta}};
}

std::string episode_id(std::uint64_t run_seed, int index) {
  return "s" + std::to_string(run_seed) + "-e" + std::to_string(index);
}

std::pair<std::uint64_t, int> parse_episode_id(const std::string& id) {
  const auto dash = id.find("-e");
  if (id.size() < 4 || id[0] != 's' || dash == std::string::npos)
    throw std::invalid_argument("bad episode id '" + id + "' (expected s<seed>-e<index>)");
  try {
    std::size_t used = 0;
    const std::string seed_part = id.substr(1, dash - 1), index_part = id.substr(dash + 2);
    const std::uint64_t seed = std::stoull(seed_part, &used);
    if (used != seed_part.size()) throw std::invalid_argument(id);
    const int index = std::stoi(index_part, &used);
    if (used != index_part.size() || index < 0) throw std::invalid_argument(id);
    return {seed, index};
  } catch (const std::logic_error&) {
    throw std::invalid_argument("bad episode id '" + id + "' (expected s<seed>-e<index>)");
  }
}

Episode make_episode(const EpisodeSource& source, std::uint64_t run_seed, int index, int k_shot, int queries) {
  Episode ep;
  if (const auto* spec = std::get_if<SyntheticSpec>(&source)) {
    SyntheticSpec s = *spec;
    s.seed = episode_seed(spec->seed, run_seed, static_cast<std::uint64_t>(index));
    ep = generate_synthetic_episode(s, k_shot, queries);
  } else {
    Rng rng(episode_seed(0, run_seed, static_cast<std::uint64_t>(index)));
    ep = sample_episode(*std::get<const Dataset*>(source), k_shot, queries, rng);
  }
  ep.id = episode_id(run_seed, index);
  return ep;
}

EpisodeResult evaluate_episode(const Model& model, const Episode& episode, const AblationFlags& flags,
                               const TtaConfig& tta, PipelineCounters* counters, std::ostream* tta_log) {
  const auto start = std::chrono::steady_clock::now();
  EpisodeResult r;
  r.episode_id = episode.id;

  SupportSet support;
  for (const auto& s : episode.support) {
    support.features.push_back(model.extractor.forward(s.image));
    support.masks.push_back(feature_mask(s.mask, support.features.back()));
  }

  const Model* used = &model;
  Model adapted;
  if (flags.tta) {
    TtaConfig cfg = tta;
    std::uint64_t h = 14695981039346656037ULL;  // FNV-1a of the episode id
    for (char c : episode.id) h = (h ^ std::uint8_t(c)) * 1099511628211ULL;
    cfg.seed = episode_seed(tta.seed, h, 0);
    TtaResult res = run_tta_episode(model, TtaEpisode{episode.support, episode.id}, cfg, tta_log);
    if (counters) counters->tta_episodes += 1;
    r.tta = res.stats;
    adapted = with_state(model, res.adapted);
    used = &adapted;
  }

  for (const auto& q : episode.query) {
    const FeatureMap<double> f_q = model.extractor.forward(q.image);
    BinaryMask pred = BinaryMask::Zero(q.height(), q.width());
    try {
      Prediction p = predict(*used, support, f_q, flags, counters);
      pred = binarize(upsample(p.final, q.height(), q.width()));
      r.branch1_degenerate = r.branch1_degenerate || p.branch1_degenerate;
      if (!r.trace && p.trace) r.trace = std::move(p.trace);
    } catch (const DegenerateEpisode&) {
      r.degenerate = true;
    }
    r.query_iou.push_back(iou(pred, q.mask));
    r.prediction.push_back(std::move(pred));
  }
  r.miou = mean_of(r.query_iou);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace {

struct Stored {
  double miou;
  bool degenerate;
  bool tta_skipped;
};

std::map<std::pair<std::uint64_t, int>, Stored> read_records(const std::filesystem::path& p) {
  std::map<std::pair<std::uint64_t, int>, Stored> out;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      break;  // a torn final line from an interrupted run
    }
    const bool skipped = j.contains("tta") && j["tta"].value("skipped", false);
    out[{j.at("run_seed").get<std::uint64_t>(), j.at("index").get<int>()}] = {j.at("miou").get<double>(),
                                                                             j.value("degenerate", false), skipped};
  }
  return out;
}

}  // namespace

RunReport run_benchmark(const Model& model, const EpisodeSource& source, const BenchmarkOptions& opt) {
  if (opt.tasks < 1) throw std::invalid_argument("run_benchmark: tasks must be >= 1");
  if (opt.seeds.empty()) throw std::invalid_argument("run_benchmark: need at least one seed");
  RunReport report;
  report.seeds = opt.seeds;
  report.flags = opt.flags;
  report.tasks = opt.tasks;
  report.fingerprint = opt.fingerprint;

  std::map<std::pair<std::uint64_t, int>, Stored> done;
  std::ofstream jsonl;
  if (opt.episodes_jsonl) {
    if (opt.resume && std::filesystem::exists(*opt.episodes_jsonl)) done = read_records(*opt.episodes_jsonl);
    jsonl.open(*opt.episodes_jsonl, opt.resume ? std::ios::app : std::ios::trunc);
    if (!jsonl) throw std::runtime_error("cannot open '" + opt.episodes_jsonl->string() + "' for writing");
  }

  const int workers = std::max(1, opt.workers);
  for (std::uint64_t seed : opt.seeds) {
    std::vector<double> per_episode(opt.tasks);
    for (int chunk = 0; chunk < opt.tasks; chunk += workers) {
      const int end = std::min(opt.tasks, chunk + workers);
      std::vector<std::optional<EpisodeResult>> results(end - chunk);
      auto work = [&](int i) {
        if (done.count({seed, i})) return;
        const Episode ep = make_episode(source, seed, i, opt.k_shot, opt.queries);
        results[i - chunk] = evaluate_episode(model, ep, opt.flags, opt.tta, opt.counters, workers == 1 ? opt.tta_log : nullptr);
        results[i - chunk]->run_seed = seed;
        results[i - chunk]->index = i;
      };
      if (workers == 1) {
        work(chunk);
      } else {
        std::vector<std::thread> pool;
        for (int i = chunk; i < end; ++i) pool.emplace_back(work, i);
        for (auto& t : pool) t.join();
      }
      for (int i = chunk; i < end; ++i) {
        if (auto it = done.find({seed, i}); it != done.end()) {
          per_episode[i] = it->second.miou;
          report.degenerate_episodes += it->second.degenerate;
          report.skipped_tta += it->second.tta_skipped;
          continue;
        }
        const EpisodeResult& r = *results[i - chunk];
        per_episode[i] = r.miou;
        report.degenerate_episodes += r.degenerate;
        report.skipped_tta += r.tta && r.tta->skipped;
        if (jsonl.is_open()) jsonl << to_json(r).dump() << '\n' << std::flush;
      }
    }
    report.run_miou.push_back(mean_of(per_episode));
  }
  report.mean = mean_of(report.run_miou);
  report.std = sample_std(report.run_miou);
  return report;
}

Image overlay(const Image& img, const BinaryMask& mask, OverlayColor color) {
  require_grid(img, mask.rows(), mask.cols(), "overlay");
  Image out = img;
  const Eigen::Vector3f rgb = color == OverlayColor::kRed ? Eigen::Vector3f(1, 0, 0) : Eigen::Vector3f(0, 0, 1);
  const auto m = flat(mask);
  for (Eigen::Index p = 0; p < out.pixels(); ++p)
    if (m(p)) out.data.col(p) = 0.5f * img.data.col(p) + 0.5f * rgb;
  return out;
}

void render_overlay(const LabeledImage& img, const BinaryMask& pred, const std::filesystem::path& out,
                    OverlayColor color) {
  write_image(out, overlay(img.image, pred, color));
}

}  // namespace darnet

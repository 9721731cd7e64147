#pragma once

#include <chrono>
#include <deque>
#include <filesystem>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "canopy/config.hpp"
#include "canopy/dataset.hpp"
#include "canopy/gradcheck.hpp"
#include "canopy/metrics.hpp"
#include "canopy/synth.hpp"
#include "canopy/tiling.hpp"
#include "canopy/trainer.hpp"
#include "canopy/tuner.hpp"
#include "canopy/weights.hpp"

// Command-line front end: synth, train, tune, detect, evaluate, gradcheck.
// Settings come from built-in defaults, then --config, then CANOPY_SEED,
// then flags. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

namespace canopy::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline constexpr const char* kEffectiveConfig = "effective_config.txt";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Logger {
  std::ostream* err = &std::cerr;
  int level = 1;  // 0 quiet, 1 normal, 2 verbose
  void info(const std::string& s) const {
    if (level >= 1) *err << s << "\n";
  }
  void debug(const std::string& s) const {
    if (level >= 2) *err << s << "\n";
  }
};

// Options shared by every subcommand plus flags generated from the
// subcommand's config sections (key "train.lr" becomes "--lr").
class Command {
 public:
  Command(CLI::App* sub, std::vector<Section> sections) : sub_(sub), sections_(std::move(sections)) {
    sub_->add_option("--config", config_path_, "key=value config file");
    sub_->add_flag("--force", force_, "overwrite existing outputs");
    sub_->add_option("--jobs", jobs_, "worker threads")->check(CLI::PositiveNumber);
    sub_->add_flag("-v,--verbose", verbose_, "more logging");
    sub_->add_flag("-q,--quiet", quiet_, "less logging");
    for (const auto& s : sections_) {
      for (const auto& f : s.fields) {
        std::string flag = f.key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        flag_values_.emplace_back();
        auto* opt = sub_->add_option("--" + flag, flag_values_.back(),
                                     s.prefix + "." + f.key + " (default " + config_detail::to_text(f.ref) + ")");
        flags_.push_back({opt, f.ref, s.prefix + "." + f.key, &flag_values_.back()});
      }
    }
  }

  CLI::App* app() { return sub_; }
  bool force() const { return force_; }
  int jobs() const { return jobs_; }
  int log_level() const { return quiet_ ? 0 : verbose_ ? 2 : 1; }
  const std::vector<Section>& sections() const { return sections_; }

  // Layers the config file, the seed override and explicit flags.
  void resolve() {
    if (!config_path_.empty()) {
      if (!std::filesystem::exists(config_path_)) throw MissingPath("config file not found: " + config_path_);
      apply_config(KeyValueConfig::load(config_path_), sections_);
    }
    apply_seed_env(sections_);
    for (const auto& f : flags_)
      if (f.opt->count() > 0) config_detail::from_text(f.ref, *f.value, f.key);
  }

  std::string render() const { return render_config(sections_); }

 private:
  struct FlagBinding {
    CLI::Option* opt;
    FieldRef ref;
    std::string key;
    std::string* value;
  };
  CLI::App* sub_;
  std::vector<Section> sections_;
  std::deque<std::string> flag_values_;
  std::vector<FlagBinding> flags_;
  std::string config_path_;
  bool force_ = false;
  int jobs_ = 1;
  bool verbose_ = false;
  bool quiet_ = false;
};

namespace detail {

inline void require(const std::string& value, const std::string& name) {
  if (value.empty()) throw UsageError("missing required setting " + name);
}

inline void require_file(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingPath("file not found: " + path);
}

inline void require_dir(const std::string& path) {
  if (!std::filesystem::is_directory(path)) throw MissingPath("directory not found: " + path);
}

// Refuses to replace existing outputs unless forced.
inline void guard_outputs(const std::vector<std::filesystem::path>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths) {
    if (std::filesystem::exists(p)) {
      throw UsageError("output " + p.string() + " already exists (use --force to overwrite)");
    }
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io_detail::write_file(path, text);
}

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

// Scene names listed one per line; blank lines and '#' comments skipped.
inline std::set<std::string> read_name_list(const std::string& path) {
  std::set<std::string> names;
  std::istringstream is(io_detail::read_file(path));
  std::string line;
  while (std::getline(is, line)) {
    line = io_detail::trim(line);
    if (!line.empty() && line[0] != '#') names.insert(line);
  }
  return names;
}

inline std::string geojson_of(const PointSet& geo_points) {
  nlohmann::json features = nlohmann::json::array();
  for (std::size_t i = 0; i < geo_points.size(); ++i) {
    nlohmann::json props = nlohmann::json::object();
    if (geo_points.has_confidence()) props["confidence"] = geo_points.confidence[i];
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Point"}, {"coordinates", {geo_points.points[i].x, geo_points.points[i].y}}}},
                        {"properties", props}});
  }
  return nlohmann::json{{"type", "FeatureCollection"}, {"crs_id", geo_points.crs}, {"features", features}}.dump(2) +
         "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct SynthArgs {
  SceneSpec spec;
  std::size_t n_scenes = 8;
  std::string out;
};

inline std::vector<Section> sections_of(SynthArgs& a) {
  auto f = fields_of(a.spec);
  f.push_back({"n_scenes", &a.n_scenes});
  f.push_back({"out", &a.out});
  return {{"synth", f}};
}

inline int run_synth(SynthArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  detail::require(a.out, "synth.out (--out)");
  const std::filesystem::path dir = a.out;
  detail::guard_outputs({dir / kManifestName}, cmd.force());
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = generate_dataset(dir, a.n_scenes, a.spec, a.spec.seed, cmd.jobs());
  detail::write_text(dir / kEffectiveConfig, cmd.render());
  std::size_t trees = 0;
  for (const auto& s : m.scenes) trees += s.n_points;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log.info("synth: wrote " + std::to_string(m.scenes.size()) + " scenes (" + std::to_string(trees) + " trees) to " +
           dir.string() + " in " + detail::fixed(secs, 1) + " s");
  out << nlohmann::json{{"scenes", m.scenes.size()}, {"trees", trees}, {"manifest", (dir / kManifestName).string()}}
             .dump()
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  TrainConfig cfg;
  std::string data;
  std::string out;
};

inline std::vector<Section> sections_of(TrainArgs& a) {
  auto f = fields_of(a.cfg);
  f.push_back({"data", &a.data});
  f.push_back({"out", &a.out});
  return {{"train", f}};
}

inline constexpr const char* kBestWeights = "model.weights";
inline constexpr const char* kLastCheckpoint = "last.weights";
inline constexpr const char* kValScenes = "val_scenes.txt";

inline int run_train(TrainArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  detail::require(a.data, "train.data (--data)");
  detail::require(a.out, "train.out (--out)");
  a.cfg.validate();
  const std::filesystem::path dir = a.out;
  detail::guard_outputs({dir / kBestWeights}, cmd.force());
  const auto named = load_dataset(a.data);
  log.info("train: " + std::to_string(named.size()) + " scenes from " + a.data);
  std::filesystem::create_directories(dir);
  detail::write_text(dir / kEffectiveConfig, cmd.render());

  const auto samples = samples_of(named);
  const Split split = split_train_val(samples.size(), a.cfg.val_fraction, a.cfg.seed);
  std::string val_names;
  for (auto i : split.val) val_names += named[i].name + "\n";
  detail::write_text(dir / kValScenes, val_names);

  auto result = train(samples, a.cfg, [&](const EpochRecord& r, bool improved) {
    const std::string line = "epoch " + std::to_string(r.epoch) + "/" + std::to_string(a.cfg.epochs) +
                             " train " + detail::fixed(r.train_loss, 6) + " val " + detail::fixed(r.val_loss, 6) +
                             (improved ? " *" : "") + " (" + detail::fixed(r.seconds, 1) + " s)";
    if (r.epoch == 1 || r.epoch == a.cfg.epochs || r.epoch % 10 == 0) {
      log.info(line);
    } else {
      log.debug(line);
    }
  });
  save_model(dir / kBestWeights, result.model);
  save_checkpoint(dir / kLastCheckpoint, {result.last, result.optimizer});
  result.report.best_checkpoint = (dir / kBestWeights).string();
  detail::write_text(dir / "train_report.csv", train_report_csv(result.report));
  auto summary = train_report_json(result.report);
  detail::write_text(dir / "train_report.json", summary.dump(2) + "\n");
  log.info("train: best epoch " + std::to_string(result.report.best_epoch) + " val loss " +
           detail::fixed(result.report.best_val_loss, 6) + ", weights in " + result.report.best_checkpoint);
  out << nlohmann::json{{"best_epoch", result.report.best_epoch},
                        {"best_val_loss", result.report.best_val_loss},
                        {"best_checkpoint", result.report.best_checkpoint}}
             .dump()
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TuneArgs {
  TuneConfig cfg;
  DetectConfig tiling;
  std::string model, data, scenes, out;
};

inline std::vector<Field> tiling_fields(DetectConfig& c) { return fields_of(c); }

inline std::vector<Section> sections_of(TuneArgs& a) {
  auto f = fields_of(a.cfg);
  f.push_back({"model", &a.model});
  f.push_back({"data", &a.data});
  f.push_back({"scenes", &a.scenes});
  f.push_back({"out", &a.out});
  return {{"tune", f}, {"tiling", tiling_fields(a.tiling)}};
}

inline constexpr const char* kTuneResult = "tune_result.json";

inline int run_tune(TuneArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  detail::require(a.model, "tune.model (--model)");
  detail::require(a.data, "tune.data (--data)");
  detail::require(a.out, "tune.out (--out)");
  detail::require_file(a.model);
  a.cfg.jobs = cmd.jobs();
  a.cfg.validate();
  const std::filesystem::path dir = a.out;
  detail::guard_outputs({dir / kTuneResult}, cmd.force());
  const ModelParams mp = load_model(a.model);
  auto named = load_dataset(a.data);
  if (!a.scenes.empty()) {
    detail::require_file(a.scenes);
    const auto keep = detail::read_name_list(a.scenes);
    std::erase_if(named, [&](const NamedSample& s) { return !keep.count(s.name); });
  }
  if (named.empty()) throw UsageError("tune: no validation scenes selected");
  const NetworkRunner runner(mp);
  std::vector<TuneTile> tiles;
  for (const auto& s : named) {
    const auto grid = TileGrid::make(s.sample.tile.width, s.sample.tile.height, a.tiling.tile_size, a.tiling.overlap);
    tiles.push_back({tiled_confidence(s.sample.tile, runner, grid, cmd.jobs()), s.sample.points,
                     s.sample.tile.geo.pixel_size});
  }
  const auto res = tune(tiles, a.cfg);
  std::filesystem::create_directories(dir);
  detail::write_text(dir / kEffectiveConfig, cmd.render());
  detail::write_text(dir / kTuneResult, tune_result_to_json(res).dump(2) + "\n");
  log.info("tune: " + std::to_string(res.trials.size()) + " trials on " + std::to_string(tiles.size()) +
           " scenes; defaults F " + detail::fixed(res.trials[0].f_score) + ", best F " +
           detail::fixed(res.best_f_score) + " with " + peak_params_to_json(res.best).dump());
  out << nlohmann::json{{"best", peak_params_to_json(res.best)},
                        {"best_f_score", res.best_f_score},
                        {"default_f_score", res.trials[0].f_score}}
             .dump()
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DetectArgs {
  PeakParams peaks;
  DetectConfig tiling;
  std::string model, input, data, params, out;
  int geojson = 0;
};

inline std::vector<Section> sections_of(DetectArgs& a) {
  return {{"detect",
           {{"model", &a.model},
            {"input", &a.input},
            {"data", &a.data},
            {"params", &a.params},
            {"out", &a.out},
            {"geojson", &a.geojson}}},
          {"peaks", fields_of(a.peaks)},
          {"tiling", tiling_fields(a.tiling)}};
}

inline constexpr const char* kDetectSummary = "detect_summary.json";

inline int run_detect(DetectArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  detail::require(a.model, "detect.model (--model)");
  detail::require(a.out, "detect.out (--out)");
  if (a.input.empty() == a.data.empty()) throw UsageError("detect needs exactly one of --input or --data");
  detail::require_file(a.model);
  a.peaks.validate();
  a.tiling.jobs = cmd.jobs();
  const std::filesystem::path dir = a.out;
  detail::guard_outputs({dir / kDetectSummary}, cmd.force());
  const ModelParams mp = load_model(a.model);
  const NetworkRunner runner(mp);

  std::vector<std::pair<std::string, RasterTile>> rasters;
  if (!a.input.empty()) {
    detail::require_file(a.input);
    rasters.push_back({std::filesystem::path(a.input).stem().string(), load_raster(a.input)});
  } else {
    for (auto& s : load_dataset(a.data)) rasters.push_back({s.name, std::move(s.sample.tile)});
  }
  std::filesystem::create_directories(dir);
  detail::write_text(dir / kEffectiveConfig, cmd.render());
  nlohmann::json files = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& [name, raster] : rasters) {
    const PointSet pts = detect_tiled(raster, runner, a.peaks, a.tiling);
    save_points(dir / (name + ".csv"), pts);
    if (a.geojson) detail::write_text(dir / (name + ".geojson"), detail::geojson_of(pts));
    files.push_back({{"name", name}, {"points", (dir / (name + ".csv")).string()}, {"count", pts.size()}});
    total += pts.size();
    log.debug("detect: " + name + " -> " + std::to_string(pts.size()) + " trees");
  }
  const nlohmann::json summary{{"peaks", peak_params_to_json(a.peaks)}, {"total", total}, {"files", files}};
  detail::write_text(dir / kDetectSummary, summary.dump(2) + "\n");
  log.info("detect: " + std::to_string(total) + " trees in " + std::to_string(rasters.size()) + " raster(s)");
  out << nlohmann::json{{"rasters", rasters.size()}, {"total", total}}.dump() << "\n";
  return kExitOk;
}

// Peak parameters from a tune result, applied before the config file.
inline void preload_tune_params(DetectArgs& a, const std::string& params_path) {
  if (params_path.empty()) return;
  detail::require_file(params_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io_detail::read_file(params_path));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(params_path + ": " + e.what());
  }
  a.peaks = tune_result_from_json(j).best;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string pred, gt, raster, out;
  double max_dist_m = kDefaultMatchDistance;
  double pixel_size = 0.6;  // for pixel-frame files without a raster
};

inline std::vector<Section> sections_of(EvaluateArgs& a) {
  return {{"evaluate",
           {{"pred", &a.pred},
            {"gt", &a.gt},
            {"raster", &a.raster},
            {"out", &a.out},
            {"max_dist_m", &a.max_dist_m},
            {"pixel_size", &a.pixel_size}}}};
}

inline nlohmann::json metrics_json(const MetricsReport& r, std::size_t images, double max_dist_m, double pixel_size) {
  return {{"images", images},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"fn", r.counts.fn},
          {"precision", r.prf.precision},
          {"recall", r.prf.recall},
          {"f_score", r.prf.f_score},
          {"rmse_m", detail::number_or_null(r.rmse_m)},
          {"rmse_px", detail::number_or_null(r.rmse_m / pixel_size)},
          {"ap", r.ap},
          {"max_dist_m", max_dist_m},
          {"pixel_size", pixel_size}};
}

inline constexpr const char* kMetricsFile = "metrics.json";

inline int run_evaluate(EvaluateArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  detail::require(a.pred, "evaluate.pred (--pred)");
  detail::require(a.gt, "evaluate.gt (--gt)");
  if (!(a.max_dist_m >= 0.0)) throw InvalidArgument("max_dist_m must be >= 0");
  if (!(a.pixel_size > 0.0)) throw InvalidArgument("pixel_size must be > 0");
  if (!a.out.empty()) detail::guard_outputs({std::filesystem::path(a.out) / kMetricsFile}, cmd.force());
  std::vector<PointSet> preds, gts;
  double pixel_size = a.pixel_size;
  double scale = 0.0;  // meters per coordinate unit; 0 means pixel_size
  if (std::filesystem::is_directory(a.gt)) {
    // Dataset directory against a directory of <scene>.csv predictions.
    detail::require_dir(a.pred);
    for (const auto& s : load_dataset(a.gt)) {
      const auto path = std::filesystem::path(a.pred) / (s.name + ".csv");
      detail::require_file(path.string());
      preds.push_back(load_points(path, s.sample.tile));
      gts.push_back(s.sample.points);
      pixel_size = s.sample.tile.geo.pixel_size;
    }
  } else {
    detail::require_file(a.pred);
    detail::require_file(a.gt);
    PointSet p = load_points(a.pred), g = load_points(a.gt);
    if (p.frame != g.frame) {
      if (a.raster.empty()) throw UsageError("prediction and ground truth frames differ; pass --raster");
      detail::require_file(a.raster);
      const RasterTile ref = load_raster(a.raster);
      p = to_pixel(p, ref);
      g = to_pixel(g, ref);
      pixel_size = ref.geo.pixel_size;
    } else if (p.frame == PointFrame::Geographic && p.crs != g.crs) {
      throw CrsMismatch("prediction CRS '" + p.crs + "' differs from ground truth CRS '" + g.crs + "'");
    }
    // Geographic files are already in meters.
    if (p.frame == PointFrame::Geographic) scale = 1.0;
    preds.push_back(std::move(p));
    gts.push_back(std::move(g));
  }
  if (scale == 0.0) scale = pixel_size;
  const auto rep = evaluate_pooled(preds, gts, a.max_dist_m, scale);
  const auto j = metrics_json(rep, preds.size(), a.max_dist_m, pixel_size);
  out << j.dump(2) << "\n";
  log.info("evaluate: " + std::to_string(preds.size()) + " image(s)  TP " + std::to_string(rep.counts.tp) + "  FP " +
           std::to_string(rep.counts.fp) + "  FN " + std::to_string(rep.counts.fn));
  log.info("  precision " + detail::fixed(rep.prf.precision) + "  recall " + detail::fixed(rep.prf.recall) +
           "  F " + detail::fixed(rep.prf.f_score) + "  RMSE " + detail::fixed(rep.rmse_m, 3) + " m (" +
           detail::fixed(rep.rmse_m / pixel_size, 3) + " px)  AP " + detail::fixed(rep.ap));
  if (!a.out.empty()) {
    detail::write_text(std::filesystem::path(a.out) / kMetricsFile, j.dump(2) + "\n");
    detail::write_text(std::filesystem::path(a.out) / kEffectiveConfig, cmd.render());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::size_t seeds = 5;
  std::uint64_t seed = 1;
  std::string out;
};

inline std::vector<Section> sections_of(GradcheckArgs& a) {
  return {{"gradcheck", {{"seeds", &a.seeds}, {"seed", &a.seed}, {"out", &a.out}}}};
}

inline int run_gradcheck_cmd(GradcheckArgs& a, const Command& cmd, const Logger& log, std::ostream& out) {
  if (a.seeds == 0) throw InvalidArgument("gradcheck needs at least one seed");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + i);
  const auto rep = run_gradcheck(seeds);
  for (const auto& c : rep.cases) {
    const std::string line = std::string(c.passed ? "ok   " : "FAIL ") + c.name + " seed " + std::to_string(c.seed) +
                             " max rel err " + std::to_string(c.max_rel_error);
    if (c.passed) {
      log.debug(line);
    } else {
      log.info(line);
    }
  }
  const auto j = gradcheck_report_json(rep);
  if (!a.out.empty()) {
    const std::filesystem::path dir = a.out;
    detail::guard_outputs({dir / "gradcheck.json"}, cmd.force());
    detail::write_text(dir / "gradcheck.json", j.dump(2) + "\n");
    detail::write_text(dir / kEffectiveConfig, cmd.render());
  }
  log.info(std::string("gradcheck: ") + (rep.passed() ? "all " : "FAILED; ") + std::to_string(rep.cases.size()) +
           " checks in " + detail::fixed(rep.seconds, 1) + " s");
  out << nlohmann::json{{"passed", rep.passed()}, {"checks", rep.cases.size()}, {"seconds", rep.seconds}}.dump()
      << "\n";
  return rep.passed() ? kExitOk : kExitNumeric;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"canopy: tree detection in aerial imagery with HR-SFANet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  SynthArgs synth_args;
  TrainArgs train_args;
  TuneArgs tune_args;
  DetectArgs detect_args;
  EvaluateArgs eval_args;
  GradcheckArgs grad_args;
  bool desk = false;

  Command synth_cmd(app.add_subcommand("synth", "generate a synthetic dataset"), sections_of(synth_args));
  Command train_cmd(app.add_subcommand("train", "train HR-SFANet on a dataset"), sections_of(train_args));
  train_cmd.app()->add_flag("--desk", desk, "start from the single-CPU desk settings");
  Command tune_cmd(app.add_subcommand("tune", "tune peak-finding parameters"), sections_of(tune_args));
  Command detect_cmd(app.add_subcommand("detect", "detect trees in rasters"), sections_of(detect_args));
  Command eval_cmd(app.add_subcommand("evaluate", "score predictions against ground truth"), sections_of(eval_args));
  Command grad_cmd(app.add_subcommand("gradcheck", "finite-difference gradient checks"), sections_of(grad_args));

  std::vector<std::string> argv_store = args;
  argv_store.insert(argv_store.begin(), "canopy");
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  Command* cmd = nullptr;
  for (Command* c : {&synth_cmd, &train_cmd, &tune_cmd, &detect_cmd, &eval_cmd, &grad_cmd})
    if (c->app()->parsed()) cmd = c;

  try {
    if (cmd == &train_cmd && desk) train_args.cfg = desk_train_config();
    cmd->resolve();
    if (cmd == &detect_cmd && !detect_args.params.empty()) {
      // The tune result seeds the peak parameters; re-layer so the config
      // file and flags still win over it.
      preload_tune_params(detect_args, detect_args.params);
      cmd->resolve();
    }
    const Logger log{&err, cmd->log_level()};
    log.debug("effective config:\n" + cmd->render());
    if (cmd == &synth_cmd) return run_synth(synth_args, *cmd, log, out);
    if (cmd == &train_cmd) return run_train(train_args, *cmd, log, out);
    if (cmd == &tune_cmd) return run_tune(tune_args, *cmd, log, out);
    if (cmd == &detect_cmd) return run_detect(detect_args, *cmd, log, out);
    if (cmd == &eval_cmd) return run_evaluate(eval_args, *cmd, log, out);
    return run_gradcheck_cmd(grad_args, *cmd, log, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace canopy::cli

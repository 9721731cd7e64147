// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criterion 9 trains the desk model from scratch (about half an
// hour on one core); criterion 10 reuses that model.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "canopy/cli.hpp"
#include "canopy/gradcheck.hpp"
#include "oracles.hpp"
#include "surrogate.hpp"

using namespace canopy;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) { return cli::detail::fixed(v, digits); }

int g_jobs = 1;
fs::path g_work;

// --- 2 --------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_gradcheck({1, 2, 3, 4, 5});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double worst = 0.0;
  std::string failed;
  for (const auto& c : rep.cases) {
    worst = std::max(worst, c.max_rel_error);
    if (!c.passed) failed += " " + c.name + "/" + std::to_string(c.seed);
  }
  return {rep.passed() && secs < 120.0, std::to_string(rep.cases.size()) + " checks, max rel err " +
                                           fmt(worst, 8) + ", " + fmt(secs, 1) + " s" +
                                           (failed.empty() ? "" : ", failed:" + failed)};
}

// --- 3 --------------------------------------------------------------------

Verdict architecture() {
  constexpr std::size_t kFrozenParameterCount = 17059334;
  const auto mp = build_model(0);
  Rng rng(3);
  Tensor<float> x({1, 64, 64, 5});
  for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  const auto out = infer(mp, x);
  bool ok = out.confidence.shape() == Shape{1, 64, 64, 1} && out.attention.shape() == Shape{1, 64, 64, 1};
  float lo = 1.0f, hi = 0.0f;
  for (float a : out.attention.storage()) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  ok = ok && lo > 0.0f && hi < 1.0f && mp.params.scalar_count() == kFrozenParameterCount;
  return {ok, "64x64 maps, attention in [" + fmt(lo, 6) + ", " + fmt(hi, 6) + "], " +
                  std::to_string(mp.params.scalar_count()) + " parameters"};
}

// --- 4 --------------------------------------------------------------------

Verdict target_oracle() {
  Rng rng(4);
  int bad = 0;
  for (int t = 0; t < 50; ++t) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(0, 30));
    PointSet ps;
    ps.points = oracle::random_points(rng, n, 63.0);
    if (!(build_target(ps, 64, 64, 3.0) == oracle::target(ps.points, 64, 64, 3.0))) ++bad;
  }
  return {bad == 0, std::to_string(50 - bad) + "/50 instances exact"};
}

// --- 5 --------------------------------------------------------------------

Verdict peak_oracle() {
  Rng rng(5);
  int bad = 0, monotone_bad = 0;
  for (int t = 0; t < 100; ++t) {
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 64));
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 64));
    const int levels = t % 2 ? 6 : 100000;
    Grid g(w, h);
    for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, levels - 1)) / static_cast<float>(levels - 1);
    const double mx = *std::max_element(g.data.begin(), g.data.end());
    std::size_t prev_abs = SIZE_MAX, prev_rel = SIZE_MAX;
    for (int d : {1, 3, 5}) {
      PeakParams pa;
      pa.min_distance = d;
      pa.t_abs = rng.uniform(0.0, 1.0);
      PeakParams pr = pa;
      pr.mode = ThresholdMode::Relative;
      pr.t_rel = rng.uniform(0.05, 0.95);
      if (find_peaks(g, pa).points != oracle::peaks(g, d, pa.t_abs, false)) ++bad;
      if (find_peaks(g, pr).points != oracle::peaks(g, d, pr.t_rel * mx, true)) ++bad;
      // Monotone in d at a fixed threshold.
      pa.t_abs = pr.t_rel = 0.3;
      const auto na = find_peaks(g, pa).size(), nr = find_peaks(g, pr).size();
      if (na > prev_abs || nr > prev_rel) ++monotone_bad;
      prev_abs = na;
      prev_rel = nr;
    }
    for (auto mode : {ThresholdMode::Absolute, ThresholdMode::Relative}) {
      PeakParams p;
      p.mode = mode;
      std::size_t prev = SIZE_MAX;
      for (double th = 0.05; th < 0.95; th += 0.1) {
        p.t_abs = p.t_rel = th;
        const auto n = find_peaks(g, p).size();
        if (n > prev) ++monotone_bad;
        prev = n;
      }
    }
  }
  return {bad == 0 && monotone_bad == 0,
          std::to_string(600 - bad) + "/600 oracle comparisons exact, " + std::to_string(monotone_bad) +
              " monotonicity violations"};
}

// --- 6 --------------------------------------------------------------------

Verdict matching_oracle() {
  Rng rng(6);
  int bad = 0;
  for (int t = 0; t < 200; ++t) {
    const auto pred = oracle::random_points(rng, static_cast<std::size_t>(rng.uniform_int(0, 8)), 40.0);
    const auto gt = oracle::random_points(rng, static_cast<std::size_t>(rng.uniform_int(0, 8)), 40.0);
    const double scale = 0.6;  // pixel coordinates, gate in meters
    const auto m = match_points(pred, gt, 6.0, scale);
    const auto best = oracle::best_matching(pred, gt, 6.0, scale);
    if (m.tp() != best.cardinality || std::abs(m.total_distance() - best.total) > 1e-9) ++bad;
  }
  struct Row {
    Counts c;
    double p, r, f;
  };
  const Row table[] = {{{3, 1, 1}, 0.75, 0.75, 0.75}, {{2, 0, 2}, 1.0, 0.5, 2.0 / 3.0}, {{0, 0, 0}, 0, 0, 0},
                       {{0, 3, 0}, 0, 0, 0},          {{5, 0, 0}, 1, 1, 1}};
  int table_bad = 0;
  for (const auto& row : table) {
    const auto prf = compute_prf(row.c);
    if (prf.precision != row.p || prf.recall != row.r || std::abs(prf.f_score - row.f) > 1e-15) ++table_bad;
  }
  const double r1 = compute_rmse(match_points(std::vector<Point>{{0, 0}, {10, 0}}, std::vector<Point>{{2, 0}, {10, 2}}));
  const double r2 = compute_rmse(match_points(std::vector<Point>{{0, 0}, {20, 0}}, std::vector<Point>{{3, 0}, {20, 4}}));
  const bool rmse_ok = std::abs(r1 - 2.0) < 1e-9 && std::abs(r2 - std::sqrt(12.5)) < 1e-9;
  return {bad == 0 && table_bad == 0 && rmse_ok, std::to_string(200 - bad) + "/200 optimal, PRF table " +
                                                     (table_bad ? "mismatch" : "exact") + ", RMSE " +
                                                     (rmse_ok ? "exact" : "mismatch")};
}

// --- 7 --------------------------------------------------------------------

Verdict ap_oracle() {
  PointSet pred, gt;
  pred.points = {{0, 0}, {50, 50}, {20, 0}};
  pred.confidence = {0.9, 0.8, 0.7};
  gt.points = {{0, 0}, {20, 0}};
  const double example = compute_ap(pred, gt, 6.0);
  Rng rng(7);
  int bad = 0;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    PointSet p, g;
    p.points = oracle::random_points(rng, static_cast<std::size_t>(rng.uniform_int(1, 7)), 25.0);
    for (std::size_t i = 0; i < p.size(); ++i) p.confidence.push_back(static_cast<double>(rng.uniform_int(1, 5)) / 5.0);
    g.points = oracle::random_points(rng, static_cast<std::size_t>(rng.uniform_int(0, 7)), 25.0);
    const double diff = std::abs(compute_ap(p, g, 6.0) - oracle::average_precision(p.points, p.confidence, g.points, 6.0));
    worst = std::max(worst, diff);
    if (diff > 1e-9) ++bad;
  }
  const bool ok = std::abs(example - 5.0 / 6.0) < 1e-9 && bad == 0;
  return {ok, "example " + fmt(example, 10) + ", " + std::to_string(100 - bad) + "/100 agree (max diff " +
                  std::to_string(worst) + ")"};
}

// --- 8 --------------------------------------------------------------------

// Validation set per seed: synthetic scenes scored by a blurred-NDVI
// surrogate detector. Grass and shadows make the default absolute
// threshold a poor fit, which is what tuning should fix.
Verdict tuning_beats_defaults() {
  const surrogate::NdviBlur model(3, 2);
  int strictly = 0, never_worse = 0;
  std::string scores;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<TuneTile> tiles;
    for (std::uint64_t k = 0; k < 3; ++k) {
      SceneSpec s;
      s.width = s.height = 128;
      s.n_trees = 8;
      s.n_roofs = 2;
      s.n_grass = 2;
      s.seed = 1000 * (seed + 1) + k;
      const auto scene = generate_scene(s);
      const auto grid = TileGrid::make(128, 128, 128, 0);
      tiles.push_back({tiled_confidence(scene.tile, model, grid), scene.trees, s.pixel_size});
    }
    TuneConfig cfg;
    cfg.seed = seed;
    cfg.jobs = g_jobs;
    const auto r = tune(tiles, cfg);
    const double def = evaluate_peak_params(tiles, PeakParams{}, cfg.max_dist_m);
    if (r.best_f_score >= def) ++never_worse;
    if (r.best_f_score > def) ++strictly;
    scores += " " + fmt(def, 2) + "->" + fmt(r.best_f_score, 2);
  }
  return {never_worse == 10 && strictly >= 7,
          "tuned >= default in " + std::to_string(never_worse) + "/10, > in " + std::to_string(strictly) +
              "/10; F:" + scores};
}

// --- 9 --------------------------------------------------------------------

struct Step {
  int code;
  std::string out;
};

Step cli_step(std::vector<std::string> args) {
  args.insert(args.end(), {"--jobs", std::to_string(g_jobs), "--force"});
  std::ostringstream out;
  std::cerr << "  $ canopy";
  for (const auto& a : args) std::cerr << " " << a;
  std::cerr << "\n";
  const int code = cli::run(args, out, std::cerr);
  return {code, out.str()};
}

Verdict end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_data = g_work / "train_data", test_data = g_work / "test_data", run = g_work / "run",
             tuned = g_work / "tune", det = g_work / "det";
  const std::vector<std::vector<std::string>> steps = {
      {"synth", "--out", train_data.string(), "--n-scenes", "24", "--seed", "42"},
      {"synth", "--out", test_data.string(), "--n-scenes", "8", "--seed", "1042"},
      {"train", "--desk", "--data", train_data.string(), "--out", run.string()},
      {"tune", "--model", (run / "model.weights").string(), "--data", train_data.string(), "--scenes",
       (run / "val_scenes.txt").string(), "--out", tuned.string()},
      {"detect", "--model", (run / "model.weights").string(), "--data", test_data.string(), "--params",
       (tuned / "tune_result.json").string(), "--out", det.string()},
  };
  for (const auto& s : steps) {
    const auto r = cli_step(s);
    if (r.code != 0) return {false, s[0] + " exited with " + std::to_string(r.code)};
  }
  const auto ev = cli_step({"evaluate", "--pred", det.string(), "--gt", test_data.string(), "--out",
                            (g_work / "eval").string()});
  if (ev.code != 0) return {false, "evaluate exited with " + std::to_string(ev.code)};
  const auto j = nlohmann::json::parse(ev.out);
  const double f = j.at("f_score").get<double>();
  const double rmse_px = j.at("rmse_px").is_number() ? j.at("rmse_px").get<double>() : 1e9;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {f >= 0.85 && rmse_px <= 2.0, "F " + fmt(f) + " (need >= 0.85), RMSE " + fmt(rmse_px, 3) +
                                           " px (need <= 2.0), AP " + fmt(j.at("ap").get<double>()) + ", " +
                                           fmt(secs / 60.0, 1) + " min with " + std::to_string(g_jobs) + " thread(s)"};
}

// --- 10 -------------------------------------------------------------------

Verdict tiled_equivalence() {
  // Surrogate: exact.
  const surrogate::ConvStack stack(10, {5, 3, 5, 3, 3}, 6);
  Rng rng(10);
  RasterTile big;
  big.width = big.height = 512;
  for (BandRole role : {BandRole::R, BandRole::G, BandRole::B, BandRole::N}) {
    Grid g(512, 512);
    for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, 255));
    big.add_band(role, g);
  }
  const auto whole = tiled_confidence(big, stack, TileGrid::make(512, 512, 512, 0));
  const auto grid = TileGrid::make(512, 512, 160, 32);
  const bool exact = tiled_confidence(big, stack, grid, g_jobs) == whole;
  std::string detail = "surrogate " + std::string(exact ? "bit-exact" : "MISMATCH") + " over " +
                       std::to_string(grid.jobs.size()) + " tiles";

  // Trained network on 4-tile scenes.
  const auto weights = g_work / "run" / "model.weights";
  if (!fs::exists(weights)) return {false, detail + "; trained model missing (criterion 9 did not train)"};
  const ModelParams mp = load_model(weights);
  const NetworkRunner runner(mp);
  PeakParams p;
  const auto tune_file = g_work / "tune" / "tune_result.json";
  if (fs::exists(tune_file)) p = tune_result_from_json(nlohmann::json::parse(io_detail::read_file(tune_file))).best;
  std::size_t n_tiled = 0, n_whole = 0, dupes = 0;
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 2; ++k) {
    SceneSpec s;
    s.width = s.height = 512;
    s.n_trees = 70;
    s.n_roofs = 10;
    s.n_grass = 10;
    s.seed = 5000 + k;
    const auto scene = generate_scene(s);
    DetectConfig tiled, one;
    tiled.tile_size = 320;
    tiled.overlap = 32;
    tiled.jobs = one.jobs = g_jobs;
    one.tile_size = 512;
    if (TileGrid::make(512, 512, tiled.tile_size, tiled.overlap).jobs.size() != 4) return {false, "layout is not 4 tiles"};
    const auto a = to_pixel(detect_tiled(scene.tile, runner, p, tiled), scene.tile);
    const auto b = to_pixel(detect_tiled(scene.tile, runner, p, one), scene.tile);
    n_tiled += a.size();
    n_whole += b.size();
    worst = std::max(worst, std::abs(static_cast<double>(a.size()) - static_cast<double>(b.size())) /
                                std::max<double>(1.0, static_cast<double>(b.size())));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = i + 1; j < a.size(); ++j)
        if (std::max(std::abs(a.points[i].x - a.points[j].x), std::abs(a.points[i].y - a.points[j].y)) <=
            p.min_distance)
          ++dupes;
  }
  detail += "; network " + std::to_string(n_tiled) + " tiled vs " + std::to_string(n_whole) +
            " whole (worst diff " + fmt(100.0 * worst, 2) + "%), " + std::to_string(dupes) + " duplicates";
  return {exact && worst <= 0.01 && dupes == 0, detail};
}

// --- 11 -------------------------------------------------------------------

Verdict round_trips() {
  const auto dir = g_work / "roundtrip";
  fs::create_directories(dir);
  int bad = 0;
  std::string sums;
  auto check = [&](const std::string& what, const fs::path& path, const std::string& bytes,
                   const std::function<std::string(const std::string&)>& reencode) {
    io_detail::write_file(path, bytes);
    const std::string back = io_detail::read_file(path);
    const std::string again = reencode(back);
    if (fnv1a64(back) != fnv1a64(bytes) || again != bytes) ++bad;
    sums += " " + what + "=" + fnv1a_hex(bytes).substr(0, 8);
  };

  SceneSpec s;
  s.width = s.height = 96;
  s.n_trees = 6;
  s.seed = 11;
  const auto scene = generate_scene(s);
  check("raster", dir / "a.raster", encode_raster(scene.tile),
        [](const std::string& b) { return encode_raster(decode_raster(b)); });

  PointSet pts = to_geographic(scene.trees, scene.tile.geo, scene.tile.crs);
  for (std::size_t i = 0; i < pts.size(); ++i) pts.confidence.push_back(0.1 * static_cast<double>(i));
  check("points", dir / "a.csv", encode_points(pts), [&](const std::string& b) {
    const auto back = decode_points(b);
    if (!(back == pts)) ++bad;  // value-exact
    return encode_points(back);
  });

  auto mp = build_model(11, 16);
  mp.params.zero_grad();
  for (std::size_t i = 0; i < mp.params.size(); ++i)
    if (mp.params[i].requires_grad()) mp.params[i].node()->grad_buffer().fill(0.25f);
  AdamState<float> st;
  adam_step(mp.params, st);
  check("weights", dir / "a.weights", encode_checkpoint({mp, st}),
        [](const std::string& b) { return encode_checkpoint(decode_checkpoint(b)); });

  TuneResult tr;
  tr.best.min_distance = 4;
  tr.best.mode = ThresholdMode::Relative;
  tr.best.t_rel = 0.123456789012345;
  tr.best_f_score = 0.9;
  tr.trials = {{PeakParams{}, 0.7, {7, 2, 3}}, {tr.best, 0.9, {9, 1, 1}}};
  check("tune", dir / "tune_result.json", tune_result_to_json(tr).dump(2), [](const std::string& b) {
    return tune_result_to_json(tune_result_from_json(nlohmann::json::parse(b))).dump(2);
  });
  return {bad == 0, std::to_string(4 - std::min(bad, 4)) + "/4 formats round-trip, fnv1a64:" + sums};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = (fs::temp_directory_path() / "canopy_acceptance").string();
  g_jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--jobs", g_jobs, "worker threads");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::create_directories(g_work);

  std::cout << "[NOTE] 1  published-scale detection numbers: not reproducible here (no real annotated imagery or "
               "pretrained backbone); criteria 2-11 are property-based substitutes\n"
            << std::flush;

  const std::vector<std::pair<int, std::pair<std::string, std::function<Verdict()>>>> criteria = {
      {2, {"gradient checks", gradients}},
      {3, {"architecture contract", architecture}},
      {4, {"target map oracle", target_oracle}},
      {5, {"peak finding oracle", peak_oracle}},
      {6, {"matching oracle", matching_oracle}},
      {7, {"average precision oracle", ap_oracle}},
      {8, {"tuning beats defaults", tuning_beats_defaults}},
      {9, {"end-to-end learnability", end_to_end}},
      {10, {"tiled inference equivalence", tiled_equivalence}},
      {11, {"format round trips", round_trips}},
  };
  int failures = 0;
  for (const auto& [id, c] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!v.pass) ++failures;
    std::printf("[%s] %-2d %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, c.first.c_str(), v.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

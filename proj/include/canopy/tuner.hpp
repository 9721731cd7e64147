#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/metrics.hpp"
#include "canopy/peaks.hpp"
#include "canopy/rng.hpp"
#include "canopy/parallel.hpp"

namespace canopy {

struct TuneConfig {
  int iterations = 200;
  int d_min = 1, d_max = 10;
  double t_abs_min = 0.01, t_abs_max = 1.0;
  double t_rel_min = 0.05, t_rel_max = 0.95;
  double max_dist_m = kDefaultMatchDistance;
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const {
    if (iterations < 1) throw InvalidArgument("tune iterations must be >= 1");
    if (d_min < 1 || d_max < d_min) throw InvalidArgument("invalid min-distance search range");
    if (!(t_abs_min <= t_abs_max) || !(t_rel_min <= t_rel_max) || t_rel_min <= 0.0 || t_rel_max >= 1.0) {
      throw InvalidArgument("invalid threshold search range");
    }
  }
};

struct Trial {
  PeakParams params;
  double f_score = 0.0;
  Counts counts;
};

struct TuneResult {
  PeakParams best;
  double best_f_score = 0.0;
  std::vector<Trial> trials;
};

// One validation tile: predicted confidence map and pixel-frame truth.
struct TuneTile {
  Grid confidence;
  PointSet truth;
  double pixel_size = 0.6;
};

inline double evaluate_peak_params(const std::vector<TuneTile>& tiles, const PeakParams& p, double max_dist_m,
                                   Counts* counts_out = nullptr) {
  Counts c;
  for (const auto& t : tiles) {
    const auto peaks = find_peaks(t.confidence, p);
    c += counts_of(match_points(peaks, t.truth, max_dist_m, t.pixel_size));
  }
  if (counts_out) *counts_out = c;
  return compute_prf(c).f_score;
}

// Seeded random search. Trial 0 is always the untuned default setting,
// so the best score is never below it. Ties go to the earlier trial.
inline TuneResult tune(const std::vector<TuneTile>& tiles, const TuneConfig& cfg) {
  cfg.validate();
  if (tiles.empty()) throw InvalidArgument("tune: empty validation set");
  Rng rng(cfg.seed);
  std::vector<PeakParams> candidates;
  candidates.push_back(PeakParams{});
  for (int i = 1; i < cfg.iterations; ++i) {
    PeakParams p;
    p.min_distance = static_cast<int>(rng.uniform_int(cfg.d_min, cfg.d_max));
    p.mode = rng.uniform() < 0.5 ? ThresholdMode::Absolute : ThresholdMode::Relative;
    p.t_abs = rng.uniform(cfg.t_abs_min, cfg.t_abs_max);
    p.t_rel = rng.uniform(cfg.t_rel_min, cfg.t_rel_max);
    candidates.push_back(p);
  }
  TuneResult res;
  res.trials.resize(candidates.size());
  run_jobs(candidates.size(), cfg.jobs, [&](std::size_t i) {
    Trial t;
    t.params = candidates[i];
    t.f_score = evaluate_peak_params(tiles, t.params, cfg.max_dist_m, &t.counts);
    res.trials[i] = t;
  });
  res.best = res.trials[0].params;
  res.best_f_score = res.trials[0].f_score;
  for (const auto& t : res.trials) {
    if (t.f_score > res.best_f_score) {
      res.best_f_score = t.f_score;
      res.best = t.params;
    }
  }
  return res;
}

// JSON form shared by the tune, detect and evaluate commands.
inline nlohmann::json peak_params_to_json(const PeakParams& p) {
  return {{"min_distance", p.min_distance}, {"mode", to_string(p.mode)}, {"t_abs", p.t_abs}, {"t_rel", p.t_rel}};
}

inline PeakParams peak_params_from_json(const nlohmann::json& j) {
  PeakParams p;
  p.min_distance = j.at("min_distance").get<int>();
  p.mode = parse_threshold_mode(j.at("mode").get<std::string>());
  p.t_abs = j.at("t_abs").get<double>();
  p.t_rel = j.at("t_rel").get<double>();
  return p;
}

inline nlohmann::json tune_result_to_json(const TuneResult& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"params", peak_params_to_json(t.params)},
                      {"f_score", t.f_score},
                      {"tp", t.counts.tp},
                      {"fp", t.counts.fp},
                      {"fn", t.counts.fn}});
  }
  return {{"best", peak_params_to_json(r.best)}, {"best_f_score", r.best_f_score}, {"trials", trials}};
}

inline TuneResult tune_result_from_json(const nlohmann::json& j) {
  try {
    TuneResult r;
    r.best = peak_params_from_json(j.at("best"));
    r.best_f_score = j.at("best_f_score").get<double>();
    for (const auto& t : j.at("trials")) {
      Trial tr;
      tr.params = peak_params_from_json(t.at("params"));
      tr.f_score = t.at("f_score").get<double>();
      tr.counts = {t.at("tp").get<std::size_t>(), t.at("fp").get<std::size_t>(), t.at("fn").get<std::size_t>()};
      r.trials.push_back(tr);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(std::string("tune result: ") + e.what());
  }
}

}  // namespace canopy

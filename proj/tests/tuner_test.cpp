#include <gtest/gtest.h>

#include "canopy/datapipe.hpp"
#include "canopy/tuner.hpp"
#include "oracles.hpp"

using namespace canopy;

namespace {

// Tiles whose confidence is the ideal target, scaled by `gain`, plus
// uniform clutter of amplitude `clutter`.
std::vector<TuneTile> tiles(std::uint64_t seed, std::size_t n, double gain, double clutter) {
  Rng rng(seed);
  std::vector<TuneTile> out;
  for (std::size_t k = 0; k < n; ++k) {
    PointSet truth;
    while (truth.size() < 8) {
      const Point p{static_cast<double>(rng.uniform_int(4, 59)), static_cast<double>(rng.uniform_int(4, 59))};
      bool far = true;
      for (const auto& q : truth.points) far = far && std::hypot(p.x - q.x, p.y - q.y) >= 10.0;
      if (far) truth.points.push_back(p);
    }
    Grid g = build_target(truth, 64, 64, 3.0);
    for (auto& v : g.data) v = static_cast<float>(gain * v + clutter * rng.uniform());
    out.push_back({std::move(g), std::move(truth), 0.6});
  }
  return out;
}

TuneConfig quick(int iterations, std::uint64_t seed = 1) {
  TuneConfig c;
  c.iterations = iterations;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Tune, PerfectMapsScoreOne) {
  const auto set = tiles(1, 3, 1.0, 0.0);
  const auto r = tune(set, quick(20));
  EXPECT_EQ(r.best_f_score, 1.0);
  EXPECT_EQ(r.trials[0].f_score, 1.0);
  EXPECT_EQ(r.best, PeakParams{});  // ties keep the earliest trial
}

TEST(Tune, SingleIterationIsTheDefault) {
  const auto set = tiles(2, 2, 0.5, 0.1);
  const auto r = tune(set, quick(1));
  ASSERT_EQ(r.trials.size(), 1u);
  EXPECT_EQ(r.best, PeakParams{});
  EXPECT_EQ(r.best_f_score, evaluate_peak_params(set, PeakParams{}, kDefaultMatchDistance));
}

TEST(Tune, NeverWorseThanDefaultAndImprovesOnWeakMaps) {
  // Peaks of height 0.15 never clear the default absolute threshold.
  const auto set = tiles(3, 3, 0.15, 0.05);
  const auto r = tune(set, quick(60));
  EXPECT_EQ(r.trials[0].f_score, 0.0);
  EXPECT_GE(r.best_f_score, r.trials[0].f_score);
  EXPECT_GT(r.best_f_score, 0.9);
  for (const auto& t : r.trials) {
    EXPECT_LE(t.f_score, r.best_f_score);
    EXPECT_GE(t.params.min_distance, 1);
    EXPECT_LE(t.params.min_distance, 10);
    EXPECT_GE(t.params.t_abs, 0.01);
    EXPECT_LE(t.params.t_abs, 1.0);
    EXPECT_GE(t.params.t_rel, 0.05);
    EXPECT_LE(t.params.t_rel, 0.95);
  }
}

TEST(Tune, MoreIterationsExtendTheSameSequence) {
  const auto set = tiles(4, 2, 0.6, 0.3);
  double prev = -1.0;
  const auto full = tune(set, quick(40, 9));
  for (int n : {1, 5, 10, 20, 40}) {
    const auto r = tune(set, quick(n, 9));
    for (std::size_t i = 0; i < r.trials.size(); ++i) EXPECT_EQ(r.trials[i].params, full.trials[i].params);
    EXPECT_GE(r.best_f_score, prev);
    prev = r.best_f_score;
  }
}

TEST(Tune, ReproducibleAndIndependentOfJobs) {
  const auto set = tiles(5, 3, 0.7, 0.3);
  auto cfg = quick(30, 17);
  const auto a = tune(set, cfg);
  cfg.jobs = 4;
  const auto b = tune(set, cfg);
  EXPECT_EQ(tune_result_to_json(a), tune_result_to_json(b));
  cfg.seed = 18;
  EXPECT_NE(tune_result_to_json(tune(set, cfg)), tune_result_to_json(a));
}

TEST(Tune, JsonRoundTrip) {
  const auto r = tune(tiles(6, 2, 0.5, 0.2), quick(15));
  const auto text = tune_result_to_json(r).dump();
  const auto back = tune_result_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(back.best, r.best);
  EXPECT_EQ(back.best_f_score, r.best_f_score);
  ASSERT_EQ(back.trials.size(), r.trials.size());
  EXPECT_EQ(tune_result_to_json(back).dump(), text);
  EXPECT_THROW(tune_result_from_json(nlohmann::json::parse(R"({"best": {}})")), MalformedHeader);
}

TEST(Tune, RejectsBadInput) {
  EXPECT_THROW(tune({}, quick(5)), InvalidArgument);
  const auto set = tiles(7, 1, 1.0, 0.0);
  EXPECT_THROW(tune(set, quick(0)), InvalidArgument);
  auto c = quick(5);
  c.t_rel_max = 1.0;
  EXPECT_THROW(tune(set, c), InvalidArgument);
  c = quick(5);
  c.d_min = 0;
  EXPECT_THROW(tune(set, c), InvalidArgument);
}

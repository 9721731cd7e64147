#include <gtest/gtest.h>

#include <cmath>

#include "canopy/datapipe.hpp"
#include "canopy/metrics.hpp"
#include "canopy/peaks.hpp"
#include "canopy/tiling.hpp"
#include "oracles.hpp"
#include "surrogate.hpp"

using namespace canopy;

namespace {

// Random map with deliberate plateaus: values are quantized to a few levels.
Grid random_map(Rng& rng, std::size_t w, std::size_t h, int levels) {
  Grid g(w, h);
  for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, levels - 1)) / static_cast<float>(levels - 1);
  return g;
}

std::vector<Point> points_of(const PointSet& s) { return s.points; }

PeakParams params(int d, ThresholdMode mode, double t) {
  PeakParams p;
  p.min_distance = d;
  p.mode = mode;
  if (mode == ThresholdMode::Absolute) {
    p.t_abs = t;
  } else {
    p.t_rel = t;
  }
  return p;
}

// Flat pavement raster with vegetated discs at the given centers.
RasterTile disc_raster(std::size_t w, std::size_t h, const std::vector<Point>& centers, double radius) {
  RasterTile t;
  t.width = w;
  t.height = h;
  t.geo = {0.0, 0.0, 0.6};
  Grid r(w, h, 120), g(w, h, 115), b(w, h, 110), n(w, h, 120);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (const auto& c : centers)
        if (std::hypot(static_cast<double>(x) - c.x, static_cast<double>(y) - c.y) <= radius) {
          r(x, y) = 50;
          g(x, y) = 90;
          b(x, y) = 45;
          n(x, y) = 160;
        }
  t.add_band(BandRole::R, r);
  t.add_band(BandRole::G, g);
  t.add_band(BandRole::B, b);
  t.add_band(BandRole::N, n);
  return t;
}

}  // namespace

TEST(FindPeaks, SingleBumpAndFlatMap) {
  PointSet one;
  one.points = {{10, 10}};
  const Grid bump = build_target(one, 32, 32, 3.0);
  for (const auto& p : {params(3, ThresholdMode::Absolute, 0.2), params(1, ThresholdMode::Relative, 0.9),
                        params(7, ThresholdMode::Absolute, 0.99)}) {
    const auto peaks = find_peaks(bump, p);
    ASSERT_EQ(peaks.size(), 1u);
    EXPECT_EQ(peaks.points[0], (Point{10, 10}));
    EXPECT_EQ(peaks.confidence[0], 1.0);
  }
  EXPECT_EQ(find_peaks(Grid(16, 16), params(3, ThresholdMode::Absolute, 0.0)).size(), 1u);  // plateau at 0 >= 0
  EXPECT_EQ(find_peaks(Grid(16, 16), params(3, ThresholdMode::Absolute, 0.2)).size(), 0u);
  EXPECT_EQ(find_peaks(Grid(16, 16), params(3, ThresholdMode::Relative, 0.5)).size(), 0u);
}

TEST(FindPeaks, TwoPeaksFourPixelsApart) {
  Grid g(20, 10);
  g(5, 5) = 1.0f;
  g(9, 5) = 1.0f;
  EXPECT_EQ(find_peaks(g, params(3, ThresholdMode::Absolute, 0.2)).size(), 2u);
  const auto one = find_peaks(g, params(5, ThresholdMode::Absolute, 0.2));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.points[0], (Point{5, 5}));
}

TEST(FindPeaks, MatchesBruteForceOracle) {
  Rng rng(42);
  for (int t = 0; t < 100; ++t) {
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 64));
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 64));
    const Grid g = random_map(rng, w, h, t % 2 ? 5 : 1000);
    for (int d : {1, 3, 5}) {
      const double ta = rng.uniform(0.0, 1.0), tr = rng.uniform(0.05, 0.95);
      const auto abs = find_peaks(g, params(d, ThresholdMode::Absolute, ta));
      EXPECT_EQ(points_of(abs), oracle::peaks(g, d, ta, false));
      const double mx = *std::max_element(g.data.begin(), g.data.end());
      const auto rel = find_peaks(g, params(d, ThresholdMode::Relative, tr));
      EXPECT_EQ(points_of(rel), oracle::peaks(g, d, tr * mx, true));
      for (std::size_t i = 0; i < abs.size(); ++i) {
        const auto& p = abs.points[i];
        EXPECT_EQ(abs.confidence[i], g(static_cast<std::size_t>(p.x), static_cast<std::size_t>(p.y)));
      }
    }
  }
}

TEST(FindPeaks, SeparationAndMonotonicity) {
  Rng rng(43);
  for (int t = 0; t < 50; ++t) {
    const Grid g = random_map(rng, 48, 40, t % 2 ? 4 : 500);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (int d = 1; d <= 6; ++d) {
      const auto p = find_peaks(g, params(d, ThresholdMode::Absolute, 0.3));
      EXPECT_LE(p.size(), prev);
      prev = p.size();
      for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j)
          EXPECT_GT(std::max(std::abs(p.points[i].x - p.points[j].x), std::abs(p.points[i].y - p.points[j].y)), d);
    }
    for (auto mode : {ThresholdMode::Absolute, ThresholdMode::Relative}) {
      prev = std::numeric_limits<std::size_t>::max();
      for (double th = 0.05; th < 0.95; th += 0.1) {
        const auto n = find_peaks(g, params(3, mode, th)).size();
        EXPECT_LE(n, prev);
        prev = n;
      }
    }
  }
}

TEST(TileGrid, KeepWindowsPartitionRaster) {
  for (auto [w, h, tile, overlap] : {std::tuple{512, 512, 128, 32}, {1000, 700, 256, 32}, {100, 50, 256, 32},
                                     {300, 301, 100, 10}, {2112, 64, 2112, 32}, {4300, 90, 2112, 32}}) {
    const auto grid = TileGrid::make(static_cast<std::size_t>(w), static_cast<std::size_t>(h),
                                     static_cast<std::size_t>(tile), static_cast<std::size_t>(overlap));
    std::vector<int> hits(static_cast<std::size_t>(w * h), 0);
    for (const auto& job : grid.jobs) {
      EXPECT_LE(job.read.width(), static_cast<std::size_t>(tile));
      EXPECT_LE(job.read.x0, job.keep.x0);
      EXPECT_GE(job.read.x1, job.keep.x1);
      if (job.keep.x0 > 0) {
        EXPECT_GE(job.keep.x0 - job.read.x0, static_cast<std::size_t>(overlap));
      }
      if (job.keep.y0 > 0) {
        EXPECT_GE(job.keep.y0 - job.read.y0, static_cast<std::size_t>(overlap));
      }
      if (job.keep.x1 < static_cast<std::size_t>(w)) {
        EXPECT_GE(job.read.x1 - job.keep.x1, static_cast<std::size_t>(overlap));
      }
      if (job.keep.y1 < static_cast<std::size_t>(h)) {
        EXPECT_GE(job.read.y1 - job.keep.y1, static_cast<std::size_t>(overlap));
      }
      for (std::size_t y = job.keep.y0; y < job.keep.y1; ++y)
        for (std::size_t x = job.keep.x0; x < job.keep.x1; ++x) ++hits[y * static_cast<std::size_t>(w) + x];
    }
    for (int c : hits) ASSERT_EQ(c, 1);
  }
  EXPECT_THROW(TileGrid::make(100, 100, 64, 32), InvalidArgument);
}

TEST(TiledConfidence, SurrogateIsBitExactAndOrderInvariant) {
  const surrogate::ConvStack model(3, {5, 3, 3, 5}, 4);
  ASSERT_LE(model.radius(), 32u);
  Rng rng(5);
  RasterTile raster;
  raster.width = raster.height = 300;
  for (BandRole r : {BandRole::R, BandRole::G, BandRole::B, BandRole::N}) {
    Grid g(300, 300);
    for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, 255));
    raster.add_band(r, g);
  }
  const auto whole = tiled_confidence(raster, model, TileGrid::make(300, 300, 300, 0));
  const auto grid = TileGrid::make(300, 300, 96, 32);
  ASSERT_GT(grid.jobs.size(), 4u);
  EXPECT_EQ(tiled_confidence(raster, model, grid, 1), whole);
  EXPECT_EQ(tiled_confidence(raster, model, grid, 3), whole);
}

TEST(TiledPeaks, EqualsWholeMapPeaks) {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const Grid g = random_map(rng, 300, 260, t % 2 ? 6 : 10000);
    for (const auto& p : {params(3, ThresholdMode::Absolute, 0.5), params(5, ThresholdMode::Relative, 0.7)}) {
      const auto whole = find_peaks(g, p);
      const auto tiled = tiled_peaks(g, p, 64, 16, t % 3 + 1);
      // Whole-map output is row-major, which is (y, x) order.
      EXPECT_EQ(tiled, whole);
    }
  }
  EXPECT_THROW(tiled_peaks(Grid(300, 300), params(20, ThresholdMode::Absolute, 0.2), 64, 16), InvalidArgument);
}

TEST(DetectTiled, SingleTileEqualsDirectForward) {
  const auto mp = build_model(2, 16);
  const NetworkRunner runner(mp);
  Rng rng(7);
  RasterTile raster;
  raster.width = 64;
  raster.height = 48;
  raster.geo = {100.0, 200.0, 0.6};
  for (BandRole r : {BandRole::R, BandRole::G, BandRole::B, BandRole::N}) {
    Grid g(64, 48);
    for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, 255));
    raster.add_band(r, g);
  }
  const PeakParams p = params(2, ThresholdMode::Relative, 0.6);
  const auto x = normalize(raster, mp.meta);
  const auto conf = infer(mp, x.reshaped({1, 48, 64, 5})).confidence;
  Grid g(64, 48);
  g.data.assign(conf.storage().begin(), conf.storage().end());
  const auto direct = to_geographic(find_peaks(g, p), raster.geo, raster.crs);
  DetectConfig cfg;
  EXPECT_EQ(detect_tiled(raster, runner, p, cfg), direct);
}

TEST(DetectTiled, SmallRasterIsReflectPadded) {
  const auto mp = build_model(2, 16);
  const NetworkRunner runner(mp);
  Rng rng(8);
  RasterTile raster;
  raster.width = 37;
  raster.height = 21;
  for (BandRole r : {BandRole::R, BandRole::G, BandRole::B, BandRole::N}) {
    Grid g(37, 21);
    for (auto& v : g.data) v = static_cast<float>(rng.uniform_int(0, 255));
    raster.add_band(r, g);
  }
  const auto conf = tiled_confidence(raster, runner, TileGrid::make(37, 21, 2112, 32));
  EXPECT_EQ(conf.width, 37u);
  EXPECT_EQ(conf.height, 21u);
  // Manual reflect padding to 48 x 32.
  const auto x = normalize(raster, mp.meta);
  Tensor<float> padded({1, 32, 48, 5});
  auto reflect = [](long i, long n) { return i < n ? i : 2 * (n - 1) - i; };
  for (long y = 0; y < 32; ++y)
    for (long xx = 0; xx < 48; ++xx)
      for (std::size_t c = 0; c < 5; ++c)
        padded.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(xx), c) =
            x[(static_cast<std::size_t>(reflect(y, 21)) * 37 + static_cast<std::size_t>(reflect(xx, 37))) * 5 + c];
  const auto full = infer(mp, padded).confidence;
  for (std::size_t y = 0; y < 21; ++y)
    for (std::size_t xx = 0; xx < 37; ++xx) EXPECT_EQ(conf(xx, y), full.at(0, y, xx, 0));
}

TEST(DetectTiled, TreesOnSeamsAreFoundOnce) {
  // 2 x 2 tiles of 160 px with a 32 px overlap on a 224 px raster; the keep
  // seams sit at 128.
  const auto grid = TileGrid::make(224, 224, 160, 32);
  ASSERT_EQ(grid.jobs.size(), 4u);
  const std::size_t seam = grid.jobs[0].keep.x1;
  const double s = static_cast<double>(seam);
  const std::vector<Point> trees = {{s, 40},      {s - 0.5, 200}, {60, s},        {200, s + 0.5},
                                    {s, s},       {40, 40},       {210, 60},      {s - 12, s + 13}};
  const auto raster = disc_raster(224, 224, trees, 5.0);
  const surrogate::NdviBlur model(4, 2);
  ASSERT_LE(model.receptive_radius(), 32u);
  DetectConfig cfg;
  cfg.tile_size = 160;
  cfg.overlap = 32;
  cfg.peak_tile_size = 96;
  cfg.peak_overlap = 16;
  const PeakParams p = params(3, ThresholdMode::Relative, 0.5);
  const auto found = detect_tiled(raster, model, p, cfg);
  const auto px = to_pixel(found, raster);
  for (std::size_t i = 0; i < px.size(); ++i)
    for (std::size_t j = i + 1; j < px.size(); ++j)
      EXPECT_GT(std::max(std::abs(px.points[i].x - px.points[j].x), std::abs(px.points[i].y - px.points[j].y)), 3.0);
  PointSet truth;
  truth.points = trees;
  const auto m = match_points(px, truth, 2.0, 1.0);
  EXPECT_EQ(m.tp(), trees.size());
  EXPECT_EQ(m.fp(), 0u);
  // Same detections as the untiled pipeline.
  DetectConfig whole;
  EXPECT_EQ(detect_tiled(raster, model, p, whole), found);
}

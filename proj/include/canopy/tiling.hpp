#pragma once

#include <algorithm>
#include <concepts>
#include <cstdlib>
#include <vector>

#include "canopy/datapipe.hpp"
#include "canopy/model.hpp"
#include "canopy/parallel.hpp"
#include "canopy/peaks.hpp"

namespace canopy {

// Half-open pixel rectangle.
struct Window {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t width() const { return x1 - x0; }
  std::size_t height() const { return y1 - y0; }
  friend bool operator==(const Window&, const Window&) = default;
};

struct TileJob {
  Window read;  // region fed to the processor
  Window keep;  // region whose results are retained
};

namespace detail {

struct Span {
  std::size_t read0, read1, keep0, keep1;
};

// 1-D layout. Keep spans partition [0, extent). Interior keep spans are
// inset by `overlap` from their read span; the inset is dropped at the
// raster edges. Read spans are exactly `tile` long when extent >= tile.
inline std::vector<Span> layout_axis(std::size_t extent, std::size_t tile, std::size_t overlap) {
  std::vector<Span> spans;
  if (extent == 0) return spans;
  if (extent <= tile) {
    spans.push_back({0, extent, 0, extent});
    return spans;
  }
  const std::size_t stride = tile - 2 * overlap;
  std::size_t keep0 = 0;
  std::size_t keep1 = tile - overlap;
  while (true) {
    keep1 = std::min(keep1, extent);
    std::size_t read0 = keep0 < overlap ? 0 : keep0 - overlap;
    std::size_t read1 = read0 + tile;
    if (read1 > extent) {
      read1 = extent;
      read0 = extent - tile;
    }
    // The last tile absorbs the remainder when its keep span reaches the end
    // of its read span.
    if (keep1 + overlap > read1 && read1 == extent) keep1 = extent;
    spans.push_back({read0, read1, keep0, keep1});
    if (keep1 == extent) break;
    keep0 = keep1;
    keep1 = keep0 + stride;
  }
  return spans;
}

}  // namespace detail

// Overlapping tile layout over a width x height raster.
struct TileGrid {
  std::size_t tile_size = 2112;
  std::size_t overlap = 32;
  std::vector<TileJob> jobs;

  static TileGrid make(std::size_t width, std::size_t height, std::size_t tile_size, std::size_t overlap) {
    if (tile_size == 0 || 2 * overlap >= tile_size) {
      throw InvalidArgument("tile size must exceed twice the overlap");
    }
    TileGrid g{tile_size, overlap, {}};
    const auto xs = detail::layout_axis(width, tile_size, overlap);
    const auto ys = detail::layout_axis(height, tile_size, overlap);
    for (const auto& sy : ys)
      for (const auto& sx : xs) {
        g.jobs.push_back({{sx.read0, sy.read0, sx.read1, sy.read1}, {sx.keep0, sy.keep0, sx.keep1, sy.keep1}});
      }
    return g;
  }
};

// Anything that maps a normalized [1,H,W,C] batch to a [1,H,W,1] confidence
// map, with H and W multiples of `size_multiple()`.
template <class M>
concept ConfidenceModel = requires(const M& m, const Tensor<float>& x) {
  { m.confidence(x) } -> std::convertible_to<Tensor<float>>;
  { m.size_multiple() } -> std::convertible_to<std::size_t>;
  { m.meta() } -> std::convertible_to<ModelMeta>;
};

// HR-SFANet in inference mode.
class NetworkRunner {
 public:
  explicit NetworkRunner(const ModelParams& params) : params_(params) {}
  Tensor<float> confidence(const Tensor<float>& x) const { return infer(params_, x).confidence; }
  std::size_t size_multiple() const { return 16; }
  const ModelMeta& meta() const { return params_.meta; }

 private:
  const ModelParams& params_;
};

namespace detail {

// numpy-style "reflect" index (edge sample not repeated).
inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

// Normalized input for a read window, reflect-padded at the bottom/right
// up to a multiple of `multiple`.
inline Tensor<float> window_input(const Tensor<float>& full, const Window& w, std::size_t multiple) {
  const std::size_t width = full.dim(1), c = full.dim(2);
  const std::size_t ph = (w.height() + multiple - 1) / multiple * multiple;
  const std::size_t pw = (w.width() + multiple - 1) / multiple * multiple;
  Tensor<float> out({1, ph, pw, c});
  for (std::size_t y = 0; y < ph; ++y) {
    const std::size_t sy = w.y0 + reflect_index(static_cast<long>(y), static_cast<long>(w.height()));
    for (std::size_t x = 0; x < pw; ++x) {
      const std::size_t sx = w.x0 + reflect_index(static_cast<long>(x), static_cast<long>(w.width()));
      std::copy_n(full.ptr() + (sy * width + sx) * c, c, &out.at(0, y, x, 0));
    }
  }
  return out;
}

}  // namespace detail

// Confidence for a whole raster, computed tile by tile. Each tile writes
// only its keep-window, so tiles may run in any order or in parallel.
template <ConfidenceModel M>
Grid tiled_confidence(const RasterTile& raster, const M& model, const TileGrid& grid, int jobs = 1) {
  const Tensor<float> input = normalize(raster, model.meta());
  Grid out(raster.width, raster.height, 0.0f);
  run_jobs(grid.jobs.size(), jobs, [&](std::size_t i) {
    const auto& job = grid.jobs[i];
    const Tensor<float> x = detail::window_input(input, job.read, model.size_multiple());
    const Tensor<float> conf = model.confidence(x);
    const std::size_t cw = conf.dim(2);
    for (std::size_t y = job.keep.y0; y < job.keep.y1; ++y)
      for (std::size_t x = job.keep.x0; x < job.keep.x1; ++x) {
        out(x, y) = conf[(y - job.read.y0) * cw + (x - job.read.x0)];
      }
  });
  return out;
}

inline Grid crop(const Grid& g, const Window& w) {
  Grid out(w.width(), w.height());
  for (std::size_t y = 0; y < w.height(); ++y)
    for (std::size_t x = 0; x < w.width(); ++x) out(x, y) = g(w.x0 + x, w.y0 + y);
  return out;
}

// Peak finding on an overlapping grid. Relative thresholds use the maximum
// of the whole map. Equals find_peaks on the whole map when
// min_distance <= overlap. Output sorted by (y, x).
inline PointSet tiled_peaks(const Grid& map, const PeakParams& p, std::size_t tile_size, std::size_t overlap,
                            int jobs = 1) {
  p.validate();
  if (static_cast<std::size_t>(p.min_distance) > overlap && tile_size < std::max(map.width, map.height)) {
    throw InvalidArgument("peak min_distance must not exceed the peak tile overlap");
  }
  const auto thr = resolve_threshold(p, map.data.empty() ? 0.0 : grid_max(map));
  const auto grid = TileGrid::make(map.width, map.height, tile_size, overlap);
  std::vector<PointSet> parts(grid.jobs.size());
  run_jobs(grid.jobs.size(), jobs, [&](std::size_t i) {
    const auto& job = grid.jobs[i];
    const Grid sub = crop(map, job.read);
    auto local = find_peaks_in(sub, p.min_distance, thr, static_cast<long>(job.keep.x0 - job.read.x0),
                               static_cast<long>(job.keep.y0 - job.read.y0),
                               static_cast<long>(job.keep.x1 - job.read.x0),
                               static_cast<long>(job.keep.y1 - job.read.y0));
    for (auto& pt : local.points) {
      pt.x += static_cast<double>(job.read.x0);
      pt.y += static_cast<double>(job.read.y0);
    }
    parts[i] = std::move(local);
  });
  struct Hit {
    Point p;
    double c;
  };
  std::vector<Hit> hits;
  for (const auto& part : parts)
    for (std::size_t k = 0; k < part.size(); ++k) hits.push_back({part.points[k], part.confidence[k]});
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.p.y != b.p.y ? a.p.y < b.p.y : a.p.x < b.p.x;
  });
  PointSet out;
  for (const auto& h : hits) {
    out.points.push_back(h.p);
    out.confidence.push_back(h.c);
  }
  return out;
}

struct DetectConfig {
  std::size_t tile_size = 2112;
  std::size_t overlap = 32;
  std::size_t peak_tile_size = 256;
  std::size_t peak_overlap = 32;
  int jobs = 1;
};

// Full large-raster detection: tiled confidence, tiled peak finding, then
// conversion to geographic coordinates.
template <ConfidenceModel M>
PointSet detect_tiled(const RasterTile& raster, const M& model, const PeakParams& p, const DetectConfig& cfg) {
  const auto grid = TileGrid::make(raster.width, raster.height, cfg.tile_size, cfg.overlap);
  const Grid conf = tiled_confidence(raster, model, grid, cfg.jobs);
  const PointSet pix = tiled_peaks(conf, p, cfg.peak_tile_size, cfg.peak_overlap, cfg.jobs);
  return to_geographic(pix, raster.geo, raster.crs);
}

}  // namespace canopy

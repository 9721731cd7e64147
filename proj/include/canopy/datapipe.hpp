#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "canopy/model.hpp"
#include "canopy/raster.hpp"
#include "canopy/rng.hpp"

namespace canopy {

// NDVI = (N - R) / (N + R), defined as 0 where N + R = 0.
inline Grid compute_ndvi(const Grid& red, const Grid& nir) {
  if (red.width != nir.width || red.height != nir.height) {
    throw InvalidArgument("compute_ndvi: band shapes differ");
  }
  Grid v(red.width, red.height);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const double r = red.data[i], n = nir.data[i];
    const double den = n + r;
    v.data[i] = den == 0.0 ? 0.0f : static_cast<float>((n - r) / den);
  }
  return v;
}

// Network input [H,W,5] in band order R,G,B,N,V. RGB are centered by the
// stored channel means, N has the offset removed and V is scaled up to a
// comparable range. V is derived when the raster lacks it.
inline Tensor<float> normalize(const RasterTile& tile, const ModelMeta& meta = {}) {
  for (BandRole r : {BandRole::R, BandRole::G, BandRole::B, BandRole::N}) {
    if (!tile.find(r)) {
      throw InvalidArgument(std::string("normalize: raster lacks required band ") + band_role_char(r));
    }
  }
  const Grid& red = tile.band(BandRole::R);
  const Grid& grn = tile.band(BandRole::G);
  const Grid& blu = tile.band(BandRole::B);
  const Grid& nir = tile.band(BandRole::N);
  Grid derived;
  const Grid* ndvi;
  if (const Band* v = tile.find(BandRole::V)) {
    ndvi = &v->grid;
  } else {
    derived = compute_ndvi(red, nir);
    ndvi = &derived;
  }
  const std::size_t n = tile.width * tile.height;
  Tensor<float> out({tile.height, tile.width, 5});
  float* o = out.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    o[5 * i + 0] = static_cast<float>(red.data[i] - meta.rgb_mean[0]);
    o[5 * i + 1] = static_cast<float>(grn.data[i] - meta.rgb_mean[1]);
    o[5 * i + 2] = static_cast<float>(blu.data[i] - meta.rgb_mean[2]);
    o[5 * i + 3] = static_cast<float>(nir.data[i] - meta.nir_offset);
    o[5 * i + 4] = static_cast<float>(ndvi->data[i] * meta.ndvi_scale);
  }
  return out;
}

// Inverse of normalize: an R,G,B,N,V float raster.
inline RasterTile denormalize(const Tensor<float>& x, const ModelMeta& meta = {}) {
  require_rank(x, 3, "denormalize input");
  if (x.dim(2) != 5) throw InvalidArgument("denormalize: expected 5 channels");
  RasterTile tile;
  tile.height = x.dim(0);
  tile.width = x.dim(1);
  tile.dtype = SampleType::F32;
  const BandRole roles[] = {BandRole::R, BandRole::G, BandRole::B, BandRole::N, BandRole::V};
  const double offset[] = {meta.rgb_mean[0], meta.rgb_mean[1], meta.rgb_mean[2], meta.nir_offset, 0.0};
  const std::size_t n = tile.width * tile.height;
  for (int c = 0; c < 5; ++c) {
    Grid g(tile.width, tile.height);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[5 * i + static_cast<std::size_t>(c)];
      g.data[i] = static_cast<float>(c == 4 ? v / meta.ndvi_scale : v + offset[c]);
    }
    tile.bands.push_back({roles[c], std::move(g)});
  }
  return tile;
}

// Sigma in pixels for a sigma given in meters.
inline double sigma_pixels(double sigma_m, double pixel_size) { return sigma_m / pixel_size; }

// Target confidence map: per-pixel maximum of a unit Gaussian centered on
// every point. Each point is evaluated over a window wide enough that
// everything outside it rounds to 0 in float.
inline Grid build_target(const PointSet& points, std::size_t height, std::size_t width, double sigma_px) {
  if (!(sigma_px > 0.0)) throw InvalidArgument("build_target: sigma must be positive");
  Grid c(width, height);
  const double two_s2 = 2.0 * sigma_px * sigma_px;
  // exp(-110) is below the smallest float subnormal.
  const double reach = std::sqrt(110.0 * two_s2) + 1.0;
  for (const auto& p : points.points) {
    const long x0 = std::max(0L, static_cast<long>(std::floor(p.x - reach)));
    const long x1 = std::min(static_cast<long>(width) - 1, static_cast<long>(std::ceil(p.x + reach)));
    const long y0 = std::max(0L, static_cast<long>(std::floor(p.y - reach)));
    const long y1 = std::min(static_cast<long>(height) - 1, static_cast<long>(std::ceil(p.y + reach)));
    for (long y = y0; y <= y1; ++y) {
      const double dy = static_cast<double>(y) - p.y;
      for (long x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - p.x;
        const auto v = static_cast<float>(std::exp(-(dx * dx + dy * dy) / two_s2));
        float& dst = c(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
        if (v > dst) dst = v;
      }
    }
  }
  return c;
}

// 1 where target > tau, else 0.
inline Grid build_attention_mask(const Grid& target, double tau) {
  Grid m(target.width, target.height);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = target.data[i] > tau ? 1.0f : 0.0f;
  return m;
}

// ---------------------------------------------------------------------------
// Eight-fold augmentation: rotations by 0/90/180/270 degrees, each with and
// without a horizontal flip. Variant k rotates by (k % 4) quarter turns
// clockwise after flipping when k >= 4.

struct Variant {
  int quarter_turns = 0;  // clockwise
  bool flip = false;
  static Variant from_index(int k) { return {k % 4, k >= 4}; }
};

// Where source position (x, y) lands in a size x size square under `v`.
// Works for sub-pixel coordinates under the pixel-center convention.
inline Point transform_point(Point p, std::size_t size, Variant v) {
  const double last = static_cast<double>(size) - 1.0;
  if (v.flip) p.x = last - p.x;
  for (int i = 0; i < v.quarter_turns; ++i) p = {last - p.y, p.x};
  return p;
}

inline Grid transform_grid(const Grid& g, Variant v) {
  Grid out(g.width, g.height);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const Point q = transform_point({static_cast<double>(x), static_cast<double>(y)}, g.width, v);
      out(static_cast<std::size_t>(q.x), static_cast<std::size_t>(q.y)) = g(x, y);
    }
  return out;
}

inline RasterTile transform_tile(const RasterTile& tile, Variant v) {
  if (tile.width != tile.height) throw InvalidArgument("augmentation requires a square tile");
  RasterTile out = tile;
  for (auto& b : out.bands) b.grid = transform_grid(b.grid, v);
  return out;
}

inline PointSet transform_points(const PointSet& pts, std::size_t size, Variant v) {
  PointSet out = pts;
  for (auto& p : out.points) p = transform_point(p, size, v);
  return out;
}

struct Sample {
  RasterTile tile;
  PointSet points;  // pixel frame
};

// All eight variants; index 0 is the identity.
inline std::vector<Sample> augment_eightfold(const RasterTile& tile, const PointSet& points) {
  if (tile.width != tile.height) {
    throw InvalidArgument("augment_eightfold: tile must be square, got " + std::to_string(tile.width) +
                          "x" + std::to_string(tile.height));
  }
  std::vector<Sample> out;
  out.reserve(8);
  for (int k = 0; k < 8; ++k) {
    const auto v = Variant::from_index(k);
    out.push_back({transform_tile(tile, v), transform_points(points, tile.width, v)});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Seeded split at tile granularity. The validation part has
// ceil(fraction * n) tiles; both parts are returned in ascending order.
inline Split split_train_val(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("split_train_val: empty dataset");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("split_train_val: fraction must be in (0,1]");
  // The small epsilon absorbs representation error, e.g. 0.1 * 430.
  const auto n_val = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  Rng rng(seed);
  auto perm = rng.permutation(n);
  Split s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<long>(n_val));
  s.train.assign(perm.begin() + static_cast<long>(n_val), perm.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Number of training tiles kept by a subsample fraction: floor, at least 1.
inline std::size_t subsample_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("subsample fraction must be in (0,1]");
  if (n == 0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
}

}  // namespace canopy

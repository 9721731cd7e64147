#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/dataset.hpp"
#include "canopy/parallel.hpp"
#include "canopy/raster.hpp"
#include "canopy/rng.hpp"

namespace canopy {

using Rgb = std::array<double, 3>;

struct SceneSpec {
  std::size_t width = 256, height = 256;
  double pixel_size = 0.6;
  double origin_x = 1000.0, origin_y = 2000.0;
  std::string crs = "LOCAL";
  std::size_t n_trees = 20;
  double radius_min_m = 2.4, radius_max_m = 4.2;
  double min_separation_px = 10.0;
  // Surface colours as R,G,B digital numbers. Non-vegetated surfaces get
  // N = R; grass gets half the vegetation boost, canopies the full boost.
  Rgb pavement{118, 114, 108};
  Rgb grass{88, 118, 70};
  Rgb roof{165, 150, 140};
  Rgb canopy{50, 92, 46};
  double nir_boost = 110.0;
  std::size_t n_roofs = 3;
  std::size_t n_grass = 3;
  double shadow_probability = 0.5;
  double shadow_dx = 3.0, shadow_dy = 3.0;  // pixels
  double shadow_factor = 0.6;
  double noise_sigma = 3.0;  // DN
  std::size_t max_attempts = 2000;  // placement tries per tree
  std::uint64_t seed = 0;

  double radius_min_px() const { return radius_min_m / pixel_size; }
  double radius_max_px() const { return radius_max_m / pixel_size; }

  void validate() const {
    if (width == 0 || height == 0) throw InvalidArgument("scene size must be positive");
    if (!(pixel_size > 0.0)) throw InvalidArgument("pixel_size must be positive");
    if (!(radius_min_m > 0.0 && radius_min_m <= radius_max_m)) throw InvalidArgument("invalid canopy radius range");
    if (2.0 * radius_max_px() + 1.0 > static_cast<double>(std::min(width, height))) {
      throw InvalidArgument("canopy radius does not fit the scene");
    }
    if (!(min_separation_px >= 0.0)) throw InvalidArgument("min_separation_px must be >= 0");
    if (!(shadow_probability >= 0.0 && shadow_probability <= 1.0)) {
      throw InvalidArgument("shadow_probability must be in [0,1]");
    }
    if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
    if (max_attempts == 0) throw InvalidArgument("max_attempts must be positive");
  }
};

enum class Cover : std::uint8_t { Pavement, Roof, Grass, Canopy };

struct Scene {
  RasterTile tile;               // u8 R,G,B,N
  PointSet trees;                // pixel frame, exact crown centers
  std::vector<double> radii_px;  // per tree
  std::vector<Cover> cover;      // per pixel, row-major
};

namespace synth_detail {

struct Canvas {
  std::size_t w, h;
  std::vector<double> r, g, b, n;
  std::vector<Cover> cover;

  Canvas(std::size_t w_, std::size_t h_) : w(w_), h(h_), r(w * h), g(w * h), b(w * h), n(w * h), cover(w * h) {}

  void paint(std::size_t i, const Rgb& c, double boost, Cover k) {
    r[i] = c[0];
    g[i] = c[1];
    b[i] = c[2];
    n[i] = c[0] + boost;
    cover[i] = k;
  }
};

}  // namespace synth_detail

// Renders one scene. Canopies are soft-edged discs brightest at the
// center; shadows are darkened ellipses cast onto the ground before the
// canopies are drawn.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t w = spec.width, h = spec.height;
  synth_detail::Canvas cv(w, h);
  for (std::size_t i = 0; i < w * h; ++i) cv.paint(i, spec.pavement, 0.0, Cover::Pavement);

  for (std::size_t k = 0; k < spec.n_roofs; ++k) {
    const auto rw = static_cast<std::size_t>(rng.uniform_int(16, 56));
    const auto rh = static_cast<std::size_t>(rng.uniform_int(16, 56));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w) - 1));
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h) - 1));
    for (std::size_t y = y0; y < std::min(h, y0 + rh); ++y)
      for (std::size_t x = x0; x < std::min(w, x0 + rw); ++x) cv.paint(y * w + x, spec.roof, 0.0, Cover::Roof);
  }
  for (std::size_t k = 0; k < spec.n_grass; ++k) {
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double ax = rng.uniform(12.0, 48.0), ay = rng.uniform(12.0, 48.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (static_cast<double>(x) - cx) / ax, v = (static_cast<double>(y) - cy) / ay;
        if (u * u + v * v <= 1.0) cv.paint(y * w + x, spec.grass, 0.5 * spec.nir_boost, Cover::Grass);
      }
  }

  // Tree placement by rejection; whole crowns stay inside the raster.
  Scene scene;
  const double rmin = spec.radius_min_px(), rmax = spec.radius_max_px();
  for (std::size_t t = 0; t < spec.n_trees; ++t) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      const double r = rng.uniform(rmin, rmax);
      const double x = rng.uniform(r, static_cast<double>(w) - 1.0 - r);
      const double y = rng.uniform(r, static_cast<double>(h) - 1.0 - r);
      placed = std::all_of(scene.trees.points.begin(), scene.trees.points.end(), [&](const Point& p) {
        return std::hypot(p.x - x, p.y - y) >= spec.min_separation_px;
      });
      if (placed) {
        scene.trees.points.push_back({x, y});
        scene.radii_px.push_back(r);
      }
    }
    if (!placed) {
      throw InvalidArgument("cannot place " + std::to_string(spec.n_trees) + " trees with separation " +
                            std::to_string(spec.min_separation_px) + " px; placed " + std::to_string(t));
    }
  }

  for (std::size_t t = 0; t < scene.trees.size(); ++t) {
    if (rng.uniform() >= spec.shadow_probability) continue;
    const Point c = scene.trees.points[t];
    const double ax = 1.2 * scene.radii_px[t], ay = 0.8 * scene.radii_px[t];
    const double cx = c.x + spec.shadow_dx, cy = c.y + spec.shadow_dy;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (static_cast<double>(x) - cx) / ax, v = (static_cast<double>(y) - cy) / ay;
        if (u * u + v * v > 1.0) continue;
        const std::size_t i = y * w + x;
        cv.r[i] *= spec.shadow_factor;
        cv.g[i] *= spec.shadow_factor;
        cv.b[i] *= spec.shadow_factor;
        cv.n[i] *= spec.shadow_factor;
      }
  }

  for (std::size_t t = 0; t < scene.trees.size(); ++t) {
    const Point c = scene.trees.points[t];
    const double r = scene.radii_px[t];
    const double core = 0.7 * r;
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(c.x - r)));
    const auto x1 = static_cast<std::size_t>(std::min(static_cast<double>(w) - 1.0, std::ceil(c.x + r)));
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(c.y - r)));
    const auto y1 = static_cast<std::size_t>(std::min(static_cast<double>(h) - 1.0, std::ceil(c.y + r)));
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) {
        const double rho = std::hypot(static_cast<double>(x) - c.x, static_cast<double>(y) - c.y);
        if (rho >= r) continue;
        const double a = rho <= core ? 1.0 : 0.5 * (1.0 + std::cos(M_PI * (rho - core) / (r - core)));
        const double shade = 1.0 - 0.35 * (rho / r) * (rho / r);
        const std::size_t i = y * w + x;
        cv.r[i] = (1.0 - a) * cv.r[i] + a * spec.canopy[0] * shade;
        cv.g[i] = (1.0 - a) * cv.g[i] + a * spec.canopy[1] * shade;
        cv.b[i] = (1.0 - a) * cv.b[i] + a * spec.canopy[2] * shade;
        cv.n[i] = (1.0 - a) * cv.n[i] + a * (spec.canopy[0] + spec.nir_boost) * shade;
        if (a > 0.5) cv.cover[i] = Cover::Canopy;
      }
  }

  RasterTile& tile = scene.tile;
  tile.width = w;
  tile.height = h;
  tile.dtype = SampleType::U8;
  tile.geo = {spec.origin_x, spec.origin_y, spec.pixel_size};
  tile.crs = spec.crs;
  const std::vector<double>* src[] = {&cv.r, &cv.g, &cv.b, &cv.n};
  const BandRole roles[] = {BandRole::R, BandRole::G, BandRole::B, BandRole::N};
  for (int k = 0; k < 4; ++k) {
    Grid g(w, h);
    for (std::size_t i = 0; i < w * h; ++i) {
      const double v = (*src[k])[i] + spec.noise_sigma * rng.normal();
      g.data[i] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
    }
    tile.add_band(roles[k], std::move(g));
  }
  scene.trees.frame = PointFrame::Pixel;
  scene.trees.crs = spec.crs;
  scene.cover = std::move(cv.cover);
  return scene;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  return {{"width", s.width},
          {"height", s.height},
          {"pixel_size", s.pixel_size},
          {"origin_x", s.origin_x},
          {"origin_y", s.origin_y},
          {"crs", s.crs},
          {"n_trees", s.n_trees},
          {"radius_min_m", s.radius_min_m},
          {"radius_max_m", s.radius_max_m},
          {"min_separation_px", s.min_separation_px},
          {"pavement", s.pavement},
          {"grass", s.grass},
          {"roof", s.roof},
          {"canopy", s.canopy},
          {"nir_boost", s.nir_boost},
          {"n_roofs", s.n_roofs},
          {"n_grass", s.n_grass},
          {"shadow_probability", s.shadow_probability},
          {"shadow_dx", s.shadow_dx},
          {"shadow_dy", s.shadow_dy},
          {"shadow_factor", s.shadow_factor},
          {"noise_sigma", s.noise_sigma},
          {"max_attempts", s.max_attempts},
          {"seed", s.seed}};
}

// Writes n_scenes scenes (scene i uses seed + i) plus manifest.json into
// `dir`. Points are stored in the geographic frame.
inline DatasetManifest generate_dataset(const std::filesystem::path& dir, std::size_t n_scenes, const SceneSpec& spec,
                                        std::uint64_t seed, int jobs = 1) {
  spec.validate();
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.scenes.resize(n_scenes);
  run_jobs(n_scenes, jobs, [&](std::size_t i) {
    SceneSpec s = spec;
    s.seed = seed + i;
    const Scene scene = generate_scene(s);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu", i);
    SceneEntry e;
    e.name = name;
    e.raster = e.name + ".raster";
    e.points = e.name + ".csv";
    e.n_points = scene.trees.size();
    const std::string raster_bytes = encode_raster(scene.tile);
    const std::string point_bytes = encode_points(to_geographic(scene.trees, scene.tile.geo, scene.tile.crs));
    io_detail::write_file(dir / e.raster, raster_bytes);
    io_detail::write_file(dir / e.points, point_bytes);
    e.raster_fnv1a = fnv1a_hex(raster_bytes);
    e.points_fnv1a = fnv1a_hex(point_bytes);
    m.scenes[i] = std::move(e);
  });
  m.extra["generator"] = {{"seed", seed}, {"spec", scene_spec_to_json(spec)}};
  io_detail::write_file(dir / kManifestName, manifest_to_json(m).dump(2) + "\n");
  return m;
}

}  // namespace canopy

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "canopy/raster.hpp"

namespace canopy {

enum class ThresholdMode { Absolute, Relative };

inline std::string to_string(ThresholdMode m) {
  return m == ThresholdMode::Absolute ? "absolute" : "relative";
}

inline ThresholdMode parse_threshold_mode(const std::string& s) {
  if (s == "absolute" || s == "abs") return ThresholdMode::Absolute;
  if (s == "relative" || s == "rel") return ThresholdMode::Relative;
  throw InvalidArgument("unknown threshold mode '" + s + "'");
}

// Defaults are the fixed settings used before tuning (d = 3, t_abs = 0.2).
struct PeakParams {
  int min_distance = 3;
  ThresholdMode mode = ThresholdMode::Absolute;
  double t_abs = 0.2;
  double t_rel = 0.5;

  void validate() const {
    if (min_distance < 1) throw InvalidArgument("peak min_distance must be >= 1");
    if (mode == ThresholdMode::Relative && !(t_rel > 0.0 && t_rel < 1.0)) {
      throw InvalidArgument("relative threshold must be in (0,1)");
    }
  }

  friend bool operator==(const PeakParams&, const PeakParams&) = default;
};

inline float grid_max(const Grid& g) {
  float m = -std::numeric_limits<float>::infinity();
  for (float v : g.data) m = std::max(m, v);
  return m;
}

// Detection threshold for a map whose maximum is `map_max`.
struct Threshold {
  double value;
  bool positive_only;  // relative mode additionally requires value > 0
};

inline Threshold resolve_threshold(const PeakParams& p, double map_max) {
  if (p.mode == ThresholdMode::Absolute) return {p.t_abs, false};
  return {p.t_rel * map_max, true};
}

namespace detail {

// Max over a (2d+1) window along rows then columns (clipped at the borders).
inline Grid window_max(const Grid& g, int d) {
  const long w = static_cast<long>(g.width), h = static_cast<long>(g.height);
  Grid rows(g.width, g.height), out(g.width, g.height);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      float m = g(x, y);
      for (long k = std::max(0L, x - d); k <= std::min(w - 1, x + d); ++k) m = std::max(m, g(k, y));
      rows(x, y) = m;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      float m = rows(x, y);
      for (long k = std::max(0L, y - d); k <= std::min(h - 1, y + d); ++k) m = std::max(m, rows(x, k));
      out(x, y) = m;
    }
  return out;
}

}  // namespace detail

// Local maxima restricted to pixels inside [x0,x1) x [y0,y1); neighbors
// outside the restriction (but inside the map) still suppress. Used by the
// tiled detector to evaluate only a keep-window.
inline PointSet find_peaks_in(const Grid& map, int d, Threshold thr, long x0, long y0, long x1, long y1) {
  PointSet out;
  if (map.data.empty()) return out;
  const Grid wmax = detail::window_max(map, d);
  const long w = static_cast<long>(map.width);
  for (long y = y0; y < y1; ++y)
    for (long x = x0; x < x1; ++x) {
      const float v = map(x, y);
      if (v != wmax(x, y)) continue;
      if (!(v >= thr.value)) continue;
      if (thr.positive_only && !(v > 0.0f)) continue;
      // Plateau ties: an equal value earlier in row-major order wins.
      bool earlier_tie = false;
      for (long yy = std::max(0L, y - d); yy <= y && !earlier_tie; ++yy) {
        const long xe = yy < y ? std::min(w - 1, x + d) : x - 1;
        for (long xx = std::max(0L, x - d); xx <= xe; ++xx) {
          if (map(xx, yy) == v) {
            earlier_tie = true;
            break;
          }
        }
      }
      if (earlier_tie) continue;
      out.points.push_back({static_cast<double>(x), static_cast<double>(y)});
      out.confidence.push_back(v);
    }
  return out;
}

// A pixel is a peak when no pixel in the (2d+1)x(2d+1) window around it is
// larger, no equal pixel precedes it in row-major order, and it passes the
// threshold (t_abs, or t_rel times the map maximum). Results are in
// row-major order and carry their map values as confidence.
inline PointSet find_peaks(const Grid& map, const PeakParams& p) {
  p.validate();
  const auto thr = resolve_threshold(p, map.data.empty() ? 0.0 : grid_max(map));
  return find_peaks_in(map, p.min_distance, thr, 0, 0, static_cast<long>(map.width),
                       static_cast<long>(map.height));
}

}  // namespace canopy

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/errors.hpp"

namespace canopy {

enum class BandRole { R, G, B, N, V };

inline char band_role_char(BandRole r) {
  constexpr char names[] = {'R', 'G', 'B', 'N', 'V'};
  return names[static_cast<int>(r)];
}

inline BandRole parse_band_role(const std::string& s) {
  if (s == "R") return BandRole::R;
  if (s == "G") return BandRole::G;
  if (s == "B") return BandRole::B;
  if (s == "N") return BandRole::N;
  if (s == "V") return BandRole::V;
  throw UnknownBandRole("unknown band role '" + s + "'");
}

// Single-channel float grid, row-major.
struct Grid {
  std::size_t width = 0, height = 0;
  std::vector<float> data;

  Grid() = default;
  Grid(std::size_t w, std::size_t h, float fill = 0.0f)
      : width(w), height(h), data(w * h, fill) {}

  float& operator()(std::size_t x, std::size_t y) { return data[y * width + x]; }
  float operator()(std::size_t x, std::size_t y) const { return data[y * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

// North-up affine georeferencing. (origin_x, origin_y) is the map position
// of the CENTER of pixel (0, 0); y grows southward in pixel space.
struct GeoTransform {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double pixel_size = 0.6;

  double to_geo_x(double px) const { return origin_x + px * pixel_size; }
  double to_geo_y(double py) const { return origin_y - py * pixel_size; }
  double to_pixel_x(double gx) const { return (gx - origin_x) / pixel_size; }
  double to_pixel_y(double gy) const { return (origin_y - gy) / pixel_size; }

  friend bool operator==(const GeoTransform&, const GeoTransform&) = default;
};

enum class SampleType { U8, F32 };

struct Band {
  BandRole role;
  Grid grid;
  friend bool operator==(const Band&, const Band&) = default;
};

// Multi-band raster. R, G, B, N hold 8-bit digital numbers (as floats);
// V holds NDVI in [-1, 1].
struct RasterTile {
  std::size_t width = 0, height = 0;
  std::vector<Band> bands;
  GeoTransform geo;
  std::string crs = "LOCAL";
  SampleType dtype = SampleType::U8;

  const Band* find(BandRole role) const {
    for (const auto& b : bands)
      if (b.role == role) return &b;
    return nullptr;
  }
  const Grid& band(BandRole role) const {
    const Band* b = find(role);
    if (!b) {
      throw InvalidArgument(std::string("raster has no ") + band_role_char(role) + " band");
    }
    return b->grid;
  }
  void add_band(BandRole role, Grid grid) {
    if (grid.width != width || grid.height != height) {
      throw InvalidArgument("band dimensions differ from raster dimensions");
    }
    bands.push_back({role, std::move(grid)});
  }

  friend bool operator==(const RasterTile&, const RasterTile&) = default;
};

enum class PointFrame { Pixel, Geographic };

struct Point {
  double x = 0.0, y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Tree locations. Pixel-frame coordinates use the pixel-center convention:
// integer coordinates are pixel centers.
struct PointSet {
  std::vector<Point> points;
  std::vector<double> confidence;  // empty, or one per point
  PointFrame frame = PointFrame::Pixel;
  std::string crs = "LOCAL";

  std::size_t size() const { return points.size(); }
  bool has_confidence() const { return !confidence.empty(); }

  friend bool operator==(const PointSet&, const PointSet&) = default;
};

inline PointSet to_geographic(const PointSet& pts, const GeoTransform& geo, const std::string& crs) {
  if (pts.frame == PointFrame::Geographic) return pts;
  PointSet out = pts;
  out.frame = PointFrame::Geographic;
  out.crs = crs;
  for (auto& p : out.points) p = {geo.to_geo_x(p.x), geo.to_geo_y(p.y)};
  return out;
}

inline PointSet to_pixel(const PointSet& pts, const RasterTile& ref) {
  if (pts.frame == PointFrame::Pixel) return pts;
  if (pts.crs != ref.crs) {
    throw CrsMismatch("points CRS '" + pts.crs + "' differs from raster CRS '" + ref.crs + "'");
  }
  PointSet out = pts;
  out.frame = PointFrame::Pixel;
  for (auto& p : out.points) p = {ref.geo.to_pixel_x(p.x), ref.geo.to_pixel_y(p.y)};
  return out;
}

// ---------------------------------------------------------------------------
// Raster file: one line of UTF-8 JSON header, a '\0' byte, then band-sequential
// little-endian samples (u8 or f32).

inline constexpr const char* kRasterMagic = "CANOPY-RASTER";
inline constexpr int kRasterVersion = 1;

namespace io_detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPath("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

template <class U>
U byteswap_if_needed(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
}

inline void append_f32(std::string& out, float v) {
  auto bits = byteswap_if_needed(std::bit_cast<std::uint32_t>(v));
  char buf[4];
  std::memcpy(buf, &bits, 4);
  out.append(buf, 4);
}

inline float read_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  return std::bit_cast<float>(byteswap_if_needed(bits));
}

// Splits "<json>\0<payload>".
inline std::pair<nlohmann::json, std::string_view> split_header(const std::string& bytes,
                                                                const std::string& what) {
  const auto nul = bytes.find('\0');
  if (nul == std::string::npos) throw MalformedHeader(what + ": missing header terminator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nul));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(what + ": header is not valid JSON: " + e.what());
  }
  if (!header.is_object()) throw MalformedHeader(what + ": header is not a JSON object");
  return {std::move(header), std::string_view(bytes).substr(nul + 1)};
}

template <class V>
V header_field(const nlohmann::json& h, const char* key, const std::string& what) {
  if (!h.contains(key)) throw MalformedHeader(what + ": header lacks '" + key + "'");
  try {
    return h.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw MalformedHeader(what + ": header field '" + key + "' has the wrong type");
  }
}

}  // namespace io_detail

inline std::string encode_raster(const RasterTile& tile) {
  nlohmann::json h;
  h["magic"] = kRasterMagic;
  h["version"] = kRasterVersion;
  h["width"] = tile.width;
  h["height"] = tile.height;
  auto roles = nlohmann::json::array();
  for (const auto& b : tile.bands) roles.push_back(std::string(1, band_role_char(b.role)));
  h["bands"] = roles;
  h["dtype"] = tile.dtype == SampleType::U8 ? "u8" : "f32";
  h["geotransform"] = {{"origin_x", tile.geo.origin_x},
                       {"origin_y", tile.geo.origin_y},
                       {"pixel_size", tile.geo.pixel_size}};
  h["crs"] = tile.crs;
  std::string out = h.dump();
  out.push_back('\0');
  const std::size_t n = tile.width * tile.height;
  for (const auto& b : tile.bands) {
    if (b.grid.data.size() != n) throw InvalidArgument("band size does not match raster");
    if (tile.dtype == SampleType::U8) {
      for (float v : b.grid.data) {
        if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v)) {
          throw InvalidArgument(std::string("band ") + band_role_char(b.role) +
                                " holds a value that is not an 8-bit integer");
        }
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
      }
    } else {
      for (float v : b.grid.data) io_detail::append_f32(out, v);
    }
  }
  return out;
}

inline RasterTile decode_raster(const std::string& bytes, const std::string& what = "raster") {
  using io_detail::header_field;
  auto [h, payload] = io_detail::split_header(bytes, what);
  if (header_field<std::string>(h, "magic", what) != kRasterMagic) {
    throw MalformedHeader(what + ": bad magic");
  }
  if (header_field<int>(h, "version", what) != kRasterVersion) {
    throw MalformedHeader(what + ": unsupported version");
  }
  RasterTile tile;
  tile.width = header_field<std::size_t>(h, "width", what);
  tile.height = header_field<std::size_t>(h, "height", what);
  const auto dtype = header_field<std::string>(h, "dtype", what);
  if (dtype == "u8") {
    tile.dtype = SampleType::U8;
  } else if (dtype == "f32") {
    tile.dtype = SampleType::F32;
  } else {
    throw MalformedHeader(what + ": unknown dtype '" + dtype + "'");
  }
  const auto gt = header_field<nlohmann::json>(h, "geotransform", what);
  tile.geo.origin_x = header_field<double>(gt, "origin_x", what);
  tile.geo.origin_y = header_field<double>(gt, "origin_y", what);
  tile.geo.pixel_size = header_field<double>(gt, "pixel_size", what);
  if (!(tile.geo.pixel_size > 0.0)) throw MalformedHeader(what + ": pixel_size must be positive");
  tile.crs = header_field<std::string>(h, "crs", what);
  const auto roles = header_field<std::vector<std::string>>(h, "bands", what);

  const std::size_t n = tile.width * tile.height;
  const std::size_t sample = tile.dtype == SampleType::U8 ? 1 : 4;
  const std::size_t expected = n * sample * roles.size();
  if (payload.size() < expected) {
    throw TruncatedPayload(what + ": payload has " + std::to_string(payload.size()) +
                           " bytes, header implies " + std::to_string(expected));
  }
  if (payload.size() > expected) {
    throw MalformedHeader(what + ": payload has trailing bytes beyond the header's size");
  }
  const char* p = payload.data();
  for (const auto& r : roles) {
    Grid g(tile.width, tile.height);
    if (tile.dtype == SampleType::U8) {
      for (std::size_t i = 0; i < n; ++i) g.data[i] = static_cast<unsigned char>(p[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) g.data[i] = io_detail::read_f32(p + 4 * i);
    }
    p += n * sample;
    tile.bands.push_back({parse_band_role(r), std::move(g)});
  }
  return tile;
}

inline void save_raster(const std::filesystem::path& path, const RasterTile& tile) {
  io_detail::write_file(path, encode_raster(tile));
}

inline RasterTile load_raster(const std::filesystem::path& path) {
  return decode_raster(io_detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Points file: "# frame=pixel|geographic, crs=<id>", header "x,y[,confidence]",
// one row per point. Numbers are written in shortest round-trip form.

namespace io_detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw MalformedHeader(what + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace io_detail

inline std::string encode_points(const PointSet& pts) {
  using io_detail::format_double;
  if (pts.has_confidence() && pts.confidence.size() != pts.size()) {
    throw InvalidArgument("confidence count does not match point count");
  }
  std::string out = "# frame=";
  out += pts.frame == PointFrame::Pixel ? "pixel" : "geographic";
  out += ", crs=" + pts.crs + "\n";
  out += pts.has_confidence() ? "x,y,confidence\n" : "x,y\n";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out += format_double(pts.points[i].x) + ',' + format_double(pts.points[i].y);
    if (pts.has_confidence()) out += ',' + format_double(pts.confidence[i]);
    out += '\n';
  }
  return out;
}

inline PointSet decode_points(const std::string& text, const std::string& what = "points") {
  using io_detail::trim;
  PointSet pts;
  std::istringstream is(text);
  std::string line;
  bool header_seen = false;
  bool with_conf = false;
  std::size_t lineno = 0;
  // "frame=..." and "crs=..." settings, from the comment line or inline in
  // the CSV header ("x,y,frame=pixel").
  auto apply_setting = [&](const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) return false;
    const auto key = trim(kv.substr(0, eq));
    const auto val = trim(kv.substr(eq + 1));
    if (key == "frame") {
      if (val == "pixel") {
        pts.frame = PointFrame::Pixel;
      } else if (val == "geographic") {
        pts.frame = PointFrame::Geographic;
      } else {
        throw MalformedHeader(what + ": unknown frame '" + val + "'");
      }
    } else if (key == "crs") {
      pts.crs = val;
    }
    return true;
  };
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      for (const auto& kv : io_detail::split(line.substr(1), ',')) apply_setting(trim(kv));
      continue;
    }
    if (!header_seen) {
      const auto cells = io_detail::split(line, ',');
      if (cells.size() < 2 || trim(cells[0]) != "x" || trim(cells[1]) != "y") {
        throw MalformedHeader(what + ": expected header 'x,y' or 'x,y,confidence', got '" + line + "'");
      }
      for (std::size_t i = 2; i < cells.size(); ++i) {
        const auto c = trim(cells[i]);
        if (c == "confidence" && !with_conf) {
          with_conf = true;
        } else if (!apply_setting(c)) {
          throw MalformedHeader(what + ": unexpected header column '" + c + "'");
        }
      }
      header_seen = true;
      continue;
    }
    const auto cells = io_detail::split(line, ',');
    if (cells.size() != (with_conf ? 3u : 2u)) {
      throw MalformedHeader(what + ": line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " fields");
    }
    pts.points.push_back({io_detail::parse_double(cells[0], what), io_detail::parse_double(cells[1], what)});
    if (with_conf) pts.confidence.push_back(io_detail::parse_double(cells[2], what));
  }
  if (!header_seen) throw MalformedHeader(what + ": missing CSV header");
  return pts;
}

inline void save_points(const std::filesystem::path& path, const PointSet& pts) {
  io_detail::write_file(path, encode_points(pts));
}

inline PointSet load_points(const std::filesystem::path& path) {
  return decode_points(io_detail::read_file(path), path.string());
}

// Loads points and converts them to the pixel frame of `ref`.
inline PointSet load_points(const std::filesystem::path& path, const RasterTile& ref) {
  return to_pixel(load_points(path), ref);
}

}  // namespace canopy

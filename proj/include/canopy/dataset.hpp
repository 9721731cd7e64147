#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/datapipe.hpp"
#include "canopy/raster.hpp"

// A dataset directory holds raster files, point files and manifest.json:
//   {"format": "canopy-dataset", "version": 1,
//    "scenes": [{"name", "raster", "points", "n_points",
//                "raster_fnv1a", "points_fnv1a"}, ...], ...}
// Paths are relative to the directory. Extra top-level keys are kept for
// provenance and ignored by the loader.

namespace canopy {

inline constexpr const char* kDatasetFormat = "canopy-dataset";
inline constexpr const char* kManifestName = "manifest.json";

// 64-bit FNV-1a, printed as 16 hex digits.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string fnv1a_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

struct SceneEntry {
  std::string name;
  std::string raster;
  std::string points;
  std::size_t n_points = 0;
  std::string raster_fnv1a;
  std::string points_fnv1a;
};

struct DatasetManifest {
  std::vector<SceneEntry> scenes;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j = m.extra;
  j["format"] = kDatasetFormat;
  j["version"] = 1;
  auto scenes = nlohmann::json::array();
  for (const auto& s : m.scenes) {
    scenes.push_back({{"name", s.name},
                      {"raster", s.raster},
                      {"points", s.points},
                      {"n_points", s.n_points},
                      {"raster_fnv1a", s.raster_fnv1a},
                      {"points_fnv1a", s.points_fnv1a}});
  }
  j["scenes"] = scenes;
  return j;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingPath("dataset directory not found: " + dir.string());
  const auto path = dir / kManifestName;
  const std::string what = path.string();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io_detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(what + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kDatasetFormat) throw MalformedHeader(what + ": not a dataset manifest");
    DatasetManifest m;
    for (const auto& s : j.at("scenes")) {
      m.scenes.push_back({s.at("name").get<std::string>(), s.at("raster").get<std::string>(),
                          s.at("points").get<std::string>(), s.at("n_points").get<std::size_t>(),
                          s.value("raster_fnv1a", ""), s.value("points_fnv1a", "")});
    }
    j.erase("scenes");
    m.extra = j;
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(what + ": " + e.what());
  }
}

// Recomputes every checksum; throws DataError naming the first mismatch.
inline void verify_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
  for (const auto& s : m.scenes) {
    for (const auto& [file, sum] : {std::pair{s.raster, s.raster_fnv1a}, std::pair{s.points, s.points_fnv1a}}) {
      if (sum.empty()) continue;
      if (fnv1a_hex(io_detail::read_file(dir / file)) != sum) {
        throw DataError("checksum mismatch for " + (dir / file).string());
      }
    }
  }
}

struct NamedSample {
  std::string name;
  Sample sample;
};

// Loads every scene with its points converted to the raster's pixel frame.
inline std::vector<NamedSample> load_dataset(const std::filesystem::path& dir, bool verify = true) {
  const auto m = read_manifest(dir);
  if (verify) verify_manifest(dir, m);
  std::vector<NamedSample> out;
  for (const auto& s : m.scenes) {
    RasterTile tile = load_raster(dir / s.raster);
    PointSet pts = load_points(dir / s.points, tile);
    if (pts.size() != s.n_points) {
      throw DataError((dir / s.points).string() + ": manifest lists " + std::to_string(s.n_points) +
                      " points, file has " + std::to_string(pts.size()));
    }
    out.push_back({s.name, {std::move(tile), std::move(pts)}});
  }
  return out;
}

inline std::vector<Sample> samples_of(const std::vector<NamedSample>& named) {
  std::vector<Sample> out;
  out.reserve(named.size());
  for (const auto& n : named) out.push_back(n.sample);
  return out;
}

}  // namespace canopy

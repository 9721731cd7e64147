#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "canopy/peaks.hpp"
#include "canopy/raster.hpp"
#include "canopy/synth.hpp"
#include "canopy/tiling.hpp"
#include "canopy/trainer.hpp"
#include "canopy/tuner.hpp"

// Flat key=value configuration. Keys carry a section prefix
// ("train.epochs = 150"); '#' starts a comment line.

namespace canopy {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& what = "config") {
    KeyValueConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      line = io_detail::trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw MalformedHeader(what + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const auto key = io_detail::trim(line.substr(0, eq));
      if (key.empty()) throw MalformedHeader(what + ":" + std::to_string(lineno) + ": empty key");
      c.values_[key] = io_detail::trim(line.substr(eq + 1));
    }
    return c;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    return parse(io_detail::read_file(path), path.string());
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  std::map<std::string, std::string> values_;
};

// A named reference to one configurable field.
using FieldRef = std::variant<int*, unsigned long*, unsigned long long*, double*, std::string*, Rgb*, ThresholdMode*>;

struct Field {
  std::string key;  // without section prefix
  FieldRef ref;
};

namespace config_detail {

inline std::string to_text(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using P = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<P, double>) {
          return io_detail::format_double(*p);
        } else if constexpr (std::is_same_v<P, std::string>) {
          return *p;
        } else if constexpr (std::is_same_v<P, Rgb>) {
          return io_detail::format_double((*p)[0]) + "," + io_detail::format_double((*p)[1]) + "," +
                 io_detail::format_double((*p)[2]);
        } else if constexpr (std::is_same_v<P, ThresholdMode>) {
          return to_string(*p);
        } else {
          return std::to_string(*p);
        }
      },
      ref);
}

template <class I>
I parse_integer(const std::string& s, const std::string& key) {
  I v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("bad integer for " + key + ": '" + s + "'");
  }
  return v;
}

inline double parse_real(const std::string& s, const std::string& key) {
  try {
    return io_detail::parse_double(s, key);
  } catch (const DataError&) {
    throw InvalidArgument("bad number for " + key + ": '" + s + "'");
  }
}

inline void from_text(const FieldRef& ref, const std::string& s, const std::string& key) {
  std::visit(
      [&](auto* p) {
        using P = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<P, double>) {
          *p = parse_real(s, key);
        } else if constexpr (std::is_same_v<P, std::string>) {
          *p = s;
        } else if constexpr (std::is_same_v<P, Rgb>) {
          const auto cells = io_detail::split(s, ',');
          if (cells.size() != 3) throw InvalidArgument(key + " needs three comma-separated values");
          for (int i = 0; i < 3; ++i) (*p)[static_cast<std::size_t>(i)] = parse_real(io_detail::trim(cells[i]), key);
        } else if constexpr (std::is_same_v<P, ThresholdMode>) {
          *p = parse_threshold_mode(s);
        } else {
          *p = parse_integer<P>(s, key);
        }
      },
      ref);
}

}  // namespace config_detail

inline std::vector<Field> fields_of(TrainConfig& c) {
  return {{"batch_size", &c.batch_size},
          {"epochs", &c.epochs},
          {"lr", &c.lr},
          {"beta1", &c.beta1},
          {"beta2", &c.beta2},
          {"epsilon", &c.epsilon},
          {"alpha", &c.alpha},
          {"tau", &c.tau},
          {"sigma_m", &c.sigma_m},
          {"val_fraction", &c.val_fraction},
          {"seed", &c.seed},
          {"subsample_fraction", &c.subsample_fraction},
          {"width_divisor", &c.width_divisor},
          {"variants_per_epoch", &c.variants_per_epoch}};
}

inline std::vector<Field> fields_of(TuneConfig& c) {
  return {{"iterations", &c.iterations}, {"d_min", &c.d_min},         {"d_max", &c.d_max},
          {"t_abs_min", &c.t_abs_min},   {"t_abs_max", &c.t_abs_max}, {"t_rel_min", &c.t_rel_min},
          {"t_rel_max", &c.t_rel_max},   {"max_dist_m", &c.max_dist_m}, {"seed", &c.seed}};
}

inline std::vector<Field> fields_of(PeakParams& p) {
  return {{"min_distance", &p.min_distance}, {"mode", &p.mode}, {"t_abs", &p.t_abs}, {"t_rel", &p.t_rel}};
}

inline std::vector<Field> fields_of(DetectConfig& c) {
  return {{"tile_size", &c.tile_size},
          {"overlap", &c.overlap},
          {"peak_tile_size", &c.peak_tile_size},
          {"peak_overlap", &c.peak_overlap}};
}

inline std::vector<Field> fields_of(SceneSpec& s) {
  return {{"width", &s.width},
          {"height", &s.height},
          {"pixel_size", &s.pixel_size},
          {"origin_x", &s.origin_x},
          {"origin_y", &s.origin_y},
          {"crs", &s.crs},
          {"n_trees", &s.n_trees},
          {"radius_min_m", &s.radius_min_m},
          {"radius_max_m", &s.radius_max_m},
          {"min_separation_px", &s.min_separation_px},
          {"pavement", &s.pavement},
          {"grass", &s.grass},
          {"roof", &s.roof},
          {"canopy", &s.canopy},
          {"nir_boost", &s.nir_boost},
          {"n_roofs", &s.n_roofs},
          {"n_grass", &s.n_grass},
          {"shadow_probability", &s.shadow_probability},
          {"shadow_dx", &s.shadow_dx},
          {"shadow_dy", &s.shadow_dy},
          {"shadow_factor", &s.shadow_factor},
          {"noise_sigma", &s.noise_sigma},
          {"max_attempts", &s.max_attempts},
          {"seed", &s.seed}};
}

// A set of sections, each a prefix plus its fields.
struct Section {
  std::string prefix;
  std::vector<Field> fields;
};

// Applies every key of `cfg` that belongs to one of `sections`. Keys with a
// known prefix but an unknown name are rejected; keys of other sections are
// ignored so one file can serve every subcommand.
inline void apply_config(const KeyValueConfig& cfg, const std::vector<Section>& sections) {
  for (const auto& [key, value] : cfg.values()) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw InvalidArgument("config key '" + key + "' lacks a section prefix");
    const auto prefix = key.substr(0, dot), name = key.substr(dot + 1);
    for (const auto& s : sections) {
      if (s.prefix != prefix) continue;
      bool found = false;
      for (const auto& f : s.fields) {
        if (f.key == name) {
          config_detail::from_text(f.ref, value, key);
          found = true;
        }
      }
      if (!found) throw InvalidArgument("unknown config key '" + key + "'");
    }
  }
}

// CANOPY_SEED replaces every seed field when set.
inline void apply_seed_env(const std::vector<Section>& sections) {
  const char* env = std::getenv("CANOPY_SEED");
  if (!env || !*env) return;
  for (const auto& s : sections)
    for (const auto& f : s.fields)
      if (f.key == "seed") config_detail::from_text(f.ref, env, "CANOPY_SEED");
}

inline std::string render_config(const std::vector<Section>& sections) {
  std::string out;
  for (const auto& s : sections) {
    for (const auto& f : s.fields) out += s.prefix + "." + f.key + " = " + config_detail::to_text(f.ref) + "\n";
  }
  return out;
}

}  // namespace canopy

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "canopy/adam.hpp"
#include "canopy/model.hpp"
#include "canopy/raster.hpp"

// Weight container: a one-line JSON manifest, a '\0' byte, then the raw
// little-endian float32 payload of every tensor in manifest order.
// Optional optimizer moments follow the parameters as extra tensors named
// "optimizer.m/<param>" and "optimizer.v/<param>".

namespace canopy {

inline constexpr const char* kWeightsMagic = "CANOPY-WEIGHTS";
inline constexpr int kWeightsVersion = 1;

struct Checkpoint {
  ModelParams model;
  std::optional<AdamState<float>> optimizer;
};

inline nlohmann::json meta_to_json(const ModelMeta& m) {
  return {{"format_version", m.format_version},
          {"input_channels", m.input_channels},
          {"width_divisor", m.width_divisor},
          {"rgb_mean", m.rgb_mean},
          {"nir_offset", m.nir_offset},
          {"ndvi_scale", m.ndvi_scale},
          {"bn_momentum", m.bn_momentum},
          {"bn_epsilon", m.bn_epsilon},
          {"seed", m.seed}};
}

inline ModelMeta meta_from_json(const nlohmann::json& j) {
  ModelMeta m;
  m.format_version = j.at("format_version").get<int>();
  m.input_channels = j.at("input_channels").get<int>();
  m.width_divisor = j.at("width_divisor").get<int>();
  m.rgb_mean = j.at("rgb_mean").get<std::array<double, 3>>();
  m.nir_offset = j.at("nir_offset").get<double>();
  m.ndvi_scale = j.at("ndvi_scale").get<double>();
  m.bn_momentum = j.at("bn_momentum").get<double>();
  m.bn_epsilon = j.at("bn_epsilon").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json h;
  h["magic"] = kWeightsMagic;
  h["version"] = kWeightsVersion;
  h["dtype"] = "float32";
  h["meta"] = meta_to_json(ck.model.meta);
  auto tensors = nlohmann::json::array();
  std::vector<const Tensor<float>*> payload;
  const auto& params = ck.model.params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({{"name", params.names()[i]},
                       {"shape", params[i].value().shape()},
                       {"trainable", params[i].requires_grad()}});
    payload.push_back(&params[i].value());
  }
  if (ck.optimizer) {
    const auto& opt = *ck.optimizer;
    h["optimizer"] = {{"step", opt.step},
                      {"lr", opt.config.lr},
                      {"beta1", opt.config.beta1},
                      {"beta2", opt.config.beta2},
                      {"epsilon", opt.config.epsilon}};
    for (const auto* moments : {&opt.first_moment, &opt.second_moment}) {
      const std::string prefix = moments == &opt.first_moment ? "optimizer.m/" : "optimizer.v/";
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto it = moments->find(params.names()[i]);
        if (it == moments->end()) continue;
        tensors.push_back({{"name", prefix + it->first}, {"shape", it->second.shape()}, {"trainable", false}});
        payload.push_back(&it->second);
      }
    }
  }
  h["tensors"] = tensors;
  std::string out = h.dump();
  out.push_back('\0');
  for (const auto* t : payload)
    for (float v : t->data()) io_detail::append_f32(out, v);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "weights") {
  auto [h, payload] = io_detail::split_header(bytes, what);
  Checkpoint ck;
  try {
    if (h.at("magic").get<std::string>() != kWeightsMagic) throw MalformedHeader(what + ": bad magic");
    if (h.at("version").get<int>() != kWeightsVersion) throw MalformedHeader(what + ": unsupported version");
    if (h.at("dtype").get<std::string>() != "float32") throw MalformedHeader(what + ": unsupported dtype");
    ck.model.meta = meta_from_json(h.at("meta"));
    std::size_t expected = 0;
    for (const auto& t : h.at("tensors")) expected += 4 * shape_size(t.at("shape").get<Shape>());
    if (payload.size() < expected) {
      throw TruncatedPayload(what + ": payload has " + std::to_string(payload.size()) + " bytes, manifest implies " +
                             std::to_string(expected));
    }
    if (payload.size() > expected) throw MalformedHeader(what + ": trailing bytes after payload");
    if (h.contains("optimizer")) {
      AdamState<float> opt;
      const auto& o = h.at("optimizer");
      opt.step = o.at("step").get<std::uint64_t>();
      opt.config = {o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                    o.at("epsilon").get<double>()};
      ck.optimizer = std::move(opt);
    }
    const char* p = payload.data();
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      Tensor<float> v(shape);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = io_detail::read_f32(p + 4 * i);
      p += 4 * v.size();
      if (name.rfind("optimizer.m/", 0) == 0 || name.rfind("optimizer.v/", 0) == 0) {
        if (!ck.optimizer) throw MalformedHeader(what + ": optimizer tensor without optimizer section");
        auto& dst = name[10] == 'm' ? ck.optimizer->first_moment : ck.optimizer->second_moment;
        dst.emplace(name.substr(12), std::move(v));
      } else {
        ck.model.params.add(name, std::move(v), t.at("trainable").get<bool>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw MalformedHeader(what + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw MalformedHeader(what + ": " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  io_detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io_detail::read_file(path), path.string());
}

inline void save_model(const std::filesystem::path& path, const ModelParams& mp) {
  save_checkpoint(path, Checkpoint{mp, std::nullopt});
}

// Loads weights and checks them against the architecture they claim.
inline ModelParams load_model(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  const auto reference = build_model(0, ck.model.meta.width_divisor);
  if (reference.params.names() != ck.model.params.names()) {
    throw MalformedHeader(path.string() + ": parameter set does not match the network architecture");
  }
  for (std::size_t i = 0; i < reference.params.size(); ++i) {
    if (reference.params[i].shape() != ck.model.params[i].shape()) {
      throw MalformedHeader(path.string() + ": wrong shape for " + reference.params.names()[i]);
    }
  }
  return std::move(ck.model);
}

}  // namespace canopy

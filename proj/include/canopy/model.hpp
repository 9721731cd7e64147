#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "canopy/autodiff.hpp"
#include "canopy/ops.hpp"
#include "canopy/rng.hpp"

namespace canopy {

// Named parameters in canonical (insertion) order.
template <class T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value, bool trainable) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(Var<T>::leaf(std::move(value), trainable));
    return vars_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return vars_[it->second];
  }
  const Var<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return vars_.size(); }
  Var<T>& operator[](std::size_t i) { return vars_[i]; }
  const Var<T>& operator[](std::size_t i) const { return vars_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  // Deep copy; the copy shares no nodes with this store.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      out.add(names_[i], vars_[i].value().template cast<U>(), vars_[i].requires_grad());
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::map<std::string, std::size_t> index_;
};

// Input normalization constants and architecture knobs stored with the
// weights so data preparation and the network never disagree.
struct ModelMeta {
  int format_version = 1;
  int input_channels = 5;
  // Channel widths of the reference architecture are divided by this
  // (minimum one channel). 1 is the reference network.
  int width_divisor = 1;
  std::array<double, 3> rgb_mean{123.68, 116.779, 103.939};
  double nir_offset = 127.5;
  double ndvi_scale = 127.5;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

template <class T>
struct BasicModelParams {
  ParamStore<T> params;
  ModelMeta meta;

  template <class U>
  BasicModelParams<U> cast() const {
    return {params.template cast<U>(), meta};
  }
};

using ModelParams = BasicModelParams<float>;

template <class T>
struct ModelOutputVar {
  Var<T> confidence;  // [N,H,W,1], unbounded
  Var<T> attention;   // [N,H,W,1], in (0,1)
};

struct ModelOutput {
  Tensor<float> confidence;
  Tensor<float> attention;
};

namespace arch {

struct ConvSpec {
  std::string name;  // prefix, e.g. "backbone.block1.conv1"
  std::size_t k, cin, cout;
  bool batchnorm;
};

inline std::size_t width(std::size_t ref, int divisor) {
  return std::max<std::size_t>(1, ref / static_cast<std::size_t>(divisor));
}

// Backbone blocks: reference output channels per conv.
inline const std::vector<std::vector<std::size_t>>& backbone_plan() {
  static const std::vector<std::vector<std::size_t>> plan = {
      {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
  return plan;
}

// Decoder blocks: (kernel, reference channels) per conv.
inline const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& decoder_plan() {
  static const std::vector<std::vector<std::pair<std::size_t, std::size_t>>> plan = {
      {{1, 256}, {3, 256}},
      {{1, 128}, {3, 128}},
      {{1, 64}, {3, 64}, {3, 32}},
      {{1, 32}, {3, 32}, {3, 32}}};
  return plan;
}

// Every conv of the network in canonical order.
inline std::vector<ConvSpec> conv_specs(const ModelMeta& meta) {
  const int div = meta.width_divisor;
  std::vector<ConvSpec> specs;
  std::size_t cin = static_cast<std::size_t>(meta.input_channels);
  std::vector<std::size_t> taps;  // output channels of the last conv per block
  const auto& bb = backbone_plan();
  for (std::size_t b = 0; b < bb.size(); ++b) {
    for (std::size_t j = 0; j < bb[b].size(); ++j) {
      const std::size_t cout = width(bb[b][j], div);
      specs.push_back({"backbone.block" + std::to_string(b + 1) + ".conv" +
                           std::to_string(j + 1),
                       3, cin, cout, true});
      cin = cout;
    }
    taps.push_back(cin);
  }
  std::size_t dec_out = 0;
  for (const std::string head : {"attention_decoder", "confidence_decoder"}) {
    std::size_t x = taps[4];
    const auto& dp = decoder_plan();
    for (std::size_t b = 0; b < dp.size(); ++b) {
      std::size_t c = x + taps[3 - b];  // upsampled x concatenated with the skip tap
      for (std::size_t j = 0; j < dp[b].size(); ++j) {
        const std::size_t cout = width(dp[b][j].second, div);
        specs.push_back({head + ".block" + std::to_string(b + 1) + ".conv" +
                             std::to_string(j + 1),
                         dp[b][j].first, c, cout, true});
        c = cout;
      }
      x = c;
    }
    dec_out = x;
  }
  specs.push_back({"attention_head.conv", 1, dec_out, 1, true});
  specs.push_back({"confidence_head.conv", 1, dec_out, 1, false});
  return specs;
}

inline std::string bn_name(const std::string& conv_prefix) {
  // "x.block1.conv2" -> "x.block1.bn2"; heads use "x.bn".
  auto pos = conv_prefix.rfind(".conv");
  return conv_prefix.substr(0, pos) + ".bn" + conv_prefix.substr(pos + 5);
}

}  // namespace arch

// Glorot-uniform conv weights (fan = k*k*channels), zero biases, batchnorm
// gamma 1, beta 0, running mean 0, running variance 1.
inline ModelParams build_model(std::uint64_t seed, int width_divisor = 1) {
  if (width_divisor < 1) throw InvalidArgument("width_divisor must be >= 1");
  ModelParams mp;
  mp.meta.width_divisor = width_divisor;
  mp.meta.seed = seed;
  Rng rng(seed);
  for (const auto& s : arch::conv_specs(mp.meta)) {
    const double fan_in = static_cast<double>(s.k * s.k * s.cin);
    const double fan_out = static_cast<double>(s.k * s.k * s.cout);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<float> w({s.k, s.k, s.cin, s.cout});
    for (auto& v : w.storage()) v = static_cast<float>(rng.uniform(-limit, limit));
    mp.params.add(s.name + ".weight", std::move(w), true);
    mp.params.add(s.name + ".bias", Tensor<float>({s.cout}), true);
    if (s.batchnorm) {
      const auto bn = arch::bn_name(s.name);
      mp.params.add(bn + ".gamma", Tensor<float>({s.cout}, 1.0f), true);
      mp.params.add(bn + ".beta", Tensor<float>({s.cout}), true);
      mp.params.add(bn + ".moving_mean", Tensor<float>({s.cout}), false);
      mp.params.add(bn + ".moving_variance", Tensor<float>({s.cout}, 1.0f), false);
    }
  }
  return mp;
}

namespace detail {

template <class T>
class ForwardContext {
 public:
  ForwardContext(BasicModelParams<T>& mp, Mode mode) : mp_(mp), mode_(mode) {}

  Var<T> conv(const std::string& prefix, const Var<T>& x) {
    return conv2d(x, mp_.params.at(prefix + ".weight"), mp_.params.at(prefix + ".bias"));
  }

  Var<T> bn(const std::string& conv_prefix, const Var<T>& x) {
    const auto name = arch::bn_name(conv_prefix);
    auto& p = mp_.params;
    return batchnorm(x, p.at(name + ".gamma"), p.at(name + ".beta"),
                     p.at(name + ".moving_mean").mutable_value(),
                     p.at(name + ".moving_variance").mutable_value(), mode_,
                     mp_.meta.bn_momentum, mp_.meta.bn_epsilon);
  }

  Var<T> conv_bn_relu(const std::string& prefix, const Var<T>& x) {
    return relu(bn(prefix, conv(prefix, x)));
  }

  // Returns the taps after conv12, conv22, conv33, conv43, conv53.
  std::vector<Var<T>> backbone(const Var<T>& input) {
    std::vector<Var<T>> taps;
    Var<T> x = input;
    const auto& plan = arch::backbone_plan();
    for (std::size_t b = 0; b < plan.size(); ++b) {
      if (b > 0) x = maxpool2(x);
      for (std::size_t j = 0; j < plan[b].size(); ++j) {
        x = conv_bn_relu("backbone.block" + std::to_string(b + 1) + ".conv" +
                             std::to_string(j + 1),
                         x);
      }
      taps.push_back(x);
    }
    return taps;
  }

  Var<T> decoder(const std::string& head, const std::vector<Var<T>>& taps) {
    Var<T> x = taps[4];
    const auto& plan = arch::decoder_plan();
    for (std::size_t b = 0; b < plan.size(); ++b) {
      x = concat_channels(upsample2(x), taps[3 - b]);
      for (std::size_t j = 0; j < plan[b].size(); ++j) {
        x = conv_bn_relu(head + ".block" + std::to_string(b + 1) + ".conv" +
                             std::to_string(j + 1),
                         x);
      }
    }
    return x;
  }

 private:
  BasicModelParams<T>& mp_;
  Mode mode_;
};

}  // namespace detail

inline void check_model_input(const Shape& shape, int channels) {
  if (shape.size() != 4) {
    throw InvalidArgument("model input must be N,H,W,C; got " + shape_str(shape));
  }
  if (shape[1] == 0 || shape[2] == 0 || shape[1] % 16 || shape[2] % 16) {
    throw InvalidArgument("model input height and width must be positive multiples of 16 "
                          "(four 2x poolings); got " + shape_str(shape));
  }
  if (shape[3] != static_cast<std::size_t>(channels)) {
    throw InvalidArgument("model input must have " + std::to_string(channels) +
                          " channels; got " + shape_str(shape));
  }
}

// HR-SFANet: shared backbone, two decoders, attention-gated confidence.
// Training mode updates the batchnorm running statistics in `mp`.
template <class T>
ModelOutputVar<T> forward(BasicModelParams<T>& mp, const Var<T>& x, Mode mode) {
  check_model_input(x.shape(), mp.meta.input_channels);
  detail::ForwardContext<T> ctx(mp, mode);
  const auto taps = ctx.backbone(x);
  Var<T> att = ctx.decoder("attention_decoder", taps);
  att = sigmoid(ctx.bn("attention_head.conv", ctx.conv("attention_head.conv", att)));
  Var<T> conf = ctx.decoder("confidence_decoder", taps);
  conf = ctx.conv("confidence_head.conv", multiply(att, conf));
  return {conf, att};
}

// Inference on frozen weights. Does not modify `mp` and records no graph,
// so concurrent calls on the same parameters are safe.
inline ModelOutput infer(const ModelParams& mp, const Tensor<float>& x) {
  NoGradGuard guard;
  // Inference mode only reads the running statistics.
  auto& params = const_cast<ModelParams&>(mp);
  auto out = forward(params, Var<float>::leaf(x), Mode::kInfer);
  return {out.confidence.value(), out.attention.value()};
}

}  // namespace canopy

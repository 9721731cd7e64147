#pragma once

// Small confidence models for tiling tests. Both see only a bounded
// neighborhood of each pixel, so tiles with a wide enough overlap must
// reproduce the whole-image result exactly.

#include <vector>

#include "canopy/model.hpp"
#include "canopy/ops.hpp"
#include "canopy/rng.hpp"

namespace surrogate {

using namespace canopy;

// Random conv -> relu stack without pooling. Receptive field radius is the
// sum of the kernel radii.
class ConvStack {
 public:
  ConvStack(std::uint64_t seed, std::vector<std::size_t> kernels, std::size_t width = 4) {
    Rng rng(seed);
    std::size_t cin = 5;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      const std::size_t k = kernels[i];
      const std::size_t cout = i + 1 == kernels.size() ? 1 : width;
      Tensor<float> w({k, k, cin, cout}), b({cout});
      const double lim = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
      for (auto& v : w.storage()) v = static_cast<float>(rng.uniform(-lim, lim));
      for (auto& v : b.storage()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
      layers_.push_back({std::move(w), std::move(b)});
      radius_ += k / 2;
      cin = cout;
    }
  }

  Tensor<float> confidence(const Tensor<float>& x) const {
    NoGradGuard guard;
    auto h = Var<float>::leaf(x);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = conv2d(h, Var<float>::leaf(layers_[i].first), Var<float>::leaf(layers_[i].second));
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h.value();
  }
  std::size_t size_multiple() const { return 1; }
  const ModelMeta& meta() const { return meta_; }
  std::size_t radius() const { return radius_; }

 private:
  std::vector<std::pair<Tensor<float>, Tensor<float>>> layers_;
  ModelMeta meta_;
  std::size_t radius_ = 0;
};

// Box-blurred NDVI channel: peaks at the centers of round vegetated blobs.
class NdviBlur {
 public:
  explicit NdviBlur(std::size_t radius = 4, int passes = 2) : radius_(radius), passes_(passes) {}

  Tensor<float> confidence(const Tensor<float>& x) const {
    const std::size_t h = x.dim(1), w = x.dim(2), k = 2 * radius_ + 1;
    Tensor<float> cur({1, h, w, 1});
    for (std::size_t i = 0; i < h * w; ++i) cur[i] = x[i * 5 + 4] / 127.5f;
    Tensor<float> box({k, k, 1, 1}, 1.0f / static_cast<float>(k * k));
    NoGradGuard guard;
    for (int p = 0; p < passes_; ++p) {
      cur = conv2d(Var<float>::leaf(cur), Var<float>::leaf(box), Var<float>::leaf(Tensor<float>({1}))).value();
    }
    return cur;
  }
  std::size_t size_multiple() const { return 1; }
  const ModelMeta& meta() const { return meta_; }
  std::size_t receptive_radius() const { return radius_ * static_cast<std::size_t>(passes_); }

 private:
  std::size_t radius_;
  int passes_;
  ModelMeta meta_;
};

}  // namespace surrogate

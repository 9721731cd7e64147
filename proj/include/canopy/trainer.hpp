#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/adam.hpp"
#include "canopy/datapipe.hpp"
#include "canopy/model.hpp"

namespace canopy {

struct TrainConfig {
  std::size_t batch_size = 8;
  int epochs = 500;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double alpha = 0.01;
  double tau = 0.001;
  double sigma_m = 1.8;
  double val_fraction = 0.10;
  std::uint64_t seed = 0;
  double subsample_fraction = 1.0;
  // Not part of the reference recipe; see desk_train_config().
  int width_divisor = 1;
  // Augmented variants of each training tile visited per epoch. 8 is the
  // full eight-fold set; fewer rotates through the variants across epochs.
  int variants_per_epoch = 8;

  void validate() const {
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(lr >= 0.0)) throw InvalidArgument("lr must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw InvalidArgument("Adam betas must be in (0,1)");
    }
    if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be > 0");
    if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidArgument("tau must be in (0,1)");
    if (!(sigma_m > 0.0)) throw InvalidArgument("sigma_m must be > 0");
    if (!(val_fraction > 0.0 && val_fraction <= 1.0)) throw InvalidArgument("val_fraction must be in (0,1]");
    if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0)) {
      throw InvalidArgument("subsample_fraction must be in (0,1]");
    }
    if (width_divisor < 1) throw InvalidArgument("width_divisor must be >= 1");
    if (variants_per_epoch < 1 || variants_per_epoch > 8) throw InvalidArgument("variants_per_epoch must be in 1..8");
  }
};

// Settings that make the synthetic benchmark trainable on a single CPU in
// minutes: a slimmer network, a faster learning rate and one augmented
// variant per tile per epoch. With only a couple of dozen tiles the number
// of optimizer steps is what limits learning, hence batches of one.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch_size = 1;
  c.epochs = 150;
  c.width_divisor = 8;
  c.lr = 1e-3;
  c.variants_per_epoch = 1;
  return c;
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  std::size_t train_tiles = 0;
  std::size_t val_tiles = 0;
};

// L = MSE(confidence, target) + alpha * BCE(attention, mask).
template <class T>
Var<T> combined_loss(const Var<T>& confidence, const Var<T>& attention, const Tensor<T>& target,
                     const Tensor<T>& mask, double alpha) {
  const Var<T> mse = mse_loss(confidence, target);
  if (alpha == 0.0) return mse;
  return add(mse, scale(bce_loss(attention, mask), alpha));
}

namespace detail {

struct Batch {
  Tensor<float> input, target, mask;
};

// Stacks (tile, variant) items into one batch.
inline Batch make_batch(const std::vector<Sample>& data, const std::vector<std::pair<std::size_t, int>>& items,
                        const ModelMeta& meta, double sigma_m, double tau) {
  const std::size_t n = items.size();
  const std::size_t h = data[items[0].first].tile.height, w = data[items[0].first].tile.width;
  Batch b{Tensor<float>({n, h, w, 5}), Tensor<float>({n, h, w, 1}), Tensor<float>({n, h, w, 1})};
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data[items[i].first];
    const auto v = Variant::from_index(items[i].second);
    const RasterTile tile = transform_tile(s.tile, v);
    const PointSet pts = transform_points(s.points, w, v);
    const Tensor<float> x = normalize(tile, meta);
    std::copy(x.data().begin(), x.data().end(), b.input.ptr() + i * plane * 5);
    const Grid target = build_target(pts, h, w, sigma_pixels(sigma_m, s.tile.geo.pixel_size));
    const Grid mask = build_attention_mask(target, tau);
    std::copy(target.data.begin(), target.data.end(), b.target.ptr() + i * plane);
    std::copy(mask.data.begin(), mask.data.end(), b.mask.ptr() + i * plane);
  }
  return b;
}

inline void check_dataset(const std::vector<Sample>& data) {
  if (data.empty()) throw InvalidArgument("training dataset is empty");
  const std::size_t size = data[0].tile.width;
  for (const auto& s : data) {
    if (s.tile.width != s.tile.height) throw InvalidArgument("training tiles must be square");
    if (s.tile.width != size) throw InvalidArgument("training tiles must all have the same size");
    if (size % 16) throw InvalidArgument("training tile size must be a multiple of 16");
    if (s.points.frame != PointFrame::Pixel) throw InvalidArgument("training points must be in the pixel frame");
  }
}

}  // namespace detail

// Mean combined loss over `items` in inference mode, batched.
inline double evaluate_loss(const ModelParams& mp, const std::vector<Sample>& data,
                            const std::vector<std::pair<std::size_t, int>>& items, const TrainConfig& cfg) {
  NoGradGuard guard;
  auto& params = const_cast<ModelParams&>(mp);
  double total = 0.0;
  for (std::size_t start = 0; start < items.size(); start += cfg.batch_size) {
    const std::vector<std::pair<std::size_t, int>> chunk(
        items.begin() + static_cast<long>(start),
        items.begin() + static_cast<long>(std::min(items.size(), start + cfg.batch_size)));
    const auto b = detail::make_batch(data, chunk, mp.meta, cfg.sigma_m, cfg.tau);
    const auto out = forward(params, Var<float>::leaf(b.input), Mode::kInfer);
    const auto loss = combined_loss(out.confidence, out.attention, b.target, b.mask, cfg.alpha);
    total += static_cast<double>(loss.value()[0]) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(items.size());
}

struct TrainResult {
  ModelParams model;  // best-validation weights
  TrainReport report;
  ModelParams last;            // weights after the final epoch
  AdamState<float> optimizer;  // state after the final epoch
};

using EpochCallback = std::function<void(const EpochRecord&, bool improved)>;

// Trains from scratch on pixel-frame samples. The split, the subsample,
// the initialization and the batch order all derive from cfg.seed.
inline TrainResult train(const std::vector<Sample>& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::check_dataset(data);
  const Split split = split_train_val(data.size(), cfg.val_fraction, cfg.seed);
  if (split.train.empty()) throw InvalidArgument("training split is empty; add tiles or lower val_fraction");
  if (split.val.empty()) throw InvalidArgument("validation split is empty");

  std::vector<std::size_t> train_idx = split.train;
  const std::size_t keep = subsample_count(train_idx.size(), cfg.subsample_fraction);
  if (keep < train_idx.size()) {
    Rng sub_rng(cfg.seed + 1);
    sub_rng.shuffle(train_idx.begin(), train_idx.end());
    train_idx.resize(keep);
    std::sort(train_idx.begin(), train_idx.end());
  }

  std::vector<std::pair<std::size_t, int>> val_items;
  for (auto i : split.val) val_items.push_back({i, 0});

  TrainResult res;
  ModelParams mp = build_model(cfg.seed, cfg.width_divisor);
  AdamState<float> opt;
  opt.config = {cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon};
  Rng order_rng(cfg.seed + 2);
  res.report.train_tiles = train_idx.size();
  res.report.val_tiles = split.val.size();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::size_t, int>> items;
    for (auto i : train_idx)
      for (int j = 0; j < cfg.variants_per_epoch; ++j)
        items.push_back({i, ((epoch - 1) * cfg.variants_per_epoch + j) % 8});
    order_rng.shuffle(items.begin(), items.end());

    double total = 0.0;
    for (std::size_t start = 0; start < items.size(); start += cfg.batch_size) {
      const std::vector<std::pair<std::size_t, int>> chunk(
          items.begin() + static_cast<long>(start),
          items.begin() + static_cast<long>(std::min(items.size(), start + cfg.batch_size)));
      const auto b = detail::make_batch(data, chunk, mp.meta, cfg.sigma_m, cfg.tau);
      mp.params.zero_grad();
      const auto out = forward(mp, Var<float>::leaf(b.input), Mode::kTrain);
      const auto loss = combined_loss(out.confidence, out.attention, b.target, b.mask, cfg.alpha);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      backward(loss);
      adam_step(mp.params, opt);
      total += lv * static_cast<double>(chunk.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(items.size());
    rec.val_loss = evaluate_loss(mp, data, val_items, cfg);
    if (!std::isfinite(rec.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool improved = rec.val_loss < res.report.best_val_loss;
    if (improved) {
      res.report.best_val_loss = rec.val_loss;
      res.report.best_epoch = epoch;
      res.model = mp.cast<float>();
    }
    res.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, improved);
  }
  mp.params.zero_grad();
  res.last = std::move(mp);
  res.optimizer = std::move(opt);
  return res;
}

inline std::string train_report_csv(const TrainReport& r) {
  std::string out = "epoch,train_loss,val_loss,seconds\n";
  for (const auto& e : r.epochs) {
    out += std::to_string(e.epoch) + "," + io_detail::format_double(e.train_loss) + "," +
           io_detail::format_double(e.val_loss) + "," + io_detail::format_double(e.seconds) + "\n";
  }
  return out;
}

inline nlohmann::json train_report_json(const TrainReport& r) {
  nlohmann::json train = nlohmann::json::array(), val = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    train.push_back(e.train_loss);
    val.push_back(e.val_loss);
  }
  return {{"best_epoch", r.best_epoch},   {"best_val_loss", r.best_val_loss},
          {"best_checkpoint", r.best_checkpoint}, {"train_tiles", r.train_tiles},
          {"val_tiles", r.val_tiles},     {"train_loss", train},
          {"val_loss", val}};
}

}  // namespace canopy

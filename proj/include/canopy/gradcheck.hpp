#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/model.hpp"
#include "canopy/trainer.hpp"

// Central finite-difference checks of every differentiable op and of the
// full network loss, in double precision.

namespace canopy {

struct GradcheckCase {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t checked = 0;  // scalar entries compared
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  double tolerance = 1e-3;
  double seconds = 0.0;
  bool passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed; });
  }
};

struct GradcheckOptions {
  double step = 1e-7;
  double tolerance = 1e-3;
  // Gradient norms below this are treated as zero: a bias feeding a
  // batchnorm has an exactly zero gradient that differencing only
  // reproduces to rounding.
  double zero_floor = 1e-4;
  double kink_margin = 1e-5;
  std::size_t samples_per_tensor = 12;
  std::size_t model_samples_per_tensor = 3;
};

namespace gradcheck_detail {

using D = double;
using Fn = std::function<Var<D>(const std::vector<Var<D>>&)>;

inline Tensor<D> random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(shape);
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Values at least `gap` away from zero, so ReLU kinks stay out of reach.
inline Tensor<D> away_from_zero(Rng& rng, const Shape& shape, double gap = 0.05) {
  Tensor<D> t(shape);
  for (auto& v : t.storage()) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// Scalarizes a tensor-valued op with a fixed random projection.
inline Fn projected(const Fn& op, const Shape& out_shape, Rng& rng) {
  auto weights = Var<D>::leaf(random_tensor(rng, out_shape), false);
  return [op, weights](const std::vector<Var<D>>& in) { return sum(multiply(op(in), weights)); };
}

inline GradcheckCase check(const std::string& name, std::uint64_t seed, std::vector<Var<D>> inputs, const Fn& loss,
                           Rng& rng, std::size_t samples, const GradcheckOptions& opt) {
  for (auto& v : inputs) v.zero_grad();
  backward(loss(inputs));
  GradcheckCase res{name, seed, 0, 0.0, true};
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const Tensor<D> analytic = in.grad_or_zero();
    const std::size_t n = in.value().size();
    std::vector<std::size_t> idx;
    if (n <= samples) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      auto perm = rng.permutation(n);
      idx.assign(perm.begin(), perm.begin() + static_cast<long>(samples));
    }
    double diff2 = 0.0, an2 = 0.0, fd2 = 0.0;
    for (auto i : idx) {
      auto& value = in.mutable_value();
      const double orig = value[i];
      double lp, lm;
      {
        NoGradGuard guard;
        value[i] = orig + opt.step;
        lp = loss(inputs).value()[0];
        value[i] = orig - opt.step;
        lm = loss(inputs).value()[0];
        value[i] = orig;
      }
      const double fd = (lp - lm) / (2.0 * opt.step);
      const double an = analytic[i];
      diff2 += (fd - an) * (fd - an);
      an2 += an * an;
      fd2 += fd * fd;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(fd2), opt.zero_floor});
    const double rel = std::sqrt(diff2) / denom;
    res.checked += idx.size();
    res.max_rel_error = std::max(res.max_rel_error, rel);
    if (!(rel < opt.tolerance)) res.passed = false;
  }
  return res;
}

inline Var<D> leaf(Tensor<D> t) { return Var<D>::leaf(std::move(t), true); }

}  // namespace gradcheck_detail

// The whole suite for one seed. Inputs stay within 2x16x16x5.
inline std::vector<GradcheckCase> gradcheck_seed(std::uint64_t seed, const GradcheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  Rng rng(seed);
  std::vector<GradcheckCase> out;
  const std::size_t k = opt.samples_per_tensor;
  auto run = [&](const std::string& name, std::vector<Var<D>> in, const Fn& f) {
    out.push_back(check(name, seed, std::move(in), f, rng, k, opt));
  };

  for (std::size_t ks : {1, 3, 5}) {
    const Shape xs{2, 6, 7, 3};
    auto op = [](const std::vector<Var<D>>& v) { return conv2d(v[0], v[1], v[2]); };
    run("conv2d_k" + std::to_string(ks),
        {leaf(random_tensor(rng, xs)), leaf(random_tensor(rng, {ks, ks, 3, 4})), leaf(random_tensor(rng, {4}))},
        projected(op, {2, 6, 7, 4}, rng));
  }
  run("maxpool2", {leaf(random_tensor(rng, {2, 8, 6, 3}))},
      projected([](const std::vector<Var<D>>& v) { return maxpool2(v[0]); }, {2, 4, 3, 3}, rng));
  run("upsample2", {leaf(random_tensor(rng, {2, 4, 3, 3}))},
      projected([](const std::vector<Var<D>>& v) { return upsample2(v[0]); }, {2, 8, 6, 3}, rng));
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    auto rm = std::make_shared<Tensor<D>>(random_tensor(rng, {3}));
    auto rv = std::make_shared<Tensor<D>>(random_tensor(rng, {3}, 0.5, 2.0));
    auto op = [rm, rv, mode](const std::vector<Var<D>>& v) {
      // Training mode updates copies so the inference buffers stay fixed.
      Tensor<D> m = *rm, s = *rv;
      return batchnorm(v[0], v[1], v[2], mode == Mode::kTrain ? m : *rm, mode == Mode::kTrain ? s : *rv, mode,
                       0.99, 1e-3);
    };
    run(mode == Mode::kTrain ? "batchnorm_train" : "batchnorm_infer",
        {leaf(random_tensor(rng, {2, 4, 4, 3}, -2.0, 2.0)), leaf(random_tensor(rng, {3}, 0.5, 1.5)),
         leaf(random_tensor(rng, {3}))},
        projected(op, {2, 4, 4, 3}, rng));
  }
  run("relu", {leaf(away_from_zero(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return relu(v[0]); }, {2, 4, 4, 3}, rng));
  run("sigmoid", {leaf(random_tensor(rng, {2, 4, 4, 3}, -4.0, 4.0))},
      projected([](const std::vector<Var<D>>& v) { return sigmoid(v[0]); }, {2, 4, 4, 3}, rng));
  run("concat_channels", {leaf(random_tensor(rng, {2, 4, 4, 2})), leaf(random_tensor(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return concat_channels(v[0], v[1]); }, {2, 4, 4, 5}, rng));
  run("multiply", {leaf(random_tensor(rng, {2, 4, 4, 3})), leaf(random_tensor(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return multiply(v[0], v[1]); }, {2, 4, 4, 3}, rng));
  run("multiply_broadcast", {leaf(random_tensor(rng, {2, 4, 4, 1})), leaf(random_tensor(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return multiply(v[0], v[1]); }, {2, 4, 4, 3}, rng));
  run("add", {leaf(random_tensor(rng, {2, 4, 4, 3})), leaf(random_tensor(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return add(v[0], v[1]); }, {2, 4, 4, 3}, rng));
  run("scale", {leaf(random_tensor(rng, {2, 4, 4, 3}))},
      projected([](const std::vector<Var<D>>& v) { return scale(v[0], -1.7); }, {2, 4, 4, 3}, rng));
  run("sum", {leaf(random_tensor(rng, {2, 4, 4, 3}))}, [](const std::vector<Var<D>>& v) { return sum(v[0]); });

  const Tensor<D> target = random_tensor(rng, {2, 8, 8, 1}, 0.0, 1.0);
  Tensor<D> mask({2, 8, 8, 1});
  for (auto& v : mask.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  run("mse_loss", {leaf(random_tensor(rng, {2, 8, 8, 1}))},
      [target](const std::vector<Var<D>>& v) { return mse_loss(v[0], target); });
  run("bce_loss", {leaf(random_tensor(rng, {2, 8, 8, 1}, 0.05, 0.95))},
      [mask](const std::vector<Var<D>>& v) { return bce_loss(v[0], mask); });
  run("combined_loss",
      {leaf(random_tensor(rng, {2, 8, 8, 1})), leaf(random_tensor(rng, {2, 8, 8, 1}, 0.05, 0.95))},
      [target, mask](const std::vector<Var<D>>& v) { return combined_loss(v[0], v[1], target, mask, 0.01); });

  // Full network, slimmed to keep the suite fast. Training-mode batchnorm
  // over a batch of two keeps every layer's statistics well defined. Inputs
  // that put any ReLU or pooling tie within `kink_margin` of switching are
  // redrawn: differencing across a kink measures the kink, not the gradient.
  {
    auto mp = std::make_shared<BasicModelParams<D>>(build_model(seed, 16).cast<D>());
    const Tensor<D> t = random_tensor(rng, {2, 16, 16, 1}, 0.0, 1.0);
    Tensor<D> m({2, 16, 16, 1});
    for (auto& v : m.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    auto f = [mp, t, m](const std::vector<Var<D>>& v) {
      const auto o = forward(*mp, v[0], Mode::kTrain);
      return combined_loss(o.confidence, o.attention, t, m, 0.01);
    };
    std::vector<Var<D>> in;
    for (int attempt = 0;; ++attempt) {
      in = {leaf(random_tensor(rng, {2, 16, 16, 5}, -2.0, 2.0))};
      detail::KinkProbe probe;
      detail::kink_probe() = &probe;
      {
        NoGradGuard guard;
        f(in);
      }
      detail::kink_probe() = nullptr;
      if (std::min(probe.min_relu_input, probe.min_pool_gap) >= opt.kink_margin) break;
      if (attempt == 50) throw NumericError("gradcheck: no kink-free network input found");
    }
    for (std::size_t i = 0; i < mp->params.size(); ++i)
      if (mp->params[i].requires_grad()) in.push_back(mp->params[i]);
    out.push_back(check("hrsfanet_loss", seed, in, f, rng, opt.model_samples_per_tensor, opt));
  }
  return out;
}

inline GradcheckReport run_gradcheck(const std::vector<std::uint64_t>& seeds, const GradcheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  rep.tolerance = opt.tolerance;
  for (auto s : seeds) {
    auto cases = gradcheck_seed(s, opt);
    rep.cases.insert(rep.cases.end(), cases.begin(), cases.end());
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline nlohmann::json gradcheck_report_json(const GradcheckReport& r) {
  auto cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"name", c.name},
                     {"seed", c.seed},
                     {"checked", c.checked},
                     {"max_rel_error", c.max_rel_error},
                     {"passed", c.passed}});
  }
  return {{"passed", r.passed()}, {"tolerance", r.tolerance}, {"seconds", r.seconds}, {"cases", cases}};
}

}  // namespace canopy

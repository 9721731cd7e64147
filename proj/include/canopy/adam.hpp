#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "canopy/model.hpp"

namespace canopy {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

// Moment buffers keyed by parameter name; created zeroed on first update.
template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

// One bias-corrected Adam update of every trainable parameter. Parameters
// that backward never reached are updated with a zero gradient.
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i];
    if (v.requires_grad() && v.has_grad() && !v.grad().all_finite()) {
      throw NumericError("non-finite gradient in parameter " + params.names()[i]);
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& var = params[i];
    if (!var.requires_grad()) continue;
    const auto& name = params.names()[i];
    auto& value = var.mutable_value();
    auto [mit, m_new] = state.first_moment.try_emplace(name, value.shape());
    auto [vit, v_new] = state.second_moment.try_emplace(name, value.shape());
    auto& m = mit->second;
    auto& s = vit->second;
    const bool has = var.has_grad();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = has ? static_cast<double>(var.grad()[k]) : 0.0;
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double sk = c.beta2 * s[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      s[k] = static_cast<T>(sk);
      const double mhat = mk / bc1;
      const double shat = sk / bc2;
      value[k] = static_cast<T>(value[k] - c.lr * mhat / (std::sqrt(shat) + c.epsilon));
    }
  }
}

}  // namespace canopy

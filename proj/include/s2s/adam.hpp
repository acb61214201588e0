#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "s2s/params.hpp"

namespace s2s {

/// Step-decay learning-rate schedule: base * factor^floor(epoch / every).
struct StepDecay {
  double base = 1e-4;
  double factor = 0.9;
  int every_epochs = 10;

  double at(int epoch) const {
    if (every_epochs <= 0) return base;
    return base * std::pow(factor, epoch / every_epochs);
  }
};

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  StepDecay schedule;
  double learning_rate = 1e-4;
  long step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  AdamState() = default;
  explicit AdamState(StepDecay sched) : schedule(sched), learning_rate(sched.base) {}

  void set_epoch(int epoch) { learning_rate = schedule.at(epoch); }
};

/// One bias-corrected Adam update. Every parameter must carry a gradient from
/// the preceding backward pass; gradients are left in place.
template <class T>
void adam_step(ParamSet<T>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state built for a different parameter set");
  for (const auto& p : params)
    if (!p.has_grad) throw std::invalid_argument("adam_step: parameter '" + p.name + "' has no gradient");

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::size_t idx = 0;
  for (auto& p : params) {
    auto& m = state.m[idx];
    auto& v = state.v[idx];
    ++idx;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double step = state.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps);
      p.value[i] = static_cast<T>(p.value[i] - step);
    }
  }
}

}  // namespace s2s

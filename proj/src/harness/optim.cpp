#include "moelab/harness/optim.hpp"

#include <algorithm>
#include <cmath>

#include "moelab/errors.hpp"

namespace moelab::harness {

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state,
               const AdamHyper& hyper, double lr, std::size_t step) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient and parameter sizes differ");
  if (step == 0) throw ConfigError("adam_step: step counts from 1");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

double inverse_sqrt_lr(double peak, std::size_t warmup, std::size_t step) {
  if (warmup == 0) return peak;
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

double clip_grad_norm(nnet::ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.all()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (auto& [name, t] : params.all()) {
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

void Adam::step(nnet::ParamStore& params, double lr) {
  ++step_;
  for (auto& [name, t] : params.all()) {
    // Parameters outside this step's graph (e.g. unselected experts) are
    // skipped entirely, moments included.
    if (!t.has_grad()) continue;
    adam_step(t.mutable_values(), t.grad(), state_[name], hyper_, lr, step_);
  }
}

}  // namespace moelab::harness

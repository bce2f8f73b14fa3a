#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/nnet/model.hpp"

namespace moelab::harness {

struct AdamHyper {
  double lr = 1e-3;  // peak step size
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

struct AdamMoments {
  std::vector<double> m, v;
};

// One bias-corrected Adam update of `params` in place. `step` counts from 1.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state,
               const AdamHyper& hyper, double lr, std::size_t step);

// Linear warmup to `peak` over `warmup` steps, then peak * sqrt(warmup / step).
// warmup == 0 gives a constant rate.
double inverse_sqrt_lr(double peak, std::size_t warmup, std::size_t step);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(nnet::ParamStore& params, double max_norm);

class Adam {
 public:
  explicit Adam(AdamHyper hyper) : hyper_(hyper) {}

  // Applies one update to every parameter that has a gradient.
  void step(nnet::ParamStore& params, double lr);
  std::size_t steps() const { return step_; }
  const AdamHyper& hyper() const { return hyper_; }

 private:
  AdamHyper hyper_;
  std::size_t step_ = 0;
  std::map<std::string, AdamMoments> state_;
};

}  // namespace moelab::harness

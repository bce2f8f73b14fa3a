#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/ndgrad/tensor.hpp"
#include "moelab/routing/routing.hpp"

namespace moelab::objectives {

using ndgrad::Tensor;

inline constexpr double kLogEpsilon = 1e-12;

// Mean token negative log-likelihood; targets < 0 mark padding.
Tensor nmt_loss(const Tensor& logits, std::span<const std::int64_t> targets);

// Mean of -log P^t[golden] over the rows of task_probs [B x K]. Probabilities
// below 1e-12 are clamped; `clamped` reports whether that happened.
Tensor task_prediction_loss(const Tensor& task_probs, std::span<const std::size_t> golden,
                            bool* clamped = nullptr);

// N * sum_i F_i Q_i where F_i is the fraction of the rows of `probs` whose
// selection contains expert i and Q_i the mean of column i of `probs`.
// Serves as the task-level balance (one row per task decision).
Tensor load_balance_task(std::span<const std::vector<std::size_t>> selections, const Tensor& probs);

// |S| * sum_{k in S} F_k Q_k over the M token rows of `probs`, restricted to
// the candidate experts S (all experts when `candidates` is empty).
Tensor load_balance_token(std::span<const std::vector<std::size_t>> selections, const Tensor& probs,
                          std::span<const std::size_t> candidates = {});

// Mean Shannon entropy (natural log) of the rows of `probs`.
Tensor topp_entropy_loss(const Tensor& probs);

struct LossWeights {
  double alpha = 1e-2;  // task prediction
  double beta = 1e-2;   // task-level balance
  double gamma = 1e-2;  // token-level balance
  double delta = 1e-4;  // Top-p entropy

  static LossWeights multi_domain() { return {1e-2, 1e-2, 1e-2, 1e-4}; }
  static LossWeights multilingual() { return {1e-2, 5e-2, 5e-2, 1e-4}; }
  static LossWeights none() { return {0, 0, 0, 0}; }
  static LossWeights named(const std::string& preset);
};

// Undefined tensors stand for terms that do not apply to the model variant
// and contribute zero.
struct LossParts {
  Tensor nmt;
  Tensor task_prediction;
  Tensor balance_task;
  Tensor balance_token;
  Tensor entropy;
};

struct LossBreakdown {
  Tensor total;
  double nmt = 0, tp = 0, bd = 0, bt = 0, topp_entropy = 0;
  double total_value = 0;
  LossWeights weights;
  bool tp_clamped = false;

  // nmt + alpha tp + beta bd + gamma bt (+ delta entropy under Top-p).
  double recompute(routing::PolicyKind policy) const;
};

LossBreakdown combine(const LossParts& parts, const LossWeights& weights, routing::PolicyKind policy);

nlohmann::json to_json(const LossBreakdown& b);
nlohmann::json to_json(const LossWeights& w);
LossWeights weights_from_json(const nlohmann::json& j);

}  // namespace moelab::objectives

#include "moelab/objectives/losses.hpp"

#include <algorithm>

#include "moelab/errors.hpp"
#include "moelab/ndgrad/ops.hpp"

namespace moelab::objectives {

namespace nd = moelab::ndgrad;

namespace {

Tensor balance(std::span<const std::vector<std::size_t>> selections, const Tensor& probs,
               std::span<const std::size_t> candidates) {
  const auto rows = probs.rows();
  const auto n = probs.cols();
  if (rows == 0) throw ValidationError("load balance over zero decisions");
  if (selections.size() != rows) {
    throw DimensionError("load balance: " + std::to_string(selections.size()) + " selections for " +
                         std::to_string(rows) + " probability rows");
  }
  std::vector<std::uint8_t> allowed(n, candidates.empty() ? 1 : 0);
  for (auto c : candidates) {
    if (c >= n) throw RoutingError("candidate expert " + std::to_string(c) + " out of range");
    allowed[c] = 1;
  }
  const double size = candidates.empty() ? static_cast<double>(n) : static_cast<double>(candidates.size());
  std::vector<double> fraction(n, 0.0);
  for (const auto& sel : selections) {
    for (auto i : sel) {
      if (i >= n) throw RoutingError("selected expert " + std::to_string(i) + " out of range");
      if (allowed[i]) fraction[i] += 1.0;
    }
  }
  for (auto& f : fraction) f /= static_cast<double>(rows);
  auto q = nd::mean_axis(probs, 0);
  return nd::scale(nd::sum(nd::mul(q, Tensor::from({1, n}, std::move(fraction)))), size);
}

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

Tensor nmt_loss(const Tensor& logits, std::span<const std::int64_t> targets) {
  return nd::cross_entropy(logits, targets);
}

Tensor task_prediction_loss(const Tensor& task_probs, std::span<const std::size_t> golden, bool* clamped) {
  const auto k = task_probs.cols();
  if (golden.size() != task_probs.rows()) {
    throw DimensionError("task_prediction_loss: " + std::to_string(golden.size()) + " labels for " +
                         std::to_string(task_probs.rows()) + " distributions");
  }
  std::vector<std::size_t> rows(golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) {
    if (golden[i] >= k) {
      throw ValidationError("golden task " + std::to_string(golden[i]) + " outside " +
                            std::to_string(k) + " tasks");
    }
    rows[i] = i;
  }
  auto picked = nd::gather_elements(task_probs, rows, golden);
  if (clamped) {
    *clamped = std::any_of(picked.values().begin(), picked.values().end(),
                           [](double v) { return v < kLogEpsilon; });
  }
  return nd::neg(nd::mean(nd::log_clamped(picked, kLogEpsilon)));
}

Tensor load_balance_task(std::span<const std::vector<std::size_t>> selections, const Tensor& probs) {
  return balance(selections, probs, {});
}

Tensor load_balance_token(std::span<const std::vector<std::size_t>> selections, const Tensor& probs,
                          std::span<const std::size_t> candidates) {
  return balance(selections, probs, candidates);
}

Tensor topp_entropy_loss(const Tensor& probs) {
  if (probs.rows() == 0) throw ValidationError("entropy over zero tokens");
  auto plogp = nd::mul(probs, nd::log_clamped(probs, kLogEpsilon));
  return nd::scale(nd::sum(plogp), -1.0 / static_cast<double>(probs.rows()));
}

LossWeights LossWeights::named(const std::string& preset) {
  if (preset == "multi-domain") return multi_domain();
  if (preset == "multilingual") return multilingual();
  if (preset == "none") return none();
  throw ConfigError("unknown loss weight preset '" + preset + "'");
}

double LossBreakdown::recompute(routing::PolicyKind policy) const {
  double t = nmt + weights.alpha * tp + weights.beta * bd + weights.gamma * bt;
  if (policy == routing::PolicyKind::TopP) t += weights.delta * topp_entropy;
  return t;
}

LossBreakdown combine(const LossParts& parts, const LossWeights& weights, routing::PolicyKind policy) {
  if (weights.alpha < 0 || weights.beta < 0 || weights.gamma < 0 || weights.delta < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (!parts.nmt.defined()) throw ConfigError("combined objective needs the translation loss");
  if (policy == routing::PolicyKind::TopP && !parts.entropy.defined()) {
    throw ConfigError("Top-p objective needs the routing entropy term");
  }
  LossBreakdown b;
  b.weights = weights;
  Tensor total = parts.nmt;
  auto add_term = [&](const Tensor& term, double w) {
    if (term.defined()) total = nd::add(total, nd::scale(term, w));
  };
  add_term(parts.task_prediction, weights.alpha);
  add_term(parts.balance_task, weights.beta);
  add_term(parts.balance_token, weights.gamma);
  if (policy == routing::PolicyKind::TopP) add_term(parts.entropy, weights.delta);
  b.total = total;
  b.nmt = parts.nmt.item();
  b.tp = value_or_zero(parts.task_prediction);
  b.bd = value_or_zero(parts.balance_task);
  b.bt = value_or_zero(parts.balance_token);
  b.topp_entropy = value_or_zero(parts.entropy);
  b.total_value = total.item();
  return b;
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}, {"delta", w.delta}};
}

LossWeights weights_from_json(const nlohmann::json& j) {
  if (j.is_string()) return LossWeights::named(j.get<std::string>());
  LossWeights w;
  w.alpha = j.value("alpha", w.alpha);
  w.beta = j.value("beta", w.beta);
  w.gamma = j.value("gamma", w.gamma);
  w.delta = j.value("delta", w.delta);
  return w;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"nmt", b.nmt},     {"tp", b.tp},       {"bd", b.bd},
          {"bt", b.bt},       {"topp_entropy", b.topp_entropy},
          {"total", b.total_value}, {"tp_clamped", b.tp_clamped}};
}

}  // namespace moelab::objectives

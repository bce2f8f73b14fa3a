#include "moelab/routing/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/errors.hpp"

namespace moelab::routing {

namespace nd = moelab::ndgrad;

std::string to_string(PolicyKind kind) { return kind == PolicyKind::TopK ? "topk" : "topp"; }

PolicyKind policy_kind_from_string(const std::string& name) {
  if (name == "topk") return PolicyKind::TopK;
  if (name == "topp") return PolicyKind::TopP;
  throw ConfigError("unknown routing policy '" + name + "' (expected topk or topp)");
}

std::string to_string(Hierarchy h) {
  switch (h) {
    case Hierarchy::None: return "none";
    case Hierarchy::Hierarchical: return "hierarchical";
    case Hierarchy::Flat: return "flat";
  }
  return "none";
}

std::string to_string(TaskRep r) {
  switch (r) {
    case TaskRep::Mixed: return "mixed";
    case TaskRep::NonMixed: return "non-mixed";
    case TaskRep::Golden: return "golden";
  }
  return "mixed";
}

Hierarchy hierarchy_from_string(const std::string& name) {
  if (name == "none") return Hierarchy::None;
  if (name == "hierarchical") return Hierarchy::Hierarchical;
  if (name == "flat") return Hierarchy::Flat;
  throw ConfigError("unknown hierarchy mode '" + name + "'");
}

TaskRep task_rep_from_string(const std::string& name) {
  if (name == "mixed") return TaskRep::Mixed;
  if (name == "non-mixed") return TaskRep::NonMixed;
  if (name == "golden") return TaskRep::Golden;
  throw ConfigError("unknown task representation '" + name + "'");
}

std::vector<std::size_t> descending_order(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

RoutingDecision top_k_route(std::span<const double> probs, std::size_t k) {
  if (k == 0 || k > probs.size()) {
    throw ConfigError("top-k routing needs 1 <= k <= N, got k=" + std::to_string(k) +
                      " with N=" + std::to_string(probs.size()));
  }
  RoutingDecision d;
  auto order = descending_order(probs);
  d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  d.gates.assign(probs.size(), 0.0);
  // Summed in expert-index order to match the masked row normalisation.
  std::vector<std::uint8_t> chosen(probs.size(), 0);
  for (auto i : d.selected) chosen[i] = 1;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (chosen[i]) total += probs[i];
  }
  if (!(total > 0.0)) throw NumericError("top-k routing: selected probability mass is zero");
  for (auto i : d.selected) d.gates[i] = probs[i] / total;
  d.activated_count = k;
  return d;
}

RoutingDecision top_p_route(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError("top-p routing needs 0 < p <= 1, got " + std::to_string(p));
  }
  if (probs.empty()) throw ConfigError("top-p routing over zero experts");
  auto order = descending_order(probs);
  std::size_t t = 0;
  double cumulative = 0.0;
  while (t < order.size()) {
    cumulative += probs[order[t]];
    ++t;
    if (cumulative >= p) break;
  }
  if (cumulative < p) {
    // Rounding left the full mass just short of p: keep every expert with
    // nonzero probability.
    t = static_cast<std::size_t>(
        std::count_if(probs.begin(), probs.end(), [](double v) { return v > 0.0; }));
    t = std::max<std::size_t>(t, 1);
  }
  RoutingDecision d;
  d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(t));
  d.gates.assign(probs.size(), 0.0);
  for (auto i : d.selected) d.gates[i] = probs[i];
  d.activated_count = t;
  return d;
}

RoutingDecision route(std::span<const double> probs, const Policy& policy) {
  return policy.kind == PolicyKind::TopK ? top_k_route(probs, policy.k) : top_p_route(probs, policy.p);
}

Tensor router_probs(const Tensor& x, const Tensor& token_router) {
  if (x.cols() != token_router.cols()) {
    throw DimensionError("router_probs: token width " + std::to_string(x.cols()) +
                         " does not match router " + nd::to_string(token_router.shape()));
  }
  return nd::softmax(nd::matmul_nt(x, token_router), 1);
}

Tensor predict_task(const Tensor& hidden, const Tensor& task_projection) {
  if (hidden.rows() == 0) throw ValidationError("predict_task needs at least one token");
  if (hidden.cols() != task_projection.cols()) {
    throw ConfigError("predict_task: hidden width " + std::to_string(hidden.cols()) +
                      " does not match task projection " + nd::to_string(task_projection.shape()));
  }
  return nd::softmax(nd::matmul_nt(nd::maxpool(hidden, 0), task_projection), 1);
}

Tensor mixed_task_rep(const Tensor& task_probs, const Tensor& task_embeddings) {
  if (task_probs.cols() != task_embeddings.rows()) {
    throw ConfigError("mixed_task_rep: distribution over " + std::to_string(task_probs.cols()) +
                      " tasks but embedding table has " + std::to_string(task_embeddings.rows()) +
                      " rows");
  }
  return nd::matmul(task_probs, task_embeddings);
}

TaskCandidates task_candidates(const Tensor& task_rep, const Tensor& task_router, std::size_t m,
                               bool renormalize) {
  const auto n = task_router.rows();
  if (m == 0 || m > n) {
    throw ConfigError("task candidate count m=" + std::to_string(m) + " outside [1, " +
                      std::to_string(n) + "]");
  }
  TaskCandidates out;
  out.router_probs = router_probs(task_rep, task_router);
  const auto b = task_rep.rows();
  out.mask.assign(b * n, 0);
  auto pv = out.router_probs.values();
  for (std::size_t r = 0; r < b; ++r) {
    auto order = descending_order(pv.subspan(r * n, n));
    order.resize(m);
    for (auto i : order) out.mask[r * n + i] = 1;
    out.sets.push_back(std::move(order));
  }
  std::vector<double> maskv(out.mask.begin(), out.mask.end());
  auto kept = nd::mul(out.router_probs, Tensor::from({b, n}, std::move(maskv)));
  out.gates = renormalize ? nd::row_normalize(kept) : kept;
  return out;
}

Tensor context_rep(const Tensor& hidden_prefix, std::size_t width) {
  if (hidden_prefix.numel() == 0) return Tensor::zeros({1, width});
  if (hidden_prefix.cols() != width) {
    throw DimensionError("context_rep: prefix " + nd::to_string(hidden_prefix.shape()) +
                         " does not have width " + std::to_string(width));
  }
  return nd::mean_axis(hidden_prefix, 0);
}

Tensor context_gate(const Tensor& x, const Tensor& ctx, const Tensor& gate_weight,
                    const Tensor& gate_bias) {
  if (x.shape() != ctx.shape()) {
    throw DimensionError("context_gate: token " + nd::to_string(x.shape()) + " and context " +
                         nd::to_string(ctx.shape()) + " differ");
  }
  const auto d = x.cols();
  if (gate_weight.rows() != 2 * d || (gate_weight.cols() != d && gate_weight.cols() != 1)) {
    throw DimensionError("context_gate: gate weight " + nd::to_string(gate_weight.shape()) +
                         " does not fit width " + std::to_string(d));
  }
  const std::vector<Tensor> parts{x, ctx};
  auto gate = nd::sigmoid(nd::add_row_bias(nd::matmul(nd::concat(parts, 1), gate_weight), gate_bias));
  if (gate.cols() == 1) {
    // Scalar gate per token: mix whole rows.
    return nd::add(nd::scale_rows(x, gate), nd::scale_rows(ctx, nd::add_scalar(nd::neg(gate), 1.0)));
  }
  return nd::add(nd::mul(gate, x), nd::mul(nd::add_scalar(nd::neg(gate), 1.0), ctx));
}

void RoutingOptions::validate(std::size_t experts) const {
  if (experts == 0) throw ConfigError("an MoE layer needs at least one expert");
  if (policy.kind == PolicyKind::TopK) {
    const auto pool = hierarchy == Hierarchy::Hierarchical ? candidates : experts;
    if (policy.k == 0 || policy.k > pool) {
      throw ConfigError("top-k needs 1 <= k <= " + std::to_string(pool) + ", got " +
                        std::to_string(policy.k));
    }
  } else if (!(policy.p > 0.0 && policy.p <= 1.0)) {
    throw ConfigError("top-p needs 0 < p <= 1, got " + std::to_string(policy.p));
  }
  if (hierarchy == Hierarchy::Hierarchical && (candidates == 0 || candidates > experts)) {
    throw ConfigError("task candidate count m=" + std::to_string(candidates) + " outside [1, " +
                      std::to_string(experts) + "]");
  }
}

PackedLayout PackedLayout::from_lengths(std::span<const std::size_t> lengths) {
  PackedLayout layout;
  std::size_t at = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    layout.segments.push_back({at, lengths[s]});
    layout.row_sequence.insert(layout.row_sequence.end(), lengths[s], s);
    at += lengths[s];
  }
  return layout;
}

LayerRouting route_tokens(const Tensor& x, const PackedLayout& layout, const Tensor* task_rep,
                          const RouterParams& params, const RoutingOptions& options) {
  const auto rows = x.rows();
  const auto n = params.token_router.rows();
  if (layout.rows() != rows) {
    throw DimensionError("route_tokens: layout covers " + std::to_string(layout.rows()) +
                         " rows but input has " + std::to_string(rows));
  }
  options.validate(n);
  const bool needs_task = options.hierarchy != Hierarchy::None;
  if (needs_task && (task_rep == nullptr || task_rep->rows() != layout.sequences())) {
    throw ConfigError("task-guided routing needs one task representation per sequence");
  }

  LayerRouting out;
  Tensor z = x;
  if (options.context) {
    auto ctx = nd::prefix_mean(x, layout.segments);
    z = context_gate(x, ctx, params.gate_weight, params.gate_bias);
  }
  if (options.hierarchy == Hierarchy::Flat) {
    z = nd::add(z, nd::gather_rows(*task_rep, layout.row_sequence));
  }
  out.router_input = z;

  auto logits = nd::matmul_nt(z, params.token_router);
  if (options.hierarchy == Hierarchy::Hierarchical) {
    out.task = task_candidates(*task_rep, params.task_router, options.candidates,
                               options.renormalize_task_gates);
    std::vector<std::uint8_t> mask(rows * n);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto s = layout.row_sequence[r];
      std::copy_n(out.task->mask.begin() + static_cast<std::ptrdiff_t>(s * n), n,
                  mask.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    out.probs = nd::masked_softmax(logits, mask);
  } else {
    out.probs = nd::softmax(logits, 1);
  }

  auto pv = out.probs.values();
  std::vector<double> selection(rows * n, 0.0);
  out.decisions.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto d = route(pv.subspan(r * n, n), options.policy);
    for (auto i : d.selected) selection[r * n + i] = 1.0;
    if (out.task) d.candidate_set = out.task->sets[layout.row_sequence[r]];
    out.decisions.push_back(std::move(d));
  }
  auto kept = nd::mul(out.probs, Tensor::from({rows, n}, std::move(selection)));
  out.token_gates = options.policy.kind == PolicyKind::TopK ? nd::row_normalize(kept) : kept;
  out.combine_weights = out.task ? nd::mul(out.token_gates,
                                           nd::gather_rows(out.task->gates, layout.row_sequence))
                                 : out.token_gates;
  return out;
}

RoutingDecision thor_route(const Tensor& x, const Tensor& hidden_prefix, const Tensor& task_probs,
                           const Tensor& task_embeddings, const RouterParams& params,
                           const RoutingOptions& options) {
  const auto d = x.cols();
  if (x.rows() != 1) throw DimensionError("thor_route routes a single token row");
  Tensor rows = x;
  if (hidden_prefix.numel() > 0) {
    if (hidden_prefix.cols() != d) throw DimensionError("thor_route: prefix width mismatch");
    const std::vector<Tensor> parts{hidden_prefix, x};
    rows = nd::concat(parts, 0);
  }
  const std::vector<std::size_t> lengths{rows.rows()};
  const auto layout = PackedLayout::from_lengths(lengths);
  Tensor rep;
  if (options.hierarchy != Hierarchy::None) rep = mixed_task_rep(task_probs, task_embeddings);
  auto routed = route_tokens(rows, layout, rep.defined() ? &rep : nullptr, params, options);
  return routed.decisions.back();
}

}  // namespace moelab::routing

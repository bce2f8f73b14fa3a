#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/ndgrad/ops.hpp"
#include "moelab/ndgrad/tensor.hpp"

namespace moelab::routing {

using ndgrad::Segment;
using ndgrad::Tensor;

// Outcome of routing one token. `selected` is in descending probability
// order (ties: lowest expert index first); `gates` has one entry per expert
// and is zero outside `selected`.
struct RoutingDecision {
  std::vector<std::size_t> selected;
  std::vector<double> gates;
  std::size_t activated_count = 0;
  std::optional<std::vector<std::size_t>> candidate_set;
};

enum class PolicyKind { TopK, TopP };

struct Policy {
  PolicyKind kind = PolicyKind::TopK;
  std::size_t k = 2;
  double p = 0.5;

  static Policy top_k(std::size_t k) { return {PolicyKind::TopK, k, 0.5}; }
  static Policy top_p(double p) { return {PolicyKind::TopP, 2, p}; }
};

std::string to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(const std::string& name);

// Indices ordered by descending probability, ties broken by lowest index.
std::vector<std::size_t> descending_order(std::span<const double> probs);

RoutingDecision top_k_route(std::span<const double> probs, std::size_t k);
RoutingDecision top_p_route(std::span<const double> probs, double p);
RoutingDecision route(std::span<const double> probs, const Policy& policy);

// P = softmax(x W_r^T), one row per token of x [R x d]; W_r is [N x d].
Tensor router_probs(const Tensor& x, const Tensor& token_router);

// Task predictor: max-pool `hidden` [T x d] over tokens, project with
// W^p [K x d] and softmax. Returns the task distribution as [1 x K].
Tensor predict_task(const Tensor& hidden, const Tensor& task_projection);

// E_p = sum_j P^t_j EMB1_j for every row of task_probs [B x K].
Tensor mixed_task_rep(const Tensor& task_probs, const Tensor& task_embeddings);

struct TaskCandidates {
  Tensor router_probs;  // [B x N] softmax of the task router
  Tensor gates;         // [B x N] task gates g^t, zero outside S^t
  std::vector<std::vector<std::size_t>> sets;  // S^t per row, descending probability
  std::vector<std::uint8_t> mask;              // [B x N], 1 on S^t
};

// Task-level expert selection: softmax(E_p W_t^T), keep the m largest.
// With `renormalize`, g^t is rescaled to sum to one over S^t.
TaskCandidates task_candidates(const Tensor& task_rep, const Tensor& task_router, std::size_t m,
                               bool renormalize = true);

// Arithmetic mean of the prefix rows [t x d]; zero row [1 x d] when t == 0.
Tensor context_rep(const Tensor& hidden_prefix, std::size_t width);

// g = sigmoid([x; ctx] W^g + b^g); returns g * x + (1 - g) * ctx. W^g is
// [2d x d] (per-dimension gate) or [2d x 1] (one scalar gate per token).
Tensor context_gate(const Tensor& x, const Tensor& ctx, const Tensor& gate_weight,
                    const Tensor& gate_bias);

enum class Hierarchy { None, Hierarchical, Flat };
enum class TaskRep { Mixed, NonMixed, Golden };

std::string to_string(Hierarchy h);
std::string to_string(TaskRep r);
Hierarchy hierarchy_from_string(const std::string& name);
TaskRep task_rep_from_string(const std::string& name);

struct RoutingOptions {
  Policy policy;
  Hierarchy hierarchy = Hierarchy::None;
  bool context = false;
  std::size_t candidates = 0;  // m; only used by Hierarchy::Hierarchical
  bool renormalize_task_gates = true;

  void validate(std::size_t experts) const;
};

// Per-layer routing parameters. Unused members may be left undefined
// (e.g. no gate weights when context routing is off).
struct RouterParams {
  Tensor token_router;  // W_r [N x d]
  Tensor task_router;   // [N x d]
  Tensor gate_weight;   // W^g [2d x d] or [2d x 1]
  Tensor gate_bias;     // b^g [1 x d] or [1 x 1]
};

// Row layout of a packed batch: one segment per sequence, rows in order.
struct PackedLayout {
  std::vector<Segment> segments;
  std::vector<std::size_t> row_sequence;  // sequence index of every row

  static PackedLayout from_lengths(std::span<const std::size_t> lengths);
  std::size_t rows() const { return row_sequence.size(); }
  std::size_t sequences() const { return segments.size(); }
};

struct LayerRouting {
  Tensor router_input;     // [R x d] representation fed to the token router
  Tensor probs;            // [R x N] token router distribution (over S^t when hierarchical)
  Tensor token_gates;      // [R x N] Top-k/Top-p gates
  Tensor combine_weights;  // [R x N] weights applied to expert outputs
  std::optional<TaskCandidates> task;      // hierarchical routing only
  std::vector<RoutingDecision> decisions;  // one per row
};

// Routes every row of x [R x d]. `task_rep` [B x d] is required for the
// hierarchical and flat modes. Context is the causal prefix mean of x within
// each sequence.
LayerRouting route_tokens(const Tensor& x, const PackedLayout& layout, const Tensor* task_rep,
                          const RouterParams& params, const RoutingOptions& options);

// Single-token convenience around route_tokens: routes x [1 x d] given the
// preceding hidden states of its sequence [t x d] and the sequence's task
// distribution [1 x K].
RoutingDecision thor_route(const Tensor& x, const Tensor& hidden_prefix, const Tensor& task_probs,
                           const Tensor& task_embeddings, const RouterParams& params,
                           const RoutingOptions& options);

}  // namespace moelab::routing

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/nnet/model.hpp"
#include "moelab/routing/routing.hpp"

namespace moelab::harness {

// One routed token in one MoE layer. `gates` and `weights` are aligned with
// `selected`: token-level gates and final combine weights respectively.
struct TraceRecord {
  std::size_t layer = 0;
  std::string block;
  std::size_t sequence = 0;
  std::size_t position = 0;
  std::int64_t token = 0;
  std::optional<std::size_t> task;
  std::vector<std::size_t> selected;
  std::vector<double> gates;
  std::vector<double> weights;
  std::vector<std::size_t> candidates;  // empty unless task-guided
  std::vector<double> probs;            // token router distribution over all experts
};

// Flattens a forward pass into per-(layer, token) records. Sequence indices
// are offset by `first_sequence`.
std::vector<TraceRecord> collect_trace(const nnet::ForwardResult& result,
                                       const std::vector<nnet::SequenceInput>& batch,
                                       std::size_t first_sequence = 0);

nlohmann::json to_json(const TraceRecord& r);
TraceRecord trace_from_json(const nlohmann::json& j);

struct RoutingStats {
  std::size_t experts = 0;
  std::uint64_t decisions = 0;
  double mean_activated = 0.0;                   // over tokens and layers
  std::map<std::size_t, double> per_task_mean;   // keyed by golden task
  std::map<std::size_t, std::uint64_t> per_task_decisions;
  std::vector<std::vector<std::uint64_t>> load;  // [layer][expert] selection counts
  std::vector<double> load_entropy;              // per layer, nats, of the normalised load
  double selection_entropy = 0.0;                // mean of load_entropy

  nlohmann::json to_json() const;
};

// Streaming form of routing_stats so long runs need not keep every record.
class RoutingStatsAccumulator {
 public:
  explicit RoutingStatsAccumulator(std::size_t experts) : experts_(experts) {}
  void add(const TraceRecord& r);
  RoutingStats finish() const;

 private:
  std::size_t experts_;
  std::uint64_t decisions_ = 0, activated_ = 0;
  std::map<std::size_t, std::pair<std::uint64_t, std::uint64_t>> per_task_;  // decisions, activated
  std::vector<std::vector<std::uint64_t>> load_;
};

RoutingStats routing_stats(const std::vector<TraceRecord>& traces, std::size_t experts);

// Counts of violated routing invariants over checked decisions.
struct InvariantReport {
  std::uint64_t decisions = 0;
  std::uint64_t containment = 0;    // selected outside the candidate set
  std::uint64_t normalization = 0;  // Top-k gates not summing to one / wrong count
  std::uint64_t minimality = 0;     // Top-p selection not the minimal prefix
  std::uint64_t violations() const { return containment + normalization + minimality; }
  void merge(const InvariantReport& other);
  nlohmann::json to_json() const;
};

void check_invariants(const TraceRecord& r, const routing::Policy& policy, InvariantReport& report);

}  // namespace moelab::harness

#include "moelab/harness/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "moelab/errors.hpp"

namespace moelab::harness {

using nlohmann::json;

std::vector<TraceRecord> collect_trace(const nnet::ForwardResult& result,
                                       const std::vector<nnet::SequenceInput>& batch, std::size_t first_sequence) {
  std::vector<TraceRecord> out;
  for (std::size_t layer = 0; layer < result.moe.size(); ++layer) {
    const auto& m = result.moe[layer];
    const auto& lr = m.routing;
    const auto n = lr.probs.cols();
    auto probs = lr.probs.values();
    auto gates = lr.token_gates.values();
    auto weights = lr.combine_weights.values();
    for (std::size_t row = 0; row < lr.decisions.size(); ++row) {
      const auto s = m.layout.row_sequence[row];
      const auto pos = row - m.layout.segments[s].begin;
      const auto& in = batch.at(s);
      TraceRecord r;
      r.layer = layer;
      r.block = m.block;
      r.sequence = first_sequence + s;
      r.position = pos;
      if (!m.decoder) {
        r.token = in.source.at(pos);
      } else if (m.layout.segments[s].length > in.decoder.size()) {
        // Decoder-only rows cover source ++ decoder.
        r.token = pos < in.source.size() ? in.source[pos] : in.decoder.at(pos - in.source.size());
      } else {
        r.token = in.decoder.at(pos);
      }
      r.task = in.task;
      const auto& d = lr.decisions[row];
      r.selected = d.selected;
      for (auto i : d.selected) {
        r.gates.push_back(gates[row * n + i]);
        r.weights.push_back(weights[row * n + i]);
      }
      if (d.candidate_set) r.candidates = *d.candidate_set;
      r.probs.assign(probs.begin() + static_cast<std::ptrdiff_t>(row * n),
                     probs.begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
      out.push_back(std::move(r));
    }
  }
  return out;
}

json to_json(const TraceRecord& r) {
  json j = {{"layer", r.layer},     {"block", r.block}, {"sequence", r.sequence}, {"position", r.position},
            {"token", r.token},     {"selected", r.selected}, {"gates", r.gates}, {"weights", r.weights},
            {"activated", r.selected.size()}, {"probs", r.probs}};
  j["task"] = r.task ? json(*r.task) : json(nullptr);
  if (!r.candidates.empty()) j["candidates"] = r.candidates;
  return j;
}

TraceRecord trace_from_json(const json& j) {
  try {
    TraceRecord r;
    r.layer = j.at("layer");
    r.block = j.at("block");
    r.sequence = j.at("sequence");
    r.position = j.at("position");
    r.token = j.at("token");
    if (!j.at("task").is_null()) r.task = j.at("task").get<std::size_t>();
    r.selected = j.at("selected").get<std::vector<std::size_t>>();
    r.gates = j.at("gates").get<std::vector<double>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.probs = j.at("probs").get<std::vector<double>>();
    if (j.contains("candidates")) r.candidates = j.at("candidates").get<std::vector<std::size_t>>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("trace record: ") + e.what());
  }
}

void RoutingStatsAccumulator::add(const TraceRecord& r) {
  ++decisions_;
  activated_ += r.selected.size();
  if (r.task) {
    auto& [d, a] = per_task_[*r.task];
    ++d;
    a += r.selected.size();
  }
  if (load_.size() <= r.layer) load_.resize(r.layer + 1, std::vector<std::uint64_t>(experts_, 0));
  for (auto i : r.selected) {
    if (i >= experts_) throw RoutingError("trace selects expert " + std::to_string(i) + " of " + std::to_string(experts_));
    ++load_[r.layer][i];
  }
}

RoutingStats RoutingStatsAccumulator::finish() const {
  RoutingStats s;
  s.experts = experts_;
  s.decisions = decisions_;
  s.mean_activated = decisions_ ? static_cast<double>(activated_) / static_cast<double>(decisions_) : 0.0;
  for (const auto& [task, da] : per_task_) {
    s.per_task_mean[task] = static_cast<double>(da.second) / static_cast<double>(da.first);
    s.per_task_decisions[task] = da.first;
  }
  s.load = load_;
  for (const auto& layer : load_) {
    double total = 0.0, h = 0.0;
    for (auto c : layer) total += static_cast<double>(c);
    for (auto c : layer) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
    s.load_entropy.push_back(h);
  }
  if (!s.load_entropy.empty()) {
    double sum = 0.0;
    for (double h : s.load_entropy) sum += h;
    s.selection_entropy = sum / static_cast<double>(s.load_entropy.size());
  }
  return s;
}

RoutingStats routing_stats(const std::vector<TraceRecord>& traces, std::size_t experts) {
  RoutingStatsAccumulator acc(experts);
  for (const auto& r : traces) acc.add(r);
  return acc.finish();
}

json RoutingStats::to_json() const {
  json per_task = json::object();
  for (const auto& [t, m] : per_task_mean) {
    per_task[std::to_string(t)] = {{"mean_activated", m}, {"decisions", per_task_decisions.at(t)}};
  }
  return {{"experts", experts},
          {"decisions", decisions},
          {"mean_activated", mean_activated},
          {"per_task", per_task},
          {"load", load},
          {"load_entropy", load_entropy},
          {"selection_entropy", selection_entropy}};
}

void InvariantReport::merge(const InvariantReport& o) {
  decisions += o.decisions;
  containment += o.containment;
  normalization += o.normalization;
  minimality += o.minimality;
}

json InvariantReport::to_json() const {
  return {{"decisions", decisions},
          {"containment_violations", containment},
          {"normalization_violations", normalization},
          {"minimality_violations", minimality},
          {"violations", violations()}};
}

void check_invariants(const TraceRecord& r, const routing::Policy& policy, InvariantReport& report) {
  ++report.decisions;
  if (!r.candidates.empty()) {
    for (auto i : r.selected) {
      if (std::find(r.candidates.begin(), r.candidates.end(), i) == r.candidates.end()) {
        ++report.containment;
        break;
      }
    }
  }
  if (policy.kind == routing::PolicyKind::TopK) {
    double sum = 0.0;
    for (double g : r.gates) sum += g;
    if (r.selected.size() != policy.k || std::abs(sum - 1.0) > 1e-9) ++report.normalization;
    return;
  }
  std::vector<double> chosen;
  for (auto i : r.selected) chosen.push_back(r.probs.at(i));
  std::sort(chosen.begin(), chosen.end(), std::greater<>());
  double total = 0.0, without_last = 0.0;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    total += chosen[i];
    if (i + 1 < chosen.size()) without_last += chosen[i];
  }
  bool ok;
  // Selection must be a prefix of the descending order.
  for (std::size_t i = 0; i < r.probs.size() && !chosen.empty(); ++i) {
    const bool picked = std::find(r.selected.begin(), r.selected.end(), i) != r.selected.end();
    if (!picked && r.probs[i] > chosen.back()) {
      ++report.minimality;
      return;
    }
  }
  if (total >= policy.p) {
    ok = without_last < policy.p;
  } else {
    const auto nonzero = std::count_if(r.probs.begin(), r.probs.end(), [](double v) { return v > 0.0; });
    ok = static_cast<std::size_t>(nonzero) == chosen.size();
  }
  if (!ok) ++report.minimality;
}

}  // namespace moelab::harness

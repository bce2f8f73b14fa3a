#pragma once

// Exhaustive oracles for expert selection. They enumerate subsets directly
// instead of sorting, so they stay independent of the routing code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "moelab/routing/routing.hpp"

namespace moelab::testing {

// Random probability vector over 1..8 experts (softmax of random logits).
inline std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t max_n = 8) {
  const std::size_t n = 1 + rng() % max_n;
  std::normal_distribution<double> logit(0.0, 1.5);
  std::vector<double> p(n);
  double z = 0.0;
  for (auto& v : p) {
    v = std::exp(logit(rng));
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

namespace detail {

inline std::vector<std::size_t> members(std::uint32_t mask, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask & (1u << i)) out.push_back(i);
  }
  return out;
}

// Subset mass accumulated largest-first (lowest index first among equals).
inline double mass(const std::vector<double>& p, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return p[a] != p[b] ? p[a] > p[b] : a < b;
  });
  double s = 0.0;
  for (auto i : idx) s += p[i];
  return s;
}

}  // namespace detail

// The size-k subset with the largest total probability; ties prefer the
// lexicographically smallest index set.
inline std::vector<std::size_t> brute_force_top_k(const std::vector<double>& p, std::size_t k) {
  const auto n = p.size();
  std::vector<std::size_t> best;
  double best_mass = -1.0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    auto idx = detail::members(mask, n);
    const double m = detail::mass(p, idx);
    if (m > best_mass || (m == best_mass && idx < best)) {
      best_mass = m;
      best = idx;
    }
  }
  return best;
}

// Smallest subset whose mass reaches p (largest mass among equal sizes). When
// rounding keeps every subset below p, all experts with nonzero mass.
inline std::vector<std::size_t> brute_force_top_p(const std::vector<double>& p, double threshold) {
  const auto n = p.size();
  std::vector<std::size_t> best;
  double best_mass = -1.0;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    auto idx = detail::members(mask, n);
    const double m = detail::mass(p, idx);
    if (m < threshold) continue;
    if (best.empty() || idx.size() < best.size() ||
        (idx.size() == best.size() && (m > best_mass || (m == best_mass && idx < best)))) {
      best = idx;
      best_mass = m;
    }
  }
  if (best.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] > 0.0) best.push_back(i);
    }
  }
  return best;
}

// Selected mass reaches p and dropping the smallest selected expert falls
// below p (unless the fallback "all nonzero" branch applied).
inline bool top_p_is_minimal(std::span<const double> probs, const routing::RoutingDecision& d, double p) {
  std::vector<double> chosen;
  for (auto i : d.selected) chosen.push_back(probs[i]);
  std::sort(chosen.begin(), chosen.end(), std::greater<>());
  double total = 0.0;
  for (double v : chosen) total += v;
  double without_last = 0.0;
  for (std::size_t i = 0; i + 1 < chosen.size(); ++i) without_last += chosen[i];
  if (total >= p) return without_last < p;
  // Fallback: only legal when every nonzero expert is selected.
  const auto nonzero = std::count_if(probs.begin(), probs.end(), [](double v) { return v > 0.0; });
  return static_cast<std::size_t>(nonzero) == chosen.size();
}

}  // namespace moelab::testing

#include "moelab/harness/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "moelab/errors.hpp"

namespace moelab::harness {

namespace {

std::map<Sentence, std::size_t> ngrams(const Sentence& s, std::size_t n) {
  std::map<Sentence, std::size_t> counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sentence(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

BleuScore bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references) {
  if (candidates.size() != references.size()) {
    throw ValidationError("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                          std::to_string(references.size()) + " references");
  }
  BleuScore out;
  out.signature = kBleuSignature;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& ref = references[s];
    out.candidate_length += cand.size();
    out.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto ref_counts = ngrams(ref, n);
      for (const auto& [gram, count] : ngrams(cand, n)) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) out.matches[n - 1] += std::min(count, it->second);
      }
      if (cand.size() >= n) out.totals[n - 1] += cand.size() - n + 1;
    }
  }
  if (out.candidate_length == 0 || out.matches[0] == 0) return out;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(out.matches[n]);
    double t = static_cast<double>(out.totals[n]);
    if (n > 0 && out.matches[n] == 0) {
      m = 1.0;
      t += 1.0;
    }
    log_sum += std::log(m / t);
  }
  const double c = static_cast<double>(out.candidate_length);
  const double r = static_cast<double>(out.reference_length);
  out.brevity_penalty = c < r ? std::exp(1.0 - r / c) : 1.0;
  out.score = 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

}  // namespace moelab::harness

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace moelab::harness {

using Sentence = std::vector<std::int64_t>;

struct BleuScore {
  double score = 0.0;  // 0-100
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  double brevity_penalty = 1.0;
  std::string signature;
};

// Corpus-level 4-gram BLEU over token ids with one reference per candidate.
// Orders n > 1 whose clipped match count is zero are smoothed to
// 1 / (total + 1); a zero unigram match count gives 0.
BleuScore bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references);

inline constexpr const char* kBleuSignature =
    "nrefs:1|case:mixed|eff:no|tok:ids|smooth:add-one-zero-counts|version:moelab-1";

}  // namespace moelab::harness

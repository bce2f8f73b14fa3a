#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace moelab::corpus {

using TokenId = std::int64_t;

inline constexpr TokenId kCls = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kPad = 3;
inline constexpr TokenId kFirstFreeId = 4;

// Token-wise translation rules. Every rule is a bijection on the task's core
// tokens; shared tokens always go through the task's shared-pool permutation.
enum class RuleKind { Cipher, Shift, ReverseCipher };

std::string to_string(RuleKind kind);
RuleKind rule_from_string(const std::string& name);

struct TaskSpec {
  std::size_t id = 0;
  std::vector<TokenId> core;  // tokens unique to this task
  RuleKind rule = RuleKind::Cipher;
  std::size_t train_pairs = 2000;
  std::size_t valid_pairs = 200;
  std::size_t test_pairs = 200;
  double mix_rate = 0.1;
};

struct ParallelPair {
  std::vector<TokenId> source;  // starts with kCls
  std::vector<TokenId> target;  // no BOS/EOS
  std::size_t task = 0;         // golden (dominant) task
  std::optional<std::size_t> secondary;  // task the mix-in tokens came from

  bool operator==(const ParallelPair&) const = default;
};

// Corpus-wide knobs. Task specs are derived from these by default_task_specs.
struct CorpusConfig {
  std::size_t tasks = 5;
  std::size_t vocab_size = 256;
  std::size_t shared_tokens = 52;
  std::size_t train_pairs = 2000;
  std::size_t valid_pairs = 200;
  std::size_t test_pairs = 200;
  std::size_t min_length = 4;
  std::size_t max_length = 16;
  double mix_rate = 0.1;
  double shared_rate = 0.25;  // chance a position draws from the shared pool
  std::vector<RuleKind> rules;  // per task, cycled; empty means all Cipher

  void validate() const;
};

nlohmann::json to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

// Splits the non-reserved ids into the shared pool followed by equal core
// blocks, one per task (remainder ids go to the shared pool).
std::vector<TaskSpec> default_task_specs(const CorpusConfig& config);

// Bidirectional token table. Ids 0-3 are the reserved specials.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary for_specs(const std::vector<TaskSpec>& specs, std::span<const TokenId> shared,
                              std::size_t vocab_size);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(const std::string& token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Whitespace tokenization. In strict mode an unknown token raises
  // UnknownTokenError; otherwise it is skipped.
  std::vector<TokenId> tokenize(const std::string& text, bool strict = true) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> index_;
};

struct Corpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::vector<TaskSpec> specs;
  std::vector<TokenId> shared;
  Vocabulary vocab;
  std::vector<ParallelPair> train, valid, test;

  // SHA-256 over the canonical JSONL of all splits and the vocabulary.
  std::string hash() const;
  const std::vector<ParallelPair>& split(const std::string& name) const;
};

// Translation of one token under `task`'s rule: core tokens of any task use
// their owner's mapping; shared tokens use `task`'s shared permutation.
class Translator {
 public:
  Translator(const std::vector<TaskSpec>& specs, std::span<const TokenId> shared, std::uint64_t seed,
             std::size_t vocab_size);

  TokenId translate(TokenId token, std::size_t task) const;
  std::vector<TokenId> translate_sentence(std::span<const TokenId> body, std::size_t task) const;
  std::optional<std::size_t> owner(TokenId token) const;

 private:
  std::vector<std::vector<TokenId>> shared_map_;  // per task, indexed by token id
  std::vector<TokenId> core_map_;                 // indexed by token id
  std::vector<std::optional<std::size_t>> owner_;
  std::vector<bool> reversed_;
};

Corpus generate_corpus(const std::vector<TaskSpec>& specs, const CorpusConfig& config,
                       std::uint64_t seed);
Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

// Task owning the most core tokens of the sentence (lowest task id on ties);
// nullopt when the sentence has no core tokens.
std::optional<std::size_t> majority_task(std::span<const TokenId> source,
                                         const std::vector<TaskSpec>& specs);

// q_j proportional to (n_j / sum n)^(1/tau). tau may be +infinity (uniform).
std::vector<double> temperature_sample(std::span<const std::size_t> sizes, double tau);

nlohmann::json to_json(const ParallelPair& pair);
ParallelPair pair_from_json(const nlohmann::json& j);
std::string to_jsonl(const std::vector<ParallelPair>& pairs);
std::vector<ParallelPair> pairs_from_jsonl(const std::string& text);

// Writes train/valid/test.jsonl, vocab.json and corpus.json under dir.
// Existing files are an error unless `force`.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir, bool force = false);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace moelab::corpus

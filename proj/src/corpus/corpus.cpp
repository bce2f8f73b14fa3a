#include "moelab/corpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "moelab/errors.hpp"
#include "moelab/util/files.hpp"
#include "moelab/util/rng.hpp"

namespace moelab::corpus {

using nlohmann::json;

std::string to_string(RuleKind kind) {
  switch (kind) {
    case RuleKind::Cipher: return "cipher";
    case RuleKind::Shift: return "shift";
    case RuleKind::ReverseCipher: return "reverse-cipher";
  }
  return "?";
}

RuleKind rule_from_string(const std::string& name) {
  if (name == "cipher") return RuleKind::Cipher;
  if (name == "shift") return RuleKind::Shift;
  if (name == "reverse-cipher") return RuleKind::ReverseCipher;
  throw ConfigError("unknown translation rule '" + name + "' (expected cipher, shift, reverse-cipher)");
}

void CorpusConfig::validate() const {
  if (tasks == 0) throw ConfigError("corpus needs at least one task");
  if (vocab_size <= static_cast<std::size_t>(kFirstFreeId) + shared_tokens) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " leaves no room for core tokens");
  }
  if ((vocab_size - kFirstFreeId - shared_tokens) / tasks < 2) {
    throw ConfigError("fewer than two core tokens per task");
  }
  if (min_length == 0 || min_length > max_length) {
    throw ConfigError("sentence length range [" + std::to_string(min_length) + ", " +
                      std::to_string(max_length) + "] is empty");
  }
  if (!(mix_rate >= 0.0 && mix_rate <= 1.0)) throw ConfigError("mix_rate must lie in [0, 1]");
  if (!(shared_rate >= 0.0 && shared_rate < 1.0)) throw ConfigError("shared_rate must lie in [0, 1)");
  if (shared_rate > 0.0 && shared_tokens == 0) throw ConfigError("shared_rate > 0 needs shared tokens");
}

json to_json(const CorpusConfig& c) {
  json rules = json::array();
  for (auto r : c.rules) rules.push_back(to_string(r));
  return {{"tasks", c.tasks},
          {"vocab_size", c.vocab_size},
          {"shared_tokens", c.shared_tokens},
          {"train_pairs", c.train_pairs},
          {"valid_pairs", c.valid_pairs},
          {"test_pairs", c.test_pairs},
          {"min_length", c.min_length},
          {"max_length", c.max_length},
          {"mix_rate", c.mix_rate},
          {"shared_rate", c.shared_rate},
          {"rules", rules}};
}

CorpusConfig corpus_config_from_json(const json& j) {
  static const std::set<std::string> known{"tasks",      "vocab_size", "shared_tokens", "train_pairs",
                                           "valid_pairs", "test_pairs", "min_length",    "max_length",
                                           "mix_rate",   "shared_rate", "rules"};
  if (!j.is_object()) throw ConfigError("corpus config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown corpus config key '" + it.key() + "'");
  }
  CorpusConfig c;
  try {
    c.tasks = j.value("tasks", c.tasks);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.shared_tokens = j.value("shared_tokens", c.shared_tokens);
    c.train_pairs = j.value("train_pairs", c.train_pairs);
    c.valid_pairs = j.value("valid_pairs", c.valid_pairs);
    c.test_pairs = j.value("test_pairs", c.test_pairs);
    c.min_length = j.value("min_length", c.min_length);
    c.max_length = j.value("max_length", c.max_length);
    c.mix_rate = j.value("mix_rate", c.mix_rate);
    c.shared_rate = j.value("shared_rate", c.shared_rate);
    if (j.contains("rules")) {
      for (const auto& r : j.at("rules")) c.rules.push_back(rule_from_string(r.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corpus config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<TaskSpec> default_task_specs(const CorpusConfig& config) {
  config.validate();
  const std::size_t free = config.vocab_size - kFirstFreeId;
  const std::size_t per_task = (free - config.shared_tokens) / config.tasks;
  const std::size_t shared_total = free - per_task * config.tasks;
  std::vector<TaskSpec> specs(config.tasks);
  for (std::size_t t = 0; t < config.tasks; ++t) {
    auto& s = specs[t];
    s.id = t;
    const TokenId begin = kFirstFreeId + static_cast<TokenId>(shared_total + t * per_task);
    for (std::size_t i = 0; i < per_task; ++i) s.core.push_back(begin + static_cast<TokenId>(i));
    s.rule = config.rules.empty() ? RuleKind::Cipher : config.rules[t % config.rules.size()];
    s.train_pairs = config.train_pairs;
    s.valid_pairs = config.valid_pairs;
    s.test_pairs = config.test_pairs;
    s.mix_rate = config.mix_rate;
  }
  return specs;
}

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& tok = tokens_[i];
    if (tok.empty() || tok.find_first_of(" \t\n\r") != std::string::npos) {
      throw ValidationError("vocabulary token " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!index_.emplace(tok, static_cast<TokenId>(i)).second) {
      throw ValidationError("duplicate vocabulary token '" + tok + "'");
    }
  }
}

Vocabulary Vocabulary::for_specs(const std::vector<TaskSpec>& specs, std::span<const TokenId> shared,
                                 std::size_t vocab_size) {
  std::vector<std::string> tokens(vocab_size);
  tokens[kCls] = "[CLS]";
  tokens[kBos] = "[BOS]";
  tokens[kEos] = "[EOS]";
  tokens[kPad] = "[PAD]";
  for (std::size_t i = 0; i < shared.size(); ++i) tokens[shared[i]] = "s" + std::to_string(i);
  for (const auto& s : specs) {
    for (std::size_t i = 0; i < s.core.size(); ++i) {
      tokens[s.core[i]] = "t" + std::to_string(s.id) + "_" + std::to_string(i);
    }
  }
  return Vocabulary(std::move(tokens));
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocabulary::tokenize(const std::string& text, bool strict) const {
  std::istringstream in(text);
  std::vector<TokenId> ids;
  std::string word;
  while (in >> word) {
    if (auto id = find(word)) {
      ids.push_back(*id);
    } else if (strict) {
      throw UnknownTokenError("unknown token '" + word + "'");
    }
  }
  return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

json Vocabulary::to_json() const { return {{"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const json& j) {
  try {
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("vocabulary JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------- translator

Translator::Translator(const std::vector<TaskSpec>& specs, std::span<const TokenId> shared,
                       std::uint64_t seed, std::size_t vocab_size)
    : shared_map_(specs.size(), std::vector<TokenId>(vocab_size, -1)),
      core_map_(vocab_size, -1),
      owner_(vocab_size),
      reversed_(specs.size(), false) {
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const auto& spec = specs[t];
    auto rng = util::Rng::derive(seed, "corpus/rule/" + std::to_string(t));
    std::vector<TokenId> image = spec.core;
    if (spec.rule == RuleKind::Shift) {
      const auto n = image.size();
      const auto offset = n > 1 ? 1 + rng.below(n - 1) : 0;
      std::rotate(image.begin(), image.begin() + static_cast<std::ptrdiff_t>(offset), image.end());
    } else {
      rng.shuffle(image);
    }
    for (std::size_t i = 0; i < spec.core.size(); ++i) {
      core_map_[spec.core[i]] = image[i];
      owner_[spec.core[i]] = t;
    }
    std::vector<TokenId> shared_image(shared.begin(), shared.end());
    rng.shuffle(shared_image);
    for (std::size_t i = 0; i < shared.size(); ++i) shared_map_[t][shared[i]] = shared_image[i];
    reversed_[t] = spec.rule == RuleKind::ReverseCipher;
  }
}

TokenId Translator::translate(TokenId token, std::size_t task) const {
  if (token < 0 || static_cast<std::size_t>(token) >= core_map_.size() || task >= shared_map_.size()) {
    throw ValidationError("cannot translate token " + std::to_string(token) + " for task " +
                          std::to_string(task));
  }
  const auto i = static_cast<std::size_t>(token);
  if (core_map_[i] >= 0) return core_map_[i];
  if (shared_map_[task][i] >= 0) return shared_map_[task][i];
  throw ValidationError("token " + std::to_string(token) + " is neither a core nor a shared token");
}

std::vector<TokenId> Translator::translate_sentence(std::span<const TokenId> body,
                                                    std::size_t task) const {
  std::vector<TokenId> out;
  out.reserve(body.size());
  for (auto t : body) out.push_back(translate(t, task));
  if (reversed_.at(task)) std::reverse(out.begin(), out.end());
  return out;
}

std::optional<std::size_t> Translator::owner(TokenId token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= owner_.size()) return std::nullopt;
  return owner_[static_cast<std::size_t>(token)];
}

// ---------------------------------------------------------------- generation

namespace {

std::vector<TokenId> validate_specs(const std::vector<TaskSpec>& specs, std::size_t vocab_size) {
  if (specs.empty()) throw SpecError("no task specs");
  std::vector<int> owner(vocab_size, -1);
  for (std::size_t t = 0; t < specs.size(); ++t) {
    if (specs[t].id != t) throw SpecError("task spec " + std::to_string(t) + " has id " + std::to_string(specs[t].id));
    if (specs[t].core.size() < 2) throw SpecError("task " + std::to_string(t) + " needs at least two core tokens");
    if (!(specs[t].mix_rate >= 0.0 && specs[t].mix_rate <= 1.0)) {
      throw SpecError("task " + std::to_string(t) + " mix rate outside [0, 1]");
    }
    for (auto tok : specs[t].core) {
      if (tok < kFirstFreeId || static_cast<std::size_t>(tok) >= vocab_size) {
        throw SpecError("task " + std::to_string(t) + " core token " + std::to_string(tok) +
                        " is reserved or outside the vocabulary");
      }
      auto& o = owner[static_cast<std::size_t>(tok)];
      if (o >= 0) {
        throw SpecError("core token " + std::to_string(tok) + " belongs to both task " + std::to_string(o) +
                        " and task " + std::to_string(t));
      }
      o = static_cast<int>(t);
    }
  }
  std::vector<TokenId> shared;
  for (std::size_t i = kFirstFreeId; i < vocab_size; ++i) {
    if (owner[i] < 0) shared.push_back(static_cast<TokenId>(i));
  }
  return shared;
}

template <class T>
const T& pick(util::Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

}  // namespace

Corpus generate_corpus(const std::vector<TaskSpec>& specs, const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.seed = seed;
  corpus.specs = specs;
  corpus.shared = validate_specs(specs, config.vocab_size);
  if (config.shared_rate > 0.0 && corpus.shared.empty()) {
    throw SpecError("shared_rate > 0 but every free token is a core token");
  }
  corpus.vocab = Vocabulary::for_specs(specs, corpus.shared, config.vocab_size);
  const Translator translator(specs, corpus.shared, seed, config.vocab_size);

  std::set<std::vector<TokenId>> seen;
  const std::size_t k = specs.size();
  for (std::size_t t = 0; t < k; ++t) {
    const auto& spec = specs[t];
    auto rng = util::Rng::derive(seed, "corpus/sentences/" + std::to_string(t));
    auto fill = [&](std::vector<ParallelPair>& out, std::size_t count) {
      std::size_t attempts = 0;
      const std::size_t budget = 1000 + 100 * count;
      std::size_t made = 0;
      while (made < count) {
        if (++attempts > budget) {
          throw SpecError("task " + std::to_string(t) + " cannot produce " + std::to_string(count) +
                          " distinct sentences; enlarge its vocabulary or length range");
        }
        const auto length = static_cast<std::size_t>(
            rng.between(static_cast<std::int64_t>(config.min_length), static_cast<std::int64_t>(config.max_length)));
        std::vector<bool> is_shared(length);
        std::vector<std::size_t> core_positions;
        for (std::size_t i = 0; i < length; ++i) {
          is_shared[i] = rng.bernoulli(config.shared_rate);
          if (!is_shared[i]) core_positions.push_back(i);
        }
        if (core_positions.empty()) {
          is_shared[0] = false;
          core_positions.push_back(0);
        }
        std::optional<std::size_t> secondary;
        std::vector<bool> borrowed(length, false);
        if (k > 1 && rng.bernoulli(spec.mix_rate) && core_positions.size() >= 3) {
          auto other = rng.below(k - 1);
          secondary = other >= t ? other + 1 : other;
          const auto max_borrow = static_cast<std::int64_t>((core_positions.size() - 1) / 2);
          const auto b = static_cast<std::size_t>(rng.between(1, max_borrow));
          rng.shuffle(core_positions);
          for (std::size_t i = 0; i < b; ++i) borrowed[core_positions[i]] = true;
        }
        ParallelPair pair;
        pair.task = t;
        pair.secondary = secondary;
        pair.source.push_back(kCls);
        for (std::size_t i = 0; i < length; ++i) {
          if (is_shared[i]) {
            pair.source.push_back(pick(rng, corpus.shared));
          } else if (borrowed[i]) {
            pair.source.push_back(pick(rng, specs[*secondary].core));
          } else {
            pair.source.push_back(pick(rng, spec.core));
          }
        }
        if (!seen.insert(pair.source).second) continue;
        pair.target = translator.translate_sentence(std::span(pair.source).subspan(1), t);
        out.push_back(std::move(pair));
        ++made;
      }
    };
    fill(corpus.train, spec.train_pairs);
    fill(corpus.valid, spec.valid_pairs);
    fill(corpus.test, spec.test_pairs);
  }
  return corpus;
}

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  return generate_corpus(default_task_specs(config), config, seed);
}

std::optional<std::size_t> majority_task(std::span<const TokenId> source, const std::vector<TaskSpec>& specs) {
  std::vector<std::size_t> counts(specs.size(), 0);
  std::map<TokenId, std::size_t> owner;
  for (const auto& s : specs) {
    for (auto tok : s.core) owner[tok] = s.id;
  }
  for (auto tok : source) {
    if (auto it = owner.find(tok); it != owner.end()) ++counts[it->second];
  }
  const auto best = std::max_element(counts.begin(), counts.end());
  if (best == counts.end() || *best == 0) return std::nullopt;
  return static_cast<std::size_t>(best - counts.begin());
}

std::vector<double> temperature_sample(std::span<const std::size_t> sizes, double tau) {
  if (!(tau > 0.0)) throw ConfigError("sampling temperature must be positive");
  if (sizes.empty()) throw ValidationError("temperature_sample needs at least one task");
  double total = 0.0;
  for (auto n : sizes) total += static_cast<double>(n);
  if (total <= 0.0) throw ValidationError("all task sizes are zero");
  const double exponent = std::isinf(tau) ? 0.0 : 1.0 / tau;
  std::vector<double> q;
  double z = 0.0;
  for (auto n : sizes) {
    const double share = static_cast<double>(n) / total;
    q.push_back(n == 0 ? 0.0 : std::pow(share, exponent));
    z += q.back();
  }
  for (auto& v : q) v /= z;
  return q;
}

// ---------------------------------------------------------------- IO

json to_json(const ParallelPair& p) {
  json j = {{"src", p.source}, {"tgt", p.target}, {"task", p.task}};
  if (p.secondary) j["secondary"] = *p.secondary;
  return j;
}

ParallelPair pair_from_json(const json& j) {
  try {
    ParallelPair p;
    p.source = j.at("src").get<std::vector<TokenId>>();
    p.target = j.at("tgt").get<std::vector<TokenId>>();
    p.task = j.at("task").get<std::size_t>();
    if (j.contains("secondary")) p.secondary = j.at("secondary").get<std::size_t>();
    if (p.source.empty() || p.source.front() != kCls) throw ValidationError("source must start with [CLS]");
    return p;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("corpus pair: ") + e.what());
  }
}

std::string to_jsonl(const std::vector<ParallelPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += to_json(p).dump();
    out += '\n';
  }
  return out;
}

std::vector<ParallelPair> pairs_from_jsonl(const std::string& text) {
  std::vector<ParallelPair> pairs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      pairs.push_back(pair_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

std::string Corpus::hash() const {
  std::string canonical = vocab.to_json().dump();
  canonical += '\n';
  canonical += to_jsonl(train);
  canonical += "--\n";
  canonical += to_jsonl(valid);
  canonical += "--\n";
  canonical += to_jsonl(test);
  return util::sha256_hex(canonical);
}

const std::vector<ParallelPair>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid, test)");
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir, bool force) {
  json specs = json::array();
  for (const auto& s : corpus.specs) {
    specs.push_back({{"id", s.id},
                     {"core", s.core},
                     {"rule", to_string(s.rule)},
                     {"train_pairs", s.train_pairs},
                     {"valid_pairs", s.valid_pairs},
                     {"test_pairs", s.test_pairs},
                     {"mix_rate", s.mix_rate}});
  }
  const json meta = {{"format", "moelab-corpus-1"},
                     {"seed", corpus.seed},
                     {"hash", corpus.hash()},
                     {"config", to_json(corpus.config)},
                     {"shared", corpus.shared},
                     {"specs", specs}};
  util::write_text(dir / "train.jsonl", to_jsonl(corpus.train), force);
  util::write_text(dir / "valid.jsonl", to_jsonl(corpus.valid), force);
  util::write_text(dir / "test.jsonl", to_jsonl(corpus.test), force);
  util::write_text(dir / "vocab.json", corpus.vocab.to_json().dump(1) + "\n", force);
  util::write_text(dir / "corpus.json", meta.dump(1) + "\n", force);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  json meta;
  try {
    meta = json::parse(util::read_text(dir / "corpus.json"));
    if (meta.value("format", "") != "moelab-corpus-1") throw ValidationError("unrecognised corpus format");
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.config = corpus_config_from_json(meta.at("config"));
    c.shared = meta.at("shared").get<std::vector<TokenId>>();
    for (const auto& s : meta.at("specs")) {
      TaskSpec spec;
      spec.id = s.at("id").get<std::size_t>();
      spec.core = s.at("core").get<std::vector<TokenId>>();
      spec.rule = rule_from_string(s.at("rule").get<std::string>());
      spec.train_pairs = s.at("train_pairs").get<std::size_t>();
      spec.valid_pairs = s.at("valid_pairs").get<std::size_t>();
      spec.test_pairs = s.at("test_pairs").get<std::size_t>();
      spec.mix_rate = s.at("mix_rate").get<double>();
      c.specs.push_back(std::move(spec));
    }
    c.vocab = Vocabulary::from_json(json::parse(util::read_text(dir / "vocab.json")));
  } catch (const json::exception& e) {
    throw ValidationError("corpus metadata in " + dir.string() + ": " + e.what());
  }
  c.train = pairs_from_jsonl(util::read_text(dir / "train.jsonl"));
  c.valid = pairs_from_jsonl(util::read_text(dir / "valid.jsonl"));
  c.test = pairs_from_jsonl(util::read_text(dir / "test.jsonl"));
  if (c.hash() != meta.at("hash").get<std::string>()) {
    throw ValidationError("corpus in " + dir.string() + " does not match its recorded hash");
  }
  return c;
}

}  // namespace moelab::corpus

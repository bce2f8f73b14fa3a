#include "moelab/nnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "moelab/errors.hpp"
#include "moelab/ndgrad/serialize.hpp"
#include "moelab/util/files.hpp"
#include "moelab/util/rng.hpp"

namespace moelab::nnet {

namespace nd = moelab::ndgrad;
using nlohmann::json;

std::string to_string(Architecture a) {
  return a == Architecture::DecoderOnly ? "decoder-only" : "encoder-decoder";
}

Architecture architecture_from_string(const std::string& name) {
  if (name == "decoder-only") return Architecture::DecoderOnly;
  if (name == "encoder-decoder") return Architecture::EncoderDecoder;
  throw ConfigError("unknown architecture '" + name + "' (expected decoder-only, encoder-decoder)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(layers >= 1, "layers must be >= 1");
  require(heads >= 1, "heads must be >= 1");
  require(d_model >= 1 && d_model % heads == 0,
          "d_model " + std::to_string(d_model) + " must be divisible by heads " + std::to_string(heads));
  require(d_ff >= 1, "d_ff must be >= 1");
  require(experts >= 1, "experts must be >= 1");
  require(vocab_size > 4, "vocab_size must exceed the 4 reserved ids");
  require(tasks >= 1, "tasks must be >= 1");
  require(max_length >= 2, "max_length must be >= 2");
  require(moe_stride >= 1, "moe_stride must be >= 1");
  if (!plain_ffn) routing.validate(experts);
}

json to_json(const ModelConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"layers", c.layers},
          {"heads", c.heads},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"experts", c.experts},
          {"vocab_size", c.vocab_size},
          {"tasks", c.tasks},
          {"max_length", c.max_length},
          {"routing",
           {{"policy", routing::to_string(c.routing.policy.kind)},
            {"k", c.routing.policy.k},
            {"p", c.routing.policy.p},
            {"hierarchy", routing::to_string(c.routing.hierarchy)},
            {"context", c.routing.context},
            {"candidates", c.routing.candidates},
            {"renormalize_task_gates", c.routing.renormalize_task_gates}}},
          {"task_rep", routing::to_string(c.task_rep)},
          {"scalar_gate", c.scalar_gate},
          {"moe_stride", c.moe_stride},
          {"plain_ffn", c.plain_ffn},
          {"residual_ffn", c.residual_ffn}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"architecture", "layers", "heads", "d_model", "d_ff", "experts", "vocab_size", "tasks",
                  "max_length", "routing", "task_rep", "scalar_gate", "moe_stride", "plain_ffn",
                  "residual_ffn"},
                 "model config");
  ModelConfig c;
  try {
    if (j.contains("architecture")) c.architecture = architecture_from_string(j.at("architecture"));
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.experts = j.value("experts", c.experts);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.tasks = j.value("tasks", c.tasks);
    c.max_length = j.value("max_length", c.max_length);
    if (j.contains("routing")) {
      const auto& r = j.at("routing");
      reject_unknown(r, {"policy", "k", "p", "hierarchy", "context", "candidates", "renormalize_task_gates"},
                     "routing config");
      if (r.contains("policy")) c.routing.policy.kind = routing::policy_kind_from_string(r.at("policy"));
      c.routing.policy.k = r.value("k", c.routing.policy.k);
      c.routing.policy.p = r.value("p", c.routing.policy.p);
      if (r.contains("hierarchy")) c.routing.hierarchy = routing::hierarchy_from_string(r.at("hierarchy"));
      c.routing.context = r.value("context", c.routing.context);
      c.routing.candidates = r.value("candidates", c.routing.candidates);
      c.routing.renormalize_task_gates = r.value("renormalize_task_gates", c.routing.renormalize_task_gates);
    }
    if (j.contains("task_rep")) c.task_rep = routing::task_rep_from_string(j.at("task_rep"));
    c.scalar_gate = j.value("scalar_gate", c.scalar_gate);
    c.moe_stride = j.value("moe_stride", c.moe_stride);
    c.plain_ffn = j.value("plain_ffn", c.plain_ffn);
    c.residual_ffn = j.value("residual_ffn", c.residual_ffn);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- params

Tensor& ParamStore::add(const std::string& name, nd::Shape shape, double limit, std::uint64_t seed) {
  auto rng = util::Rng::derive(seed, "param/" + name);
  std::vector<double> values(nd::numel(shape));
  for (auto& v : values) v = (2.0 * rng.uniform() - 1.0) * limit;
  auto [it, fresh] = params_.emplace(name, Tensor::from(std::move(shape), std::move(values), true));
  if (!fresh) throw ConfigError("duplicate parameter " + name);
  return it->second;
}

Tensor& ParamStore::add_constant(const std::string& name, nd::Shape shape, double value) {
  auto [it, fresh] = params_.emplace(name, Tensor::full(std::move(shape), value, true));
  if (!fresh) throw ConfigError("duplicate parameter " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("no parameter named " + name);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("no parameter named " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) t.node()->grad.clear();
}

// ---------------------------------------------------------------- layers

Tensor ExpertFFN::forward(const Tensor& x) const {
  auto h = nd::relu(nd::add_row_bias(nd::matmul(x, w1), b1));
  return nd::add_row_bias(nd::matmul(h, w2), b2);
}

Tensor moe_forward(const Tensor& x, std::span<const std::vector<std::size_t>> selected, const Tensor& weights,
                   const MoELayerState& layer, ExpertCounters* counters) {
  const auto rows = x.rows();
  const auto n = layer.experts.size();
  if (selected.size() != rows) {
    throw DimensionError("moe_forward: " + std::to_string(selected.size()) + " selections for " +
                         std::to_string(rows) + " rows");
  }
  if (weights.rank() != 2 || weights.rows() != rows || weights.cols() != n) {
    throw DimensionError("moe_forward: weights " + nd::to_string(weights.shape()) + " for " +
                         std::to_string(rows) + " rows and " + std::to_string(n) + " experts");
  }
  std::vector<std::vector<std::size_t>> rows_of(n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto i : selected[r]) {
      if (i >= n) {
        throw RoutingError("expert index " + std::to_string(i) + " out of range for " + std::to_string(n) +
                           " experts");
      }
      rows_of[i].push_back(r);
    }
  }
  std::vector<Tensor> parts;
  std::vector<std::vector<std::size_t>> index;
  for (std::size_t i = 0; i < n; ++i) {
    if (rows_of[i].empty()) continue;
    const std::vector<std::size_t> cols(rows_of[i].size(), i);
    auto y = layer.experts[i].forward(nd::gather_rows(x, rows_of[i]));
    parts.push_back(nd::scale_rows(y, nd::gather_elements(weights, rows_of[i], cols)));
    index.push_back(std::move(rows_of[i]));
  }
  if (counters) {
    if (counters->load.size() < n) counters->load.resize(n, 0);
    counters->tokens += rows;
    for (std::size_t p = 0; p < index.size(); ++p) counters->activations += index[p].size();
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto i : selected[r]) ++counters->load[i];
    }
  }
  if (parts.empty()) return Tensor::zeros({rows, x.cols()});
  return nd::scatter_rows_sum(parts, index, rows);
}

Tensor moe_forward(const Tensor& x, const routing::RoutingDecision& decision, const MoELayerState& layer,
                   ExpertCounters* counters) {
  if (x.rank() != 2 || x.rows() != 1) throw DimensionError("moe_forward: expected one token row");
  const auto n = layer.experts.size();
  if (decision.gates.size() != n) {
    throw RoutingError("decision has " + std::to_string(decision.gates.size()) + " gates for " +
                       std::to_string(n) + " experts");
  }
  const std::vector<std::vector<std::size_t>> sel{decision.selected};
  return moe_forward(x, sel, Tensor::from({1, n}, decision.gates), layer, counters);
}

Tensor attention_block(const Tensor& x, const Tensor& kv, const AttentionParams& p, std::size_t heads,
                       std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal,
                       std::size_t max_length) {
  for (const auto* segs : {&q_segments, &kv_segments}) {
    for (const auto& s : *segs) {
      if (s.length > max_length) {
        throw ConfigError("sequence of length " + std::to_string(s.length) + " exceeds max_length " +
                          std::to_string(max_length));
      }
    }
  }
  auto q = nd::matmul(x, p.wq);
  auto k = nd::matmul(kv, p.wk);
  auto v = nd::matmul(kv, p.wv);
  return nd::matmul(nd::attention(q, k, v, heads, q_segments, kv_segments, causal), p.wo);
}

// ---------------------------------------------------------------- model

namespace {

double xavier(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

std::vector<std::string> stack_names(const ModelConfig& c, const std::string& prefix) {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < c.layers; ++b) out.push_back(prefix + "block" + std::to_string(b));
  return out;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  init_params();
}

std::vector<std::string> Model::block_names() const {
  if (config_.architecture == Architecture::DecoderOnly) return stack_names(config_, "");
  auto names = stack_names(config_, "encoder.");
  auto dec = stack_names(config_, "decoder.");
  names.insert(names.end(), dec.begin(), dec.end());
  return names;
}

void Model::init_params() {
  const auto d = config_.d_model, ff = config_.d_ff, v = config_.vocab_size, n = config_.experts;
  auto& P = params_;
  P.add("embed.token", {v, d}, xavier(v, d), seed_);
  P.add("embed.position", {config_.max_length, d}, xavier(config_.max_length, d), seed_);
  P.add("output.weight", {v, d}, xavier(v, d), seed_);
  P.add_constant("output.bias", {1, v}, 0.0);
  if (config_.uses_task_head()) {
    P.add("task.predictor", {config_.tasks, d}, xavier(config_.tasks, d), seed_);
    P.add("task.embeddings", {config_.tasks, d}, xavier(config_.tasks, d), seed_);
  }
  auto add_attention = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) P.add(prefix + "." + w, {d, d}, xavier(d, d), seed_);
  };
  auto add_norm = [&](const std::string& prefix) {
    P.add_constant(prefix + ".gamma", {1, d}, 1.0);
    P.add_constant(prefix + ".beta", {1, d}, 0.0);
  };
  auto add_ffn = [&](const std::string& prefix) {
    P.add(prefix + ".w1", {d, ff}, xavier(d, ff), seed_);
    P.add_constant(prefix + ".b1", {1, ff}, 0.0);
    P.add(prefix + ".w2", {ff, d}, xavier(ff, d), seed_);
    P.add_constant(prefix + ".b2", {1, d}, 0.0);
  };
  const auto names = block_names();
  for (std::size_t idx = 0; idx < names.size(); ++idx) {
    const auto& name = names[idx];
    const bool enc_dec = config_.architecture == Architecture::EncoderDecoder;
    const bool decoder_block = !enc_dec || idx >= config_.layers;
    const auto local = enc_dec ? idx % config_.layers : idx;
    add_attention(name + ".attn");
    add_norm(name + ".ln1");
    if (enc_dec && decoder_block) {
      add_attention(name + ".xattn");
      add_norm(name + ".lnx");
    }
    add_norm(name + ".ln2");
    if (!config_.is_moe_block(local)) {
      add_ffn(name + ".ffn.expert0");
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) add_ffn(name + ".ffn.expert" + std::to_string(i));
    if (config_.residual_ffn) add_ffn(name + ".ffn.residual");
    P.add(name + ".router.token", {n, d}, xavier(n, d), seed_);
    if (config_.routing.hierarchy == routing::Hierarchy::Hierarchical) {
      P.add(name + ".router.task", {n, d}, xavier(n, d), seed_);
    }
    if (config_.routing.context && decoder_block) {
      const std::size_t width = config_.scalar_gate ? 1 : d;
      P.add(name + ".gate.weight", {2 * d, width}, xavier(2 * d, width), seed_);
      P.add_constant(name + ".gate.bias", {1, width}, 0.0);
    }
  }
}

ExpertFFN Model::ffn(const std::string& prefix) const {
  return {params_.at(prefix + ".w1"), params_.at(prefix + ".b1"), params_.at(prefix + ".w2"),
          params_.at(prefix + ".b2"), Activation::Relu};
}

MoELayerState Model::moe_layer(const std::string& block) const {
  MoELayerState layer;
  for (std::size_t i = 0; i < config_.experts; ++i) layer.experts.push_back(ffn(block + ".ffn.expert" + std::to_string(i)));
  if (params_.contains(block + ".ffn.residual")) layer.residual = ffn(block + ".ffn.residual");
  layer.router.token_router = params_.at(block + ".router.token");
  if (params_.contains(block + ".router.task")) layer.router.task_router = params_.at(block + ".router.task");
  if (params_.contains(block + ".gate.weight")) {
    layer.router.gate_weight = params_.at(block + ".gate.weight");
    layer.router.gate_bias = params_.at(block + ".gate.bias");
  }
  return layer;
}

Tensor Model::embed(const std::vector<std::vector<TokenId>>& seqs, routing::PackedLayout& layout) const {
  std::vector<std::size_t> lengths;
  std::vector<TokenId> ids, positions;
  for (const auto& s : seqs) {
    if (s.empty()) throw ValidationError("empty input sequence");
    if (s.size() > config_.max_length) {
      throw ConfigError("sequence of length " + std::to_string(s.size()) + " exceeds max_length " +
                        std::to_string(config_.max_length));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0 || static_cast<std::size_t>(s[i]) >= config_.vocab_size) {
        throw ValidationError("token id " + std::to_string(s[i]) + " outside vocabulary of size " +
                              std::to_string(config_.vocab_size));
      }
      ids.push_back(s[i]);
      positions.push_back(static_cast<TokenId>(i));
    }
    lengths.push_back(s.size());
  }
  layout = routing::PackedLayout::from_lengths(lengths);
  return nd::add(nd::embedding(params_.at("embed.token"), ids),
                 nd::embedding(params_.at("embed.position"), positions));
}

Tensor Model::run_block(const std::string& name, bool decoder_block, const Tensor& x,
                        const routing::PackedLayout& layout, const Tensor* memory,
                        const routing::PackedLayout* memory_layout, const Tensor* task_rep, ForwardResult& out,
                        ExpertCounters* counters) const {
  auto attn = [&](const std::string& prefix) {
    return AttentionParams{params_.at(prefix + ".wq"), params_.at(prefix + ".wk"), params_.at(prefix + ".wv"),
                           params_.at(prefix + ".wo")};
  };
  auto norm = [&](const Tensor& t, const std::string& prefix) {
    return nd::layer_norm(t, params_.at(prefix + ".gamma"), params_.at(prefix + ".beta"));
  };
  const auto heads = config_.heads, max_len = config_.max_length;
  Tensor h = norm(nd::add(x, attention_block(x, x, attn(name + ".attn"), heads, layout.segments, layout.segments,
                                             decoder_block, max_len)),
                  name + ".ln1");
  if (memory) {
    h = norm(nd::add(h, attention_block(h, *memory, attn(name + ".xattn"), heads, layout.segments,
                                        memory_layout->segments, false, max_len)),
             name + ".lnx");
  }
  Tensor f;
  if (params_.contains(name + ".router.token")) {
    auto layer = moe_layer(name);
    auto options = config_.routing;
    if (!decoder_block) options.context = false;
    auto routed = routing::route_tokens(h, layout, task_rep, layer.router, options);
    std::vector<std::vector<std::size_t>> selected;
    selected.reserve(routed.decisions.size());
    for (const auto& d : routed.decisions) selected.push_back(d.selected);
    f = moe_forward(h, selected, routed.combine_weights, layer, counters);
    if (layer.residual) f = nd::add(f, layer.residual->forward(h));
    out.moe.push_back({name, decoder_block, layout, std::move(routed)});
  } else {
    f = ffn(name + ".ffn.expert0").forward(h);
  }
  return norm(nd::add(h, f), name + ".ln2");
}

ForwardResult Model::forward(const std::vector<SequenceInput>& batch, ExpertCounters* counters) const {
  if (batch.empty()) throw ValidationError("empty batch");
  ForwardResult out;
  const bool dec_only = config_.architecture == Architecture::DecoderOnly;
  std::vector<std::vector<TokenId>> first;
  for (const auto& s : batch) {
    if (s.source.empty()) throw ValidationError("empty source sequence");
    if (!dec_only && s.decoder.empty()) throw ValidationError("encoder-decoder input needs a decoder prefix");
    auto seq = s.source;
    if (dec_only) seq.insert(seq.end(), s.decoder.begin(), s.decoder.end());
    first.push_back(std::move(seq));
    out.source_rows.push_back(s.source.size());
  }
  routing::PackedLayout layout;
  Tensor x = embed(first, layout);

  Tensor task_rep;
  if (config_.uses_task_head()) {
    std::vector<Tensor> rows;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto begin = layout.segments[s].begin;
      rows.push_back(routing::predict_task(nd::slice_rows(x, begin, begin + out.source_rows[s]),
                                           params_.at("task.predictor")));
    }
    out.task_probs = nd::concat(rows, 0);
    const auto& emb = params_.at("task.embeddings");
    switch (config_.task_rep) {
      case routing::TaskRep::Mixed:
        task_rep = routing::mixed_task_rep(out.task_probs, emb);
        break;
      case routing::TaskRep::NonMixed: {
        std::vector<std::size_t> hard;
        const auto k = out.task_probs.cols();
        for (std::size_t s = 0; s < batch.size(); ++s) {
          auto row = out.task_probs.values().subspan(s * k, k);
          hard.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
        task_rep = nd::gather_rows(emb, hard);
        break;
      }
      case routing::TaskRep::Golden: {
        std::vector<std::size_t> gold;
        for (const auto& s : batch) {
          if (!s.task || *s.task >= config_.tasks) {
            throw ValidationError("golden task representation needs a valid task id for every sequence");
          }
          gold.push_back(*s.task);
        }
        task_rep = nd::gather_rows(emb, gold);
        break;
      }
    }
  }
  const Tensor* rep = task_rep.defined() ? &task_rep : nullptr;

  const auto names = block_names();
  if (dec_only) {
    for (const auto& name : names) {
      x = run_block(name, true, x, layout, nullptr, nullptr, rep, out, counters);
      out.hidden.push_back(x);
    }
    out.layout = std::move(layout);
  } else {
    for (std::size_t b = 0; b < config_.layers; ++b) {
      x = run_block(names[b], false, x, layout, nullptr, nullptr, rep, out, counters);
      out.hidden.push_back(x);
    }
    std::vector<std::vector<TokenId>> dec;
    for (const auto& s : batch) dec.push_back(s.decoder);
    routing::PackedLayout dec_layout;
    Tensor y = embed(dec, dec_layout);
    for (std::size_t b = config_.layers; b < names.size(); ++b) {
      y = run_block(names[b], true, y, dec_layout, &x, &layout, rep, out, counters);
      out.hidden.push_back(y);
    }
    x = y;
    out.layout = std::move(dec_layout);
  }
  out.logits = nd::add_row_bias(nd::matmul_nt(x, params_.at("output.weight")), params_.at("output.bias"));
  return out;
}

std::vector<std::vector<TokenId>> Model::greedy_decode(const std::vector<std::vector<TokenId>>& sources,
                                                       std::size_t max_new,
                                                       const std::vector<std::optional<std::size_t>>& tasks) const {
  constexpr TokenId kBos = 1, kEos = 2;
  nd::NoGradGuard no_grad;
  const auto n = sources.size();
  if (!tasks.empty() && tasks.size() != n) throw ValidationError("greedy_decode: one task per source expected");
  std::vector<std::vector<TokenId>> outputs(n);
  std::vector<std::vector<TokenId>> prefixes(n, std::vector<TokenId>{kBos});
  std::vector<std::size_t> active;
  for (std::size_t s = 0; s < n; ++s) active.push_back(s);
  const bool dec_only = config_.architecture == Architecture::DecoderOnly;
  const auto v = config_.vocab_size;
  for (std::size_t step = 0; step < max_new && !active.empty(); ++step) {
    std::vector<SequenceInput> batch;
    std::vector<std::size_t> next_active;
    std::vector<std::size_t> runnable;
    for (auto s : active) {
      const auto used = (dec_only ? sources[s].size() : 0) + prefixes[s].size();
      if (used > config_.max_length) continue;
      batch.push_back({sources[s], prefixes[s], tasks.empty() ? std::nullopt : tasks[s]});
      runnable.push_back(s);
    }
    if (batch.empty()) break;
    auto res = forward(batch);
    auto logits = res.logits.values();
    for (std::size_t j = 0; j < runnable.size(); ++j) {
      const auto s = runnable[j];
      const auto& seg = res.layout.segments[j];
      auto row = logits.subspan((seg.begin + seg.length - 1) * v, v);
      const auto tok = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      if (tok == kEos) continue;
      outputs[s].push_back(tok);
      prefixes[s].push_back(tok);
      next_active.push_back(s);
    }
    active = std::move(next_active);
  }
  return outputs;
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Model::save(const std::filesystem::path& path, const json& metadata, bool force) const {
  auto out = util::create_new(path, force, std::ios::out | std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  nd::write_u32(out, kVersion);
  const auto header = json{{"config", to_json(config_)}, {"seed", seed_}, {"metadata", metadata}}.dump();
  nd::write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  nd::write_u64(out, params_.size());
  for (const auto& [name, t] : params_.all()) {
    nd::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    nd::write_tensor(out, t);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path, json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic)) {
    throw IoError(path.string() + " is not a moelab checkpoint");
  }
  if (const auto version = nd::read_u32(in); version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_size = nd::read_u64(in);
  if (header_size > (1u << 24)) throw IoError("checkpoint header too large");
  std::string header(header_size, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_size))) throw IoError("truncated checkpoint header");
  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Model model(model_config_from_json(h.at("config")), h.at("seed").get<std::uint64_t>());
  if (metadata) *metadata = h.value("metadata", json::object());
  const auto count = nd::read_u64(in);
  if (count != model.params_.size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                  std::to_string(model.params_.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = nd::read_u32(in);
    if (len > 4096) throw IoError("corrupt tensor name in checkpoint");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError("truncated checkpoint");
    auto t = nd::read_tensor(in);
    if (!model.params_.contains(name)) throw IoError("checkpoint tensor " + name + " is not a model parameter");
    auto& target = model.params_.at(name);
    if (t.shape() != target.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " + nd::to_string(t.shape()) + ", expected " +
                    nd::to_string(target.shape()));
    }
    std::copy(t.values().begin(), t.values().end(), target.mutable_values().begin());
  }
  return model;
}

}  // namespace moelab::nnet

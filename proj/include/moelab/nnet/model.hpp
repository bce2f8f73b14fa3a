#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/ndgrad/ops.hpp"
#include "moelab/ndgrad/tensor.hpp"
#include "moelab/routing/routing.hpp"

namespace moelab::nnet {

using ndgrad::Segment;
using ndgrad::Tensor;
using TokenId = std::int64_t;

enum class Architecture { DecoderOnly, EncoderDecoder };
enum class Activation { Relu };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& name);

struct ModelConfig {
  Architecture architecture = Architecture::DecoderOnly;
  std::size_t layers = 2;  // per stack (encoder and decoder each, for encoder-decoder)
  std::size_t heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t experts = 8;
  std::size_t vocab_size = 256;
  std::size_t tasks = 5;
  std::size_t max_length = 64;
  routing::RoutingOptions routing;
  routing::TaskRep task_rep = routing::TaskRep::Mixed;
  bool scalar_gate = false;     // one context-gate value per token instead of per dimension
  std::size_t moe_stride = 1;   // block b is an MoE block when b % stride == 0
  bool plain_ffn = false;       // dense FFN everywhere, no routing at all
  bool residual_ffn = false;    // always-on dense FFN added to every MoE output

  void validate() const;
  bool uses_task_head() const { return !plain_ffn && routing.hierarchy != routing::Hierarchy::None; }
  bool is_moe_block(std::size_t block) const { return !plain_ffn && block % moe_stride == 0; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Named parameters in deterministic (lexicographic) order. Every tensor is
// initialised from its own stream derived from (seed, name), so adding a
// parameter never perturbs the others.
class ParamStore {
 public:
  Tensor& add(const std::string& name, ndgrad::Shape shape, double limit, std::uint64_t seed);
  Tensor& add_constant(const std::string& name, ndgrad::Shape shape, double value);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }

  // Drops every gradient buffer, so has_grad() afterwards means "reached by
  // the next backward pass".
  void zero_grad();

 private:
  std::map<std::string, Tensor> params_;
};

struct ExpertFFN {
  Tensor w1, b1, w2, b2;  // [d x d_ff], [1 x d_ff], [d_ff x d], [1 x d]
  Activation activation = Activation::Relu;

  Tensor forward(const Tensor& x) const;
};

struct MoELayerState {
  std::vector<ExpertFFN> experts;
  routing::RouterParams router;
  std::optional<ExpertFFN> residual;
};

// Counters of computed experts, incremented by moe_forward.
struct ExpertCounters {
  std::uint64_t tokens = 0;
  std::uint64_t activations = 0;
  std::vector<std::uint64_t> load;  // per expert
};

// Sum over selected experts of weight * e_i(x) for every row of x [R x d].
// weights [R x N] supplies the mixing coefficients; only experts appearing in
// `selected` are computed.
Tensor moe_forward(const Tensor& x, std::span<const std::vector<std::size_t>> selected,
                   const Tensor& weights, const MoELayerState& layer, ExpertCounters* counters = nullptr);

// Single-token form with the decision's gates as constants.
Tensor moe_forward(const Tensor& x, const routing::RoutingDecision& decision, const MoELayerState& layer,
                   ExpertCounters* counters = nullptr);

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [d x d]
};

// Multi-head attention of query rows x over key/value rows kv. Raises
// ConfigError when a segment is longer than max_length.
Tensor attention_block(const Tensor& x, const Tensor& kv, const AttentionParams& p, std::size_t heads,
                       std::span<const Segment> q_segments, std::span<const Segment> kv_segments,
                       bool causal, std::size_t max_length);

// One sequence of a batch. Decoder-only models read source ++ decoder as a
// single row block; encoder-decoder models encode `source` and decode
// `decoder`. `decoder` usually starts with BOS.
struct SequenceInput {
  std::vector<TokenId> source;
  std::vector<TokenId> decoder;
  std::optional<std::size_t> task;  // golden task, needed for TaskRep::Golden
};

struct MoETrace {
  std::string block;           // parameter prefix of the block
  bool decoder = true;         // false for encoder blocks
  routing::PackedLayout layout;
  routing::LayerRouting routing;
};

struct ForwardResult {
  Tensor logits;                    // [R x V], one row per decoder-side row
  routing::PackedLayout layout;     // decoder-side rows (whole sequence for decoder-only)
  std::vector<std::size_t> source_rows;  // per sequence, rows belonging to the source
  Tensor task_probs;                // [B x K] when the task head is used
  std::vector<MoETrace> moe;        // one entry per MoE block, execution order
  std::vector<Tensor> hidden;       // output of every block, execution order
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ForwardResult forward(const std::vector<SequenceInput>& batch, ExpertCounters* counters = nullptr) const;

  // Greedy decoding, batched over sources. Each output stops at EOS (not
  // included) or after max_new tokens.
  std::vector<std::vector<TokenId>> greedy_decode(const std::vector<std::vector<TokenId>>& sources,
                                                  std::size_t max_new,
                                                  const std::vector<std::optional<std::size_t>>& tasks = {}) const;

  MoELayerState moe_layer(const std::string& block) const;
  ExpertFFN ffn(const std::string& prefix) const;

  // Checkpoint: magic, version, JSON header (config, seed, metadata), then
  // named tensors in lexicographic order.
  void save(const std::filesystem::path& path, const nlohmann::json& metadata = {}, bool force = false) const;
  static Model load(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

  std::vector<std::string> block_names() const;

 private:
  void init_params();
  Tensor embed(const std::vector<std::vector<TokenId>>& seqs, routing::PackedLayout& layout) const;
  Tensor run_block(const std::string& name, bool decoder_block, const Tensor& x,
                   const routing::PackedLayout& layout, const Tensor* memory,
                   const routing::PackedLayout* memory_layout, const Tensor* task_rep, ForwardResult& out,
                   ExpertCounters* counters) const;

  ModelConfig config_;
  std::uint64_t seed_;
  ParamStore params_;
};

}  // namespace moelab::nnet

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/corpus/corpus.hpp"
#include "moelab/harness/bleu.hpp"
#include "moelab/harness/optim.hpp"
#include "moelab/harness/stats.hpp"
#include "moelab/nnet/model.hpp"
#include "moelab/objectives/losses.hpp"

namespace moelab::harness {

// Switches that turn the full task-guided, context-responsive model into its
// ablations. Applied on top of the base model config.
struct AblationFlags {
  bool no_hierarchy = false;
  bool no_context = false;
  bool golden_rep = false;
  bool non_mixed_rep = false;
  bool flat_infusion = false;

  void validate() const;
  nnet::ModelConfig apply(nnet::ModelConfig base) const;
  nlohmann::json to_json() const;
  static AblationFlags from_json(const nlohmann::json& j);
};

struct Variant {
  std::string id;     // full, no-hierarchy, no-context, golden-rep, non-mixed-rep, flat-infusion, vanilla, context-only
  std::string label;  // row label in comparison tables
  AblationFlags flags;
};

Variant variant_by_id(const std::string& id);

struct OptimConfig {
  AdamHyper adam;
  std::size_t warmup = 200;
  double clip_norm = 1.0;
};

struct EvalConfig {
  std::string split = "test";
  std::size_t max_sentences = 0;  // 0: the whole split; otherwise evenly strided
  std::size_t chunk = 64;         // sentences per forward/decode batch
  std::size_t max_new = 0;        // 0: longest corpus sentence + 2
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  nnet::ModelConfig model;  // vocab_size and tasks are taken from the corpus
  corpus::CorpusConfig corpus;
  objectives::LossWeights weights;
  OptimConfig optim;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double temperature = 1.5;
  std::size_t curve_window = 50;     // steps per point of the activated-expert curve
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  EvalConfig eval;
  AblationFlags ablation;

  void validate() const;
  nnet::ModelConfig effective_model() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

std::vector<std::string> preset_names();
ExperimentConfig preset(const std::string& name);

struct EvalResult {
  BleuScore bleu;
  std::optional<double> task_accuracy;
  std::optional<double> secondary_mass_median;  // over mix-in sentences
  std::size_t mixed_sentences = 0;
  std::size_t sentences = 0;
  RoutingStats routing;
  InvariantReport invariants;
  std::vector<Sentence> hypotheses;

  nlohmann::json to_json() const;
};

// Teacher-forced routing statistics plus greedy-decoding BLEU on a split.
// Work is split into fixed chunks, so results do not depend on `jobs`.
EvalResult evaluate(const nnet::Model& model, const corpus::Corpus& corpus, const EvalConfig& eval,
                    std::size_t jobs = 1, std::vector<TraceRecord>* trace = nullptr);

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  objectives::LossBreakdown loss;
  double activated = 0.0;
  std::uint64_t decisions = 0;

  nlohmann::json to_json() const;
};

struct ExperimentRecord {
  std::string name;
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string corpus_hash;
  std::string status = "ok";
  std::size_t steps_completed = 0;
  std::vector<nlohmann::json> losses;   // per-step loss breakdowns
  std::vector<double> activation_curve; // window means of training activated experts
  InvariantReport train_invariants;
  std::optional<EvalResult> eval;
  double wall_clock_seconds = 0.0;
  nlohmann::json config;

  double final_loss() const;
  nlohmann::json to_json() const;
};

// Canonical JSON-lines serialisation of per-step metrics (no wall-clock data).
std::string metrics_line(const StepMetrics& m);

// Builds the per-batch objective from a forward pass. `targets` has one
// entry per logits row (-1 ignored); `golden` one task per sequence.
objectives::LossParts loss_parts(const nnet::ModelConfig& config, const nnet::ForwardResult& result,
                                 std::span<const std::int64_t> targets, std::span<const std::size_t> golden);

// Teacher-forcing inputs and row targets for a batch of pairs.
struct TeacherBatch {
  std::vector<nnet::SequenceInput> inputs;
  std::vector<std::int64_t> targets;
  std::vector<std::size_t> golden;
};
TeacherBatch teacher_batch(const std::vector<const corpus::ParallelPair*>& pairs, nnet::Architecture arch);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  bool force = false;
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
  const corpus::Corpus* corpus = nullptr;  // reuse instead of generating from the seed
  bool evaluate = true;
  bool save_corpus = true;
  // Test hook, called before each step's forward pass.
  std::function<void(std::size_t step, nnet::Model&)> before_step;
};

struct TrainOutcome {
  ExperimentRecord record;
  std::shared_ptr<nnet::Model> model;
  std::vector<StepMetrics> metrics;
};

// Trains one configuration. With an output directory, writes metrics.jsonl,
// record.json, checkpoint.bin and corpus/ (all append-or-fail). A non-finite
// loss or gradient stops training, saves the last good parameters to
// checkpoint-last-good.bin and throws NumericError.
TrainOutcome train(const ExperimentConfig& config, const RunOptions& options = {});

struct AblationSuite {
  std::string name;
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds;
};

std::vector<std::string> ablation_preset_names();
AblationSuite ablation_preset(const std::string& name);

struct AblationRow {
  std::string variant;
  std::string label;
  std::uint64_t seed = 0;
  double bleu = 0.0;
  double mean_activated = 0.0;
  std::map<std::size_t, double> per_task_activated;
  std::optional<double> task_accuracy;
  std::optional<double> secondary_mass_median;
  InvariantReport invariants;  // training and evaluation decisions together
  double final_loss = 0.0;
  std::string corpus_hash;
  std::vector<double> activation_curve;
  double wall_clock_seconds = 0.0;
};

struct AblationTable {
  std::string name;
  std::size_t tasks = 0;
  std::vector<AblationRow> rows;

  std::string to_csv() const;
  std::string to_text() const;
  const AblationRow& row(const std::string& variant, std::uint64_t seed) const;
};

// Runs every variant for every seed. Variants of one seed share one corpus.
AblationTable run_ablation_suite(const ExperimentConfig& base, const AblationSuite& suite,
                                 const RunOptions& options = {});

}  // namespace moelab::harness

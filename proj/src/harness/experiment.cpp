#include "moelab/harness/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "moelab/errors.hpp"
#include "moelab/util/files.hpp"
#include "moelab/util/rng.hpp"

namespace moelab::harness {

namespace nd = ndgrad;
using ndgrad::Tensor;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

routing::Policy policy_of(const nnet::ModelConfig& m) { return m.routing.policy; }

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- ablations

void AblationFlags::validate() const {
  if (golden_rep && non_mixed_rep) throw ConfigError("ablation: golden-rep and non-mixed-rep are exclusive");
  if (no_hierarchy && (golden_rep || non_mixed_rep || flat_infusion)) {
    throw ConfigError("ablation: task representation variants need task-guided routing (drop no-hierarchy)");
  }
}

nnet::ModelConfig AblationFlags::apply(nnet::ModelConfig base) const {
  validate();
  if (no_hierarchy) base.routing.hierarchy = routing::Hierarchy::None;
  if (no_context) base.routing.context = false;
  if (flat_infusion) base.routing.hierarchy = routing::Hierarchy::Flat;
  if (golden_rep || non_mixed_rep) {
    if (base.routing.hierarchy == routing::Hierarchy::None) {
      throw ConfigError("ablation: a task representation variant needs a task-guided base model");
    }
    base.task_rep = golden_rep ? routing::TaskRep::Golden : routing::TaskRep::NonMixed;
  }
  return base;
}

json AblationFlags::to_json() const {
  return {{"no_hierarchy", no_hierarchy},
          {"no_context", no_context},
          {"golden_rep", golden_rep},
          {"non_mixed_rep", non_mixed_rep},
          {"flat_infusion", flat_infusion}};
}

AblationFlags AblationFlags::from_json(const json& j) {
  const std::string where = "ablation";
  check_keys(j, {"no_hierarchy", "no_context", "golden_rep", "non_mixed_rep", "flat_infusion"}, where);
  AblationFlags f;
  read_opt(j, "no_hierarchy", f.no_hierarchy, where);
  read_opt(j, "no_context", f.no_context, where);
  read_opt(j, "golden_rep", f.golden_rep, where);
  read_opt(j, "non_mixed_rep", f.non_mixed_rep, where);
  read_opt(j, "flat_infusion", f.flat_infusion, where);
  f.validate();
  return f;
}

Variant variant_by_id(const std::string& id) {
  Variant v{id, "", {}};
  if (id == "full") {
    v.label = "THOR-MoE";
  } else if (id == "no-hierarchy") {
    v.label = "w/o hierarchical task-guided routing";
    v.flags.no_hierarchy = true;
  } else if (id == "no-context") {
    v.label = "w/o context-responsive routing";
    v.flags.no_context = true;
  } else if (id == "golden-rep") {
    v.label = "Golden Rep.";
    v.flags.golden_rep = true;
  } else if (id == "non-mixed-rep") {
    v.label = "Non-Mixed Rep.";
    v.flags.non_mixed_rep = true;
  } else if (id == "mixed-rep") {
    v.label = "Mixed Rep.";
  } else if (id == "flat-infusion") {
    v.label = "Infuse task Rep. into token Rep.";
    v.flags.flat_infusion = true;
  } else if (id == "vanilla") {
    v.label = "vanilla";
    v.flags.no_hierarchy = true;
    v.flags.no_context = true;
  } else if (id == "context-only") {
    v.label = "w/ ctx";
    v.flags.no_hierarchy = true;
  } else {
    throw ConfigError("unknown ablation variant '" + id + "'");
  }
  return v;
}

// ------------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  corpus.validate();
  ablation.validate();
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (curve_window == 0) throw ConfigError("curve_window must be >= 1");
  if (eval.chunk == 0) throw ConfigError("eval.chunk must be >= 1");
  if (eval.split != "train" && eval.split != "valid" && eval.split != "test") {
    throw ConfigError("eval.split must be train, valid or test");
  }
  const auto& a = optim.adam;
  if (!(std::isfinite(a.lr) && a.lr > 0.0)) throw ConfigError("optimizer.lr must be finite and > 0");
  if (!(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(a.eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  for (double w : {weights.alpha, weights.beta, weights.gamma, weights.delta}) {
    if (!(std::isfinite(w) && w >= 0.0)) throw ConfigError("loss weights must be finite and >= 0");
  }
  effective_model();
}

nnet::ModelConfig ExperimentConfig::effective_model() const {
  auto m = ablation.apply(model);
  m.vocab_size = corpus.vocab_size;
  m.tasks = corpus.tasks;
  m.validate();
  const auto needed = m.architecture == nnet::Architecture::DecoderOnly ? 2 * corpus.max_length + 2
                                                                         : corpus.max_length + 1;
  if (m.max_length < needed) {
    throw ConfigError("model max_length " + std::to_string(m.max_length) + " is below the " +
                      std::to_string(needed) + " positions the corpus needs");
  }
  return m;
}

json ExperimentConfig::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"model", nnet::to_json(model)},
          {"corpus", corpus::to_json(corpus)},
          {"loss_weights", objectives::to_json(weights)},
          {"optimizer",
           {{"lr", optim.adam.lr},
            {"beta1", optim.adam.beta1},
            {"beta2", optim.adam.beta2},
            {"eps", optim.adam.eps},
            {"warmup", optim.warmup},
            {"clip_norm", optim.clip_norm}}},
          {"steps", steps},
          {"batch_size", batch_size},
          {"temperature", temperature},
          {"curve_window", curve_window},
          {"checkpoint_every", checkpoint_every},
          {"eval",
           {{"split", eval.split},
            {"max_sentences", eval.max_sentences},
            {"chunk", eval.chunk},
            {"max_new", eval.max_new}}},
          {"ablation", ablation.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  const std::string where = "experiment";
  check_keys(j,
             {"name", "seed", "model", "corpus", "loss_weights", "optimizer", "steps", "batch_size",
              "temperature", "curve_window", "checkpoint_every", "eval", "ablation"},
             where);
  ExperimentConfig c;
  read_opt(j, "name", c.name, where);
  read_opt(j, "seed", c.seed, where);
  if (j.contains("model")) c.model = nnet::model_config_from_json(j.at("model"));
  if (j.contains("corpus")) c.corpus = corpus::corpus_config_from_json(j.at("corpus"));
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights = w.is_string() ? objectives::LossWeights::named(w.get<std::string>())
                              : objectives::weights_from_json(w);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, {"lr", "beta1", "beta2", "eps", "warmup", "clip_norm"}, "optimizer");
    read_opt(o, "lr", c.optim.adam.lr, "optimizer");
    read_opt(o, "beta1", c.optim.adam.beta1, "optimizer");
    read_opt(o, "beta2", c.optim.adam.beta2, "optimizer");
    read_opt(o, "eps", c.optim.adam.eps, "optimizer");
    read_opt(o, "warmup", c.optim.warmup, "optimizer");
    read_opt(o, "clip_norm", c.optim.clip_norm, "optimizer");
  }
  read_opt(j, "steps", c.steps, where);
  read_opt(j, "batch_size", c.batch_size, where);
  read_opt(j, "temperature", c.temperature, where);
  read_opt(j, "curve_window", c.curve_window, where);
  read_opt(j, "checkpoint_every", c.checkpoint_every, where);
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"split", "max_sentences", "chunk", "max_new"}, "eval");
    read_opt(e, "split", c.eval.split, "eval");
    read_opt(e, "max_sentences", c.eval.max_sentences, "eval");
    read_opt(e, "chunk", c.eval.chunk, "eval");
    read_opt(e, "max_new", c.eval.max_new, "eval");
  }
  if (j.contains("ablation")) c.ablation = AblationFlags::from_json(j.at("ablation"));
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return util::sha256_hex(to_json().dump()); }

// ------------------------------------------------------------------ presets

std::vector<std::string> preset_names() { return {"thor-top2", "thor-topp", "vanilla-top2", "vanilla-topp"}; }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.steps = 1000;
  c.optim.adam.lr = 3e-3;
  // The task head learns too slowly at desk scale with alpha = 1e-2.
  c.weights.alpha = 0.1;
  auto& r = c.model.routing;
  r.candidates = 4;
  if (name == "thor-top2" || name == "vanilla-top2") {
    r.policy = routing::Policy::top_k(2);
  } else if (name == "thor-topp" || name == "vanilla-topp") {
    r.policy = routing::Policy::top_p(0.5);
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  if (name.rfind("thor", 0) == 0) {
    r.hierarchy = routing::Hierarchy::Hierarchical;
    r.context = true;
  } else {
    r.hierarchy = routing::Hierarchy::None;
    r.context = false;
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------- batches/loss

TeacherBatch teacher_batch(const std::vector<const corpus::ParallelPair*>& pairs, nnet::Architecture arch) {
  TeacherBatch b;
  for (const auto* p : pairs) {
    nnet::SequenceInput in;
    in.source = p->source;
    in.decoder.push_back(corpus::kBos);
    in.decoder.insert(in.decoder.end(), p->target.begin(), p->target.end());
    in.task = p->task;
    if (arch == nnet::Architecture::DecoderOnly) b.targets.insert(b.targets.end(), p->source.size(), -1);
    b.targets.insert(b.targets.end(), p->target.begin(), p->target.end());
    b.targets.push_back(corpus::kEos);
    b.golden.push_back(p->task);
    b.inputs.push_back(std::move(in));
  }
  return b;
}

objectives::LossParts loss_parts(const nnet::ModelConfig& config, const nnet::ForwardResult& result,
                                 std::span<const std::int64_t> targets, std::span<const std::size_t> golden) {
  objectives::LossParts parts;
  parts.nmt = nd::cross_entropy(result.logits, targets);
  if (result.task_probs.defined()) parts.task_prediction = objectives::task_prediction_loss(result.task_probs, golden);
  if (result.moe.empty()) return parts;

  auto average = [](const std::vector<Tensor>& v) {
    Tensor acc = v.front();
    for (std::size_t i = 1; i < v.size(); ++i) acc = nd::add(acc, v[i]);
    return nd::scale(acc, 1.0 / static_cast<double>(v.size()));
  };
  const bool hierarchical = config.routing.hierarchy == routing::Hierarchy::Hierarchical;
  const bool topp = config.routing.policy.kind == routing::PolicyKind::TopP;
  std::vector<Tensor> bd, bt, ent;
  for (const auto& trace : result.moe) {
    const auto& lr = trace.routing;
    if (hierarchical && lr.task) bd.push_back(objectives::load_balance_task(lr.task->sets, lr.task->gates));
    std::vector<Tensor> per_seq;
    for (std::size_t s = 0; s < trace.layout.sequences(); ++s) {
      const auto seg = trace.layout.segments[s];
      std::vector<std::vector<std::size_t>> sel;
      for (std::size_t r = seg.begin; r < seg.begin + seg.length; ++r) sel.push_back(lr.decisions[r].selected);
      const auto probs = nd::slice_rows(lr.probs, seg.begin, seg.begin + seg.length);
      std::span<const std::size_t> cand;
      if (hierarchical && lr.task) cand = lr.task->sets[s];
      per_seq.push_back(objectives::load_balance_token(sel, probs, cand));
    }
    bt.push_back(average(per_seq));
    if (topp) ent.push_back(objectives::topp_entropy_loss(lr.probs));
  }
  if (!bd.empty()) parts.balance_task = average(bd);
  parts.balance_token = average(bt);
  if (!ent.empty()) parts.entropy = average(ent);
  return parts;
}

// ---------------------------------------------------------------- evaluate

json EvalResult::to_json() const {
  json j{{"bleu", bleu.score},
         {"bleu_detail",
          {{"matches", bleu.matches},
           {"totals", bleu.totals},
           {"candidate_length", bleu.candidate_length},
           {"reference_length", bleu.reference_length},
           {"brevity_penalty", bleu.brevity_penalty},
           {"signature", bleu.signature}}},
         {"sentences", sentences},
         {"mixed_sentences", mixed_sentences},
         {"routing", routing.to_json()},
         {"invariants", invariants.to_json()}};
  j["task_accuracy"] = task_accuracy ? json(*task_accuracy) : json(nullptr);
  j["secondary_mass_median"] = secondary_mass_median ? json(*secondary_mass_median) : json(nullptr);
  return j;
}

EvalResult evaluate(const nnet::Model& model, const corpus::Corpus& corpus, const EvalConfig& eval,
                    std::size_t jobs, std::vector<TraceRecord>* trace) {
  if (eval.chunk == 0) throw ConfigError("eval.chunk must be >= 1");
  const auto& split = corpus.split(eval.split);
  std::vector<const corpus::ParallelPair*> pairs;
  if (eval.max_sentences == 0 || eval.max_sentences >= split.size()) {
    for (const auto& p : split) pairs.push_back(&p);
  } else {
    // Evenly strided so every task stays represented.
    for (std::size_t i = 0; i < eval.max_sentences; ++i) pairs.push_back(&split[i * split.size() / eval.max_sentences]);
  }
  if (pairs.empty()) throw ValidationError("evaluation split '" + eval.split + "' is empty");
  const auto max_new = eval.max_new ? eval.max_new : corpus.config.max_length + 2;
  const auto& mc = model.config();

  struct ChunkResult {
    std::vector<TraceRecord> records;
    std::vector<Sentence> hyps;
    std::vector<std::vector<double>> task_probs;
  };
  const std::size_t chunks = (pairs.size() + eval.chunk - 1) / eval.chunk;
  std::vector<ChunkResult> results(chunks);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    nd::NoGradGuard no_grad;
    for (;;) {
      const auto c = next.fetch_add(1);
      if (c >= chunks) return;
      try {
        const auto begin = c * eval.chunk, end = std::min(pairs.size(), begin + eval.chunk);
        std::vector<const corpus::ParallelPair*> part(pairs.begin() + begin, pairs.begin() + end);
        const auto batch = teacher_batch(part, mc.architecture);
        const auto fwd = model.forward(batch.inputs);
        auto& out = results[c];
        out.records = collect_trace(fwd, batch.inputs, begin);
        if (fwd.task_probs.defined()) {
          for (std::size_t s = 0; s < part.size(); ++s) {
            auto row = fwd.task_probs.values().subspan(s * mc.tasks, mc.tasks);
            out.task_probs.emplace_back(row.begin(), row.end());
          }
        }
        std::vector<std::vector<nnet::TokenId>> sources;
        std::vector<std::optional<std::size_t>> tasks;
        for (const auto* p : part) {
          sources.push_back(p->source);
          tasks.push_back(p->task);
        }
        out.hyps = model.greedy_decode(sources, max_new, tasks);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(chunks);
        return;
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, chunks));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  EvalResult res;
  res.sentences = pairs.size();
  RoutingStatsAccumulator acc(mc.experts);
  std::vector<Sentence> refs;
  std::size_t correct = 0, predicted = 0;
  std::vector<double> secondary_mass;
  for (std::size_t c = 0; c < chunks; ++c) {
    auto& r = results[c];
    for (auto& rec : r.records) {
      acc.add(rec);
      check_invariants(rec, mc.routing.policy, res.invariants);
      if (trace) trace->push_back(std::move(rec));
    }
    for (auto& h : r.hyps) res.hypotheses.push_back(std::move(h));
    for (std::size_t s = 0; s < r.task_probs.size(); ++s) {
      const auto* p = pairs[c * eval.chunk + s];
      const auto& probs = r.task_probs[s];
      const auto arg = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      ++predicted;
      if (arg == p->task) ++correct;
      if (p->secondary) secondary_mass.push_back(probs[*p->secondary]);
    }
  }
  for (const auto* p : pairs) {
    refs.push_back(p->target);
    if (p->secondary) ++res.mixed_sentences;
  }
  res.routing = acc.finish();
  res.bleu = bleu(res.hypotheses, refs);
  if (predicted) res.task_accuracy = static_cast<double>(correct) / static_cast<double>(predicted);
  if (!secondary_mass.empty()) {
    std::sort(secondary_mass.begin(), secondary_mass.end());
    const auto n = secondary_mass.size();
    res.secondary_mass_median =
        n % 2 ? secondary_mass[n / 2] : 0.5 * (secondary_mass[n / 2 - 1] + secondary_mass[n / 2]);
  }
  return res;
}

// ----------------------------------------------------------------- records

json StepMetrics::to_json() const {
  return {{"step", step},
          {"lr", lr},
          {"grad_norm", grad_norm},
          {"loss", objectives::to_json(loss)},
          {"activated", activated},
          {"decisions", decisions}};
}

std::string metrics_line(const StepMetrics& m) { return m.to_json().dump() + "\n"; }

double ExperimentRecord::final_loss() const {
  if (losses.empty()) return 0.0;
  return losses.back().at("total").get<double>();
}

json ExperimentRecord::to_json() const {
  json j{{"name", name},
         {"variant", variant},
         {"seed", seed},
         {"config_hash", config_hash},
         {"corpus_hash", corpus_hash},
         {"status", status},
         {"steps_completed", steps_completed},
         {"losses", losses},
         {"activation_curve", activation_curve},
         {"train_invariants", train_invariants.to_json()},
         {"wall_clock_seconds", wall_clock_seconds},
         {"config", config}};
  j["eval"] = eval ? eval->to_json() : json(nullptr);
  if (eval) {
    j["bleu"] = eval->bleu.score;
    j["task_accuracy"] = eval->task_accuracy ? json(*eval->task_accuracy) : json(nullptr);
    j["mean_activated"] = eval->routing.mean_activated;
  }
  return j;
}

// ------------------------------------------------------------------- train

namespace {

using Snapshot = std::map<std::string, std::vector<double>>;

bool snapshot_finite(const nnet::ParamStore& params, Snapshot& out) {
  for (const auto& [name, t] : params.all()) {
    const auto v = t.values();
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
    out[name].assign(v.begin(), v.end());
  }
  return true;
}

void restore(nnet::Model& model, const Snapshot& snap) {
  for (auto& [name, t] : model.params().all()) {
    const auto& v = snap.at(name);
    std::copy(v.begin(), v.end(), t.mutable_values().begin());
  }
}

class BatchSampler {
 public:
  BatchSampler(const std::vector<corpus::ParallelPair>& train, std::size_t tasks, double tau, std::uint64_t seed)
      : rng_(util::Rng::derive(seed, "train/batches")), by_task_(tasks) {
    for (const auto& p : train) by_task_.at(p.task).push_back(&p);
    std::vector<std::size_t> sizes;
    for (const auto& v : by_task_) sizes.push_back(v.size());
    const auto q = corpus::temperature_sample(sizes, tau);
    double acc = 0.0;
    for (double x : q) cumulative_.push_back(acc += x);
  }

  std::vector<const corpus::ParallelPair*> next(std::size_t n) {
    std::vector<const corpus::ParallelPair*> out;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = rng_.uniform() * cumulative_.back();
      std::size_t t = 0;
      while (t + 1 < cumulative_.size() && (u >= cumulative_[t] || by_task_[t].empty())) ++t;
      const auto& pool = by_task_[t];
      out.push_back(pool[rng_.below(pool.size())]);
    }
    return out;
  }

 private:
  util::Rng rng_;
  std::vector<std::vector<const corpus::ParallelPair*>> by_task_;
  std::vector<double> cumulative_;
};

std::string variant_name(const AblationFlags& f) {
  std::vector<std::string> parts;
  if (f.no_hierarchy) parts.push_back("no-hierarchy");
  if (f.no_context) parts.push_back("no-context");
  if (f.golden_rep) parts.push_back("golden-rep");
  if (f.non_mixed_rep) parts.push_back("non-mixed-rep");
  if (f.flat_infusion) parts.push_back("flat-infusion");
  if (parts.empty()) return "full";
  std::string s = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) s += "+" + parts[i];
  return s;
}

}  // namespace

TrainOutcome train(const ExperimentConfig& config, const RunOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  const auto mc = config.effective_model();
  std::optional<corpus::Corpus> owned;
  if (!options.corpus) owned = corpus::generate_corpus(config.corpus, config.seed);
  const corpus::Corpus& data = options.corpus ? *options.corpus : *owned;
  if (data.vocab.size() != mc.vocab_size || data.specs.size() != mc.tasks) {
    throw ValidationError("corpus does not match the experiment's corpus config");
  }
  if (data.train.empty()) throw ValidationError("training split is empty");

  const bool write = !options.out_dir.empty();
  const auto& dir = options.out_dir;
  std::ofstream metrics_out;
  if (write) {
    std::filesystem::create_directories(dir);
    // Claim every output up front so an existing run is refused before any work.
    for (const char* f : {"record.json", "checkpoint.bin", "checkpoint-last-good.bin"}) {
      if (!options.force && std::filesystem::exists(dir / f)) {
        throw IoError("refusing to overwrite existing file " + (dir / f).string() + " (use --force)");
      }
    }
    metrics_out = util::create_new(dir / "metrics.jsonl", options.force);
    util::write_text(dir / "config.json", config.to_json().dump(2) + "\n", options.force);
    if (options.save_corpus) corpus::save_corpus(data, dir / "corpus", options.force);
  }

  TrainOutcome outcome;
  auto& rec = outcome.record;
  rec.name = config.name;
  rec.variant = variant_name(config.ablation);
  rec.seed = config.seed;
  rec.config_hash = config.hash();
  rec.corpus_hash = data.hash();
  rec.config = config.to_json();

  outcome.model = std::make_shared<nnet::Model>(mc, config.seed);
  auto& model = *outcome.model;
  Adam adam(config.optim.adam);
  BatchSampler sampler(data.train, mc.tasks, config.temperature, config.seed);

  auto metadata = [&](std::size_t step, const std::string& status) {
    return json{{"step", step},
                {"status", status},
                {"config_hash", rec.config_hash},
                {"corpus_hash", rec.corpus_hash},
                {"experiment", rec.config}};
  };

  Snapshot last_good;
  std::size_t last_good_step = 0;
  std::vector<double> window;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (snapshot_finite(model.params(), last_good)) last_good_step = step - 1;
    if (options.before_step) options.before_step(step, model);

    StepMetrics m;
    m.step = step;
    m.lr = inverse_sqrt_lr(config.optim.adam.lr, config.optim.warmup, step);
    std::string failure;
    try {
      const auto batch = teacher_batch(sampler.next(config.batch_size), mc.architecture);
      model.params().zero_grad();
      const auto fwd = model.forward(batch.inputs);
      const auto parts = loss_parts(mc, fwd, batch.targets, batch.golden);
      m.loss = objectives::combine(parts, config.weights, mc.routing.policy.kind);
      if (!std::isfinite(m.loss.total_value)) {
        failure = "non-finite loss";
      } else {
        m.loss.total.backward();
        m.grad_norm = clip_grad_norm(model.params(), config.optim.clip_norm);
        if (!std::isfinite(m.grad_norm)) failure = "non-finite gradient norm";
      }
      if (failure.empty()) {
        const auto records = collect_trace(fwd, batch.inputs);
        std::uint64_t activated = 0;
        for (const auto& r : records) {
          check_invariants(r, policy_of(mc), rec.train_invariants);
          activated += r.selected.size();
        }
        m.decisions = records.size();
        m.activated = records.empty() ? 0.0 : static_cast<double>(activated) / static_cast<double>(records.size());
      }
    } catch (const NumericError& e) {
      failure = e.what();
    }

    if (!failure.empty()) {
      rec.status = "diverged";
      rec.steps_completed = step - 1;
      std::string where = "no output directory";
      if (write) {
        restore(model, last_good);
        const auto path = dir / "checkpoint-last-good.bin";
        model.save(path, metadata(last_good_step, "diverged"), options.force);
        where = path.string();
        rec.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        util::write_text(dir / "record.json", rec.to_json().dump(2) + "\n", options.force);
      }
      throw NumericError("training diverged at step " + std::to_string(step) + " (" + failure +
                         "); last good parameters from step " + std::to_string(last_good_step) + " saved to " +
                         where);
    }

    adam.step(model.params(), m.lr);
    m.loss.total = Tensor();  // release the step's graph
    rec.losses.push_back(objectives::to_json(m.loss));
    rec.steps_completed = step;
    window.push_back(m.activated);
    if (window.size() == config.curve_window || step == config.steps) {
      rec.activation_curve.push_back(mean_of(window));
      window.clear();
    }
    if (write) {
      metrics_out << metrics_line(m);
      if (!metrics_out) throw IoError("failed writing " + (dir / "metrics.jsonl").string());
      if (config.checkpoint_every && step % config.checkpoint_every == 0 && step != config.steps) {
        model.save(dir / ("checkpoint-" + std::to_string(step) + ".bin"), metadata(step, "ok"), options.force);
      }
    }
    if (options.log && (step % 100 == 0 || step == config.steps)) {
      *options.log << "[" << config.name << "] step " << step << "/" << config.steps
                   << " loss " << format_fixed(m.loss.total_value, 4) << " activated "
                   << format_fixed(m.activated, 3) << "\n";
    }
    outcome.metrics.push_back(std::move(m));
  }
  metrics_out.close();

  if (options.evaluate) rec.eval = evaluate(model, data, config.eval, options.jobs);
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (write) {
    auto meta = metadata(config.steps, "ok");
    if (rec.eval) meta["bleu"] = rec.eval->bleu.score;
    model.save(dir / "checkpoint.bin", meta, options.force);
    util::write_text(dir / "record.json", rec.to_json().dump(2) + "\n", options.force);
  }
  if (options.log && rec.eval) {
    *options.log << "[" << config.name << "] BLEU " << format_fixed(rec.eval->bleu.score, 2) << " activated "
                 << format_fixed(rec.eval->routing.mean_activated, 3) << "\n";
  }
  return outcome;
}

// ---------------------------------------------------------------- ablation

std::vector<std::string> ablation_preset_names() { return {"table3", "table4", "table5", "table6"}; }

AblationSuite ablation_preset(const std::string& name) {
  AblationSuite s;
  s.name = name;
  s.seeds = {1, 2, 3};
  auto add = [&](const std::string& id, const std::string& label) {
    auto v = variant_by_id(id);
    if (!label.empty()) v.label = label;
    s.variants.push_back(v);
  };
  if (name == "table3") {
    add("full", "THOR-MoE");
    add("no-hierarchy", "");
    add("no-context", "");
  } else if (name == "table4") {
    add("no-hierarchy", "baseline");
    add("non-mixed-rep", "");
    add("golden-rep", "");
    add("mixed-rep", "");
  } else if (name == "table5") {
    add("no-hierarchy", "baseline");
    add("flat-infusion", "");
    add("full", "Hierarchical task-guided routing");
  } else if (name == "table6") {
    add("vanilla", "Top-p");
    add("context-only", "Top-p w/ ctx");
  } else {
    throw ConfigError("unknown ablation preset '" + name + "'");
  }
  return s;
}

const AblationRow& AblationTable::row(const std::string& variant, std::uint64_t seed) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.seed == seed) return r;
  }
  throw ValidationError("no row for variant '" + variant + "' and seed " + std::to_string(seed));
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "variant,label,seed,bleu,mean_activated,task_accuracy";
  for (std::size_t t = 0; t < tasks; ++t) os << ",activated_task" << t;
  os << ",final_loss,corpus_hash\n";
  for (const auto& r : rows) {
    os << r.variant << ",\"" << r.label << "\"," << r.seed << "," << r.bleu << "," << r.mean_activated << ",";
    if (r.task_accuracy) os << *r.task_accuracy;
    for (std::size_t t = 0; t < tasks; ++t) {
      os << ",";
      auto it = r.per_task_activated.find(t);
      if (it != r.per_task_activated.end()) os << it->second;
    }
    os << "," << r.final_loss << "," << r.corpus_hash << "\n";
  }
  return os.str();
}

std::string AblationTable::to_text() const {
  std::vector<std::string> labels;
  std::set<std::uint64_t> seeds;
  for (const auto& r : rows) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    seeds.insert(r.seed);
  }
  std::size_t width = 7;
  for (const auto& l : labels) width = std::max(width, l.size());
  std::ostringstream os;
  auto header = [&](const std::string& title) {
    os << title << "\n" << std::left << std::setw(static_cast<int>(width)) << "variant" << "  " << std::right
       << std::setw(8) << "BLEU" << std::setw(10) << "activated" << std::setw(10) << "task acc";
    for (std::size_t t = 0; t < tasks; ++t) os << std::setw(8) << ("act t" + std::to_string(t));
    os << "\n";
  };
  auto line = [&](const std::string& label, double b, double act, std::optional<double> acc,
                  const std::map<std::size_t, double>& per_task) {
    os << std::left << std::setw(static_cast<int>(width)) << label << "  " << std::right << std::setw(8)
       << format_fixed(b, 2) << std::setw(10) << format_fixed(act, 3) << std::setw(10)
       << (acc ? format_fixed(*acc, 3) : std::string("-"));
    for (std::size_t t = 0; t < tasks; ++t) {
      auto it = per_task.find(t);
      os << std::setw(8) << (it != per_task.end() ? format_fixed(it->second, 3) : std::string("-"));
    }
    os << "\n";
  };
  for (auto seed : seeds) {
    header(name + " seed " + std::to_string(seed));
    for (const auto& r : rows) {
      if (r.seed == seed) line(r.label, r.bleu, r.mean_activated, r.task_accuracy, r.per_task_activated);
    }
    os << "\n";
  }
  header(name + " mean over " + std::to_string(seeds.size()) + " seeds");
  for (const auto& label : labels) {
    double b = 0, act = 0, acc = 0;
    std::size_t n = 0, n_acc = 0;
    std::map<std::size_t, double> per_task;
    for (const auto& r : rows) {
      if (r.label != label) continue;
      ++n;
      b += r.bleu;
      act += r.mean_activated;
      if (r.task_accuracy) {
        acc += *r.task_accuracy;
        ++n_acc;
      }
      for (auto [t, v] : r.per_task_activated) per_task[t] += v;
    }
    for (auto& [t, v] : per_task) v /= static_cast<double>(n);
    line(label, b / static_cast<double>(n), act / static_cast<double>(n),
         n_acc ? std::optional<double>(acc / static_cast<double>(n_acc)) : std::nullopt, per_task);
  }
  return os.str();
}

AblationTable run_ablation_suite(const ExperimentConfig& base, const AblationSuite& suite, const RunOptions& options) {
  if (suite.variants.empty() || suite.seeds.empty()) throw ConfigError("ablation suite needs variants and seeds");
  AblationTable table;
  table.name = suite.name;
  table.tasks = base.corpus.tasks;
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    for (const char* f : {"ablation.csv", "ablation.txt"}) {
      if (!options.force && std::filesystem::exists(options.out_dir / f)) {
        throw IoError("refusing to overwrite existing file " + (options.out_dir / f).string() + " (use --force)");
      }
    }
  }
  for (auto seed : suite.seeds) {
    auto seeded = base;
    seeded.seed = seed;
    const auto data = corpus::generate_corpus(seeded.corpus, seed);
    if (write) corpus::save_corpus(data, options.out_dir / ("corpus-seed" + std::to_string(seed)), options.force);
    for (const auto& v : suite.variants) {
      auto cfg = seeded;
      cfg.ablation = v.flags;
      cfg.name = base.name + "/" + v.id + "/seed" + std::to_string(seed);
      auto run = options;
      run.corpus = &data;
      run.evaluate = true;
      run.save_corpus = false;
      if (write) run.out_dir = options.out_dir / (v.id + "-seed" + std::to_string(seed));
      const auto out = train(cfg, run);
      const auto& ev = *out.record.eval;
      AblationRow row;
      row.variant = v.id;
      row.label = v.label;
      row.seed = seed;
      row.bleu = ev.bleu.score;
      row.mean_activated = ev.routing.mean_activated;
      row.per_task_activated = ev.routing.per_task_mean;
      row.task_accuracy = ev.task_accuracy;
      row.secondary_mass_median = ev.secondary_mass_median;
      row.invariants = out.record.train_invariants;
      row.invariants.merge(ev.invariants);
      row.final_loss = out.record.final_loss();
      row.corpus_hash = out.record.corpus_hash;
      row.activation_curve = out.record.activation_curve;
      row.wall_clock_seconds = out.record.wall_clock_seconds;
      table.rows.push_back(std::move(row));
    }
  }
  if (write) {
    util::write_text(options.out_dir / "ablation.csv", table.to_csv(), options.force);
    util::write_text(options.out_dir / "ablation.txt", table.to_text(), options.force);
  }
  return table;
}

}  // namespace moelab::harness

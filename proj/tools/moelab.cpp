#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/corpus/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/harness/experiment.hpp"
#include "moelab/util/files.hpp"

using namespace moelab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::size_t jobs = 1;
  bool quiet = false;
  std::optional<std::size_t> steps;
};

void add_common(CLI::App* cmd, Common& c, bool with_preset, bool with_jobs) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)");
  if (with_preset) cmd->add_option("--preset", c.preset, "Built-in preset name");
  cmd->add_option("--seed", c.seed, "Seed override");
  cmd->add_option("--out", c.out, "Output directory")->required();
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
  if (with_jobs) cmd->add_option("--jobs", c.jobs, "Evaluation threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", c.quiet, "Only print the final summary");
}

harness::ExperimentConfig load_config(const Common& c, const std::string& fallback) {
  if (!c.config.empty() && !c.preset.empty()) throw ConfigError("give either --config or --preset, not both");
  harness::ExperimentConfig cfg;
  if (!c.config.empty()) {
    json j;
    try {
      j = json::parse(util::read_text(c.config));
    } catch (const json::parse_error& e) {
      throw ConfigError(c.config + ": " + e.what());
    }
    cfg = harness::ExperimentConfig::from_json(j);
  } else {
    cfg = harness::preset(c.preset.empty() ? fallback : c.preset);
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.steps) cfg.steps = *c.steps;
  cfg.validate();
  return cfg;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int gen_corpus(const Common& c) {
  const auto cfg = load_config(c, "thor-top2");
  const auto data = corpus::generate_corpus(cfg.corpus, cfg.seed);
  corpus::save_corpus(data, c.out, c.force);
  std::cout << "corpus " << data.hash() << "\n";
  if (!c.quiet) {
    std::cout << "train " << data.train.size() << " valid " << data.valid.size() << " test " << data.test.size()
              << " -> " << c.out << "\n";
  }
  return 0;
}

int train(const Common& c) {
  const auto cfg = load_config(c, "thor-top2");
  harness::RunOptions opt;
  opt.out_dir = c.out;
  opt.force = c.force;
  opt.jobs = c.jobs;
  if (!c.quiet) opt.log = &std::cerr;
  const auto out = harness::train(cfg, opt);
  const auto& ev = *out.record.eval;
  std::cout << "bleu " << fixed(ev.bleu.score, 4) << " activated " << fixed(ev.routing.mean_activated, 4);
  if (ev.task_accuracy) std::cout << " task_accuracy " << fixed(*ev.task_accuracy, 4);
  std::cout << " violations " << out.record.train_invariants.violations() + ev.invariants.violations() << "\n";
  return 0;
}

struct LoadedRun {
  nnet::Model model;
  corpus::Corpus data;
  harness::EvalConfig eval;
  json meta;
};

LoadedRun load_run(const fs::path& dir) {
  json meta;
  auto model = nnet::Model::load(dir / "checkpoint.bin", &meta);
  auto data = corpus::load_corpus(dir / "corpus");
  harness::EvalConfig eval;
  if (meta.contains("experiment")) eval = harness::ExperimentConfig::from_json(meta.at("experiment")).eval;
  if (meta.contains("corpus_hash") && meta.at("corpus_hash").get<std::string>() != data.hash()) {
    throw ValidationError("corpus in " + dir.string() + " does not match the checkpoint");
  }
  return {std::move(model), std::move(data), eval, std::move(meta)};
}

int eval(const Common& c) {
  const fs::path dir = c.out;
  const auto run = load_run(dir);
  const auto res = harness::evaluate(run.model, run.data, run.eval, c.jobs);
  util::write_text(dir / "eval.json", res.to_json().dump(2) + "\n", c.force);
  std::cout << "bleu " << std::setprecision(17) << res.bleu.score << "\n";
  if (run.meta.contains("bleu")) {
    const double recorded = run.meta.at("bleu").get<double>();
    const double diff = std::abs(recorded - res.bleu.score);
    std::cout << "recorded " << recorded << " diff " << diff << "\n";
    if (!(diff <= 1e-9)) {
      std::cerr << "error: evaluation does not reproduce the recorded BLEU\n";
      return 2;
    }
  }
  if (!c.quiet) {
    std::cout << "activated " << fixed(res.routing.mean_activated, 4);
    if (res.task_accuracy) std::cout << " task_accuracy " << fixed(*res.task_accuracy, 4);
    std::cout << " signature " << res.bleu.signature << "\n";
  }
  return 0;
}

int route_stats(const Common& c) {
  const fs::path dir = c.out;
  const auto run = load_run(dir);
  std::vector<harness::TraceRecord> trace;
  const auto res = harness::evaluate(run.model, run.data, run.eval, c.jobs, &trace);
  {
    auto out = util::create_new(dir / "trace.jsonl", c.force);
    for (const auto& r : trace) out << harness::to_json(r).dump() << "\n";
    if (!out) throw IoError("failed writing " + (dir / "trace.jsonl").string());
  }
  json j{{"routing", res.routing.to_json()}, {"invariants", res.invariants.to_json()}};
  util::write_text(dir / "route-stats.json", j.dump(2) + "\n", c.force);
  const auto& st = res.routing;
  std::cout << "decisions " << st.decisions << " activated " << fixed(st.mean_activated, 4) << " violations "
            << res.invariants.violations() << "\n";
  if (!c.quiet) {
    for (const auto& [task, mean] : st.per_task_mean) std::cout << "task " << task << " " << fixed(mean, 4) << "\n";
    for (std::size_t l = 0; l < st.load.size(); ++l) {
      std::cout << "layer " << l << " load";
      for (auto n : st.load[l]) std::cout << " " << n;
      std::cout << " entropy " << fixed(st.load_entropy[l], 4) << "\n";
    }
  }
  return 0;
}

int ablate(const Common& c) {
  if (c.preset.empty()) throw ConfigError("ablate needs --preset (one of table3, table4, table5, table6)");
  auto suite = harness::ablation_preset(c.preset);
  Common base_args = c;
  base_args.preset.clear();
  const auto base = load_config(base_args, "thor-topp");
  if (c.seed) suite.seeds = {*c.seed, *c.seed + 1, *c.seed + 2};
  harness::RunOptions opt;
  opt.out_dir = c.out;
  opt.force = c.force;
  opt.jobs = c.jobs;
  if (!c.quiet) opt.log = &std::cerr;
  const auto table = harness::run_ablation_suite(base, suite, opt);
  std::cout << table.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: mixture-of-experts routing laboratory"};
  app.require_subcommand(1);
  Common c;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic multi-task corpus");
  add_common(gen, c, true, false);
  auto* tr = app.add_subcommand("train", "Train one configuration and evaluate it");
  add_common(tr, c, true, true);
  tr->add_option("--steps", c.steps, "Override the number of training steps");
  auto* ev = app.add_subcommand("eval", "Re-evaluate the checkpoint of a run directory (--out)");
  add_common(ev, c, false, true);
  auto* rs = app.add_subcommand("route-stats", "Export routing traces and statistics of a run (--out)");
  add_common(rs, c, false, true);
  auto* ab = app.add_subcommand("ablate", "Run an ablation suite over paired seeds");
  add_common(ab, c, true, true);
  ab->add_option("--steps", c.steps, "Override the number of training steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) return gen_corpus(c);
    if (*tr) return train(c);
    if (*ev) return eval(c);
    if (*rs) return route_stats(c);
    if (*ab) return ablate(c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

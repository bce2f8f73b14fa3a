#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"
#include "moelab/corpus/corpus.hpp"
#include "moelab/errors.hpp"
#include "moelab/harness/bleu.hpp"
#include "moelab/harness/experiment.hpp"
#include "moelab/routing/routing.hpp"

namespace py = pybind11;
using namespace moelab;
using nlohmann::json;

namespace {

// Structured values cross the boundary as JSON text; the Python package
// decodes them into dicts.
std::string route(const std::vector<double>& probs, const std::string& policy, std::size_t k, double p) {
  const auto kind = routing::policy_kind_from_string(policy);
  const auto d = routing::route(probs, kind == routing::PolicyKind::TopK ? routing::Policy::top_k(k)
                                                                         : routing::Policy::top_p(p));
  return json{{"selected", d.selected}, {"gates", d.gates}, {"activated", d.activated_count}}.dump();
}

std::string bleu(const std::vector<std::vector<std::int64_t>>& cands,
                 const std::vector<std::vector<std::int64_t>>& refs) {
  const auto b = harness::bleu(cands, refs);
  return json{{"score", b.score},
              {"matches", b.matches},
              {"totals", b.totals},
              {"brevity_penalty", b.brevity_penalty},
              {"signature", b.signature}}
      .dump();
}

std::string generate_corpus(const std::string& config, std::uint64_t seed) {
  const auto c = corpus::generate_corpus(corpus::corpus_config_from_json(json::parse(config)), seed);
  json splits;
  for (const char* name : {"train", "valid", "test"}) {
    json rows = json::array();
    for (const auto& p : c.split(name)) rows.push_back(corpus::to_json(p));
    splits[name] = rows;
  }
  return json{{"hash", c.hash()}, {"vocab", c.vocab.to_json()}, {"splits", splits}}.dump();
}

std::string preset(const std::string& name) { return harness::preset(name).to_json().dump(); }

std::string train(const std::string& config, const std::string& out_dir, std::size_t jobs, bool force) {
  const auto cfg = harness::ExperimentConfig::from_json(json::parse(config));
  harness::RunOptions opt;
  opt.out_dir = out_dir;
  opt.jobs = jobs;
  opt.force = force;
  py::gil_scoped_release release;
  return harness::train(cfg, opt).record.to_json().dump();
}

}  // namespace

PYBIND11_MODULE(_moelab, m) {
  m.doc() = "Mixture-of-experts routing laboratory (native core)";
  // Translators run newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("route", &route, py::arg("probs"), py::arg("policy") = "topk", py::arg("k") = 2, py::arg("p") = 0.5);
  m.def("bleu", &bleu, py::arg("candidates"), py::arg("references"));
  m.def("generate_corpus", &generate_corpus, py::arg("config"), py::arg("seed"));
  m.def("preset", &preset, py::arg("name"));
  m.def("preset_names", &harness::preset_names);
  m.def("train", &train, py::arg("config"), py::arg("out_dir") = "", py::arg("jobs") = 1,
        py::arg("force") = false);
}

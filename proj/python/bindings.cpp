#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"
#include "reg4rec/dataeval/experiment.hpp"
#include "reg4rec/error.hpp"
#include "reg4rec/grpo/grpo.hpp"
#include "reg4rec/ladq/ladq.hpp"
#include "reg4rec/mpq/mpq.hpp"
#include "reg4rec/numerics/prob.hpp"
#include "reg4rec/rewards/rewards.hpp"

namespace py = pybind11;
using namespace reg4rec;
using nlohmann::json;

namespace {

numerics::Tensor to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw Error("empty-codebook", "codebook has no codewords");
  auto t = numerics::Tensor::matrix(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != t.cols()) throw Error("shape-mismatch", "ragged codebook rows");
    for (std::size_t j = 0; j < t.cols(); ++j) t(i, j) = rows[i][j];
  }
  return t;
}

std::string synth(const std::string& config, std::uint64_t seed) {
  dataeval::SynthConfig cfg;
  const auto j = json::parse(config);
  if (!j.empty()) cfg = j.get<dataeval::SynthConfig>();
  numerics::RngStream rng(seed);
  const auto corpus = dataeval::synth_corpus(cfg, rng);
  json out{{"interactions", json::array()}, {"items", json::object()}, {"planted", json::object()}};
  for (const auto& r : corpus.log.records)
    out["interactions"].push_back({{"user", r.user}, {"item", r.item}, {"ts", r.ts}, {"category", r.category}});
  for (const auto& [id, info] : corpus.log.items)
    out["items"][id] = {{"category", info.category}, {"features", info.features}};
  for (const auto& [id, ts] : corpus.planted) out["planted"][id] = ts.codes();
  return out.dump();
}

std::string experiment(const std::string& config, const std::string& out_dir) {
  const auto cfg = json::parse(config).get<dataeval::ExperimentConfig>();
  return dataeval::run_experiment(cfg, out_dir).metrics_json().dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "reg4rec native core";
  py::register_exception<Error>(m, "Error", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const json::exception& e) {
      py::set_error(PyExc_ValueError, e.what());
    }
  });

  m.def(
      "quantize_nearest",
      [](const std::vector<double>& latent, const std::vector<std::vector<double>>& codewords) {
        const auto n = mpq::quantize_nearest(latent, mpq::Codebook{to_matrix(codewords)});
        return py::make_tuple(n.index, n.distance);
      },
      py::arg("latent"), py::arg("codewords"), "Index and L2 distance of the nearest codeword.");
  m.def(
      "decay_mean", [](const std::vector<double>& r, double w) { return rewards::decay_mean(r, w); },
      py::arg("values"), py::arg("w"), "Decay-weighted mean sum_j w^j r_j / sum_j w^j.");
  m.def(
      "advantages", [](const std::vector<double>& r) { return grpo::advantages(r); }, py::arg("rewards"),
      "Group-standardized advantages.");
  m.def("clipped_surrogate", &grpo::clipped_surrogate, py::arg("rho"), py::arg("advantage"), py::arg("epsilon"));
  m.def(
      "js_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) { return numerics::js_divergence(p, q); },
      py::arg("p"), py::arg("q"), "Jensen-Shannon divergence in nats.");
  m.def(
      "quantize_value",
      [](double x, const std::string& precision) {
        return ladq::quantize_value(x, ladq::parse_precision(precision));
      },
      py::arg("x"), py::arg("precision"), "Round to f32, bf16 or fp8 (e4m3) and back.");
  m.def("config_hash", [](const std::string& config) { return dataeval::config_hash(json::parse(config)); });
  m.def("synth_corpus", &synth, py::arg("config"), py::arg("seed"));
  m.def("run_experiment", &experiment, py::arg("config"), py::arg("out_dir"));
}

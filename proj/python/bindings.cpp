#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pfrouter/config.hpp"
#include "pfrouter/evaluation.hpp"
#include "pfrouter/geometry.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/metrics.hpp"
#include "pfrouter/pipeline.hpp"
#include "pfrouter/routing.hpp"
#include "pfrouter/synth.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace pfrouter;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const double> view(const F64& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }
std::span<const std::uint8_t> view(const U8& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "pfrouter native core";

  auto base = py::register_exception<Error>(m, "PfrouterError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  py::class_<ActivationStore>(m, "ActivationStore")
      .def_static("open", &ActivationStore::open, py::arg("path"))
      .def_property_readonly("encoder_id", [](const ActivationStore& s) { return s.manifest().encoder_id; })
      .def_property_readonly("num_layers", [](const ActivationStore& s) { return s.manifest().num_layers; })
      .def_property_readonly("hidden_dim", [](const ActivationStore& s) { return s.manifest().hidden_dim; })
      .def_property_readonly("query_ids", [](const ActivationStore& s) { return s.manifest().query_ids; })
      .def("keys",
           [](const ActivationStore& s) {
             std::vector<std::pair<int, std::string>> out;
             for (const auto& k : s.keys()) out.emplace_back(k.layer, std::string(to_string(k.pooling)));
             return out;
           })
      .def(
          "matrix",
          [](const ActivationStore& s, int layer, const std::string& pooling) {
            const MatrixF& mat = s.matrix(layer, parse_pooling(pooling));
            py::array_t<float> out({mat.rows(), mat.cols()});
            std::copy(mat.data(), mat.data() + mat.size(), out.mutable_data());
            return out;
          },
          py::arg("layer"), py::arg("pooling") = "last_token")
      .def("validate_all", &ActivationStore::validate_all);

  m.def("canonical_matrix_name", [](int layer, const std::string& pooling) {
    return canonical_matrix_name(MatrixKey{layer, parse_pooling(pooling)});
  });

  m.def("roc_auc", [](const F64& s, const U8& y) { return roc_auc(view(s), view(y)); },
        py::arg("scores"), py::arg("labels"));
  m.def("brier", [](const F64& p, const U8& y) { return brier(view(p), view(y)); },
        py::arg("probabilities"), py::arg("labels"));

  m.def("effective_dimensionality", &effective_dimensionality, py::arg("x"));
  m.def("anisotropy", [](const Matrix& x) { return anisotropy(x); }, py::arg("x"));
  m.def("fisher_j", [](const Matrix& x, const U8& y) { return fisher_j(x, view(y)); },
        py::arg("x"), py::arg("labels"));

  m.def(
      "route",
      [](const Matrix& p_hat, const Matrix& costs, double c_min, double c_max, double lam) {
        CostMatrix c;
        c.c = costs;
        c.c_min = c_min;
        c.c_max = c_max;
        return route_choices(p_hat, c, lam);
      },
      py::arg("p_hat"), py::arg("costs"), py::arg("c_min"), py::arg("c_max"), py::arg("lam"),
      "index of the chosen model per row");

  m.def(
      "p_auccc",
      [](const std::vector<std::pair<double, double>>& pts) {
        std::vector<CurvePoint> curve;
        for (const auto& [x, y] : pts) curve.push_back(CurvePoint{x, y, 0, 0, 0});
        return p_auccc(curve);
      },
      py::arg("points"), "points are (invcost_norm, acc_norm) pairs");

  m.def(
      "bayes_optimal_auc",
      [](double strength, double bias, double noise_std, std::size_t draws, std::uint64_t seed) {
        return bayes_optimal_auc(strength, bias, noise_std, draws, seed);
      },
      py::arg("strength"), py::arg("bias"), py::arg("noise_std") = 1.0, py::arg("draws") = 100000,
      py::arg("seed") = 0);

  m.def(
      "synth",
      [](const fs::path& out, const std::string& spec_json) {
        const SynthSpec spec = spec_json.empty() ? SynthSpec{} : SynthSpec::from_json(nlohmann::json::parse(spec_json));
        const SynthDataset data = generate(spec);
        write_dataset(data, out);
        return parse_json(data.metadata.to_json().dump());
      },
      py::arg("out"), py::arg("spec_json") = "", "write a planted-signal dataset; returns its metadata");

  m.def(
      "run",
      [](const fs::path& config) {
        const RunConfig cfg = load_run_config(config);
        PipelineResult result;
        {
          py::gil_scoped_release release;
          result = run_pipeline(cfg);
        }
        return parse_json(result.report.to_json().dump());
      },
      py::arg("config"), "run every stage; returns the report");
}

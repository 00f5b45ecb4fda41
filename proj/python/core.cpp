#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "tequila/diagnostics.hpp"
#include "tequila/error.hpp"
#include "tequila/lut_gemv.hpp"
#include "tequila/packer.hpp"
#include "tequila/quantizer.hpp"
#include "tequila/train.hpp"

namespace py = pybind11;
using namespace tequila;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

WeightMatrix to_matrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw Error(ErrorKind::InvalidShape, "expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return WeightMatrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Granularity granularity(const std::string& kind, std::size_t group_size) {
  Granularity g;
  g.kind = parse_granularity_kind(kind);
  g.group_size = g.kind == GranularityKind::PerGroup ? group_size : 0;
  return g;
}

QuantizedTensor quantize_args(const DoubleArray& w, const std::string& scheme, const std::string& kind,
                              std::size_t group_size) {
  return quantize(to_matrix(w), parse_base_scheme(scheme), granularity(kind, group_size));
}

template <typename T>
py::array_t<T> to_array(const std::vector<T>& v) {
  py::array_t<T> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Ternary quantization, Tequila QAT and LUT inference";

  static py::exception<Error> error(m, "TequilaError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), e.what());
    }
  });

  m.def(
      "quantize",
      [](const DoubleArray& w, const std::string& scheme, const std::string& kind, std::size_t group_size) {
        const auto q = quantize_args(w, scheme, kind, group_size);
        py::array_t<std::int8_t> codes({q.rows, q.cols});
        std::copy(q.codes.begin(), q.codes.end(), codes.mutable_data());
        return py::make_tuple(codes, to_array(q.scales),
                              to_array(q.thresholds));
      },
      py::arg("w"), py::arg("scheme") = "absmean", py::arg("granularity") = "per-group", py::arg("group_size") = 128,
      "Returns (codes, scales, thresholds); scales and thresholds are indexed by group.");

  m.def(
      "deadzone_fraction",
      [](const DoubleArray& w, const std::string& scheme, const std::string& kind, std::size_t group_size) {
        return deadzone_fraction(to_matrix(w), quantize_args(w, scheme, kind, group_size));
      },
      py::arg("w"), py::arg("scheme") = "absmean", py::arg("granularity") = "per-group", py::arg("group_size") = 128);

  m.def(
      "boundary_fraction",
      [](const DoubleArray& w, double band, const std::string& scheme, const std::string& kind,
         std::size_t group_size) {
        return boundary_fraction(to_matrix(w), quantize_args(w, scheme, kind, group_size), band);
      },
      py::arg("w"), py::arg("band") = kDefaultBand, py::arg("scheme") = "absmean",
      py::arg("granularity") = "per-group", py::arg("group_size") = 128);

  m.def(
      "tequila_bias",
      [](const DoubleArray& w, double lam, const std::string& kind, std::size_t group_size) {
        const WeightMatrix wm = to_matrix(w);
        const auto q = quantize(wm, BaseScheme::Absmean, granularity(kind, group_size));
        const auto b = tequila_bias(wm, deadzone_mask(wm, q), lam);
        return to_array(b);
      },
      py::arg("w"), py::arg("lam") = kDefaultLambda, py::arg("granularity") = "per-group", py::arg("group_size") = 128);

  py::class_<PackedModel>(m, "PackedModel")
      .def_static(
          "from_weights",
          [](const std::vector<DoubleArray>& layers, double lam, const std::string& kind, std::size_t group_size) {
            std::vector<PackInput> inputs;
            for (const auto& a : layers) {
              WeightMatrix w = to_matrix(a);
              auto q = quantize(w, BaseScheme::Absmean, granularity(kind, group_size));
              auto mask = deadzone_mask(w, q);
              inputs.push_back({std::move(q), std::move(w), std::move(mask)});
            }
            return pack_model(inputs, lam);
          },
          py::arg("layers"), py::arg("lam") = kDefaultLambda, py::arg("granularity") = "per-group",
          py::arg("group_size") = 128, "Absmean-quantizes each weight matrix and freezes its Tequila bias.")
      .def_static("load", [](const std::string& path) { return read_packed(path); })
      .def("save", [](const PackedModel& m, const std::string& path) { write_packed(m, path); })
      .def("to_bytes",
           [](const PackedModel& m) {
             const auto b = serialize_packed(m);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& b) {
                    const std::string s = b;
                    return parse_packed(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
                  })
      .def_property_readonly("num_layers", [](const PackedModel& m) { return m.layers.size(); })
      .def("shape",
           [](const PackedModel& m, std::size_t layer) {
             const auto& l = m.layers.at(layer);
             return py::make_tuple(l.rows, l.cols);
           })
      .def(
          "gemv",
          [](const PackedModel& m, std::size_t layer, const FloatArray& x) {
            const auto& l = m.layers.at(layer);
            if (x.ndim() != 1 || static_cast<std::size_t>(x.shape(0)) != l.cols) {
              throw Error(ErrorKind::InvalidShape, "x must be 1-D with " + std::to_string(l.cols) + " entries");
            }
            std::vector<float> padded(x.data(), x.data() + l.cols);
            padded.resize(l.padded_cols(), 0.0f);
            const auto y = lut_gemv(l, padded);
            return to_array(y);
          },
          py::arg("layer"), py::arg("x"), "Multiplication-free y = W x + bias for one layer.")
      .def(
          "multiplies",
          [](const PackedModel& m, std::size_t layer) {
            const auto& l = m.layers.at(layer);
            MulCounter c;
            lut_gemv(l, std::vector<float>(l.padded_cols(), 1.0f), c);
            return py::dict(py::arg("segment") = c.segment, py::arg("scale") = c.scale);
          },
          py::arg("layer"))
      .def("__eq__", [](const PackedModel& a, const PackedModel& b) { return a == b; });

  m.def(
      "train",
      [](const py::dict& config) {
        const TrainConfig c = train_config_from_json(from_python(config));
        TrainReport r;
        {
          py::gil_scoped_release release;
          r = train_toy(c);
        }
        return to_python(to_json(r));
      },
      py::arg("config") = py::dict(), "Runs the toy QAT task and returns the report as a dict.");

  m.def(
      "bench",
      [](const std::vector<std::pair<std::size_t, std::size_t>>& shapes, std::size_t reps, std::size_t group_size,
         std::uint64_t seed) {
        std::vector<BenchShape> s;
        for (auto [r, c] : shapes) s.push_back({r, c});
        return to_python(to_json(bench_gemv(s, reps, group_size, seed)));
      },
      py::arg("shapes"), py::arg("reps") = 20, py::arg("group_size") = 128, py::arg("seed") = 0);
}

// Python bindings for the lab's main operations: dataset generation, clean
// and artifact-backdoor training, quantization/pruning views, evaluation,
// detection, and the score utilities.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cablab/attack.hpp"
#include "cablab/dataset.hpp"
#include "cablab/detect.hpp"
#include "cablab/experiment.hpp"
#include "cablab/prune.hpp"
#include "cablab/quant.hpp"
#include "cablab/serialize.hpp"

namespace py = pybind11;
using namespace cablab;

namespace {

py::array_t<float> tensor_to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

Tensor array_to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    Tensor t;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) {
        t.shape.push_back(static_cast<int>(a.shape(i)));
    }
    t.data.assign(a.data(), a.data() + a.size());
    return t;
}

}  // namespace

PYBIND11_MODULE(cablab, m) {
    m.doc() = "compression-artifact backdoor lab";

    py::class_<harness::Dataset>(m, "Dataset")
        .def_property_readonly("images", [](const harness::Dataset& d) { return tensor_to_array(d.images); })
        .def_readonly("labels", &harness::Dataset::labels)
        .def_readonly("num_classes", &harness::Dataset::num_classes)
        .def_readonly("split", &harness::Dataset::split)
        .def("count", &harness::Dataset::count);

    py::class_<harness::DataSpec>(m, "DataSpec")
        .def(py::init<>())
        .def_readwrite("classes", &harness::DataSpec::classes)
        .def_readwrite("channels", &harness::DataSpec::channels)
        .def_readwrite("height", &harness::DataSpec::height)
        .def_readwrite("width", &harness::DataSpec::width)
        .def_readwrite("train_count", &harness::DataSpec::train_count)
        .def_readwrite("val_count", &harness::DataSpec::val_count)
        .def_readwrite("test_count", &harness::DataSpec::test_count)
        .def_readwrite("calib_count", &harness::DataSpec::calib_count)
        .def_readwrite("noise", &harness::DataSpec::noise)
        .def_readwrite("pattern_seed", &harness::DataSpec::pattern_seed);

    m.def("generate_synthetic_dataset", &harness::generate_synthetic_dataset, py::arg("spec"), py::arg("seed"),
          py::arg("count"), py::arg("split") = "train");

    py::class_<Model>(m, "Model")
        .def_property_readonly("num_classes", [](const Model& m_) { return m_.num_classes; })
        .def("logits",
             [](const Model& m_, const py::array_t<float, py::array::c_style | py::array::forcecast>& batch) {
                 return tensor_to_array(infer_logits(m_, array_to_tensor(batch)));
             })
        .def("save", [](const Model& m_, const std::string& path) { harness::save_model(m_, path); });

    m.def("load_model", [](const std::string& path) { return harness::load_model(path).model; });

    py::class_<attack::TriggerSpec>(m, "TriggerSpec")
        .def(py::init<>())
        .def_readwrite("row", &attack::TriggerSpec::row)
        .def_readwrite("col", &attack::TriggerSpec::col)
        .def_readwrite("size", &attack::TriggerSpec::size)
        .def_readwrite("value", &attack::TriggerSpec::value);

    m.def("stamp_trigger",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& images,
             const attack::TriggerSpec& t) { return tensor_to_array(attack::stamp_trigger(array_to_tensor(images), t)); },
          py::arg("images"), py::arg("trigger"));

    py::class_<harness::MetricsRecord>(m, "MetricsRecord")
        .def_readonly("clean_accuracy", &harness::MetricsRecord::clean_accuracy)
        .def_readonly("triggered_accuracy", &harness::MetricsRecord::triggered_accuracy)
        .def_readonly("attack_success", &harness::MetricsRecord::attack_success);

    py::class_<harness::ExperimentConfig>(m, "ExperimentConfig")
        .def_readwrite("seed", &harness::ExperimentConfig::seed)
        .def_readwrite("target_class", &harness::ExperimentConfig::target_class)
        .def_readwrite("out_dir", &harness::ExperimentConfig::out_dir)
        .def_property(
            "epochs", [](const harness::ExperimentConfig& c) { return c.train.epochs; },
            [](harness::ExperimentConfig& c, int e) { c.train.epochs = e; })
        .def_property(
            "train_count", [](const harness::ExperimentConfig& c) { return c.data.train_count; },
            [](harness::ExperimentConfig& c, int n) { c.data.train_count = n; })
        .def_readwrite("run_detection", &harness::ExperimentConfig::run_detection);

    m.def("preset", &harness::preset, py::arg("name"));
    m.def("preset_names", &harness::preset_names);
    m.def("config_from_json", &harness::config_from_json);
    m.def("config_to_json", &harness::config_to_json);

    py::class_<harness::ExperimentResult>(m, "ExperimentResult")
        .def_readonly("records", &harness::ExperimentResult::records)
        .def_property_readonly("report_text",
                               [](const harness::ExperimentResult& r) { return r.report.text(); })
        .def_property_readonly("artifact", [](const harness::ExperimentResult& r) { return r.artifact; });

    m.def("run_experiment", &harness::run_experiment, py::call_guard<py::gil_scoped_release>());

    // quantization primitives
    py::class_<quant::QuantParams>(m, "QuantParams")
        .def_readonly("scale", &quant::QuantParams::scale)
        .def_readonly("zero_point", &quant::QuantParams::zero_point);

    m.def("calibrate_minmax",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, bool signed_range) {
              return quant::calibrate_minmax(array_to_tensor(x), signed_range);
          },
          py::arg("x"), py::arg("signed_range") = true);
    m.def("fake_quant",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, const quant::QuantParams& p) {
              return tensor_to_array(quant::fake_quant(array_to_tensor(x), p));
          });
    m.def("quantize_roundtrip",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, bool signed_range) {
              const Tensor t = array_to_tensor(x);
              const auto p = quant::calibrate_minmax(t, signed_range);
              return tensor_to_array(quant::dequantize(quant::quantize(t, p)));
          },
          py::arg("x"), py::arg("signed_range") = true);

    // scoring utilities
    m.def("anomaly_indices", &detect::anomaly_indices, py::arg("l1_per_class"));
    m.def("auc", &detect::auc, py::arg("positives"), py::arg("negatives"));
    m.def("tpr_at_fpr", &detect::tpr_at_fpr, py::arg("positives"), py::arg("negatives"), py::arg("fpr_cap") = 0.1);

    // compact helpers for smoke tests
    m.def("train_clean_quick",
          [](const harness::DataSpec& spec, std::uint64_t seed, int epochs) {
              const auto data = harness::generate_synthetic_dataset(spec, seed, spec.train_count, "train");
              harness::ExperimentConfig c;
              c.data = spec;
              c.arch = {{"flatten"}, {"dense", 32}, {"relu"}, {"dense", 0}};
              const Model arch = harness::build_model(c);
              attack::TrainSettings s;
              s.epochs = epochs;
              s.lr = 0.1f;
              s.seed = seed;
              return attack::train_clean(arch, data.images, data.labels, s);
          },
          py::arg("spec"), py::arg("seed") = 1, py::arg("epochs") = 3);
    m.def("evaluate_model",
          [](const Model& model, const harness::Dataset& test, const attack::TriggerSpec& trigger, int target) {
              return harness::evaluate(harness::model_logits_fn(model), test, trigger, target);
          },
          py::arg("model"), py::arg("test"), py::arg("trigger"), py::arg("target"));
}

#include "metaseg/eval.hpp"
#include "metaseg/experiment.hpp"
#include "metaseg/losses.hpp"
#include "metaseg/serialization.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace metaseg;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

DoubleArray to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  DoubleArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

LabelMap to_label(const LabelArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("label map must be 2-D");
  return {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
          std::vector<std::uint8_t>(a.data(), a.data() + a.size())};
}

LabelArray to_numpy(const LabelMap& l) {
  LabelArray out({static_cast<py::ssize_t>(l.height), static_cast<py::ssize_t>(l.width)});
  std::copy(l.labels.begin(), l.labels.end(), out.mutable_data());
  return out;
}

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict report_dict(const EvalReport& r) {
  return to_python(nlohmann::json::parse(report_to_json(r)));
}

}  // namespace

PYBIND11_MODULE(_metaseg, m) {
  m.doc() = "Meta-learned domain-generalized segmentation (C++ core)";
  m.attr("__version__") = code_version();

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_RuntimeError);

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init([](std::size_t classes, std::size_t height, std::size_t width) {
             TaskSpec t = nlohmann::json{{"classes", classes}, {"height", height}, {"width", width}}
                              .get<TaskSpec>();
             t.validate(ArchConfig::kDownsampling);
             return t;
           }),
           py::arg("classes") = 5, py::arg("height") = 64, py::arg("width") = 64)
      .def_readonly("classes", &TaskSpec::classes)
      .def_readonly("height", &TaskSpec::height)
      .def_readonly("width", &TaskSpec::width)
      .def_readonly("class_names", &TaskSpec::class_names);

  py::class_<DomainSpec>(m, "DomainSpec")
      .def_readonly("id", &DomainSpec::id)
      .def_property_readonly("palette", [](const DomainSpec& d) { return d.palette; });

  m.def("make_domain_family", &make_domain_family, py::arg("n_domains"), py::arg("style_gap"),
        py::arg("structure_gap"), py::arg("seed"), py::arg("task") = TaskSpec{});

  m.def(
      "generate_sample",
      [](const DomainSpec& spec, const TaskSpec& task, std::uint64_t seed) {
        const Sample s = generate_sample(spec, task, seed);
        return py::make_tuple(to_numpy(s.image), to_numpy(s.label));
      },
      py::arg("spec"), py::arg("task"), py::arg("seed"),
      "Returns (image 3xHxW float64 in [0, 1], label HxW uint8).");

  py::class_<ParameterSet>(m, "ParameterSet")
      .def("__len__", &ParameterSet::size)
      .def("scalar_count", py::overload_cast<>(&ParameterSet::scalar_count, py::const_))
      .def("names",
           [](const ParameterSet& p) {
             std::vector<std::string> out;
             for (const auto& e : p.entries()) out.push_back(e.name);
             return out;
           })
      .def("get", [](const ParameterSet& p, const std::string& name) { return to_numpy(p.get(name)); })
      .def("set",
           [](ParameterSet& p, const std::string& name, const DoubleArray& value) {
             const auto i = p.index_of(name);
             const Tensor t = to_tensor(value);
             if (t.shape() != p.entries()[i].value.shape()) {
               throw ShapeError(name + ": expected shape " + to_string(p.entries()[i].value.shape()));
             }
             p.set(i, t);
           })
      .def("bitwise_equal",
           py::overload_cast<const ParameterSet&>(&ParameterSet::bitwise_equal, py::const_));

  m.def(
      "init_models",
      [](const TaskSpec& task, std::uint64_t seed, const py::object& arch) {
        const ArchConfig a = arch.is_none() ? ArchConfig{} : from_python(arch).get<ArchConfig>();
        return init_models(task, a, seed);
      },
      py::arg("task"), py::arg("seed") = 0, py::arg("arch") = py::none());

  m.def(
      "save_checkpoint",
      [](const std::filesystem::path& path, const TaskSpec& task, const ParameterSet& params,
         std::uint64_t seed, std::size_t iteration) {
        save_checkpoint(path, {task, ArchConfig{}, seed, iteration}, params);
      },
      py::arg("path"), py::arg("task"), py::arg("params"), py::arg("seed") = 0,
      py::arg("iteration") = 0);
  m.def("load_checkpoint", [](const std::filesystem::path& path) {
    auto [meta, params] = load_checkpoint(path);
    return py::make_tuple(meta.task, params, meta.iteration);
  });

  m.def(
      "infer",
      [](const DoubleArray& image, const ParameterSet& params) {
        return to_numpy(infer(to_tensor(image), params));
      },
      py::arg("image"), py::arg("params"));

  m.def(
      "confusion_matrix",
      [](const LabelArray& pred, const LabelArray& truth, std::size_t classes) {
        const ConfusionMatrix cm = accumulate(ConfusionMatrix(classes), to_label(pred), to_label(truth));
        py::array_t<std::uint64_t> out({classes, classes});
        for (std::size_t i = 0; i < classes; ++i) {
          for (std::size_t j = 0; j < classes; ++j) out.mutable_at(i, j) = cm.at(i, j);
        }
        return out;
      },
      py::arg("pred"), py::arg("truth"), py::arg("classes"));

  m.def(
      "iou_report",
      [](const LabelArray& pred, const LabelArray& truth, std::size_t classes) {
        return report_dict(iou_report(accumulate(ConfusionMatrix(classes), to_label(pred), to_label(truth))));
      },
      py::arg("pred"), py::arg("truth"), py::arg("classes"));

  m.def(
      "seg_loss",
      [](const DoubleArray& logits, const LabelArray& label) {
        return seg_loss(to_tensor(logits), to_label(label)).item();
      },
      py::arg("logits"), py::arg("label"));
  m.def(
      "agg_loss",
      [](double rec, double perc, double seg, const py::object& weights) {
        const LossWeights w = weights.is_none() ? LossWeights{} : from_python(weights).get<LossWeights>();
        return agg_loss(Tensor::scalar(rec), Tensor::scalar(perc), Tensor::scalar(seg), w).item();
      },
      py::arg("rec"), py::arg("perc"), py::arg("seg"), py::arg("weights") = py::none());
  m.def(
      "meta_objective",
      [](double seg_agg, double seg_total, double lambda_meta) {
        LossWeights w;
        w.meta = lambda_meta;
        return meta_objective(Tensor::scalar(seg_agg), Tensor::scalar(seg_total), w).item();
      },
      py::arg("seg_agg"), py::arg("seg_total"), py::arg("lambda_meta") = LossWeights{}.meta);

  m.def(
      "train",
      [](const std::vector<DomainSpec>& domains, const TaskSpec& task, const py::dict& trainer) {
        const TrainerConfig config = from_python(trainer).get<TrainerConfig>();
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(config, domains, task);
        }
        py::list history;
        for (const auto& r : result.history) history.append(to_python(nlohmann::json(r)));
        return py::make_tuple(result.params, history);
      },
      py::arg("domains"), py::arg("task"), py::arg("trainer") = py::dict(),
      "Trainer options use the JSON config keys, e.g. {'iterations': 10, 'flags': {'meta': False}}.");

  m.def(
      "evaluate_domain",
      [](const DomainSpec& domain, const TaskSpec& task, const ParameterSet& params,
         std::size_t count) { return report_dict(evaluate_domain(domain, task, params, count).report); },
      py::arg("domain"), py::arg("task"), py::arg("params"), py::arg("count") = 50);

  m.def(
      "resolve_config",
      [](const py::object& config) { return to_python(config_to_json(config_from_json(from_python(config)))); },
      py::arg("config") = py::dict(), "Fills defaults and validates an experiment config.");
  m.def(
      "config_hash",
      [](const py::object& config) { return config_hash(config_from_json(from_python(config))); },
      py::arg("config") = py::dict());
  m.def(
      "run",
      [](const py::object& config) {
        const ExperimentConfig c = config_from_json(from_python(config));
        RunManifest manifest;
        {
          py::gil_scoped_release release;
          manifest = run(c);
        }
        return to_python(manifest_to_json(manifest));
      },
      py::arg("config"), "Trains and evaluates the configured mode; returns the run manifest.");
  m.def("plot", &plot, py::arg("metrics_path"), py::arg("out_path"));
}

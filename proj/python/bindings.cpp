#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gradfe/errors.hpp"
#include "gradfe/evolution.hpp"
#include "gradfe/report.hpp"

namespace py = pybind11;
using namespace gradfe;

namespace {

TransformationRegistry registry_from(const std::optional<std::vector<std::string>>& names) {
  return names ? TransformationRegistry::from_names(*names) : TransformationRegistry::standard();
}

TaskHint task_hint(const std::string& s) {
  if (s == "auto") return TaskHint::Auto;
  if (s == "clf") return TaskHint::Classification;
  if (s == "reg") return TaskHint::Regression;
  throw ConfigError("unknown task '" + s + "' (expected auto, clf or reg)");
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

// A dataset together with the feature space built on its column names.
struct Session {
  Dataset data;
  FeatureSpace space;
  std::size_t dropped_rows = 0;

  ParseTree parse(const std::string& text) const { return parse_postorder(space, text); }
};

Session load(const std::string& path, const std::string& target, const std::string& task,
             const std::optional<std::vector<std::string>>& transforms) {
  auto r = load_csv(path, {target, task_hint(task)});
  FeatureSpace space(registry_from(transforms), r.dataset.names);
  return Session{std::move(r.dataset), std::move(space), r.dropped_rows};
}

Session from_columns(const std::vector<std::string>& names, const std::vector<std::vector<double>>& columns,
                     const std::vector<double>& target, const std::string& task,
                     const std::optional<std::vector<std::string>>& transforms) {
  Dataset d;
  d.names = names;
  d.columns = columns;
  d.target = target;
  d.target_name = "target";
  if (task == "clf") d.task = Task::Classification;
  else if (task == "reg") d.task = Task::Regression;
  else throw ConfigError("from_columns needs task 'clf' or 'reg'");
  d.validate();
  FeatureSpace space(registry_from(transforms), d.names);
  return Session{std::move(d), std::move(space), 0};
}

SearchConfig search_config(std::uint64_t seed, std::size_t budget, std::size_t population, int max_order, int folds,
                           int workers, const std::string& mode, int train_epochs, int finetune_epochs,
                           std::size_t selection_width, double eta, int latent_steps) {
  SearchConfig c;
  c.seed = seed;
  c.budget = budget;
  c.population = population;
  c.max_order = max_order;
  c.folds = folds;
  c.workers = workers;
  if (mode == "guided") c.mode = SearchMode::Guided;
  else if (mode == "random") c.mode = SearchMode::Random;
  else throw ConfigError("unknown mode '" + mode + "'");
  c.train_epochs = train_epochs;
  c.finetune_epochs = finetune_epochs;
  c.selection_width = selection_width;
  c.latent.eta = eta;
  c.latent.max_steps = latent_steps;
  return c;
}

EvaluatorOptions eval_options(std::uint64_t seed, int folds) {
  SearchConfig c;
  c.seed = seed;
  c.folds = folds;
  auto eo = evaluator_options(c);
  eo.budget = 1;
  return eo;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Feature search over expression trees (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<BudgetExhausted>(m, "BudgetExhausted", PyExc_RuntimeError);

  m.def("transformation_names", &builtin_transformation_names, "Every built-in transformation name.");

  py::class_<Session>(m, "Dataset")
      .def_property_readonly("names", [](const Session& s) { return s.space.raw_names(); })
      .def_property_readonly("transformations", [](const Session& s) { return s.space.registry().names(); })
      .def_property_readonly("rows", [](const Session& s) { return s.data.rows(); })
      .def_property_readonly("task", [](const Session& s) { return std::string(to_string(s.data.task)); })
      .def_property_readonly("dropped_rows", [](const Session& s) { return s.dropped_rows; })
      .def("order", [](const Session& s, const std::string& f) { return order(s.parse(f)); }, py::arg("feature"))
      .def("canonical", [](const Session& s, const std::string& f) { return canonical_key(s.space, s.parse(f)); },
           py::arg("feature"))
      .def("infix", [](const Session& s, const std::string& f) { return to_infix(s.space, s.parse(f)); },
           py::arg("feature"))
      .def(
          "equivalents",
          [](const Session& s, const std::string& f, std::size_t limit) {
            std::vector<std::string> out;
            for (const auto& t : enumerate_equivalents(s.space, s.parse(f), limit)) out.push_back(join_tokens(t));
            return out;
          },
          py::arg("feature"), py::arg("limit") = 16)
      .def(
          "sample",
          [](const Session& s, int max_order, std::uint64_t seed, std::size_t n) {
            Rng rng = make_stream(seed, streams::kSampling);
            std::vector<std::string> out;
            for (std::size_t i = 0; i < n; ++i)
              out.push_back(join_tokens(to_postorder(s.space, sample_random_tree(s.space, max_order, rng))));
            return out;
          },
          py::arg("max_order") = 5, py::arg("seed") = 0, py::arg("n") = 1)
      .def(
          "column",
          [](const Session& s, const std::string& f) { return materialize(s.space, s.parse(f), s.data); },
          py::arg("feature"), "Feature values, or None for an invalid feature.")
      .def(
          "baseline",
          [](const Session& s, std::uint64_t seed, int folds) {
            Evaluator ev(s.data, s.space, eval_options(seed, folds));
            const auto r = ev.baseline();
            return py::dict(py::arg("metric") = r.metric, py::arg("fold_scores") = r.fold_scores);
          },
          py::arg("seed") = 0, py::arg("folds") = 5)
      .def(
          "evaluate",
          [](const Session& s, const std::string& f, std::uint64_t seed, int folds) -> py::object {
            Evaluator ev(s.data, s.space, eval_options(seed, folds));
            const auto out = ev.evaluate(s.parse(f));
            if (!out.record) return py::none();
            return py::dict(py::arg("metric") = out.record->metric, py::arg("loss") = out.record->loss,
                            py::arg("fold_scores") = out.record->fold_scores);
          },
          py::arg("feature"), py::arg("seed") = 0, py::arg("folds") = 5,
          "Cross-validated metric of raw features plus one feature; None if invalid.")
      .def(
          "search",
          [](const Session& s, std::uint64_t seed, std::size_t budget, std::size_t population, int max_order,
             int folds, int workers, const std::string& mode, int train_epochs, int finetune_epochs,
             std::size_t selection_width, double eta, int latent_steps) {
            const auto config = search_config(seed, budget, population, max_order, folds, workers, mode,
                                              train_epochs, finetune_epochs, selection_width, eta, latent_steps);
            nlohmann::json report;
            {
              py::gil_scoped_release release;
              const auto result = run_search(s.data, s.space, config);
              report = search_report(result, s.space);
            }
            return json_to_py(report);
          },
          py::arg("seed") = 0, py::arg("budget") = 4096, py::arg("population") = 512, py::arg("max_order") = 5,
          py::arg("folds") = 5, py::arg("workers") = 1, py::arg("mode") = "guided", py::arg("train_epochs") = 400,
          py::arg("finetune_epochs") = 10, py::arg("selection_width") = 0, py::arg("eta") = 1.0,
          py::arg("latent_steps") = 50, "Runs the full search and returns the report as a dict.");

  m.def("load_csv", &load, py::arg("path"), py::arg("target"), py::arg("task") = "auto",
        py::arg("transforms") = py::none());
  m.def("from_columns", &from_columns, py::arg("names"), py::arg("columns"), py::arg("target"), py::arg("task"),
        py::arg("transforms") = py::none());
}

// gradfe command-line tool: run | eval | baseline.
//
// Exit codes: 0 success, 2 configuration error, 3 dataset ingestion error,
// 4 runtime failure. GRADFE_LOG=quiet|info|debug sets stderr verbosity.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "gradfe/errors.hpp"
#include "gradfe/evolution.hpp"
#include "gradfe/report.hpp"

using namespace gradfe;
using nlohmann::json;

namespace {

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level() {
  const char* v = std::getenv("GRADFE_LOG");
  if (!v) return LogLevel::Info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::Quiet;
  if (s == "debug" || s == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

void log(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << "[gradfe] " << msg << '\n';
}

struct Options {
  std::string data;
  std::string target;
  std::string task = "auto";
  std::uint64_t seed = 0;
  std::size_t budget = 4096;
  std::size_t population = 512;
  int max_order = 5;
  int folds = 5;
  int workers = 1;
  std::string out = "gradfe_out";
  std::string mode = "guided";
  std::string learner = "rf";
  std::string metric = "f1-micro";
  std::vector<std::string> transforms;
  std::string feature;
  SearchConfig search;
};

TaskHint task_hint(const std::string& s) {
  if (s == "auto") return TaskHint::Auto;
  if (s == "clf") return TaskHint::Classification;
  if (s == "reg") return TaskHint::Regression;
  throw ConfigError("unknown task '" + s + "' (expected auto, clf or reg)");
}

LearnerKind learner_kind(const std::string& s) {
  if (s == "rf") return LearnerKind::RandomForest;
  if (s == "tree") return LearnerKind::DecisionTree;
  if (s == "linear") return LearnerKind::LinearModel;
  throw ConfigError("unknown learner '" + s + "' (expected rf, tree or linear)");
}

// Resolves the flags into a search config; throws ConfigError.
SearchConfig resolve(const Options& o) {
  SearchConfig c = o.search;
  c.seed = o.seed;
  c.budget = o.budget;
  c.population = o.population;
  c.max_order = o.max_order;
  c.folds = o.folds;
  c.workers = o.workers;
  if (o.mode == "guided") c.mode = SearchMode::Guided;
  else if (o.mode == "random") c.mode = SearchMode::Random;
  else throw ConfigError("unknown mode '" + o.mode + "' (expected guided or random)");
  c.learner.kind = learner_kind(o.learner);
  if (o.metric == "f1-micro") c.classification_metric = ClassificationMetric::MicroF1;
  else if (o.metric == "f1") c.classification_metric = ClassificationMetric::F1;
  else throw ConfigError("unknown metric '" + o.metric + "' (expected f1-micro or f1)");
  validate(c);
  return c;
}

TransformationRegistry registry(const Options& o) {
  if (o.transforms.empty()) return TransformationRegistry::standard();
  try {
    return TransformationRegistry::from_names(o.transforms);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

IngestResult ingest(const Options& o) {
  CsvOptions csv;
  csv.target = o.target;
  csv.task = task_hint(o.task);
  auto r = load_csv(o.data, csv);
  log(LogLevel::Info, "loaded " + std::to_string(r.dataset.rows()) + " rows, " +
                          std::to_string(r.dataset.features()) + " features, task " + to_string(r.dataset.task) +
                          (r.dropped_rows ? ", dropped " + std::to_string(r.dropped_rows) + " rows" : ""));
  return r;
}

json run_echo(const Options& o, const IngestResult& in) {
  return {{"data", o.data},
          {"target", o.target},
          {"task", o.task},
          {"transforms", o.transforms},
          {"dropped_rows", in.dropped_rows},
          {"encoded_columns", in.encoded_columns}};
}

int cmd_run(const Options& o) {
  const auto config = resolve(o);
  const auto in = ingest(o);
  const FeatureSpace space(registry(o), in.dataset.names);
  const std::filesystem::path out(o.out);
  std::filesystem::create_directories(out);

  const auto progress = [](const IterationSnapshot& s) {
    const auto level = s.iteration % 25 == 0 || s.budget_exhausted ? LogLevel::Info : LogLevel::Debug;
    log(level, "iteration " + std::to_string(s.iteration) + ": population " + std::to_string(s.population) +
                   ", spent " + std::to_string(s.spent) + ", best metric " + std::to_string(s.best_metric));
  };
  log(LogLevel::Info, "search: population " + std::to_string(config.population) + ", budget " +
                          std::to_string(config.budget) + ", max order " + std::to_string(config.max_order));
  auto result = run_search(in.dataset, space, config, progress);
  result.dataset_name = std::filesystem::path(o.data).stem().string();

  const auto report = search_report(result, space, run_echo(o, in));
  std::ofstream(out / "report.json", std::ios::binary) << dump_report(report);
  write_augmented_csv(out / "augmented.csv", in.dataset, space, result);
  write_loss_history(out / "loss_history.csv", result.loss_history);
  if (result.optimizer) result.optimizer->save(out / "optimizer.ckpt");

  log(LogLevel::Info, "base " + std::to_string(result.base.metric) + ", joint " +
                          std::to_string(result.selection.joint_metric) + " with " +
                          std::to_string(result.selection.members.size()) + " features, spent " +
                          std::to_string(result.spent) + "; wrote " + out.string());
  return 0;
}

int cmd_eval(const Options& o) {
  const auto config = resolve(o);
  if (split_tokens(o.feature).empty()) throw ConfigError("feature string is empty");
  const auto in = ingest(o);
  const FeatureSpace space(registry(o), in.dataset.names);
  const auto tree = parse_postorder(space, o.feature);
  auto eo = evaluator_options(config);
  eo.budget = 1;
  Evaluator ev(in.dataset, space, eo);
  const auto outcome = ev.evaluate(tree);
  json j = {{"feature", o.feature},
            {"postorder", join_tokens(to_postorder(space, tree))},
            {"canonical", canonical_key(space, tree)},
            {"infix", to_infix(space, tree)},
            {"order", order(tree)},
            {"valid", outcome.record.has_value()},
            {"base", ev.baseline().metric}};
  if (outcome.record) {
    j["metric"] = outcome.record->metric;
    j["loss"] = outcome.record->loss;
    j["fold_scores"] = outcome.record->fold_scores;
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_baseline(const Options& o) {
  const auto config = resolve(o);
  const auto in = ingest(o);
  const FeatureSpace space(registry(o), in.dataset.names);
  Evaluator ev(in.dataset, space, evaluator_options(config));
  const auto base = ev.baseline();
  std::cout << json{{"task", to_string(in.dataset.task)},
                    {"rows", in.dataset.rows()},
                    {"features", in.dataset.features()},
                    {"metric", base.metric},
                    {"fold_scores", base.fold_scores}}
                   .dump(2)
            << '\n';
  return 0;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--data", o.data, "CSV file with a header row")->required();
  cmd->add_option("--target", o.target, "Target column name")->required();
  cmd->add_option("--task", o.task, "auto, clf or reg")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Run seed")->capture_default_str();
  cmd->add_option("--folds", o.folds, "Cross-validation folds")->capture_default_str();
  cmd->add_option("--learner", o.learner, "rf, tree or linear")->capture_default_str();
  cmd->add_option("--metric", o.metric, "Classification metric: f1-micro or f1")->capture_default_str();
  cmd->add_option("--transforms", o.transforms, "Transformation names (default: the standard nine)")
      ->delimiter(',');
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature search with a learned latent-space optimizer"};
  app.require_subcommand(1);
  Options o;

  auto* run = app.add_subcommand("run", "Search for features and write report.json, augmented.csv, "
                                        "optimizer.ckpt and loss_history.csv");
  add_common(run, o);
  run->add_option("--budget", o.budget, "Evaluation budget")->capture_default_str();
  run->add_option("--population", o.population, "Initial population")->capture_default_str();
  run->add_option("--max-order", o.max_order, "Maximum feature order")->capture_default_str();
  run->add_option("--workers", o.workers, "Concurrent evaluations")->capture_default_str();
  run->add_option("--out", o.out, "Output directory")->capture_default_str();
  run->add_option("--mode", o.mode, "guided or random")->capture_default_str();
  run->add_option("--train-epochs", o.search.train_epochs, "Initial optimizer epochs")->capture_default_str();
  run->add_option("--finetune-epochs", o.search.finetune_epochs, "Optimizer epochs per step")
      ->capture_default_str();
  run->add_option("--finetune-sample", o.search.finetune_sample, "Features per fine-tuning corpus (0: all)")
      ->capture_default_str();
  run->add_option("--exploit-width", o.search.exploit_width, "Members optimized per step (0: derived)")
      ->capture_default_str();
  run->add_option("--eta", o.search.latent.eta, "Latent step size")->capture_default_str();
  run->add_option("--latent-steps", o.search.latent.max_steps, "Latent steps per feature")->capture_default_str();
  run->add_option("--selection-width", o.search.selection_width, "Final features (0: raw count)")
      ->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Score one post-order feature string");
  add_common(eval, o);
  eval->add_option("--feature", o.feature, "Post-order string, e.g. \"weight height square divide\"")->required();

  auto* baseline = app.add_subcommand("baseline", "Score the raw features");
  add_common(baseline, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run) return cmd_run(o);
    if (*eval) return cmd_eval(o);
    return cmd_baseline(o);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "feature parse error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
}

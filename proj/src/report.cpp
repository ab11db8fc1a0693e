#include "gradfe/report.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>

#include "gradfe/evaluator.hpp"

namespace gradfe {

namespace {

using nlohmann::json;

const char* metric_name(Task task, ClassificationMetric m) {
  if (task == Task::Regression) return "1-rae";
  return m == ClassificationMetric::MicroF1 ? "f1-micro" : "f1";
}

json record_json(const EvalRecord& r) {
  return {{"metric", r.metric}, {"loss", r.loss}, {"fold_scores", r.fold_scores}};
}

json candidate_json(const FeatureSpace& space, const Candidate& c) {
  return {{"postorder", join_tokens(to_postorder(space, c.tree))},
          {"canonical", c.key},
          {"infix", to_infix(space, c.tree)},
          {"order", order(c.tree)},
          {"metric", c.record.metric},
          {"loss", c.record.loss},
          {"origin", c.origin},
          {"iteration", c.iteration}};
}

// Infix form as a CSV-friendly identifier: operators become words and
// punctuation collapses to single underscores.
std::string column_label(const std::string& infix) {
  std::string out;
  auto put = [&](std::string_view piece) {
    for (char c : piece) {
      if (c == '_' && (out.empty() || out.back() == '_')) continue;
      out.push_back(c);
    }
  };
  for (char c : infix) {
    switch (c) {
      case '+': put("_plus_"); break;
      case '-': put("_minus_"); break;
      case '*': put("_times_"); break;
      case '/': put("_div_"); break;
      case '%': put("_mod_"); break;
      default: put(std::isalnum(static_cast<unsigned char>(c)) || c == '_' ? std::string_view(&c, 1) : "_");
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

}  // namespace

json to_json(const SearchConfig& c) {
  return {
      {"mode", to_string(c.mode)},
      {"seed", c.seed},
      {"max_order", c.max_order},
      {"population", c.population},
      {"budget", c.budget},
      {"folds", c.folds},
      {"exploit_width", c.exploit_width},
      {"train_epochs", c.train_epochs},
      {"finetune_epochs", c.finetune_epochs},
      {"finetune_sample", c.finetune_sample},
      {"selection_width", c.selection_width},
      {"selection_pool", c.selection_pool},
      {"classification_metric", c.classification_metric == ClassificationMetric::MicroF1 ? "f1-micro" : "f1"},
      {"learner",
       {{"kind", to_string(c.learner.kind)},
        {"trees", c.learner.trees},
        {"max_depth", c.learner.max_depth},
        {"min_samples_leaf", c.learner.min_samples_leaf}}},
      {"optimizer", {{"embed", c.shape.embed}, {"hidden", c.shape.hidden}}},
      {"train",
       {{"warmup_epochs", c.train.warmup_epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"adam_epsilon", c.train.adam_epsilon},
        {"clip_norm", c.train.clip_norm},
        {"augmentation_limit", c.train.augmentation_limit}}},
      {"latent", {{"eta", c.latent.eta}, {"max_steps", c.latent.max_steps}}},
  };
}

json search_report(const SearchResult& r, const FeatureSpace& space, const json& run) {
  const auto& members = r.population.members();
  json report;
  report["run"] = run;
  report["config"] = to_json(r.config);
  report["dataset"] = {{"name", r.dataset_name},
                       {"target", r.target},
                       {"task", to_string(r.task)},
                       {"rows", r.rows},
                       {"raw_features", r.raw_names},
                       {"transformations", r.transformations},
                       {"metric", metric_name(r.task, r.config.classification_metric)}};
  report["base"] = record_json(r.base);

  std::size_t width = r.config.exploit_width;
  if (width == 0) width = exploit_width(r.raw_names.size(), r.config.population);
  std::size_t initial = 0;
  for (const auto& m : members) initial += m.origin == "initial";
  json steps = json::array();
  std::size_t step_total = 0;
  for (const auto& s : r.iterations) {
    step_total += s.optimized_added + s.random_added;
    steps.push_back({{"iteration", s.iteration},
                     {"population", s.population},
                     {"spent", s.spent},
                     {"optimized_added", s.optimized_added},
                     {"random_added", s.random_added},
                     {"optimizer_short", s.optimizer_short},
                     {"budget_exhausted", s.budget_exhausted},
                     {"best_loss", s.best_loss},
                     {"best_metric", s.best_metric}});
  }
  report["budget"] = {{"cap", r.config.budget},
                      {"spent", r.spent},
                      {"initial", initial},
                      {"steps", step_total},
                      {"exploit_width", width},
                      {"space_exhausted", r.space_exhausted}};
  report["iterations"] = std::move(steps);

  json candidates = json::array();
  for (const auto& m : members) candidates.push_back(candidate_json(space, m));
  report["candidates"] = std::move(candidates);

  const auto ranked = r.population.ranking();
  report["best_single"] = ranked.empty() ? json(nullptr) : candidate_json(space, members[ranked.front()]);

  json chosen = json::array();
  for (auto i : r.selection.members) chosen.push_back(candidate_json(space, members[i]));
  report["selection"] = {{"features", std::move(chosen)},
                         {"joint_metric", r.selection.joint_metric},
                         {"joint_evaluations", r.selection.joint_evaluations},
                         {"improvement_over_base", r.selection.joint_metric - r.base.metric}};

  if (r.optimizer) {
    report["optimizer"] = {{"lambda", r.optimizer->lambda()},
                           {"epochs_trained", r.optimizer->epochs_trained()},
                           {"parameters", r.optimizer->params().size()}};
  } else {
    report["optimizer"] = nullptr;
  }

  // Worker count changes wall-clock only, so it is kept with the timings.
  report["timings"] = {{"workers", r.config.workers},
                       {"initialize_seconds", r.init_seconds},
                       {"train_seconds", r.train_seconds},
                       {"selection_seconds", r.selection_seconds},
                       {"total_seconds", r.total_seconds}};
  json per_step = json::array();
  for (const auto& s : r.iterations) per_step.push_back(s.seconds);
  report["timings"]["iteration_seconds"] = std::move(per_step);
  return report;
}

std::string dump_report(const json& report) { return report.dump(2) + "\n"; }

void write_augmented_csv(const std::filesystem::path& path, const Dataset& data, const FeatureSpace& space,
                         const SearchResult& result) {
  std::vector<std::string> names = data.names;
  std::vector<Column> columns = data.columns;
  std::vector<std::string> infix;
  for (auto i : result.selection.members) {
    const auto& tree = result.population.members()[i].tree;
    auto col = materialize(space, tree, data);
    if (!col) throw std::runtime_error("selected feature became invalid: " + result.population.members()[i].key);
    columns.push_back(std::move(*col));
    infix.push_back(column_label(to_infix(space, tree)));
  }
  std::vector<std::string> reserved = data.names;
  reserved.push_back(data.target_name);
  for (auto& n : sanitize_feature_names(infix, reserved)) names.push_back(std::move(n));
  write_csv(path, names, columns, data.target_name, data.target);
}

}  // namespace gradfe

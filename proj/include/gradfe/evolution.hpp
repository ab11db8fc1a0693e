#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "gradfe/evaluator.hpp"
#include "gradfe/feature_dsl.hpp"
#include "gradfe/neural_optimizer.hpp"

namespace gradfe {

enum class SearchMode {
  /// Latent-space optimization of the best members plus random exploration.
  Guided,
  /// Same initialization and budget, random features only.
  Random,
};

const char* to_string(SearchMode mode);

struct SearchConfig {
  SearchMode mode = SearchMode::Guided;
  std::uint64_t seed = 0;
  int max_order = 5;
  std::size_t population = 512;
  std::size_t budget = 4096;
  int folds = 5;
  int workers = 1;
  /// Members optimized per step; 0 derives min(2 * ceil(raw / 2), population).
  std::size_t exploit_width = 0;
  /// Epochs of the initial optimizer training.
  int train_epochs = 400;
  /// Epochs of fine-tuning after every step.
  int finetune_epochs = 10;
  /// Features per fine-tuning corpus: the step's new features plus a uniform
  /// sample of the rest. 0 uses the whole population.
  std::size_t finetune_sample = 128;
  /// Greedy forward-selection width; 0 uses the raw feature count.
  std::size_t selection_width = 0;
  /// Best-ranked candidates considered by forward selection.
  std::size_t selection_pool = 32;
  ClassificationMetric classification_metric = ClassificationMetric::MicroF1;
  LearnerConfig learner;
  OptimizerShape shape;
  TrainConfig train;
  LatentStepConfig latent;
};

/// Throws ConfigError on inconsistent settings.
void validate(const SearchConfig& config);

/// Evaluator settings of a search; the learner seed is derived from the run
/// seed.
EvaluatorOptions evaluator_options(const SearchConfig& config);

/// min(2 * ceil(raw / 2), population), at least 2.
std::size_t exploit_width(std::size_t raw_features, std::size_t population);

struct Candidate {
  ParseTree tree;
  std::string key;  // canonical form, space-joined
  EvalRecord record;
  std::string origin;  // "initial", "optimized" or "random"
  int iteration = 0;
};

/// Evaluated candidates keyed by canonical form, in insertion order.
class Population {
 public:
  bool contains(const std::string& key) const { return keys_.count(key) > 0; }
  /// False if the key is already present.
  bool insert(Candidate c);
  std::size_t size() const noexcept { return members_.size(); }
  const std::vector<Candidate>& members() const noexcept { return members_; }
  /// Indices ordered by loss, then by key.
  std::vector<std::size_t> ranking() const;
  double best_loss() const;

 private:
  std::vector<Candidate> members_;
  std::unordered_set<std::string> keys_;
};

struct IterationSnapshot {
  int iteration = 0;
  std::size_t population = 0;
  std::size_t spent = 0;
  std::size_t optimized_added = 0;
  std::size_t random_added = 0;
  /// Fewer than half the exploit width came out of the optimizer.
  bool optimizer_short = false;
  bool budget_exhausted = false;
  double best_loss = 1;
  double best_metric = 0;
  double seconds = 0;
};

struct Selection {
  std::vector<std::size_t> members;  // indices into the population, in order chosen
  double joint_metric = 0;
  std::size_t joint_evaluations = 0;
};

struct SearchResult {
  SearchConfig config;
  std::string dataset_name;
  std::string target;
  Task task = Task::Regression;
  std::size_t rows = 0;
  std::vector<std::string> raw_names;
  std::vector<std::string> transformations;
  EvalRecord base;
  Population population;
  std::vector<IterationSnapshot> iterations;
  Selection selection;
  std::size_t spent = 0;
  bool space_exhausted = false;
  std::vector<LossRecord> loss_history;
  std::shared_ptr<FeatureOptimizer> optimizer;  // null in random mode
  double init_seconds = 0;
  double train_seconds = 0;
  double selection_seconds = 0;
  double total_seconds = 0;
};

using ProgressCallback = std::function<void(const IterationSnapshot&)>;

/// The search loop, one phase at a time.
class EvolutionSearch {
 public:
  EvolutionSearch(const Dataset& data, const FeatureSpace& space, SearchConfig config);

  /// Samples canonical-distinct valid trees until the population is full.
  void initialize();
  /// Initial optimizer training on the whole population. No-op in random
  /// mode.
  void train_optimizer();
  /// Optimizes the top-d members (keeping the first d/2 new valid results),
  /// adds d/2 random features (d in random mode), evaluates them and
  /// fine-tunes the optimizer. Returns false once the budget is spent or no
  /// new feature could be produced.
  bool evolve_step();
  Selection select();

  const Evaluator& evaluator() const noexcept { return *evaluator_; }
  const Population& population() const noexcept { return population_; }
  const FeatureOptimizer* optimizer() const noexcept { return optimizer_.get(); }
  const std::vector<IterationSnapshot>& iterations() const noexcept { return iterations_; }
  const std::vector<LossRecord>& loss_history() const noexcept { return history_; }
  std::size_t width() const noexcept { return width_; }
  bool space_exhausted() const noexcept { return exhausted_; }

  /// Moves the state into a result; the object is unusable afterwards.
  SearchResult finish(Selection selection);

 private:
  std::vector<ParseTree> draw_random(std::size_t n, std::unordered_set<std::string>& pending);
  std::vector<ScoredString> corpus_for(std::span<const std::size_t> members) const;
  void insert_outcomes(std::span<const ParseTree> trees, std::span<const EvalOutcome> outcomes,
                       std::span<const std::string> origins, int iteration, std::size_t* optimized,
                       std::size_t* random);

  const Dataset& data_;
  const FeatureSpace& space_;
  SearchConfig config_;
  std::unique_ptr<Evaluator> evaluator_;
  std::shared_ptr<FeatureOptimizer> optimizer_;
  Population population_;
  std::unordered_set<std::string> invalid_;
  std::optional<std::vector<ParseTree>> enumerated_;
  bool enumeration_tried_ = false;
  bool exhausted_ = false;
  Rng sampling_;
  Rng training_;
  std::size_t width_ = 2;
  int iteration_ = 0;
  std::vector<IterationSnapshot> iterations_;
  std::vector<LossRecord> history_;
  double init_seconds_ = 0;
  double train_seconds_ = 0;
};

/// Full search: initialize, train the optimizer, evolve until the budget is
/// spent, then select F*.
SearchResult run_search(const Dataset& data, const FeatureSpace& space, const SearchConfig& config,
                        const ProgressCallback& progress = {});

/// Greedy forward selection over the best `pool` members: each round adds
/// the candidate whose joint score improves the running score the most;
/// stops after `width` additions or when nothing improves.
Selection select_final_features(Evaluator& evaluator, const Population& population, std::size_t width,
                                std::size_t pool);

}  // namespace gradfe

#pragma once

#include <cstddef>
#include <cstdint>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradfe/dataset.hpp"
#include "gradfe/feature_dsl.hpp"
#include "gradfe/learner.hpp"
#include "gradfe/metrics.hpp"

namespace gradfe {

/// Bottom-up evaluation of `tree` over the dataset's raw columns. Returns
/// nullopt (an invalid feature) when the result has a non-finite entry or is
/// constant. Throws LeafIndexOutOfRange for leaves beyond the raw columns.
std::optional<Column> materialize(const FeatureSpace& space, const ParseTree& tree, const Dataset& data);

/// Row -> fold index, a pure function of (seed, n). Rows are shuffled and
/// dealt round-robin so fold sizes differ by at most one.
std::vector<int> assign_folds(std::size_t rows, int folds, std::uint64_t seed);

/// Cross-validated score of one candidate. `loss` is exactly 1 - metric.
struct EvalRecord {
  std::string key;
  double metric = 0;
  double loss = 1;
  std::vector<double> fold_scores;
};

/// Counts expensive evaluations against a cap. A slot is reserved before the
/// work starts and either committed (spent) or released.
class BudgetTracker {
 public:
  explicit BudgetTracker(std::size_t cap) : cap_(cap) {}

  bool try_reserve();
  void commit();
  void release();

  std::size_t spent() const;
  std::size_t cap() const noexcept { return cap_; }
  std::size_t remaining() const;

 private:
  mutable std::mutex mutex_;
  std::size_t cap_;
  std::size_t spent_ = 0;
  std::size_t reserved_ = 0;
};

enum class EvalStatus { Evaluated, Cached, Invalid, BudgetExhausted };

const char* to_string(EvalStatus status);

struct EvalOutcome {
  EvalStatus status = EvalStatus::Invalid;
  std::optional<EvalRecord> record;
};

struct EvaluatorOptions {
  int folds = 5;
  std::uint64_t seed = 0;
  std::size_t budget = 4096;
  ClassificationMetric classification_metric = ClassificationMetric::MicroF1;
  LearnerConfig learner;
};

/// Scores features by cross-validated learner performance on the raw columns
/// plus the feature. Scores are cached by canonical form; only new, valid
/// features consume budget. Safe to call from several threads.
class Evaluator {
 public:
  Evaluator(Dataset data, FeatureSpace space, EvaluatorOptions options);

  Evaluator(const Evaluator&) = delete;
  Evaluator& operator=(const Evaluator&) = delete;

  const Dataset& dataset() const noexcept { return data_; }
  const FeatureSpace& space() const noexcept { return space_; }
  const EvaluatorOptions& options() const noexcept { return options_; }
  const std::vector<int>& folds() const noexcept { return folds_; }
  const BudgetTracker& budget() const noexcept { return budget_; }

  /// Cached record if present, otherwise materialize and cross-validate.
  /// Returns status Invalid (no record) for invalid features. Throws
  /// BudgetExhausted when a new evaluation is needed and the cap is reached.
  EvalOutcome evaluate(const ParseTree& tree);

  /// Evaluates `trees` in order semantics: invalid and cached entries are
  /// resolved first, then budget slots go to the remaining new features in
  /// input order, and those are cross-validated on up to `workers` threads.
  /// The result does not depend on `workers`.
  std::vector<EvalOutcome> evaluate_batch(std::span<const ParseTree> trees, int workers = 1);

  /// True if the tree materializes to a valid column. Does not touch the
  /// budget or the cache.
  bool is_valid(const ParseTree& tree) const;

  std::optional<EvalRecord> cached(const std::string& key) const;

  /// Raw features only. Budget-exempt.
  EvalRecord baseline() const;

  /// Raw features plus every tree in `features`. Budget-exempt; counted in
  /// joint_evaluations(). Invalid features are skipped.
  EvalRecord joint(std::span<const ParseTree> features) const;
  std::size_t joint_evaluations() const;

  /// Cross-validated metric of an arbitrary column set (raw + extra).
  EvalRecord score_columns(std::span<const Column* const> extra, std::string key) const;

 private:
  double fold_metric(std::span<const double> y, std::span<const double> predictions) const;

  Dataset data_;
  FeatureSpace space_;
  EvaluatorOptions options_;
  std::vector<int> folds_;
  std::vector<std::vector<std::size_t>> train_rows_, test_rows_;
  BudgetTracker budget_;

  mutable std::mutex cache_mutex_;
  std::map<std::string, std::shared_future<std::optional<EvalRecord>>> cache_;
  mutable std::mutex joint_mutex_;
  mutable std::size_t joint_count_ = 0;
};

}  // namespace gradfe

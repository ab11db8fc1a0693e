#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradfe/dataset.hpp"

namespace gradfe {

enum class LearnerKind { RandomForest, DecisionTree, LinearModel };

const char* to_string(LearnerKind kind);
LearnerKind learner_kind_from_string(const std::string& name);

struct LearnerConfig {
  LearnerKind kind = LearnerKind::RandomForest;
  int trees = 32;
  int max_depth = 8;
  int min_samples_leaf = 2;
  std::uint64_t seed = 0;
};

/// Feature columns by reference; row i of the design matrix is
/// (columns[0][i], columns[1][i], ...).
using ColumnRefs = std::span<const Column* const>;

class Learner {
 public:
  virtual ~Learner() = default;
  /// Trains on the given rows. A constant target yields a model that predicts
  /// that constant.
  virtual void fit(ColumnRefs x, std::span<const double> y, std::span<const std::size_t> rows) = 0;
  virtual std::vector<double> predict(ColumnRefs x, std::span<const std::size_t> rows) const = 0;
};

std::unique_ptr<Learner> make_learner(const LearnerConfig& config, Task task);

/// One-shot train on `train_rows`, predict `test_rows`.
std::vector<double> fit_predict_learner(const LearnerConfig& config, Task task, ColumnRefs x,
                                        std::span<const double> y, std::span<const std::size_t> train_rows,
                                        std::span<const std::size_t> test_rows);

}  // namespace gradfe

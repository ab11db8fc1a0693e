#include "gradfe/learner.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "gradfe/rng.hpp"

namespace gradfe {

const char* to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::RandomForest: return "random_forest";
    case LearnerKind::DecisionTree: return "decision_tree";
    case LearnerKind::LinearModel: return "linear_model";
  }
  return "?";
}

LearnerKind learner_kind_from_string(const std::string& name) {
  if (name == "random_forest" || name == "rf") return LearnerKind::RandomForest;
  if (name == "decision_tree" || name == "tree") return LearnerKind::DecisionTree;
  if (name == "linear_model" || name == "linear") return LearnerKind::LinearModel;
  throw std::invalid_argument("unknown learner '" + name + "'");
}

namespace {

// Maps class labels to dense indices 0..C-1 (sorted by label).
struct LabelCodec {
  std::vector<double> labels;

  void fit(std::span<const double> y, std::span<const std::size_t> rows) {
    std::vector<double> seen;
    seen.reserve(rows.size());
    for (auto r : rows) seen.push_back(y[r]);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    labels = std::move(seen);
  }
  int code(double label) const {
    return static_cast<int>(std::lower_bound(labels.begin(), labels.end(), label) - labels.begin());
  }
  int classes() const { return static_cast<int>(labels.size()); }
};

struct TreeParams {
  int max_depth = 8;
  int min_leaf = 1;
  int mtry = 1;
  bool classification = false;
  int classes = 0;
};

class CartTree {
 public:
  // `target` holds class codes for classification and raw values otherwise.
  void build(ColumnRefs x, std::span<const double> target, std::vector<std::size_t> sample,
             const TreeParams& params, Rng& rng) {
    nodes_.clear();
    params_ = params;
    features_.resize(x.size());
    std::iota(features_.begin(), features_.end(), std::size_t{0});
    grow(x, target, std::span<std::size_t>(sample), 0, rng);
  }

  double predict(ColumnRefs x, std::size_t row) const {
    int n = 0;
    while (nodes_[static_cast<std::size_t>(n)].feature >= 0) {
      const auto& node = nodes_[static_cast<std::size_t>(n)];
      n = (*x[static_cast<std::size_t>(node.feature)])[row] <= node.threshold ? node.left : node.right;
    }
    return nodes_[static_cast<std::size_t>(n)].value;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    int feature = -1;
    double threshold = 0;
    int left = -1;
    int right = -1;
    double value = 0;
  };

  struct Split {
    int feature = -1;
    double threshold = 0;
    double score = 0;
  };

  double leaf_value(std::span<const double> target, std::span<const std::size_t> idx) const {
    if (params_.classification) {
      std::vector<std::size_t> counts(static_cast<std::size_t>(params_.classes), 0);
      for (auto r : idx) ++counts[static_cast<std::size_t>(target[r])];
      return static_cast<double>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
    double sum = 0;
    for (auto r : idx) sum += target[r];
    return sum / static_cast<double>(idx.size());
  }

  // Purity score to maximize: sum_c n_c^2 / n (Gini) or sum^2 / n (variance).
  double node_score(std::span<const double> target, std::span<const std::size_t> idx) const {
    const double n = static_cast<double>(idx.size());
    if (params_.classification) {
      std::vector<double> counts(static_cast<std::size_t>(params_.classes), 0.0);
      for (auto r : idx) counts[static_cast<std::size_t>(target[r])] += 1;
      double s = 0;
      for (double c : counts) s += c * c;
      return s / n;
    }
    double sum = 0;
    for (auto r : idx) sum += target[r];
    return sum * sum / n;
  }

  bool is_pure(std::span<const double> target, std::span<const std::size_t> idx) const {
    for (auto r : idx)
      if (target[r] != target[idx[0]]) return false;
    return true;
  }

  Split best_split(ColumnRefs x, std::span<const double> target, std::span<const std::size_t> idx, Rng& rng) {
    const std::size_t m = idx.size();
    const auto min_leaf = static_cast<std::size_t>(params_.min_leaf);
    Split best;
    best.score = node_score(target, idx) + 1e-12 * std::max(1.0, std::abs(node_score(target, idx)));

    // Partial Fisher-Yates draw of mtry features.
    const std::size_t p = features_.size();
    const std::size_t mtry = std::min<std::size_t>(p, static_cast<std::size_t>(params_.mtry));
    for (std::size_t k = 0; k < mtry; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, p - 1);
      std::swap(features_[k], features_[pick(rng)]);
    }

    std::vector<std::pair<double, double>> rows(m);
    std::vector<double> left(static_cast<std::size_t>(std::max(params_.classes, 1)));
    std::vector<double> right(left.size());
    for (std::size_t k = 0; k < mtry; ++k) {
      const std::size_t f = features_[k];
      const Column& col = *x[f];
      for (std::size_t i = 0; i < m; ++i) rows[i] = {col[idx[i]], target[idx[i]]};
      std::sort(rows.begin(), rows.end());
      if (rows.front().first == rows.back().first) continue;

      if (params_.classification) {
        std::fill(left.begin(), left.end(), 0.0);
        std::fill(right.begin(), right.end(), 0.0);
        for (const auto& r : rows) right[static_cast<std::size_t>(r.second)] += 1;
        double left_sq = 0, right_sq = 0;
        for (double c : right) right_sq += c * c;
        for (std::size_t i = 0; i + 1 < m; ++i) {
          const auto c = static_cast<std::size_t>(rows[i].second);
          left_sq += 2 * left[c] + 1;
          right_sq -= 2 * right[c] - 1;
          left[c] += 1;
          right[c] -= 1;
          const std::size_t nl = i + 1, nr = m - nl;
          if (rows[i].first == rows[i + 1].first || nl < min_leaf || nr < min_leaf) continue;
          const double score = left_sq / static_cast<double>(nl) + right_sq / static_cast<double>(nr);
          if (score > best.score) best = {static_cast<int>(f), midpoint(rows[i].first, rows[i + 1].first), score};
        }
      } else {
        double total = 0;
        for (const auto& r : rows) total += r.second;
        double sum_left = 0;
        for (std::size_t i = 0; i + 1 < m; ++i) {
          sum_left += rows[i].second;
          const std::size_t nl = i + 1, nr = m - nl;
          if (rows[i].first == rows[i + 1].first || nl < min_leaf || nr < min_leaf) continue;
          const double sum_right = total - sum_left;
          const double score = sum_left * sum_left / static_cast<double>(nl) +
                               sum_right * sum_right / static_cast<double>(nr);
          if (score > best.score) best = {static_cast<int>(f), midpoint(rows[i].first, rows[i + 1].first), score};
        }
      }
    }
    return best;
  }

  static double midpoint(double a, double b) {
    const double mid = a + (b - a) / 2;
    return mid < b ? mid : a;
  }

  int grow(ColumnRefs x, std::span<const double> target, std::span<std::size_t> idx, int depth, Rng& rng) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    const auto min_leaf = static_cast<std::size_t>(params_.min_leaf);
    Split split;
    if (depth < params_.max_depth && idx.size() >= 2 * min_leaf && !is_pure(target, idx))
      split = best_split(x, target, idx, rng);
    if (split.feature < 0) {
      nodes_[static_cast<std::size_t>(id)].value = leaf_value(target, idx);
      return id;
    }
    const Column& col = *x[static_cast<std::size_t>(split.feature)];
    auto mid = std::stable_partition(idx.begin(), idx.end(),
                                     [&](std::size_t r) { return col[r] <= split.threshold; });
    const auto n_left = static_cast<std::size_t>(mid - idx.begin());
    const int l = grow(x, target, idx.subspan(0, n_left), depth + 1, rng);
    const int r = grow(x, target, idx.subspan(n_left), depth + 1, rng);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> features_;
  TreeParams params_;
};

class TreeEnsemble final : public Learner {
 public:
  TreeEnsemble(const LearnerConfig& config, Task task, bool bagging)
      : config_(config), task_(task), bagging_(bagging) {
    if (config.trees < 1) throw std::invalid_argument("learner needs at least one tree");
    if (config.max_depth < 0 || config.min_samples_leaf < 1)
      throw std::invalid_argument("invalid tree depth or leaf size");
  }

  void fit(ColumnRefs x, std::span<const double> y, std::span<const std::size_t> rows) override {
    if (rows.empty() || x.empty()) throw std::invalid_argument("fit needs at least one row and one column");
    const bool clf = task_ == Task::Classification;
    std::vector<double> target(y.begin(), y.end());
    if (clf) {
      codec_.fit(y, rows);
      for (auto r : rows) target[r] = codec_.code(y[r]);
    }
    TreeParams params;
    params.max_depth = config_.max_depth;
    params.min_leaf = config_.min_samples_leaf;
    params.classification = clf;
    params.classes = clf ? codec_.classes() : 0;
    const int p = static_cast<int>(x.size());
    params.mtry = bagging_ ? std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(p))))) : p;

    const int count = bagging_ ? config_.trees : 1;
    trees_.assign(static_cast<std::size_t>(count), CartTree{});
    Rng seeds(config_.seed);
    for (auto& tree : trees_) {
      Rng rng(seeds());
      std::vector<std::size_t> sample;
      if (bagging_) {
        sample.resize(rows.size());
        std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
        for (auto& s : sample) s = rows[pick(rng)];
      } else {
        sample.assign(rows.begin(), rows.end());
      }
      tree.build(x, target, std::move(sample), params, rng);
    }
  }

  std::vector<double> predict(ColumnRefs x, std::span<const std::size_t> rows) const override {
    std::vector<double> out(rows.size());
    if (task_ == Task::Classification) {
      std::vector<int> votes(static_cast<std::size_t>(codec_.classes()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::fill(votes.begin(), votes.end(), 0);
        for (const auto& t : trees_) ++votes[static_cast<std::size_t>(t.predict(x, rows[i]))];
        out[i] = codec_.labels[static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin())];
      }
    } else {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        double sum = 0;
        for (const auto& t : trees_) sum += t.predict(x, rows[i]);
        out[i] = sum / static_cast<double>(trees_.size());
      }
    }
    return out;
  }

 private:
  LearnerConfig config_;
  Task task_;
  bool bagging_;
  LabelCodec codec_;
  std::vector<CartTree> trees_;
};

// Least squares for regression, softmax regression by gradient descent for
// classification. Features are standardized with training statistics.
class LinearModel final : public Learner {
 public:
  explicit LinearModel(Task task) : task_(task) {}

  void fit(ColumnRefs x, std::span<const double> y, std::span<const std::size_t> rows) override {
    if (rows.empty() || x.empty()) throw std::invalid_argument("fit needs at least one row and one column");
    const auto p = static_cast<Eigen::Index>(x.size());
    const auto n = static_cast<Eigen::Index>(rows.size());
    mean_ = Eigen::VectorXd::Zero(p);
    scale_ = Eigen::VectorXd::Ones(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      double s = 0, ss = 0;
      for (auto r : rows) s += (*x[static_cast<std::size_t>(j)])[r];
      const double m = s / static_cast<double>(n);
      for (auto r : rows) ss += std::pow((*x[static_cast<std::size_t>(j)])[r] - m, 2);
      mean_(j) = m;
      const double sd = std::sqrt(ss / static_cast<double>(n));
      scale_(j) = sd > 0 ? sd : 1.0;
    }
    const Eigen::MatrixXd design = design_matrix(x, rows);

    if (task_ == Task::Regression) {
      Eigen::VectorXd target(n);
      for (Eigen::Index i = 0; i < n; ++i) target(i) = y[rows[static_cast<std::size_t>(i)]];
      Eigen::MatrixXd gram = design.transpose() * design;
      gram.diagonal().array() += 1e-8;
      weights_ = gram.ldlt().solve(design.transpose() * target);
      return;
    }

    codec_.fit(y, rows);
    const int classes = codec_.classes();
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, classes);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, codec_.code(y[rows[static_cast<std::size_t>(i)]])) = 1.0;
    weights_ = Eigen::MatrixXd::Zero(design.cols(), classes);
    if (classes < 2) return;
    const double lr = 0.5, l2 = 1e-4;
    for (int it = 0; it < 300; ++it) {
      Eigen::MatrixXd logits = design * weights_;
      Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
      Eigen::MatrixXd probs = (logits.colwise() - row_max).array().exp().matrix();
      Eigen::VectorXd norm = probs.rowwise().sum();
      probs = norm.cwiseInverse().asDiagonal() * probs;
      Eigen::MatrixXd grad = design.transpose() * (probs - onehot) / static_cast<double>(n) + l2 * weights_;
      weights_ -= lr * grad;
    }
  }

  std::vector<double> predict(ColumnRefs x, std::span<const std::size_t> rows) const override {
    const Eigen::MatrixXd design = design_matrix(x, rows);
    const Eigen::MatrixXd out = design * weights_;
    std::vector<double> pred(rows.size());
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      if (task_ == Task::Regression) {
        pred[static_cast<std::size_t>(i)] = out(i, 0);
      } else {
        Eigen::Index best = 0;
        out.row(i).maxCoeff(&best);
        pred[static_cast<std::size_t>(i)] = codec_.labels[static_cast<std::size_t>(best)];
      }
    }
    return pred;
  }

 private:
  Eigen::MatrixXd design_matrix(ColumnRefs x, std::span<const std::size_t> rows) const {
    const auto p = static_cast<Eigen::Index>(x.size());
    Eigen::MatrixXd d(static_cast<Eigen::Index>(rows.size()), p + 1);
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      d(i, 0) = 1.0;
      for (Eigen::Index j = 0; j < p; ++j)
        d(i, j + 1) = ((*x[static_cast<std::size_t>(j)])[rows[static_cast<std::size_t>(i)]] - mean_(j)) / scale_(j);
    }
    return d;
  }

  Task task_;
  LabelCodec codec_;
  Eigen::VectorXd mean_, scale_;
  Eigen::MatrixXd weights_;
};

}  // namespace

std::unique_ptr<Learner> make_learner(const LearnerConfig& config, Task task) {
  switch (config.kind) {
    case LearnerKind::RandomForest: return std::make_unique<TreeEnsemble>(config, task, true);
    case LearnerKind::DecisionTree: return std::make_unique<TreeEnsemble>(config, task, false);
    case LearnerKind::LinearModel: return std::make_unique<LinearModel>(task);
  }
  throw std::invalid_argument("unknown learner kind");
}

std::vector<double> fit_predict_learner(const LearnerConfig& config, Task task, ColumnRefs x,
                                        std::span<const double> y, std::span<const std::size_t> train_rows,
                                        std::span<const std::size_t> test_rows) {
  auto learner = make_learner(config, task);
  learner->fit(x, y, train_rows);
  return learner->predict(x, test_rows);
}

}  // namespace gradfe

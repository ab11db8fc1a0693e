#include "gradfe/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "gradfe/errors.hpp"
#include "gradfe/rng.hpp"

namespace gradfe {

namespace {

Column materialize_node(const FeatureSpace& space, const ParseTree& node, const Dataset& data) {
  if (node.is_leaf()) {
    if (node.index() >= data.columns.size()) throw LeafIndexOutOfRange(node.index());
    return data.columns[node.index()];
  }
  std::vector<Column> args;
  args.reserve(node.children().size());
  for (const auto& c : node.children()) args.push_back(materialize_node(space, c, data));
  std::vector<const Column*> refs;
  for (const auto& a : args) refs.push_back(&a);
  return space.registry()[node.index()].apply(refs);
}

}  // namespace

std::optional<Column> materialize(const FeatureSpace& space, const ParseTree& tree, const Dataset& data) {
  Column out = materialize_node(space, tree, data);
  if (out.empty()) return std::nullopt;
  for (double v : out)
    if (!std::isfinite(v)) return std::nullopt;
  if (std::all_of(out.begin(), out.end(), [&](double v) { return v == out.front(); })) return std::nullopt;
  return out;
}

std::vector<int> assign_folds(std::size_t rows, int folds, std::uint64_t seed) {
  if (folds < 2 || static_cast<std::size_t>(folds) > rows)
    throw std::invalid_argument("fold count must be in [2, rows]");
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_stream(seed, streams::kFolds);
  for (std::size_t i = rows; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<int> fold(rows);
  for (std::size_t i = 0; i < rows; ++i) fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return fold;
}

bool BudgetTracker::try_reserve() {
  std::lock_guard lock(mutex_);
  if (spent_ + reserved_ >= cap_) return false;
  ++reserved_;
  return true;
}

void BudgetTracker::commit() {
  std::lock_guard lock(mutex_);
  --reserved_;
  ++spent_;
}

void BudgetTracker::release() {
  std::lock_guard lock(mutex_);
  --reserved_;
}

std::size_t BudgetTracker::spent() const {
  std::lock_guard lock(mutex_);
  return spent_;
}

std::size_t BudgetTracker::remaining() const {
  std::lock_guard lock(mutex_);
  return cap_ - spent_ - reserved_;
}

const char* to_string(EvalStatus status) {
  switch (status) {
    case EvalStatus::Evaluated: return "evaluated";
    case EvalStatus::Cached: return "cached";
    case EvalStatus::Invalid: return "invalid";
    case EvalStatus::BudgetExhausted: return "budget_exhausted";
  }
  return "?";
}

Evaluator::Evaluator(Dataset data, FeatureSpace space, EvaluatorOptions options)
    : data_(std::move(data)),
      space_(std::move(space)),
      options_(options),
      folds_(assign_folds(data_.rows(), options.folds, options.seed)),
      budget_(options.budget) {
  data_.validate();
  if (space_.raw_count() != data_.features())
    throw std::invalid_argument("feature space and dataset disagree on the raw feature count");
  train_rows_.resize(static_cast<std::size_t>(options_.folds));
  test_rows_.resize(static_cast<std::size_t>(options_.folds));
  for (std::size_t i = 0; i < folds_.size(); ++i) {
    for (int f = 0; f < options_.folds; ++f)
      (folds_[i] == f ? test_rows_ : train_rows_)[static_cast<std::size_t>(f)].push_back(i);
  }
}

double Evaluator::fold_metric(std::span<const double> y, std::span<const double> predictions) const {
  if (data_.task == Task::Classification)
    return options_.classification_metric == ClassificationMetric::MicroF1 ? metric_f1_micro(y, predictions)
                                                                           : metric_f1(y, predictions);
  try {
    return metric_one_minus_rae(y, predictions);
  } catch (const ConstantTarget&) {
    // A fold whose held-out targets are all equal: exact predictions score 1.
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] != predictions[i]) return 0.0;
    return 1.0;
  }
}

EvalRecord Evaluator::score_columns(std::span<const Column* const> extra, std::string key) const {
  std::vector<const Column*> cols;
  cols.reserve(data_.columns.size() + extra.size());
  for (const auto& c : data_.columns) cols.push_back(&c);
  cols.insert(cols.end(), extra.begin(), extra.end());

  EvalRecord rec;
  rec.key = std::move(key);
  double sum = 0;
  for (int f = 0; f < options_.folds; ++f) {
    LearnerConfig lc = options_.learner;
    lc.seed = derive_seed(options_.learner.seed, "fold-" + std::to_string(f));
    const auto& test = test_rows_[static_cast<std::size_t>(f)];
    const auto pred = fit_predict_learner(lc, data_.task, cols, data_.target,
                                          train_rows_[static_cast<std::size_t>(f)], test);
    std::vector<double> truth(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) truth[i] = data_.target[test[i]];
    const double m = fold_metric(truth, pred);
    rec.fold_scores.push_back(m);
    sum += m;
  }
  rec.metric = std::clamp(sum / options_.folds, 0.0, 1.0);
  rec.loss = 1.0 - rec.metric;
  return rec;
}

EvalOutcome Evaluator::evaluate(const ParseTree& tree) {
  const std::string key = canonical_key(space_, tree);
  std::promise<std::optional<EvalRecord>> promise;
  {
    std::unique_lock lock(cache_mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) {
      auto fut = it->second;
      lock.unlock();
      auto rec = fut.get();
      return {rec ? EvalStatus::Cached : EvalStatus::Invalid, rec};
    }
    cache_.emplace(key, promise.get_future().share());
  }
  auto abandon = [&](std::exception_ptr error) {
    promise.set_exception(error);
    std::lock_guard lock(cache_mutex_);
    cache_.erase(key);
  };

  if (!budget_.try_reserve()) {
    abandon(std::make_exception_ptr(BudgetExhausted(budget_.cap())));
    throw BudgetExhausted(budget_.cap());
  }
  try {
    auto column = materialize(space_, tree, data_);
    if (!column) {
      budget_.release();
      promise.set_value(std::nullopt);
      return {EvalStatus::Invalid, std::nullopt};
    }
    const Column* extra[] = {&*column};
    EvalRecord rec = score_columns(extra, key);
    budget_.commit();
    promise.set_value(rec);
    return {EvalStatus::Evaluated, std::move(rec)};
  } catch (...) {
    budget_.release();
    abandon(std::current_exception());
    throw;
  }
}

std::vector<EvalOutcome> Evaluator::evaluate_batch(std::span<const ParseTree> trees, int workers) {
  struct Job {
    std::size_t index;
    std::string key;
    Column column;
    std::promise<std::optional<EvalRecord>> promise;
  };
  std::vector<EvalOutcome> out(trees.size());
  std::vector<std::pair<std::size_t, std::shared_future<std::optional<EvalRecord>>>> waits;
  std::vector<Job> jobs;
  jobs.reserve(trees.size());

  for (std::size_t i = 0; i < trees.size(); ++i) {
    std::string key = canonical_key(space_, trees[i]);
    std::promise<std::optional<EvalRecord>> promise;
    {
      std::lock_guard lock(cache_mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) {
        waits.emplace_back(i, it->second);
        continue;
      }
      cache_.emplace(key, promise.get_future().share());
    }
    auto column = materialize(space_, trees[i], data_);
    if (!column) {
      promise.set_value(std::nullopt);
      out[i] = {EvalStatus::Invalid, std::nullopt};
      continue;
    }
    if (!budget_.try_reserve()) {
      promise.set_exception(std::make_exception_ptr(BudgetExhausted(budget_.cap())));
      std::lock_guard lock(cache_mutex_);
      cache_.erase(key);
      out[i] = {EvalStatus::BudgetExhausted, std::nullopt};
      continue;
    }
    jobs.push_back({i, std::move(key), std::move(*column), std::move(promise)});
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs.size());
  auto work = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      auto& job = jobs[j];
      try {
        const Column* extra[] = {&job.column};
        EvalRecord rec = score_columns(extra, job.key);
        budget_.commit();
        out[job.index] = {EvalStatus::Evaluated, rec};
        job.promise.set_value(std::move(rec));
      } catch (...) {
        errors[j] = std::current_exception();
        budget_.release();
        job.promise.set_exception(errors[j]);
        std::lock_guard lock(cache_mutex_);
        cache_.erase(job.key);
      }
    }
  };
  const auto thread_count = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), jobs.size());
  if (thread_count <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < thread_count; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (auto& [i, fut] : waits) {
    std::optional<EvalRecord> rec;
    try {
      rec = fut.get();
    } catch (const BudgetExhausted&) {
      out[i] = {EvalStatus::BudgetExhausted, std::nullopt};
      continue;
    }
    out[i] = {rec ? EvalStatus::Cached : EvalStatus::Invalid, rec};
  }
  return out;
}

bool Evaluator::is_valid(const ParseTree& tree) const { return materialize(space_, tree, data_).has_value(); }

std::optional<EvalRecord> Evaluator::cached(const std::string& key) const {
  std::shared_future<std::optional<EvalRecord>> fut;
  {
    std::lock_guard lock(cache_mutex_);
    auto it = cache_.find(key);
    if (it == cache_.end()) return std::nullopt;
    fut = it->second;
  }
  return fut.get();
}

EvalRecord Evaluator::baseline() const { return score_columns({}, ""); }

EvalRecord Evaluator::joint(std::span<const ParseTree> features) const {
  std::vector<Column> columns;
  std::vector<std::string> keys;
  for (const auto& t : features) {
    if (auto c = materialize(space_, t, data_)) {
      columns.push_back(std::move(*c));
      keys.push_back(canonical_key(space_, t));
    }
  }
  std::vector<const Column*> refs;
  for (const auto& c : columns) refs.push_back(&c);
  std::string key;
  for (const auto& k : keys) key += (key.empty() ? "" : " | ") + k;
  {
    std::lock_guard lock(joint_mutex_);
    ++joint_count_;
  }
  return score_columns(refs, key);
}

std::size_t Evaluator::joint_evaluations() const {
  std::lock_guard lock(joint_mutex_);
  return joint_count_;
}

}  // namespace gradfe

#include "gradfe/evolution.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <thread>

#include "gradfe/errors.hpp"

namespace gradfe {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written by index so the outcome does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// Cap on the enumeration used once random sampling stops finding new trees.
constexpr std::size_t kEnumerationCap = 200000;

}  // namespace

const char* to_string(SearchMode mode) {
  return mode == SearchMode::Guided ? "guided" : "random";
}

void validate(const SearchConfig& c) {
  if (c.max_order < 1) throw ConfigError("max order must be at least 1");
  if (c.population < 1) throw ConfigError("population must be at least 1");
  if (c.budget < c.population)
    throw ConfigError("budget (" + std::to_string(c.budget) + ") is below the initial population (" +
                      std::to_string(c.population) + ")");
  if (c.folds < 2) throw ConfigError("folds must be at least 2");
  if (c.workers < 1) throw ConfigError("workers must be at least 1");
  if (c.exploit_width % 2 != 0) throw ConfigError("exploitation width must be even");
  if (c.train_epochs < 0 || c.finetune_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (c.train.batch_size < 1) throw ConfigError("batch size must be positive");
  if (c.latent.eta < 0 || c.latent.max_steps < 1)
    throw ConfigError("latent step size must be non-negative and the step count positive");
}

EvaluatorOptions evaluator_options(const SearchConfig& c) {
  EvaluatorOptions eo;
  eo.folds = c.folds;
  eo.seed = c.seed;
  eo.budget = c.budget;
  eo.classification_metric = c.classification_metric;
  eo.learner = c.learner;
  eo.learner.seed = derive_seed(c.seed, streams::kLearner);
  return eo;
}

std::size_t exploit_width(std::size_t raw_features, std::size_t population) {
  const std::size_t d = 2 * ((raw_features + 1) / 2);
  return std::max<std::size_t>(2, std::min(d, population - population % 2));
}

bool Population::insert(Candidate c) {
  if (!keys_.insert(c.key).second) return false;
  members_.push_back(std::move(c));
  return true;
}

std::vector<std::size_t> Population::ranking() const {
  std::vector<std::size_t> idx(members_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = members_[a];
    const auto& y = members_[b];
    if (x.record.loss != y.record.loss) return x.record.loss < y.record.loss;
    return x.key < y.key;
  });
  return idx;
}

double Population::best_loss() const {
  double best = 1;
  for (const auto& m : members_) best = std::min(best, m.record.loss);
  return best;
}

EvolutionSearch::EvolutionSearch(const Dataset& data, const FeatureSpace& space, SearchConfig config)
    : data_(data),
      space_(space),
      config_(std::move(config)),
      sampling_(make_stream(config_.seed, streams::kSampling)),
      training_(make_stream(config_.seed, streams::kOptimizerTrain)) {
  validate(config_);
  evaluator_ = std::make_unique<Evaluator>(data_, space_, evaluator_options(config_));
  width_ = config_.exploit_width ? std::min(config_.exploit_width, std::max<std::size_t>(config_.population, 2))
                                 : exploit_width(space_.raw_count(), config_.population);
  if (config_.mode == SearchMode::Guided)
    optimizer_ = std::make_shared<FeatureOptimizer>(Vocabulary(space_), config_.shape, config_.seed);
}

std::vector<ParseTree> EvolutionSearch::draw_random(std::size_t n, std::unordered_set<std::string>& pending) {
  std::vector<ParseTree> out;
  const auto seen = [&](const std::string& key) {
    return population_.contains(key) || invalid_.count(key) > 0 || pending.count(key) > 0;
  };
  const auto accept = [&](ParseTree t) {
    auto key = canonical_key(space_, t);
    if (evaluator_->is_valid(t)) {
      pending.insert(std::move(key));
      out.push_back(std::move(t));
    } else {
      invalid_.insert(std::move(key));
    }
  };
  while (out.size() < n && !exhausted_) {
    if (!enumerated_) {
      if (auto t = sample_unseen_tree(space_, config_.max_order, sampling_, seen)) {
        accept(std::move(*t));
        continue;
      }
      if (enumeration_tried_) {
        // The space is too large to enumerate; sampling is merely unlucky.
        continue;
      }
      enumeration_tried_ = true;
      enumerated_ = enumerate_feature_space(space_, config_.max_order, kEnumerationCap);
      if (!enumerated_) continue;
    }
    // Uniform draw from what is left of an enumerable space.
    std::vector<std::size_t> left;
    std::unordered_set<std::string> left_keys;
    for (std::size_t i = 0; i < enumerated_->size(); ++i) {
      auto key = canonical_key(space_, (*enumerated_)[i]);
      if (!seen(key) && left_keys.insert(std::move(key)).second) left.push_back(i);
    }
    if (left.empty()) {
      exhausted_ = true;
      break;
    }
    std::shuffle(left.begin(), left.end(), sampling_);
    for (std::size_t i : left) {
      if (out.size() >= n) break;
      accept((*enumerated_)[i]);
    }
  }
  return out;
}

std::vector<ScoredString> EvolutionSearch::corpus_for(std::span<const std::size_t> members) const {
  double lo = 1, hi = 0;
  for (const auto& m : population_.members()) {
    lo = std::min(lo, m.record.loss);
    hi = std::max(hi, m.record.loss);
  }
  std::vector<ParseTree> trees;
  std::vector<double> losses;
  for (std::size_t i : members) {
    trees.push_back(population_.members()[i].tree);
    losses.push_back(population_.members()[i].record.loss);
  }
  const auto scores = normalize_losses(losses, lo, hi);
  return build_corpus(space_, optimizer_->vocab(), trees, scores, config_.train.augmentation_limit);
}

void EvolutionSearch::insert_outcomes(std::span<const ParseTree> trees, std::span<const EvalOutcome> outcomes,
                                      std::span<const std::string> origins, int iteration, std::size_t* optimized,
                                      std::size_t* random) {
  for (std::size_t i = 0; i < trees.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.status == EvalStatus::Invalid) {
      invalid_.insert(canonical_key(space_, trees[i]));
      continue;
    }
    if (!o.record) continue;
    Candidate c{trees[i], o.record->key, *o.record, origins[i], iteration};
    if (population_.insert(std::move(c))) {
      if (origins[i] == "optimized" && optimized) ++*optimized;
      if (origins[i] == "random" && random) ++*random;
    }
  }
}

void EvolutionSearch::initialize() {
  const auto start = Clock::now();
  while (population_.size() < config_.population && evaluator_->budget().remaining() > 0) {
    std::unordered_set<std::string> pending;
    const auto trees = draw_random(config_.population - population_.size(), pending);
    if (trees.empty()) break;
    const auto outcomes = evaluator_->evaluate_batch(trees, config_.workers);
    const std::vector<std::string> origins(trees.size(), "initial");
    insert_outcomes(trees, outcomes, origins, 0, nullptr, nullptr);
  }
  init_seconds_ += seconds_since(start);
}

void EvolutionSearch::train_optimizer() {
  if (!optimizer_ || population_.size() == 0) return;
  const auto start = Clock::now();
  std::vector<std::size_t> all(population_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto corpus = corpus_for(all);
  TrainConfig tc = config_.train;
  tc.epochs = config_.train_epochs;
  const auto h = optimizer_->train(corpus, tc, training_);
  history_.insert(history_.end(), h.begin(), h.end());
  train_seconds_ += seconds_since(start);
}

bool EvolutionSearch::evolve_step() {
  if (evaluator_->budget().remaining() == 0 || exhausted_) return false;
  const auto start = Clock::now();
  const int iteration = ++iteration_;
  const std::size_t half = width_ / 2;
  const std::size_t before = population_.size();

  std::vector<ParseTree> trees;
  std::vector<std::string> origins;
  std::unordered_set<std::string> pending;
  std::size_t optimized_found = 0;

  if (optimizer_) {
    const auto ranked = population_.ranking();
    const std::size_t top = std::min(width_, ranked.size());
    std::vector<OptimizeResult> results(top);
    const auto known = [this](const std::string& key) { return population_.contains(key) || invalid_.count(key); };
    parallel_for(top, config_.workers, [&](std::size_t i) {
      results[i] = optimizer_->optimize_feature(space_, population_.members()[ranked[i]].tree, config_.max_order,
                                                config_.latent, known);
    });
    for (auto& r : results) {
      if (optimized_found >= half) break;
      if (!r.tree) continue;
      auto key = canonical_key(space_, *r.tree);
      if (population_.contains(key) || invalid_.count(key) || pending.count(key)) continue;
      if (!evaluator_->is_valid(*r.tree)) {
        invalid_.insert(std::move(key));
        continue;
      }
      pending.insert(std::move(key));
      trees.push_back(std::move(*r.tree));
      origins.emplace_back("optimized");
      ++optimized_found;
    }
  }

  const std::size_t random_wanted = optimizer_ ? half : width_;
  for (auto& t : draw_random(random_wanted, pending)) {
    trees.push_back(std::move(t));
    origins.emplace_back("random");
  }

  IterationSnapshot snap;
  snap.iteration = iteration;
  snap.optimizer_short = optimizer_ && optimized_found < half;
  if (!trees.empty()) {
    const auto outcomes = evaluator_->evaluate_batch(trees, config_.workers);
    insert_outcomes(trees, outcomes, origins, iteration, &snap.optimized_added, &snap.random_added);
  }

  if (optimizer_ && config_.finetune_epochs > 0 && population_.size() > before &&
      evaluator_->budget().remaining() > 0) {
    // New members plus a uniform sample of the older ones.
    std::vector<std::size_t> chosen;
    for (std::size_t i = before; i < population_.size(); ++i) chosen.push_back(i);
    std::vector<std::size_t> older(before);
    for (std::size_t i = 0; i < before; ++i) older[i] = i;
    const std::size_t cap = config_.finetune_sample ? config_.finetune_sample : population_.size();
    if (cap > chosen.size() && !older.empty()) {
      const std::size_t take = std::min(cap - chosen.size(), older.size());
      std::vector<std::size_t> sample;
      std::sample(older.begin(), older.end(), std::back_inserter(sample), take, training_);
      chosen.insert(chosen.end(), sample.begin(), sample.end());
    }
    const auto corpus = corpus_for(chosen);
    TrainConfig tc = config_.train;
    tc.epochs = config_.finetune_epochs;
    const auto h = optimizer_->train(corpus, tc, training_);
    history_.insert(history_.end(), h.begin(), h.end());
  }

  snap.population = population_.size();
  snap.spent = evaluator_->budget().spent();
  snap.budget_exhausted = evaluator_->budget().remaining() == 0;
  snap.best_loss = population_.best_loss();
  snap.best_metric = 1 - snap.best_loss;
  snap.seconds = seconds_since(start);
  iterations_.push_back(snap);

  if (population_.size() == before) {
    exhausted_ = exhausted_ || trees.empty();
    return false;
  }
  return !snap.budget_exhausted;
}

Selection EvolutionSearch::select() {
  const std::size_t width = config_.selection_width ? config_.selection_width : space_.raw_count();
  return select_final_features(*evaluator_, population_, width, config_.selection_pool);
}

SearchResult EvolutionSearch::finish(Selection selection) {
  SearchResult r;
  r.config = config_;
  r.target = data_.target_name;
  r.task = data_.task;
  r.rows = data_.rows();
  r.raw_names = space_.raw_names();
  r.transformations = space_.registry().names();
  r.base = evaluator_->baseline();
  r.spent = evaluator_->budget().spent();
  r.space_exhausted = exhausted_;
  r.population = std::move(population_);
  r.iterations = std::move(iterations_);
  r.selection = std::move(selection);
  r.loss_history = std::move(history_);
  r.optimizer = std::move(optimizer_);
  r.init_seconds = init_seconds_;
  r.train_seconds = train_seconds_;
  return r;
}

SearchResult run_search(const Dataset& data, const FeatureSpace& space, const SearchConfig& config,
                        const ProgressCallback& progress) {
  const auto start = Clock::now();
  EvolutionSearch search(data, space, config);
  search.initialize();
  search.train_optimizer();
  while (true) {
    const bool more = search.evolve_step();
    if (progress && !search.iterations().empty()) progress(search.iterations().back());
    if (!more) break;
  }
  const auto sel_start = Clock::now();
  auto selection = search.select();
  const double sel_seconds = seconds_since(sel_start);
  auto result = search.finish(std::move(selection));
  result.selection_seconds = sel_seconds;
  result.total_seconds = seconds_since(start);
  return result;
}

Selection select_final_features(Evaluator& evaluator, const Population& population, std::size_t width,
                                std::size_t pool) {
  Selection sel;
  const std::size_t joint_before = evaluator.joint_evaluations();
  sel.joint_metric = evaluator.baseline().metric;
  const auto ranked = population.ranking();
  const std::size_t n = std::min(pool ? pool : ranked.size(), ranked.size());
  std::vector<bool> used(n, false);
  std::vector<ParseTree> chosen;
  const int workers = std::max<int>(1, static_cast<int>(std::thread::hardware_concurrency()));
  while (sel.members.size() < width) {
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n; ++i)
      if (!used[i]) open.push_back(i);
    if (open.empty()) break;
    std::vector<double> metric(open.size(), -std::numeric_limits<double>::infinity());
    parallel_for(open.size(), workers, [&](std::size_t j) {
      auto trees = chosen;
      trees.push_back(population.members()[ranked[open[j]]].tree);
      metric[j] = evaluator.joint(trees).metric;
    });
    // Ties go to the better-ranked candidate.
    std::size_t best = open.size();
    double best_metric = sel.joint_metric;
    for (std::size_t j = 0; j < open.size(); ++j)
      if (metric[j] > best_metric) {
        best_metric = metric[j];
        best = j;
      }
    if (best == open.size()) break;
    used[open[best]] = true;
    chosen.push_back(population.members()[ranked[open[best]]].tree);
    sel.members.push_back(ranked[open[best]]);
    sel.joint_metric = best_metric;
  }
  sel.joint_evaluations = evaluator.joint_evaluations() - joint_before;
  return sel;
}

}  // namespace gradfe

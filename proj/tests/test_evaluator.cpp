#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "gradfe/errors.hpp"
#include "gradfe/evaluator.hpp"
#include "oracles.hpp"

using namespace gradfe;

namespace {

Dataset toy() {
  return load_csv(GRADFE_DATA_DIR "/toy_three_features.csv", {"target", TaskHint::Regression}).dataset;
}

Dataset small(std::vector<Column> cols, Column target, Task task = Task::Regression) {
  Dataset d;
  for (std::size_t i = 0; i < cols.size(); ++i) d.names.push_back("f" + std::to_string(i));
  d.columns = std::move(cols);
  d.target = std::move(target);
  d.task = task;
  d.target_name = "y";
  return d;
}

}  // namespace

TEST_CASE("safeguarded kernels") {
  const FeatureSpace s(TransformationRegistry::standard(), {"u", "v"});
  auto d = small({{0.0, std::exp(1.0) - 1, -3.0}, {0.0, 1e-9, -2.0}}, {1, 2, 3});

  auto col = [&](std::string_view text) { return materialize(s, parse_postorder(s, text), d); };
  const auto logged = col("u log");
  REQUIRE(logged);
  CHECK((*logged)[0] == 0.0);
  CHECK((*logged)[1] == doctest::Approx(1.0));
  CHECK((*logged)[2] == doctest::Approx(std::log(4.0)));

  const auto ratio = col("u v divide");
  REQUIRE(ratio);
  for (double x : *ratio) CHECK(std::isfinite(x));
  CHECK((*ratio)[0] == 0.0);
  CHECK((*ratio)[1] == doctest::Approx((std::exp(1.0) - 1) / 1e-6));
  CHECK((*ratio)[2] == doctest::Approx(1.5));

  const auto rec = col("v reciprocal");
  REQUIRE(rec);
  CHECK((*rec)[0] == 0.0);
  CHECK((*rec)[1] == doctest::Approx(1e6));
  CHECK((*rec)[2] == doctest::Approx(-0.5));

  const auto mod = col("u v modulo");
  REQUIRE(mod);
  CHECK((*mod)[2] == doctest::Approx(-1.0));

  const auto root = col("u sqrt");
  REQUIRE(root);
  CHECK((*root)[2] == doctest::Approx(std::sqrt(3.0)));
}

TEST_CASE("invalid features") {
  const FeatureSpace s(TransformationRegistry::standard(), {"u", "v"});
  auto d = small({{2, 2, 2}, {1, 2, 3}}, {1, 2, 3});
  CHECK_FALSE(materialize(s, parse_postorder(s, "u min_max"), d));
  CHECK_FALSE(materialize(s, parse_postorder(s, "v v subtract"), d));
  CHECK(materialize(s, parse_postorder(s, "v min_max"), d));
  auto huge = small({{1e300, 1e300, 2e300}, {1, 2, 3}}, {1, 2, 3});
  CHECK_FALSE(materialize(s, parse_postorder(s, "u u multiply"), huge));
  CHECK_THROWS_AS(materialize(s, ParseTree::apply(0, {ParseTree::leaf(5)}), d), LeafIndexOutOfRange);
}

TEST_CASE("1 - RAE") {
  const std::vector<double> y = {1, 2, 3};
  CHECK(metric_one_minus_rae(y, y) == 1.0);
  CHECK(metric_one_minus_rae(y, std::vector<double>{2, 2, 2}) == doctest::Approx(0.0));
  CHECK(metric_one_minus_rae(y, std::vector<double>{1, 2, 4}) == doctest::Approx(0.5));
  CHECK(metric_one_minus_rae(y, std::vector<double>{3, 3, 1}) < 0.0);
  CHECK_THROWS_AS(metric_one_minus_rae(std::vector<double>{4, 4}, std::vector<double>{4, 4}), ConstantTarget);
}

TEST_CASE("F1") {
  const std::vector<double> y = {1, 1, 0, 0};
  CHECK(metric_f1(y, y) == 1.0);
  CHECK(metric_f1(y, std::vector<double>{0, 0, 1, 1}) == 0.0);
  CHECK(metric_f1(y, std::vector<double>{1, 0, 0, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK(metric_f1(y, std::vector<double>{0, 0, 0, 0}) == 0.0);
  CHECK(metric_f1_micro(y, std::vector<double>{1, 0, 0, 0}) == doctest::Approx(0.75));
  // Multiclass falls back to micro averaging.
  CHECK(metric_f1(std::vector<double>{0, 1, 2, 2}, std::vector<double>{0, 1, 2, 1}) == doctest::Approx(0.75));
}

TEST_CASE("learner basics") {
  const Column x = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const Column* cols[] = {&x};
  std::vector<std::size_t> rows(10);
  std::iota(rows.begin(), rows.end(), std::size_t{0});

  SUBCASE("constant target predicts the constant") {
    const Column y(10, 3.0);
    for (auto task : {Task::Regression, Task::Classification}) {
      for (auto kind : {LearnerKind::RandomForest, LearnerKind::DecisionTree, LearnerKind::LinearModel}) {
        LearnerConfig c;
        c.kind = kind;
        const auto p = fit_predict_learner(c, task, cols, y, rows, rows);
        for (double v : p) CHECK(v == doctest::Approx(3.0));
      }
    }
  }

  SUBCASE("same seed, same predictions") {
    const Column y = {0, 1, 0, 1, 1, 0, 1, 1, 0, 1};
    LearnerConfig c;
    c.seed = 99;
    CHECK(fit_predict_learner(c, Task::Classification, cols, y, rows, rows) ==
          fit_predict_learner(c, Task::Classification, cols, y, rows, rows));
  }

  SUBCASE("linear model recovers a line") {
    Column y(10);
    for (std::size_t i = 0; i < 10; ++i) y[i] = 3 * x[i] - 2;
    LearnerConfig c;
    c.kind = LearnerKind::LinearModel;
    const auto p = fit_predict_learner(c, Task::Regression, cols, y, rows, rows);
    for (std::size_t i = 0; i < 10; ++i) CHECK(p[i] == doctest::Approx(y[i]));
  }

  CHECK_THROWS_AS(fit_predict_learner({}, Task::Regression, cols, x, {}, rows), std::invalid_argument);
}

TEST_CASE("depth-1 tree matches an exhaustive stump search") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 20; ++trial) {
    Column x(40), y(40);
    const double cut = u(rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = u(rng);
      y[i] = x[i] > cut ? 1 : 0;
    }
    std::vector<std::size_t> rows(x.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});

    // Oracle: best training accuracy over every threshold and orientation.
    double best = 0;
    std::vector<double> thresholds(x.begin(), x.end());
    thresholds.push_back(-1e9);
    for (double t : thresholds) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < x.size(); ++i) hits += (x[i] > t ? 1.0 : 0.0) == y[i];
      best = std::max({best, hits / 40.0, 1.0 - hits / 40.0});
    }
    REQUIRE(best == 1.0);

    LearnerConfig c;
    c.kind = LearnerKind::DecisionTree;
    c.max_depth = 1;
    c.min_samples_leaf = 1;
    const Column* cols[] = {&x};
    const auto p = fit_predict_learner(c, Task::Classification, cols, y, rows, rows);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.size(); ++i) hits += p[i] == y[i];
    CHECK(hits / 40.0 == best);
  }
}

TEST_CASE("fold assignment") {
  const auto a = assign_folds(103, 5, 11);
  CHECK(a == assign_folds(103, 5, 11));
  CHECK(a != assign_folds(103, 5, 12));
  std::vector<int> sizes(5, 0);
  for (int f : a) ++sizes[static_cast<std::size_t>(f)];
  CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
  CHECK_THROWS_AS(assign_folds(3, 5, 0), std::invalid_argument);
}

TEST_CASE("CSV ingestion") {
  const std::string text =
      "a,b name,color,y\n"
      "1,2,red,0\n"
      "2,?,blue,1\n"
      "3,4,blue,1\n"
      "4,5,red,0\n"
      "5,6,green,1\n"
      "6,7,red,0\n"
      "7,8,red,1\n"
      "8,9,blue,0\n"
      "9,10,green,1\n"
      "10,11,red,0\n"
      "11,,red,0\n"
      "12,13,red,1\n";
  const auto r = parse_csv(text, {"y"});
  CHECK(r.dropped_rows == 2);
  CHECK(r.dataset.rows() == 10);
  CHECK(r.dataset.task == Task::Classification);
  CHECK(r.encoded_columns == std::vector<std::string>{"color"});
  CHECK(r.dataset.columns[2][0] == 2.0);  // blue=0, green=1, red=2
  CHECK(r.dataset.names[1] == "b name");

  try {
    parse_csv(text, {"outcome"});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("outcome") != std::string::npos);
  }

  std::string constant = "a,y\n";
  for (int i = 0; i < 12; ++i) constant += std::to_string(i) + ".5,4.25\n";
  CHECK_THROWS_AS(parse_csv(constant, {"y", TaskHint::Regression}), ConstantTarget);

  std::string many = "a,y\n";
  for (int i = 0; i < 30; ++i) many += std::to_string(i) + "," + std::to_string(i) + "\n";
  CHECK(parse_csv(many, {"y"}).dataset.task == Task::Regression);
}

TEST_CASE("evaluate_feature caches by canonical form and spends budget once") {
  const auto data = toy();
  const FeatureSpace s(TransformationRegistry::standard(), data.names);
  EvaluatorOptions opt;
  opt.seed = 3;
  opt.budget = 3;
  Evaluator ev(data, s, opt);

  const auto first = ev.evaluate(parse_postorder(s, "x0 x1 multiply"));
  REQUIRE(first.status == EvalStatus::Evaluated);
  CHECK(ev.budget().spent() == 1);
  const auto again = ev.evaluate(parse_postorder(s, "x1 x0 multiply"));
  CHECK(again.status == EvalStatus::Cached);
  CHECK(again.record->metric == first.record->metric);
  CHECK(again.record->fold_scores == first.record->fold_scores);
  CHECK(ev.budget().spent() == 1);

  CHECK(first.record->loss == 1.0 - first.record->metric);
  CHECK(first.record->metric >= 0.0);
  CHECK(first.record->metric <= 1.0);
  CHECK(first.record->fold_scores.size() == 5);

  CHECK(ev.evaluate(parse_postorder(s, "x2 x2 subtract")).status == EvalStatus::Invalid);
  CHECK(ev.budget().spent() == 1);

  ev.evaluate(parse_postorder(s, "x0 log"));
  ev.evaluate(parse_postorder(s, "x1 log"));
  CHECK(ev.budget().spent() == 3);
  CHECK_THROWS_AS(ev.evaluate(parse_postorder(s, "x2 log")), BudgetExhausted);
  CHECK(ev.evaluate(parse_postorder(s, "x0 log")).status == EvalStatus::Cached);
  CHECK(ev.budget().spent() == 3);

  // Budget-exempt paths.
  const auto base = ev.baseline();
  ev.joint(std::vector<ParseTree>{parse_postorder(s, "x0 x1 multiply")});
  CHECK(ev.budget().spent() == 3);
  CHECK(ev.joint_evaluations() == 1);
  CHECK(first.record->metric > base.metric);
}

TEST_CASE("batch evaluation does not depend on the worker count") {
  const auto data = toy();
  const FeatureSpace s(TransformationRegistry::standard(), data.names);
  std::vector<ParseTree> trees;
  Rng rng(17);
  for (int i = 0; i < 24; ++i) trees.push_back(sample_random_tree(s, 3, rng));
  trees.push_back(trees[3]);

  auto run = [&](int workers) {
    EvaluatorOptions opt;
    opt.budget = 15;
    Evaluator ev(data, s, opt);
    auto out = ev.evaluate_batch(trees, workers);
    CHECK(ev.budget().spent() <= 15);
    return out;
  };
  const auto a = run(1);
  const auto b = run(4);
  REQUIRE(a.size() == b.size());
  std::size_t evaluated = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].status == b[i].status);
    CHECK(a[i].record.has_value() == b[i].record.has_value());
    if (a[i].record) CHECK(a[i].record->metric == b[i].record->metric);
    evaluated += a[i].status == EvalStatus::Evaluated;
  }
  CHECK(evaluated <= 15);
  CHECK(a.back().status != EvalStatus::Evaluated);
}

TEST_CASE("concurrent evaluate never overspends") {
  const auto data = toy();
  const FeatureSpace s(TransformationRegistry::standard(), data.names);
  EvaluatorOptions opt;
  opt.budget = 10;
  opt.learner.trees = 4;
  Evaluator ev(data, s, opt);
  std::vector<ParseTree> trees;
  Rng rng(23);
  for (int i = 0; i < 30; ++i) trees.push_back(sample_random_tree(s, 2, rng));

  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < trees.size() + 8; i += 2) {
        try {
          ev.evaluate(trees[i % trees.size()]);
        } catch (const BudgetExhausted&) {
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  CHECK(ev.budget().spent() <= 10);
  std::set<std::string> evaluated;
  for (const auto& t : trees) {
    auto rec = ev.cached(canonical_key(s, t));
    if (rec) evaluated.insert(rec->key);
  }
  CHECK(evaluated.size() == ev.budget().spent());
}


TEST_CASE("toy dataset: every order-1 feature matches a direct CV re-implementation") {
  const auto data = toy();
  const FeatureSpace s(TransformationRegistry::standard(), data.names);
  EvaluatorOptions opt;
  opt.seed = 8;
  opt.learner.seed = 13;
  Evaluator ev(data, s, opt);
  const std::vector<std::string> unary = {"log", "sqrt", "min_max", "reciprocal"};
  const std::vector<std::string> binary = {"add", "subtract", "multiply", "divide", "modulo"};
  int checked = 0;
  for (std::size_t a = 0; a < 3; ++a) {
    for (const auto& op : unary) {
      const auto col = oracle::feature(op, data.columns[a], nullptr);
      const auto out = ev.evaluate(s.apply(op, {ParseTree::leaf(a)}));
      REQUIRE(col.has_value() == (out.status != EvalStatus::Invalid));
      if (col) CHECK(out.record->metric == oracle::cv(data, *col, opt));
      ++checked;
    }
    for (std::size_t b = 0; b < 3; ++b) {
      for (const auto& op : binary) {
        const auto col = oracle::feature(op, data.columns[a], &data.columns[b]);
        const auto out = ev.evaluate(s.apply(op, {ParseTree::leaf(a), ParseTree::leaf(b)}));
        REQUIRE(col.has_value() == (out.status != EvalStatus::Invalid));
        if (col) CHECK(out.record->metric == oracle::cv(data, *col, opt));
        ++checked;
      }
    }
  }
  CHECK(checked == 57);
}

TEST_CASE("PimaIndian raw baseline") {
  const auto r = load_csv(GRADFE_DATA_DIR "/pima_indian.csv", {"Outcome"});
  CHECK(r.dataset.task == Task::Classification);
  CHECK(r.dataset.rows() == 768);
  const FeatureSpace s(TransformationRegistry::standard(), r.dataset.names);
  EvaluatorOptions opt;
  Evaluator ev(r.dataset, s, opt);
  const auto base = ev.baseline();
  MESSAGE("Pima base micro-F1 = " << base.metric);
  CHECK(std::abs(base.metric - 0.7566) <= 0.02);
}

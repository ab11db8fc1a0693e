#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradfe/errors.hpp"
#include "gradfe/neural_optimizer.hpp"

using namespace gradfe;

namespace {

// 6 transformations + 3 raw features + 3 reserved tokens = 12.
FeatureSpace tiny_space() {
  return FeatureSpace(TransformationRegistry::from_names(
                          std::vector<std::string>{"log", "sqrt", "add", "subtract", "multiply", "divide"}),
                      {"a", "b", "c"});
}

std::vector<ScoredString> random_strings(const FeatureSpace& space, const Vocabulary& vocab, std::size_t n, int k,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ScoredString> out;
  std::set<std::string> seen;
  while (out.size() < n) {
    const auto t = sample_random_tree(space, k, rng);
    if (!seen.insert(join_tokens(to_postorder(space, t))).second) continue;
    out.push_back({vocab.encode(to_postorder(space, t)), u(rng)});
  }
  return out;
}

double relative_error(double a, double b) {
  // Near-zero gradients are compared against a floor instead of themselves.
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace

TEST_CASE("encode shapes and errors") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  REQUIRE(vocab.size() == 12);
  const FeatureOptimizer opt(vocab, {0, 8, 8}, 1);
  const auto ids = vocab.encode(split_tokens("a b add log"));
  const auto st = opt.encode(ids);
  CHECK(st.states.cols() == 4);
  CHECK(st.states.rows() == 8);
  CHECK((st.sum - st.states.rowwise().sum()).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(opt.encode(std::vector<int>{3, 99}), UnknownTokenId);
  CHECK_THROWS_AS(opt.encode(std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("predictor output and gradient") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  FeatureOptimizer opt(vocab, {0, 8, 8}, 2);
  Rng rng(4);
  std::normal_distribution<double> n(0, 3);
  for (int i = 0; i < 50; ++i) {
    Eigen::VectorXd e(8);
    for (auto& x : e) x = n(rng);
    const double p = opt.predict(e);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(opt.predict(e) == p);
  }

  // Zeroed final layer: constant output, zero gradient.
  auto params = opt.params();
  for (const auto& b : opt.blocks())
    if (b.name == "predictor.W5") params.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size())).setZero();
  opt.set_params(params);
  const auto grads = opt.gradient_wrt_hidden(vocab.encode(split_tokens("a b add")));
  CHECK(grads.size() == 3);
  for (const auto& g : grads) CHECK(g.isZero(0.0));
}

TEST_CASE("gradient of the predictor with respect to hidden states matches finite differences") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  const FeatureOptimizer opt(vocab, {0, 8, 8}, 3);
  const auto ids = vocab.encode(split_tokens("a b add c multiply log"));
  const auto st = opt.encode(ids);
  const auto grads = opt.gradient_wrt_hidden(ids);
  REQUIRE(grads.size() == ids.size());
  Rng rng(9);
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng);
    const auto j = std::uniform_int_distribution<Eigen::Index>(0, 7)(rng);
    CHECK(grads[r].size() == 8);
    // Perturbing h_r perturbs the sum by the same amount.
    Eigen::VectorXd plus = st.sum, minus = st.sum;
    plus[j] += h;
    minus[j] -= h;
    const double numeric = (opt.predict(plus) - opt.predict(minus)) / (2 * h);
    CHECK(relative_error(grads[r][j], numeric) < 1e-3);
  }
}

TEST_CASE("joint loss gradient matches finite differences for every parameter") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  FeatureOptimizer opt(vocab, {0, 8, 8}, 5);
  const auto corpus = random_strings(space, vocab, 5, 3, 77);
  std::vector<const ScoredString*> batch;
  for (const auto& s : corpus) batch.push_back(&s);

  const double w_pp = 1.7, w_rec = 0.6;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(opt.params().size());
  opt.loss_and_gradient(batch, w_pp, w_rec, &grad);

  const Eigen::VectorXd base = opt.params();
  auto objective = [&](const Eigen::VectorXd& p) {
    opt.set_params(p);
    const auto l = opt.loss_and_gradient(batch, w_pp, w_rec, nullptr);
    return w_pp * l.pp + w_rec * l.rec;
  };
  const double h = 1e-4;
  double worst = 0;
  std::string worst_block;
  for (const auto& b : opt.blocks()) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      const auto i = static_cast<Eigen::Index>(b.offset + k);
      Eigen::VectorXd p = base;
      p[i] += h;
      const double up = objective(p);
      p[i] = base[i] - h;
      const double down = objective(p);
      const double err = relative_error(grad[i], (up - down) / (2 * h));
      if (err > worst) {
        worst = err;
        worst_block = b.name;
      }
    }
  }
  opt.set_params(base);
  INFO("worst block: " << worst_block);
  CHECK(worst < 1e-3);
}

TEST_CASE("decode halts, never emits reserved tokens, attention is a distribution") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  const FeatureOptimizer opt(vocab, {0, 8, 8}, 6);
  for (const auto& s : random_strings(space, vocab, 30, 4, 12)) {
    const auto tr = opt.decode(opt.encode(s.tokens), 10);
    CHECK(tr.tokens.size() <= 10);
    CHECK(tr.attention.size() <= 10);
    for (int t : tr.tokens) CHECK(t >= Vocabulary::kReserved);
    for (const auto& a : tr.attention) {
      CHECK(a.size() == static_cast<Eigen::Index>(s.tokens.size()));
      CHECK(a.minCoeff() >= 0.0);
      CHECK(std::abs(a.sum() - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(opt.decode(opt.encode(std::vector<int>{3}), 0), std::invalid_argument);
}

TEST_CASE("warm-up lambda schedule") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  FeatureOptimizer opt(vocab, {0, 8, 16}, 7);
  const auto corpus = random_strings(space, vocab, 40, 2, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  Rng rng(1);
  auto hist = opt.train(corpus, cfg, rng);
  CHECK_FALSE(opt.warmed_up());
  cfg.epochs = 4;
  for (const auto& r : opt.train(corpus, cfg, rng)) hist.push_back(r);
  REQUIRE(hist.size() == 7);
  double rec = 0, pp = 0;
  for (int e = 0; e < 5; ++e) {
    CHECK(hist[static_cast<std::size_t>(e)].lambda == 1.0);
    CHECK(hist[static_cast<std::size_t>(e)].epoch == e + 1);
    rec += hist[static_cast<std::size_t>(e)].rec;
    pp += hist[static_cast<std::size_t>(e)].pp;
  }
  CHECK(opt.warmed_up());
  CHECK(opt.lambda() == doctest::Approx(rec / pp).epsilon(1e-12));
  CHECK(hist[5].lambda == opt.lambda());
  CHECK(hist[6].total == doctest::Approx(hist[6].lambda * hist[6].pp + hist[6].rec));
}

TEST_CASE("training rejects bad corpora and stops on non-finite losses") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  FeatureOptimizer opt(vocab, {0, 8, 8}, 8);
  Rng rng(1);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(opt.train(std::vector<ScoredString>{}, cfg, rng), std::invalid_argument);
  CHECK_THROWS_AS(opt.train(std::vector<ScoredString>{{{3}, 1.5}}, cfg, rng), std::invalid_argument);
  auto params = opt.params();
  const auto out_bias = opt.blocks().back();
  params[static_cast<Eigen::Index>(out_bias.offset + out_bias.size() - 1)] = std::numeric_limits<double>::quiet_NaN();
  opt.set_params(params);
  try {
    opt.train(std::vector<ScoredString>{{{3, 4, 5}, 0.5}}, cfg, rng);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.epoch() == 1);
  }
}

namespace {

// Trained once; doctest re-enters the test case for every subcase.
struct Overfit {
  FeatureSpace space{TransformationRegistry::standard(), {"x0", "x1", "x2"}};
  Vocabulary vocab{space};
  FeatureOptimizer opt{vocab, {}, 11};
  std::vector<ScoredString> corpus = random_strings(space, vocab, 32, 3, 21);
  std::vector<LossRecord> hist;

  Overfit() {
    TrainConfig cfg;
    cfg.epochs = 400;
    cfg.batch_size = 8;
    Rng rng(2);
    hist = opt.train(corpus, cfg, rng);
  }
};

const Overfit& overfit() {
  static const Overfit o;
  return o;
}

}  // namespace

TEST_CASE("overfits 32 strings to exact reconstruction") {
  const auto& [space, vocab, opt, corpus, hist] = overfit();
  CHECK(hist.back().total < hist.front().total);
  const auto stats = opt.reconstruction(corpus, max_tokens_for_order(space.registry(), 5));
  CHECK(stats.exact_match == 1.0);
  CHECK(stats.token_accuracy == 1.0);

  // The trained predictor fits the 32 scores closely.
  double mse = 0;
  for (const auto& s : corpus) mse += std::pow(opt.predict(opt.encode(s.tokens).sum) - s.score, 2);
  CHECK(mse / 32 < 0.01);

  SUBCASE("latent steps") {
    LatentStepConfig zero{0.0, 20};
    for (int i = 0; i < 8; ++i) {
      const auto tree = parse_postorder(space, vocab.decode(corpus[static_cast<std::size_t>(i)].tokens));
      const auto r = opt.optimize_feature(space, tree, 5, zero);
      CHECK_FALSE(r.tree.has_value());
      CHECK(r.steps == 20);
    }
    int successes = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto tree = parse_postorder(space, vocab.decode(corpus[i].tokens));
      const auto r = opt.optimize_feature(space, tree, 5, LatentStepConfig{});
      CHECK(r.steps <= 50);
      if (r.tree) {
        ++successes;
        CHECK(r.final_prediction < r.start_prediction);
        CHECK(order(*r.tree) <= 5);
        CHECK(canonical_key(space, *r.tree) != canonical_key(space, tree));
      }
    }
    MESSAGE("latent successes: " << successes << "/32");
    const auto everything = [](const std::string&) { return true; };
    for (int i = 0; i < 4; ++i) {
      const auto tree = parse_postorder(space, vocab.decode(corpus[static_cast<std::size_t>(i)].tokens));
      CHECK_FALSE(opt.optimize_feature(space, tree, 5, LatentStepConfig{}, everything).tree.has_value());
    }
  }

  SUBCASE("checkpoint round trip is bit exact") {
    const auto path = std::filesystem::temp_directory_path() / "gradfe_test_checkpoint.bin";
    opt.save(path);
    const auto loaded = FeatureOptimizer::load(path);
    CHECK(loaded == opt);
    CHECK(loaded.params() == opt.params());
    CHECK(loaded.lambda() == opt.lambda());
    std::filesystem::remove(path);
  }

  SUBCASE("loss history csv") {
    const auto path = std::filesystem::temp_directory_path() / "gradfe_test_history.csv";
    write_loss_history(path, hist);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,L_pp,L_rec,lambda,total");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 400);
    std::filesystem::remove(path);
  }
}

TEST_CASE("corpus construction") {
  const auto space = tiny_space();
  const Vocabulary vocab(space);
  const std::vector<ParseTree> trees = {parse_postorder(space, "a b add c multiply"), parse_postorder(space, "a log")};
  const std::vector<double> scores = {0.25, 0.75};
  const auto corpus = build_corpus(space, vocab, trees, scores, 4);
  CHECK(corpus.size() == 5);
  CHECK(corpus.back().score == 0.75);
  const auto norm = normalize_losses(std::vector<double>{0.2, 0.4, 0.3}, 0.2, 0.4);
  CHECK(norm[0] == 0.0);
  CHECK(norm[1] == 1.0);
  CHECK(norm[2] == doctest::Approx(0.5));
  CHECK(normalize_losses(std::vector<double>{0.2, 0.2}, 0.2, 0.2) == std::vector<double>{0.0, 0.0});
  CHECK(max_tokens_for_order(TransformationRegistry::standard(), 5) == 63);
  CHECK(max_tokens_for_order(TransformationRegistry::standard(), 0) == 1);
}

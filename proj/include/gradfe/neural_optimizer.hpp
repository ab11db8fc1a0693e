#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gradfe/feature_dsl.hpp"
#include "gradfe/rng.hpp"

namespace gradfe {

struct OptimizerShape {
  int vocab = 0;
  int embed = 32;
  int hidden = 64;
};

/// Encoder output: one hidden state per input token (columns of `states`)
/// and their sum.
struct EmbeddingState {
  Eigen::MatrixXd states;
  Eigen::VectorXd sum;
};

/// Token ids (without EOS) and a loss-oriented score in [0, 1].
struct ScoredString {
  std::vector<int> tokens;
  double score = 0;
};

struct TrainConfig {
  int epochs = 400;
  int warmup_epochs = 5;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 5.0;
  /// Equivalent post-order strings added per feature by build_corpus.
  std::size_t augmentation_limit = 4;
};

struct LatentStepConfig {
  double eta = 1.0;
  int max_steps = 50;
};

/// One row of the loss-history CSV. Losses are per-string means.
struct LossRecord {
  int epoch = 0;
  double pp = 0;
  double rec = 0;
  double lambda = 1;
  double total = 0;
};

struct DecodeTrace {
  std::vector<int> tokens;  // excludes EOS
  bool reached_eos = false;
  /// Attention weights over the encoder states, one vector per emitted step.
  std::vector<Eigen::VectorXd> attention;
};

/// A decode that did not parse. `raw` holds the emitted tokens.
struct DecodeFailure {
  std::vector<std::string> raw;
  ParseError error;
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct OptimizeResult {
  std::optional<ParseTree> tree;  // nullopt: no improvement
  int steps = 0;
  double start_prediction = 0;
  double final_prediction = 0;
};

struct ReconstructionStats {
  double exact_match = 0;
  double token_accuracy = 0;
};

class UnknownTokenId : public std::out_of_range {
 public:
  explicit UnknownTokenId(int id) : std::out_of_range("token id " + std::to_string(id) + " is not in the vocabulary") {}
};

/// Encoder, predictor and decoder over post-order token strings, stored in
/// one flat parameter vector.
///
/// encoder: embedding + one LSTM layer; e = sum of hidden states.
/// predictor: 5 linear layers H->H->H->H->H->1, ReLU between, sigmoid out.
/// decoder: one LSTM layer started from (e, 0), fed the previous token and
///          the previous attentional output (zero at the first step),
///          dot-product attention over the encoder states, then
///          tanh(Wc [d; ctx] + bc) and a vocabulary projection. PAD and SOS
///          are never emitted.
class FeatureOptimizer {
 public:
  FeatureOptimizer(Vocabulary vocab, OptimizerShape shape, std::uint64_t seed);

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const OptimizerShape& shape() const noexcept { return shape_; }
  const Eigen::VectorXd& params() const noexcept { return params_; }
  void set_params(const Eigen::VectorXd& params);
  std::vector<ParamBlock> blocks() const;

  double lambda() const noexcept { return lambda_; }
  int epochs_trained() const noexcept { return epochs_done_; }
  bool warmed_up() const noexcept { return warmup_done_ >= warmup_target_; }

  EmbeddingState encode(std::span<const int> ids) const;
  double predict(const Eigen::VectorXd& e) const;
  /// d predict / d e. Since e is the sum of the hidden states this is also
  /// the gradient with respect to every individual hidden state.
  Eigen::VectorXd predictor_gradient(const Eigen::VectorXd& e) const;
  std::vector<Eigen::VectorXd> gradient_wrt_hidden(std::span<const int> ids) const;

  /// Greedy decode from (states, sum), stopping at EOS or after max_len
  /// emitted tokens.
  DecodeTrace decode(const EmbeddingState& state, int max_len) const;
  std::variant<ParseTree, DecodeFailure> decode_tree(const FeatureSpace& space, const EmbeddingState& state,
                                                      int max_len) const;

  /// Joint objective w_pp * sum (s - p)^2 + w_rec * sum NLL over `batch`
  /// with its exact gradient (added into `grad` when non-null).
  struct BatchLoss {
    double pp = 0;
    double rec = 0;
  };
  BatchLoss loss_and_gradient(std::span<const ScoredString* const> batch, double w_pp, double w_rec,
                              Eigen::VectorXd* grad) const;

  /// Adam over length-bucketed minibatches. The first `warmup_epochs` epochs
  /// ever trained use lambda = 1; after them lambda is fixed to the ratio of
  /// summed reconstruction to summed prediction loss over those epochs.
  /// Throws NonFiniteLoss.
  std::vector<LossRecord> train(std::span<const ScoredString> corpus, const TrainConfig& config, Rng& rng);

  /// Latent descent from `tree`: step every hidden state against the
  /// predictor gradient and decode, until a parseable tree of order <=
  /// max_order appears whose canonical form differs from the input and from
  /// the decode of the unmoved state, and whose predicted loss is below the
  /// start.
  /// Decodes whose canonical key satisfies `known` are stepped past like
  /// neighborhood decodes. The search passes its evaluated keys here.
  OptimizeResult optimize_feature(const FeatureSpace& space, const ParseTree& tree, int max_order,
                                  const LatentStepConfig& config,
                                  const std::function<bool(const std::string&)>& known = {}) const;

  ReconstructionStats reconstruction(std::span<const ScoredString> strings, int max_len) const;

  void save(const std::filesystem::path& path) const;
  static FeatureOptimizer load(const std::filesystem::path& path);

  friend bool operator==(const FeatureOptimizer& a, const FeatureOptimizer& b);

 private:
  FeatureOptimizer(Vocabulary vocab, OptimizerShape shape);
  void check_ids(std::span<const int> ids) const;
  void adam_step(Eigen::VectorXd& grad, const TrainConfig& config);

  Vocabulary vocab_;
  OptimizerShape shape_;
  Eigen::VectorXd params_;
  Eigen::VectorXd adam_m_, adam_v_;
  std::uint64_t adam_t_ = 0;
  double lambda_ = 1.0;
  int warmup_target_ = 5;
  int warmup_done_ = 0;
  double warmup_rec_ = 0;
  double warmup_pp_ = 0;
  int epochs_done_ = 0;
};

/// Min-max normalized losses (all zeros when every loss is equal).
std::vector<double> normalize_losses(std::span<const double> losses, double lo, double hi);

/// One ScoredString per equivalent post-order string (up to `limit` per
/// tree) of each tree.
std::vector<ScoredString> build_corpus(const FeatureSpace& space, const Vocabulary& vocab,
                                       std::span<const ParseTree> trees, std::span<const double> scores,
                                       std::size_t limit);

/// Longest post-order string of a tree of order <= k.
int max_tokens_for_order(const TransformationRegistry& registry, int k);

void write_loss_history(const std::filesystem::path& path, std::span<const LossRecord> history);

}  // namespace gradfe

#include "gradfe/neural_optimizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gradfe/errors.hpp"

namespace gradfe {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Arr = Eigen::ArrayXXd;

enum Block {
  kEmb,
  kEncW,
  kEncU,
  kEncB,
  kP1W,
  kP1B,
  kP2W,
  kP2B,
  kP3W,
  kP3B,
  kP4W,
  kP4B,
  kP5W,
  kP5B,
  kDecW,
  kDecU,
  kDecF,
  kDecB,
  kCmbW,
  kCmbB,
  kOutW,
  kOutB,
  kBlockCount
};

constexpr std::array<const char*, kBlockCount> kBlockNames = {
    "embedding",   "encoder.W",   "encoder.U",   "encoder.b",   "predictor.W1", "predictor.b1", "predictor.W2",
    "predictor.b2", "predictor.W3", "predictor.b3", "predictor.W4", "predictor.b4", "predictor.W5", "predictor.b5",
    "decoder.W",   "decoder.U",   "decoder.F",   "decoder.b",   "combine.W",   "combine.b",   "output.W",    "output.b"};

struct Layout {
  std::array<std::size_t, kBlockCount> offset{};
  std::array<int, kBlockCount> rows{}, cols{};
  std::size_t total = 0;
};

Layout make_layout(const OptimizerShape& s) {
  const int V = s.vocab, E = s.embed, H = s.hidden;
  const std::array<std::pair<int, int>, kBlockCount> dims = {{{E, V},
                                                              {4 * H, E},
                                                              {4 * H, H},
                                                              {4 * H, 1},
                                                              {H, H},
                                                              {H, 1},
                                                              {H, H},
                                                              {H, 1},
                                                              {H, H},
                                                              {H, 1},
                                                              {H, H},
                                                              {H, 1},
                                                              {1, H},
                                                              {1, 1},
                                                              {4 * H, E},
                                                              {4 * H, H},
                                                              {4 * H, H},
                                                              {4 * H, 1},
                                                              {H, 2 * H},
                                                              {H, 1},
                                                              {V, H},
                                                              {V, 1}}};
  Layout l;
  for (int b = 0; b < kBlockCount; ++b) {
    l.offset[b] = l.total;
    l.rows[b] = dims[b].first;
    l.cols[b] = dims[b].second;
    l.total += static_cast<std::size_t>(dims[b].first) * static_cast<std::size_t>(dims[b].second);
  }
  return l;
}

class ConstParams {
 public:
  ConstParams(const double* base, const Layout& l) : base_(base), l_(l) {}
  Eigen::Map<const Mat> operator()(Block b) const { return {base_ + l_.offset[b], l_.rows[b], l_.cols[b]}; }

 private:
  const double* base_;
  const Layout& l_;
};

class MutParams {
 public:
  MutParams(double* base, const Layout& l) : base_(base), l_(l) {}
  Eigen::Map<Mat> operator()(Block b) const { return {base_ + l_.offset[b], l_.rows[b], l_.cols[b]}; }

 private:
  double* base_;
  const Layout& l_;
};

Arr sigmoid(const Arr& x) { return 1.0 / (1.0 + (-x).exp()); }

struct LstmState {
  Mat i, f, g, o, c, tc, h;
};

// One LSTM step. `z` holds the input part of the pre-activation (input
// projection plus bias); the recurrent part is added here.
void lstm_step(Mat z, const Mat& h_prev, const Mat& c_prev, const Eigen::Map<const Mat>& U, int H, LstmState& s) {
  z.noalias() += U * h_prev;
  s.i = sigmoid(z.topRows(H).array()).matrix();
  s.f = sigmoid(z.middleRows(H, H).array()).matrix();
  s.g = z.middleRows(2 * H, H).array().tanh().matrix();
  s.o = sigmoid(z.bottomRows(H).array()).matrix();
  s.c = (s.f.array() * c_prev.array() + s.i.array() * s.g.array()).matrix();
  s.tc = s.c.array().tanh().matrix();
  s.h = (s.o.array() * s.tc.array()).matrix();
}

// Backward through one step. dh, dc are the total gradients at this step's
// outputs; on return they hold the gradients for the previous step's h and c.
// Returns the pre-activation gradient.
Mat lstm_backward(const LstmState& s, const Mat& c_prev, const Eigen::Map<const Mat>& U, int H, Mat& dh, Mat& dc) {
  const auto B = s.h.cols();
  Mat dz(4 * H, B);
  dc.array() += dh.array() * s.o.array() * (1.0 - s.tc.array().square());
  dz.bottomRows(H) = (dh.array() * s.tc.array() * s.o.array() * (1.0 - s.o.array())).matrix();
  dz.topRows(H) = (dc.array() * s.g.array() * s.i.array() * (1.0 - s.i.array())).matrix();
  dz.middleRows(H, H) = (dc.array() * c_prev.array() * s.f.array() * (1.0 - s.f.array())).matrix();
  dz.middleRows(2 * H, H) = (dc.array() * s.i.array() * (1.0 - s.g.array().square())).matrix();
  dc = (dc.array() * s.f.array()).matrix();
  dh.noalias() = U.transpose() * dz;
  return dz;
}

// Column-wise softmax over the rows from EOS on; PAD and SOS get probability 0.
void masked_softmax(Mat& logits) {
  constexpr int first = Vocabulary::kEos;
  logits.topRows(first).setZero();
  auto body = logits.bottomRows(logits.rows() - first);
  for (Eigen::Index j = 0; j < body.cols(); ++j) {
    auto col = body.col(j);
    col.array() = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
}

Vec column_softmax(const Vec& x) {
  Vec y = (x.array() - x.maxCoeff()).exp().matrix();
  return y / y.sum();
}

struct PredictorTrace {
  std::array<Mat, 5> a;  // a[0] = input, a[l] = output of layer l (1..4)
  Eigen::RowVectorXd p;
};

PredictorTrace predictor_forward(const ConstParams& P, const Mat& e) {
  static constexpr std::array<Block, 4> W = {kP1W, kP2W, kP3W, kP4W};
  static constexpr std::array<Block, 4> Bb = {kP1B, kP2B, kP3B, kP4B};
  PredictorTrace t;
  t.a[0] = e;
  for (int l = 0; l < 4; ++l) {
    Mat z = P(W[l]) * t.a[l];
    z.colwise() += P(Bb[l]).col(0);
    t.a[l + 1] = z.cwiseMax(0.0);
  }
  Eigen::RowVectorXd z = P(kP5W) * t.a[4];
  z.array() += P(kP5B)(0, 0);
  t.p = sigmoid(z.array()).matrix();
  return t;
}

// Backward from dL/dp to dL/de, accumulating parameter gradients into G when
// non-null.
Mat predictor_backward(const ConstParams& P, const PredictorTrace& t, const Eigen::RowVectorXd& dp,
                       const MutParams* G) {
  static constexpr std::array<Block, 4> W = {kP1W, kP2W, kP3W, kP4W};
  static constexpr std::array<Block, 4> Bb = {kP1B, kP2B, kP3B, kP4B};
  Eigen::RowVectorXd dz = (dp.array() * t.p.array() * (1.0 - t.p.array())).matrix();
  if (G) {
    (*G)(kP5W).noalias() += dz * t.a[4].transpose();
    (*G)(kP5B)(0, 0) += dz.sum();
  }
  Mat da = P(kP5W).transpose() * dz;
  for (int l = 3; l >= 0; --l) {
    Mat dzl = (da.array() * (t.a[l + 1].array() > 0.0).cast<double>()).matrix();
    if (G) {
      (*G)(W[l]).noalias() += dzl * t.a[l].transpose();
      (*G)(Bb[l]).col(0) += dzl.rowwise().sum();
    }
    da.noalias() = P(W[l]).transpose() * dzl;
  }
  return da;
}

}  // namespace

FeatureOptimizer::FeatureOptimizer(Vocabulary vocab, OptimizerShape shape)
    : vocab_(std::move(vocab)), shape_(shape) {
  shape_.vocab = vocab_.size();
  if (shape_.embed < 1 || shape_.hidden < 1) throw std::invalid_argument("optimizer widths must be positive");
  const auto n = make_layout(shape_).total;
  params_ = Vec::Zero(static_cast<Eigen::Index>(n));
  adam_m_ = Vec::Zero(static_cast<Eigen::Index>(n));
  adam_v_ = Vec::Zero(static_cast<Eigen::Index>(n));
}

FeatureOptimizer::FeatureOptimizer(Vocabulary vocab, OptimizerShape shape, std::uint64_t seed)
    : FeatureOptimizer(std::move(vocab), shape) {
  const Layout l = make_layout(shape_);
  Rng rng = make_stream(seed, streams::kOptimizerInit);
  MutParams P(params_.data(), l);
  for (int b = 0; b < kBlockCount; ++b) {
    // Embedding ~ U(-0.1, 0.1); everything else ~ U(-1/sqrt(fan), 1/sqrt(fan)).
    const double fan = b == kEmb ? 100.0 : static_cast<double>(b == kCmbW ? 2 * shape_.hidden : shape_.hidden);
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan), 1.0 / std::sqrt(fan));
    auto m = P(static_cast<Block>(b));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
  }
  // Forget gates start open.
  P(kEncB).middleRows(shape_.hidden, shape_.hidden).array() += 1.0;
  P(kDecB).middleRows(shape_.hidden, shape_.hidden).array() += 1.0;
}

void FeatureOptimizer::set_params(const Vec& params) {
  if (params.size() != params_.size()) throw std::invalid_argument("parameter vector has the wrong size");
  params_ = params;
}

std::vector<ParamBlock> FeatureOptimizer::blocks() const {
  const Layout l = make_layout(shape_);
  std::vector<ParamBlock> out;
  for (int b = 0; b < kBlockCount; ++b) out.push_back({kBlockNames[b], l.offset[b], l.rows[b], l.cols[b]});
  return out;
}

void FeatureOptimizer::check_ids(std::span<const int> ids) const {
  if (ids.empty()) throw std::invalid_argument("cannot encode an empty token string");
  for (int id : ids)
    if (id < 0 || id >= vocab_.size()) throw UnknownTokenId(id);
}

EmbeddingState FeatureOptimizer::encode(std::span<const int> ids) const {
  check_ids(ids);
  const Layout l = make_layout(shape_);
  const ConstParams P(params_.data(), l);
  const int H = shape_.hidden;
  EmbeddingState out;
  out.states.resize(H, static_cast<Eigen::Index>(ids.size()));
  Mat h = Mat::Zero(H, 1), c = Mat::Zero(H, 1);
  LstmState s;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    Mat z = P(kEncW) * P(kEmb).col(ids[t]) + P(kEncB);
    lstm_step(std::move(z), h, c, P(kEncU), H, s);
    h = s.h;
    c = s.c;
    out.states.col(static_cast<Eigen::Index>(t)) = h.col(0);
  }
  out.sum = out.states.rowwise().sum();
  return out;
}

double FeatureOptimizer::predict(const Vec& e) const {
  if (e.size() != shape_.hidden) throw std::invalid_argument("embedding has the wrong width");
  const Layout l = make_layout(shape_);
  return predictor_forward(ConstParams(params_.data(), l), e).p(0);
}

Vec FeatureOptimizer::predictor_gradient(const Vec& e) const {
  if (e.size() != shape_.hidden) throw std::invalid_argument("embedding has the wrong width");
  const Layout l = make_layout(shape_);
  const ConstParams P(params_.data(), l);
  const auto trace = predictor_forward(P, e);
  return predictor_backward(P, trace, Eigen::RowVectorXd::Ones(1), nullptr).col(0);
}

std::vector<Vec> FeatureOptimizer::gradient_wrt_hidden(std::span<const int> ids) const {
  const auto state = encode(ids);
  return std::vector<Vec>(ids.size(), predictor_gradient(state.sum));
}

DecodeTrace FeatureOptimizer::decode(const EmbeddingState& state, int max_len) const {
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  const Layout l = make_layout(shape_);
  const ConstParams P(params_.data(), l);
  const int H = shape_.hidden;
  DecodeTrace out;
  Mat h = state.sum, c = Mat::Zero(H, 1);
  int input = Vocabulary::kSos;
  LstmState s;
  Vec cat(2 * H);
  Vec o = Vec::Zero(H);
  for (int step = 0; step < max_len; ++step) {
    Mat z = P(kDecW) * P(kEmb).col(input) + P(kDecB);
    if (step) z.noalias() += P(kDecF) * o;
    lstm_step(std::move(z), h, c, P(kDecU), H, s);
    h = s.h;
    c = s.c;
    Vec alpha = column_softmax(state.states.transpose() * h.col(0));
    cat.head(H) = h.col(0);
    cat.tail(H) = state.states * alpha;
    o = (P(kCmbW) * cat + P(kCmbB)).array().tanh().matrix();
    Vec logits = P(kOutW) * o + P(kOutB);
    Eigen::Index best = 0;
    logits.tail(logits.size() - Vocabulary::kEos).maxCoeff(&best);
    const int token = static_cast<int>(best) + Vocabulary::kEos;
    out.attention.push_back(std::move(alpha));
    if (token == Vocabulary::kEos) {
      out.reached_eos = true;
      break;
    }
    out.tokens.push_back(token);
    input = token;
  }
  return out;
}

std::variant<ParseTree, DecodeFailure> FeatureOptimizer::decode_tree(const FeatureSpace& space,
                                                                      const EmbeddingState& state,
                                                                      int max_len) const {
  const auto trace = decode(state, max_len);
  auto tokens = vocab_.decode(trace.tokens);
  try {
    return parse_postorder(space, tokens);
  } catch (const ParseError& e) {
    return DecodeFailure{std::move(tokens), e};
  }
}

FeatureOptimizer::BatchLoss FeatureOptimizer::loss_and_gradient(std::span<const ScoredString* const> batch,
                                                                double w_pp, double w_rec, Vec* grad) const {
  const Layout l = make_layout(shape_);
  const ConstParams P(params_.data(), l);
  const int H = shape_.hidden;
  const auto B = static_cast<Eigen::Index>(batch.size());
  if (B == 0) return {};
  if (grad && grad->size() != params_.size()) *grad = Vec::Zero(params_.size());

  std::vector<int> len(batch.size());
  int T = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    check_ids(batch[b]->tokens);
    len[b] = static_cast<int>(batch[b]->tokens.size());
    T = std::max(T, len[b]);
  }
  auto token_at = [&](std::size_t b, int t) { return t < len[b] ? batch[b]->tokens[static_cast<std::size_t>(t)] : 0; };

  // Token-level input projections (input weights times embedding, plus bias).
  Mat Pe = P(kEncW) * P(kEmb);
  Pe.colwise() += P(kEncB).col(0);
  Mat Pd = P(kDecW) * P(kEmb);
  Pd.colwise() += P(kDecB).col(0);

  // Encoder.
  std::vector<LstmState> enc(static_cast<std::size_t>(T));
  const Mat zeros = Mat::Zero(H, B);
  Mat e = Mat::Zero(H, B);
  for (int t = 0; t < T; ++t) {
    Mat z(4 * H, B);
    for (Eigen::Index b = 0; b < B; ++b) z.col(b) = Pe.col(token_at(static_cast<std::size_t>(b), t));
    lstm_step(std::move(z), t ? enc[t - 1].h : zeros, t ? enc[t - 1].c : zeros, P(kEncU), H, enc[t]);
    for (Eigen::Index b = 0; b < B; ++b)
      if (t < len[static_cast<std::size_t>(b)]) e.col(b) += enc[t].h.col(b);
  }

  // Predictor.
  const auto pred = predictor_forward(P, e);
  BatchLoss loss;
  Eigen::RowVectorXd dp(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double diff = pred.p(b) - batch[static_cast<std::size_t>(b)]->score;
    loss.pp += diff * diff;
    dp(b) = 2.0 * w_pp * diff;
  }

  // Decoder. Step s consumes SOS (s = 0) or token s - 1, together with the
  // previous step's attentional output.
  std::vector<Mat> enc_b(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    enc_b[b].resize(H, len[b]);
    for (int t = 0; t < len[b]; ++t) enc_b[b].col(t) = enc[t].h.col(static_cast<Eigen::Index>(b));
  }
  auto input_at = [&](std::size_t b, int s) { return s == 0 ? Vocabulary::kSos : token_at(b, s - 1); };
  auto target_at = [&](std::size_t b, int s) { return s < len[b] ? token_at(b, s) : Vocabulary::kEos; };
  const auto S = static_cast<std::size_t>(T + 1);
  std::vector<LstmState> dec(S);
  std::vector<std::vector<Vec>> alpha(S, std::vector<Vec>(batch.size()));
  std::vector<Mat> cat(S), o(S), prob(S);
  for (std::size_t s = 0; s < S; ++s) {
    const int si = static_cast<int>(s);
    Mat z(4 * H, B);
    for (Eigen::Index b = 0; b < B; ++b) z.col(b) = Pd.col(input_at(static_cast<std::size_t>(b), si));
    if (s) z.noalias() += P(kDecF) * o[s - 1];
    lstm_step(std::move(z), s ? dec[s - 1].h : e, s ? dec[s - 1].c : zeros, P(kDecU), H, dec[s]);
    cat[s].resize(2 * H, B);
    cat[s].topRows(H) = dec[s].h;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto bi = static_cast<Eigen::Index>(b);
      alpha[s][b] = column_softmax(enc_b[b].transpose() * dec[s].h.col(bi));
      cat[s].block(H, bi, H, 1) = enc_b[b] * alpha[s][b];
    }
    Mat zc = P(kCmbW) * cat[s];
    zc.colwise() += P(kCmbB).col(0);
    o[s] = zc.array().tanh().matrix();
    prob[s] = P(kOutW) * o[s];
    prob[s].colwise() += P(kOutB).col(0);
    masked_softmax(prob[s]);
    for (std::size_t b = 0; b < batch.size(); ++b)
      if (si <= len[b]) loss.rec -= std::log(prob[s](target_at(b, si), static_cast<Eigen::Index>(b)));
  }

  if (!grad) return loss;
  MutParams G(grad->data(), l);

  // Decoder BPTT, including attention and the fed-back outputs.
  std::vector<Mat> d_enc(static_cast<std::size_t>(T), Mat::Zero(H, B));
  Mat dPd = Mat::Zero(Pd.rows(), Pd.cols());
  Mat dh = Mat::Zero(H, B), dc = Mat::Zero(H, B), d_o_next = Mat::Zero(H, B);
  for (std::size_t s = S; s-- > 0;) {
    const int si = static_cast<int>(s);
    Mat dlogits = prob[s];
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto bi = static_cast<Eigen::Index>(b);
      if (si <= len[b])
        dlogits(target_at(b, si), bi) -= 1.0;
      else
        dlogits.col(bi).setZero();
    }
    dlogits *= w_rec;
    G(kOutW).noalias() += dlogits * o[s].transpose();
    G(kOutB).col(0) += dlogits.rowwise().sum();
    Mat d_o = P(kOutW).transpose() * dlogits + d_o_next;
    const Mat dzc = (d_o.array() * (1.0 - o[s].array().square())).matrix();
    G(kCmbW).noalias() += dzc * cat[s].transpose();
    G(kCmbB).col(0) += dzc.rowwise().sum();
    const Mat dcat = P(kCmbW).transpose() * dzc;
    dh += dcat.topRows(H);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto bi = static_cast<Eigen::Index>(b);
      const Vec dC = dcat.block(H, bi, H, 1);
      const Vec& a = alpha[s][b];
      const Vec dA = enc_b[b].transpose() * dC;
      const Vec dS = (a.array() * (dA.array() - a.dot(dA))).matrix();
      dh.col(bi) += enc_b[b] * dS;
      for (int t = 0; t < len[b]; ++t)
        d_enc[static_cast<std::size_t>(t)].col(bi) += a(t) * dC + dS(t) * dec[s].h.col(bi);
    }
    const Mat& h_prev = s ? dec[s - 1].h : e;
    const Mat& c_prev = s ? dec[s - 1].c : zeros;
    const Mat dz = lstm_backward(dec[s], c_prev, P(kDecU), H, dh, dc);
    G(kDecU).noalias() += dz * h_prev.transpose();
    if (s) {
      G(kDecF).noalias() += dz * o[s - 1].transpose();
      d_o_next.noalias() = P(kDecF).transpose() * dz;
    }
    for (Eigen::Index b = 0; b < B; ++b) dPd.col(input_at(static_cast<std::size_t>(b), si)) += dz.col(b);
  }
  G(kDecW).noalias() += dPd * P(kEmb).transpose();
  G(kEmb).noalias() += P(kDecW).transpose() * dPd;
  G(kDecB).col(0) += dPd.rowwise().sum();

  // Predictor, then the total gradient on e.
  const Mat de = dh + predictor_backward(P, pred, dp, &G);

  // Encoder BPTT.
  Mat dPe = Mat::Zero(Pe.rows(), Pe.cols());
  dh.setZero();
  dc.setZero();
  for (int t = T - 1; t >= 0; --t) {
    dh += d_enc[t];
    for (Eigen::Index b = 0; b < B; ++b)
      if (t < len[static_cast<std::size_t>(b)]) dh.col(b) += de.col(b);
    const Mat& h_prev = t ? enc[t - 1].h : zeros;
    const Mat& c_prev = t ? enc[t - 1].c : zeros;
    const Mat dz = lstm_backward(enc[t], c_prev, P(kEncU), H, dh, dc);
    G(kEncU).noalias() += dz * h_prev.transpose();
    for (Eigen::Index b = 0; b < B; ++b) dPe.col(token_at(static_cast<std::size_t>(b), t)) += dz.col(b);
  }
  G(kEncW).noalias() += dPe * P(kEmb).transpose();
  G(kEmb).noalias() += P(kEncW).transpose() * dPe;
  G(kEncB).col(0) += dPe.rowwise().sum();
  return loss;
}

void FeatureOptimizer::adam_step(Vec& grad, const TrainConfig& config) {
  if (config.clip_norm > 0) {
    const double norm = grad.norm();
    if (norm > config.clip_norm) grad *= config.clip_norm / norm;
  }
  ++adam_t_;
  adam_m_ = config.beta1 * adam_m_ + (1 - config.beta1) * grad;
  adam_v_ = config.beta2 * adam_v_ + (1 - config.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1 - std::pow(config.beta1, static_cast<double>(adam_t_));
  const double c2 = 1 - std::pow(config.beta2, static_cast<double>(adam_t_));
  params_.array() -=
      config.learning_rate * (adam_m_.array() / c1) / ((adam_v_.array() / c2).sqrt() + config.adam_epsilon);
}

std::vector<LossRecord> FeatureOptimizer::train(std::span<const ScoredString> corpus, const TrainConfig& config,
                                                Rng& rng) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  if (config.batch_size < 1) throw std::invalid_argument("batch size must be positive");
  for (const auto& s : corpus) {
    check_ids(s.tokens);
    if (!(s.score >= 0 && s.score <= 1)) throw std::invalid_argument("training scores must lie in [0, 1]");
  }
  if (epochs_done_ == 0) warmup_target_ = config.warmup_epochs;

  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t group = bs * 8;
  std::vector<LossRecord> history;
  std::vector<std::size_t> order(corpus.size());
  Vec grad = Vec::Zero(params_.size());
  std::vector<const ScoredString*> batch;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const bool warm = warmup_done_ < warmup_target_;
    const double lambda = warm ? 1.0 : lambda_;

    // Shuffle, sort by length inside groups of 8 batches, shuffle batches.
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t g = 0; g < order.size(); g += group) {
      const auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), g + group));
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(g), end, [&](std::size_t a, std::size_t b) {
        return corpus[a].tokens.size() < corpus[b].tokens.size();
      });
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s < order.size(); s += bs) starts.push_back(s);
    std::shuffle(starts.begin(), starts.end(), rng);

    double pp = 0, rec = 0;
    for (std::size_t s : starts) {
      batch.clear();
      for (std::size_t k = s; k < std::min(order.size(), s + bs); ++k) batch.push_back(&corpus[order[k]]);
      const double inv = 1.0 / static_cast<double>(batch.size());
      grad.setZero();
      const auto loss = loss_and_gradient(batch, lambda * inv, inv, &grad);
      if (!std::isfinite(loss.pp) || !std::isfinite(loss.rec) || !grad.allFinite())
        throw NonFiniteLoss(epochs_done_ + 1);
      pp += loss.pp;
      rec += loss.rec;
      adam_step(grad, config);
    }
    ++epochs_done_;
    const double n = static_cast<double>(corpus.size());
    history.push_back({epochs_done_, pp / n, rec / n, lambda, lambda * pp / n + rec / n});
    if (warm) {
      warmup_rec_ += rec / n;
      warmup_pp_ += pp / n;
      if (++warmup_done_ == warmup_target_) lambda_ = warmup_pp_ > 0 ? warmup_rec_ / warmup_pp_ : 1.0;
    }
  }
  return history;
}

OptimizeResult FeatureOptimizer::optimize_feature(const FeatureSpace& space, const ParseTree& tree, int max_order,
                                                  const LatentStepConfig& config,
                                                  const std::function<bool(const std::string&)>& known) const {
  if (!(config.eta >= 0)) throw std::invalid_argument("latent step size must be non-negative");
  const auto max_len = max_tokens_for_order(space.registry(), max_order);
  const auto ids = vocab_.encode(to_postorder(space, tree));
  EmbeddingState state = encode(ids);

  OptimizeResult result;
  result.start_prediction = predict(state.sum);
  result.final_prediction = result.start_prediction;

  std::vector<std::string> neighborhood = {canonical_key(space, tree)};
  if (auto anchor = decode_tree(space, state, max_len); std::holds_alternative<ParseTree>(anchor))
    neighborhood.push_back(canonical_key(space, std::get<ParseTree>(anchor)));

  const auto L = static_cast<double>(state.states.cols());
  for (int step = 1; step <= config.max_steps; ++step) {
    const Vec g = predictor_gradient(state.sum);
    state.states.colwise() -= config.eta * g;
    state.sum -= config.eta * L * g;
    result.steps = step;
    auto decoded = decode_tree(space, state, max_len);
    if (!std::holds_alternative<ParseTree>(decoded)) continue;
    const auto& candidate = std::get<ParseTree>(decoded);
    if (order(candidate) > max_order) continue;
    const auto key = canonical_key(space, candidate);
    if (std::find(neighborhood.begin(), neighborhood.end(), key) != neighborhood.end()) continue;
    if (known && known(key)) continue;
    const double p = predict(state.sum);
    if (!(p < result.start_prediction)) continue;
    result.final_prediction = p;
    result.tree = candidate;
    return result;
  }
  result.final_prediction = predict(state.sum);
  return result;
}

ReconstructionStats FeatureOptimizer::reconstruction(std::span<const ScoredString> strings, int max_len) const {
  ReconstructionStats stats;
  if (strings.empty()) return stats;
  std::size_t exact = 0, right = 0, total = 0;
  for (const auto& s : strings) {
    const auto trace = decode(encode(s.tokens), max_len);
    std::vector<int> want = s.tokens, got = trace.tokens;
    want.push_back(Vocabulary::kEos);
    if (trace.reached_eos) got.push_back(Vocabulary::kEos);
    for (std::size_t r = 0; r < want.size(); ++r) right += r < got.size() && got[r] == want[r];
    total += want.size();
    exact += got == want;
  }
  stats.exact_match = static_cast<double>(exact) / static_cast<double>(strings.size());
  stats.token_accuracy = static_cast<double>(right) / static_cast<double>(total);
  return stats;
}

bool operator==(const FeatureOptimizer& a, const FeatureOptimizer& b) {
  return a.vocab_ == b.vocab_ && a.shape_.embed == b.shape_.embed && a.shape_.hidden == b.shape_.hidden &&
         a.params_ == b.params_ && a.adam_m_ == b.adam_m_ && a.adam_v_ == b.adam_v_ && a.adam_t_ == b.adam_t_ &&
         a.lambda_ == b.lambda_ && a.warmup_target_ == b.warmup_target_ && a.warmup_done_ == b.warmup_done_ &&
         a.warmup_rec_ == b.warmup_rec_ && a.warmup_pp_ == b.warmup_pp_ && a.epochs_done_ == b.epochs_done_;
}

std::vector<double> normalize_losses(std::span<const double> losses, double lo, double hi) {
  std::vector<double> out(losses.size(), 0.0);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < losses.size(); ++i) out[i] = std::clamp((losses[i] - lo) / (hi - lo), 0.0, 1.0);
  return out;
}

std::vector<ScoredString> build_corpus(const FeatureSpace& space, const Vocabulary& vocab,
                                       std::span<const ParseTree> trees, std::span<const double> scores,
                                       std::size_t limit) {
  if (trees.size() != scores.size()) throw std::invalid_argument("trees and scores differ in length");
  std::vector<ScoredString> out;
  for (std::size_t i = 0; i < trees.size(); ++i)
    for (const auto& s : enumerate_equivalents(space, trees[i], std::max<std::size_t>(limit, 1)))
      out.push_back({vocab.encode(s), scores[i]});
  return out;
}

int max_tokens_for_order(const TransformationRegistry& registry, int k) {
  long long n = 1;
  const auto a = static_cast<long long>(registry.max_arity());
  for (int i = 0; i < k; ++i) n = 1 + a * n;
  return static_cast<int>(std::min<long long>(n, 1 << 20));
}

void write_loss_history(const std::filesystem::path& path, std::span<const LossRecord> history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "epoch,L_pp,L_rec,lambda,total\n";
  for (const auto& r : history) out << r.epoch << ',' << r.pp << ',' << r.rec << ',' << r.lambda << ',' << r.total << '\n';
}

}  // namespace gradfe

#include "gradfe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gradfe/errors.hpp"

namespace gradfe {

namespace {

void check_lengths(std::span<const double> y, std::span<const double> p) {
  if (y.size() != p.size()) throw std::invalid_argument("metric: length mismatch");
  if (y.empty()) throw std::invalid_argument("metric: empty input");
}

}  // namespace

double metric_one_minus_rae(std::span<const double> y, std::span<const double> predictions) {
  check_lengths(y, predictions);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double err = 0, base = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    err += std::abs(y[i] - predictions[i]);
    base += std::abs(y[i] - mean);
  }
  if (base == 0.0) throw ConstantTarget();
  return 1.0 - err / base;
}

double metric_f1_micro(std::span<const double> y, std::span<const double> predictions) {
  check_lengths(y, predictions);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += y[i] == predictions[i];
  // Every prediction is one label: micro precision = micro recall = accuracy.
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

double metric_f1(std::span<const double> y, std::span<const double> predictions) {
  check_lengths(y, predictions);
  auto binary = [](double v) { return v == 0.0 || v == 1.0; };
  if (!std::all_of(y.begin(), y.end(), binary) || !std::all_of(predictions.begin(), predictions.end(), binary))
    return metric_f1_micro(y, predictions);
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool truth = y[i] == 1.0, pred = predictions[i] == 1.0;
    tp += truth && pred;
    fp += !truth && pred;
    fn += truth && !pred;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace gradfe

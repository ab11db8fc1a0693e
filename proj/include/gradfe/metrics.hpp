#pragma once

#include <span>

namespace gradfe {

/// 1 - sum|y - p| / sum|y - mean(y)|. Negative for predictors worse than the
/// mean. Throws ConstantTarget when y is constant.
double metric_one_minus_rae(std::span<const double> y, std::span<const double> predictions);

/// Labels within {0, 1}: F1 of class 1 (0 when precision + recall is 0).
/// Otherwise the micro-averaged F1.
double metric_f1(std::span<const double> y, std::span<const double> predictions);

/// Micro-averaged F1. For single-label predictions this equals accuracy.
double metric_f1_micro(std::span<const double> y, std::span<const double> predictions);

enum class ClassificationMetric { MicroF1, F1 };

}  // namespace gradfe

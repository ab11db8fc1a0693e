#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gradfe {

using Rng = std::mt19937_64;

/// Seed of the named sub-stream `stream` of the run seed `seed`. Every random
/// decision in a run goes through one of these streams so that components can
/// be reseeded independently.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

inline Rng make_stream(std::uint64_t seed, std::string_view stream) {
  return Rng(derive_seed(seed, stream));
}

// Stream names used by the search.
namespace streams {
inline constexpr std::string_view kSampling = "sampling";
inline constexpr std::string_view kLearner = "learner";
inline constexpr std::string_view kOptimizerInit = "optimizer-init";
inline constexpr std::string_view kOptimizerTrain = "optimizer-train";
inline constexpr std::string_view kFolds = "folds";
}  // namespace streams

}  // namespace gradfe

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gradfe {

/// Bad user configuration: unknown column, invalid flag value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The dataset could not be ingested or is unusable.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConstantTarget : public DataError {
 public:
  ConstantTarget() : DataError("target is constant; relative absolute error is undefined") {}
};

class LeafIndexOutOfRange : public std::out_of_range {
 public:
  explicit LeafIndexOutOfRange(std::size_t index)
      : std::out_of_range("leaf index " + std::to_string(index) + " is out of range") {}
};

class BudgetExhausted : public std::runtime_error {
 public:
  explicit BudgetExhausted(std::size_t cap)
      : std::runtime_error("evaluation budget of " + std::to_string(cap) + " is exhausted") {}
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(int epoch)
      : std::runtime_error("non-finite training loss in epoch " + std::to_string(epoch)), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace gradfe

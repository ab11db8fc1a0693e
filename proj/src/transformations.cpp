#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "gradfe/feature_dsl.hpp"

namespace gradfe {

namespace {

template <class F>
Kernel unary(F f) {
  return [f](std::span<const Column* const> in) {
    const Column& u = *in[0];
    Column out(u.size());
    std::transform(u.begin(), u.end(), out.begin(), f);
    return out;
  };
}

template <class F>
Kernel binary(F f) {
  return [f](std::span<const Column* const> in) {
    const Column& u = *in[0];
    const Column& v = *in[1];
    Column out(u.size());
    std::transform(u.begin(), u.end(), v.begin(), out.begin(), f);
    return out;
  };
}

double guard_divisor(double v) {
  if (v == 0.0) return kGuardEpsilon;
  if (std::abs(v) < kGuardEpsilon) return std::copysign(kGuardEpsilon, v);
  return v;
}

Column min_max(std::span<const Column* const> in) {
  const Column& u = *in[0];
  Column out(u.size(), 0.0);
  if (u.empty()) return out;
  auto [lo, hi] = std::minmax_element(u.begin(), u.end());
  const double low = *lo;
  const double range = *hi - low;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = (u[i] - low) / range;
  return out;
}

}  // namespace

const std::vector<std::string>& builtin_transformation_names() {
  static const std::vector<std::string> names = {
      "log", "sqrt", "min_max", "reciprocal", "add", "subtract", "multiply", "divide", "modulo",
      "square"};
  return names;
}

Transformation builtin_transformation(std::string_view name) {
  if (name == "log")
    return {"log", 1, false, "", unary([](double u) { return std::log(std::abs(u) + 1.0); })};
  if (name == "sqrt")
    return {"sqrt", 1, false, "", unary([](double u) { return std::sqrt(std::abs(u)); })};
  if (name == "min_max") return {"min_max", 1, false, "", min_max};
  if (name == "reciprocal")
    return {"reciprocal", 1, false, "", unary([](double u) {
              if (u == 0.0) return 0.0;
              if (std::abs(u) < kGuardEpsilon) return std::copysign(1.0 / kGuardEpsilon, u);
              return 1.0 / u;
            })};
  if (name == "square") return {"square", 1, false, "", unary([](double u) { return u * u; })};
  if (name == "add") return {"add", 2, true, "+", binary([](double u, double v) { return u + v; })};
  if (name == "subtract")
    return {"subtract", 2, false, "-", binary([](double u, double v) { return u - v; })};
  if (name == "multiply")
    return {"multiply", 2, true, "*", binary([](double u, double v) { return u * v; })};
  if (name == "divide")
    return {"divide", 2, false, "/",
            binary([](double u, double v) { return u / guard_divisor(v); })};
  if (name == "modulo")
    return {"modulo", 2, false, "%",
            binary([](double u, double v) { return std::fmod(u, guard_divisor(v)); })};
  throw std::invalid_argument("unknown transformation '" + std::string(name) + "'");
}

TransformationRegistry TransformationRegistry::standard() {
  const auto& all = builtin_transformation_names();
  return from_names(std::span(all.data(), 9));
}

TransformationRegistry TransformationRegistry::from_names(std::span<const std::string> names) {
  TransformationRegistry registry;
  for (const auto& n : names) registry.add(builtin_transformation(n));
  return registry;
}

std::size_t TransformationRegistry::add(Transformation t) {
  if (t.name.empty()) throw std::invalid_argument("transformation name must not be empty");
  if (t.arity < 1) throw std::invalid_argument("transformation '" + t.name + "' has arity < 1");
  if (find(t.name)) throw std::invalid_argument("duplicate transformation '" + t.name + "'");
  if (!t.apply) throw std::invalid_argument("transformation '" + t.name + "' has no kernel");
  items_.push_back(std::move(t));
  return items_.size() - 1;
}

std::optional<std::size_t> TransformationRegistry::find(std::string_view name) const {
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].name == name) return i;
  return std::nullopt;
}

int TransformationRegistry::max_arity() const noexcept {
  int m = 0;
  for (const auto& t : items_) m = std::max(m, t.arity);
  return m;
}

std::vector<std::string> TransformationRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& t : items_) out.push_back(t.name);
  return out;
}

}  // namespace gradfe

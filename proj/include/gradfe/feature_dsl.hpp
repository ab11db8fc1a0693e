#pragma once

// Composed-feature expressions: transformations, parse trees, and their
// post-order token strings.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gradfe/rng.hpp"

namespace gradfe {

using Column = std::vector<double>;
using TraversalString = std::vector<std::string>;

/// Total function from `arity` equal-length columns to one column.
using Kernel = std::function<Column(std::span<const Column* const>)>;

struct Transformation {
  std::string name;
  int arity = 1;
  bool commutative = false;
  /// Binary operator symbol used by the infix printer; empty prints `name(...)`.
  std::string infix_symbol;
  Kernel apply;
};

/// Divisor and reciprocal guard used by the built-in kernels.
inline constexpr double kGuardEpsilon = 1e-6;

/// Built-in transformation by token name. Knows the nine default tokens plus
/// `square`. Throws std::invalid_argument for anything else.
Transformation builtin_transformation(std::string_view name);
const std::vector<std::string>& builtin_transformation_names();

class TransformationRegistry {
 public:
  TransformationRegistry() = default;

  /// log, sqrt, min_max, reciprocal, add, subtract, multiply, divide, modulo.
  static TransformationRegistry standard();
  static TransformationRegistry from_names(std::span<const std::string> names);

  /// Appends `t` and returns its index. Throws on duplicate names, empty names
  /// or non-positive arity.
  std::size_t add(Transformation t);

  std::size_t size() const noexcept { return items_.size(); }
  const Transformation& operator[](std::size_t i) const { return items_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;
  int max_arity() const noexcept;
  std::vector<std::string> names() const;

 private:
  std::vector<Transformation> items_;
};

/// A feature as a tree of transformations over raw-feature leaves. Leaves hold
/// a 0-based raw feature index, inner nodes an index into the registry.
class ParseTree {
 public:
  static ParseTree leaf(std::size_t feature);
  static ParseTree apply(std::size_t transformation, std::vector<ParseTree> children);

  bool is_leaf() const noexcept { return leaf_; }
  std::size_t index() const noexcept { return index_; }
  const std::vector<ParseTree>& children() const noexcept { return children_; }

  friend bool operator==(const ParseTree&, const ParseTree&) = default;

 private:
  bool leaf_ = true;
  std::size_t index_ = 0;
  std::vector<ParseTree> children_;
};

/// Maps arbitrary column names to identifier tokens: non-alphanumerics become
/// `_`, a leading digit gets an `f_` prefix, and collisions with each other or
/// with `reserved` get a numeric suffix.
std::vector<std::string> sanitize_feature_names(std::span<const std::string> names,
                                                std::span<const std::string> reserved = {});

/// The transformation registry together with the raw feature names of one
/// dataset. Every token-level operation needs both.
class FeatureSpace {
 public:
  FeatureSpace(TransformationRegistry registry, std::vector<std::string> raw_names);

  const TransformationRegistry& registry() const noexcept { return registry_; }
  const std::vector<std::string>& raw_names() const noexcept { return raw_names_; }
  std::size_t raw_count() const noexcept { return raw_names_.size(); }

  ParseTree leaf(std::string_view raw_name) const;
  /// Checked construction: throws std::invalid_argument on an unknown name or
  /// an arity mismatch.
  ParseTree apply(std::string_view transformation, std::vector<ParseTree> children) const;

  /// Throws std::invalid_argument if any node has the wrong child count or an
  /// out-of-range index.
  void validate(const ParseTree& tree) const;

 private:
  TransformationRegistry registry_;
  std::vector<std::string> raw_names_;
  std::unordered_map<std::string, std::size_t> raw_lookup_;
};

class ParseError : public std::runtime_error {
 public:
  enum class Kind { UnknownToken, StackUnderflow, NonSingularResult };

  ParseError(Kind kind, std::size_t position, std::string token);

  Kind kind() const noexcept { return kind_; }
  std::size_t position() const noexcept { return position_; }
  const std::string& token() const noexcept { return token_; }

 private:
  Kind kind_;
  std::size_t position_;
  std::string token_;
};

const char* to_string(ParseError::Kind kind);

/// 0 for a raw feature, otherwise 1 + the largest child order.
int order(const ParseTree& tree);
std::size_t node_count(const ParseTree& tree);

TraversalString to_postorder(const FeatureSpace& space, const ParseTree& tree);
ParseTree parse_postorder(const FeatureSpace& space, std::span<const std::string> tokens);
/// Whitespace-separated form of the above.
ParseTree parse_postorder(const FeatureSpace& space, std::string_view text);

/// True if the tokens are all known and reduce to exactly one value without
/// underflow.
bool is_stack_evaluable(const FeatureSpace& space, std::span<const std::string> tokens);

/// Distinct post-order strings reachable by permuting the children of
/// commutative nodes, at most `limit` of them. The first entry is always
/// to_postorder(tree); the rest follow a fixed permutation order.
std::vector<TraversalString> enumerate_equivalents(const FeatureSpace& space,
                                                   const ParseTree& tree, std::size_t limit);

/// Post-order string with the children of every commutative node sorted by
/// their own canonical strings.
TraversalString canonical_form(const FeatureSpace& space, const ParseTree& tree);
std::string canonical_key(const FeatureSpace& space, const ParseTree& tree);

std::string join_tokens(std::span<const std::string> tokens);
std::vector<std::string> split_tokens(std::string_view text);

/// Infix rendering for reports, e.g. "(weight / square(height))".
std::string to_infix(const FeatureSpace& space, const ParseTree& tree);

struct SamplerOptions {
  double leaf_probability = 0.3;
  int max_retries = 100;
};

/// Random tree of order in [1, max_order]. Each non-root expansion becomes a
/// leaf with probability `leaf_probability`; the depth budget forces leaves at
/// max_order.
ParseTree sample_random_tree(const FeatureSpace& space, int max_order, Rng& rng,
                             const SamplerOptions& options = {});

/// Like sample_random_tree, but redraws while `seen(canonical_key)` is true.
/// Returns nullopt once `options.max_retries` redraws have all been seen.
std::optional<ParseTree> sample_unseen_tree(const FeatureSpace& space, int max_order, Rng& rng,
                                            const std::function<bool(const std::string&)>& seen,
                                            const SamplerOptions& options = {});

/// Number of trees of order 1..max_order, saturating at `cap + 1`.
std::size_t count_feature_space(const FeatureSpace& space, int max_order, std::size_t cap);

/// Every tree of order 1..max_order, or nullopt if there are more than `cap`.
std::optional<std::vector<ParseTree>> enumerate_feature_space(const FeatureSpace& space,
                                                              int max_order, std::size_t cap);

/// Token <-> id mapping fed to the neural optimizer. Ids 0..2 are reserved,
/// then the transformations in registry order, then the raw features.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kReserved = 3;

  explicit Vocabulary(const FeatureSpace& space);
  /// Content tokens only; the reserved tokens are prepended.
  explicit Vocabulary(std::vector<std::string> content_tokens);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  std::optional<int> find(std::string_view token) const;
  /// Throws std::out_of_range for unknown tokens.
  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  TraversalString decode(std::span<const int> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> lookup_;
};

}  // namespace gradfe

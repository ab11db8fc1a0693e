#include "gradfe/feature_dsl.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace gradfe {

ParseTree ParseTree::leaf(std::size_t feature) {
  ParseTree t;
  t.leaf_ = true;
  t.index_ = feature;
  return t;
}

ParseTree ParseTree::apply(std::size_t transformation, std::vector<ParseTree> children) {
  ParseTree t;
  t.leaf_ = false;
  t.index_ = transformation;
  t.children_ = std::move(children);
  return t;
}

std::vector<std::string> sanitize_feature_names(std::span<const std::string> names,
                                                std::span<const std::string> reserved) {
  std::unordered_set<std::string> used(reserved.begin(), reserved.end());
  std::vector<std::string> out;
  out.reserve(names.size());
  for (const auto& raw : names) {
    std::string s;
    s.reserve(raw.size());
    for (unsigned char c : raw) s.push_back(std::isalnum(c) || c == '_' ? static_cast<char>(c) : '_');
    if (s.empty()) s = "f";
    if (std::isdigit(static_cast<unsigned char>(s.front()))) s = "f_" + s;
    std::string candidate = s;
    for (int suffix = 2; used.count(candidate); ++suffix) candidate = s + "_" + std::to_string(suffix);
    used.insert(candidate);
    out.push_back(std::move(candidate));
  }
  return out;
}

FeatureSpace::FeatureSpace(TransformationRegistry registry, std::vector<std::string> raw_names)
    : registry_(std::move(registry)) {
  if (raw_names.empty()) throw std::invalid_argument("a feature space needs at least one raw feature");
  const auto reserved = registry_.names();
  raw_names_ = sanitize_feature_names(raw_names, reserved);
  for (std::size_t i = 0; i < raw_names_.size(); ++i) raw_lookup_.emplace(raw_names_[i], i);
}

ParseTree FeatureSpace::leaf(std::string_view raw_name) const {
  auto it = raw_lookup_.find(std::string(raw_name));
  if (it == raw_lookup_.end())
    throw std::invalid_argument("unknown raw feature '" + std::string(raw_name) + "'");
  return ParseTree::leaf(it->second);
}

ParseTree FeatureSpace::apply(std::string_view transformation, std::vector<ParseTree> children) const {
  auto idx = registry_.find(transformation);
  if (!idx) throw std::invalid_argument("unknown transformation '" + std::string(transformation) + "'");
  if (static_cast<int>(children.size()) != registry_[*idx].arity)
    throw std::invalid_argument("transformation '" + std::string(transformation) + "' expects " +
                                std::to_string(registry_[*idx].arity) + " operands");
  return ParseTree::apply(*idx, std::move(children));
}

void FeatureSpace::validate(const ParseTree& tree) const {
  if (tree.is_leaf()) {
    if (tree.index() >= raw_names_.size())
      throw std::invalid_argument("leaf index " + std::to_string(tree.index()) + " out of range");
    return;
  }
  if (tree.index() >= registry_.size())
    throw std::invalid_argument("transformation index " + std::to_string(tree.index()) + " out of range");
  if (static_cast<int>(tree.children().size()) != registry_[tree.index()].arity)
    throw std::invalid_argument("arity mismatch at '" + registry_[tree.index()].name + "'");
  for (const auto& c : tree.children()) validate(c);
}

ParseError::ParseError(Kind kind, std::size_t position, std::string token)
    : std::runtime_error(std::string(to_string(kind)) + " at position " + std::to_string(position) +
                         (token.empty() ? std::string() : " ('" + token + "')")),
      kind_(kind),
      position_(position),
      token_(std::move(token)) {}

const char* to_string(ParseError::Kind kind) {
  switch (kind) {
    case ParseError::Kind::UnknownToken: return "unknown token";
    case ParseError::Kind::StackUnderflow: return "stack underflow";
    case ParseError::Kind::NonSingularResult: return "non-singular result";
  }
  return "parse error";
}

int order(const ParseTree& tree) {
  if (tree.is_leaf()) return 0;
  int deepest = 0;
  for (const auto& c : tree.children()) deepest = std::max(deepest, order(c));
  return 1 + deepest;
}

std::size_t node_count(const ParseTree& tree) {
  std::size_t n = 1;
  for (const auto& c : tree.children()) n += node_count(c);
  return n;
}

namespace {

const std::string& token_of(const FeatureSpace& space, const ParseTree& node) {
  return node.is_leaf() ? space.raw_names().at(node.index()) : space.registry()[node.index()].name;
}

void postorder_into(const FeatureSpace& space, const ParseTree& node, TraversalString& out) {
  for (const auto& c : node.children()) postorder_into(space, c, out);
  out.push_back(token_of(space, node));
}

struct TokenInfo {
  bool leaf;
  std::size_t index;
};

std::optional<TokenInfo> lookup_token(const FeatureSpace& space, const std::string& token) {
  if (auto t = space.registry().find(token)) return TokenInfo{false, *t};
  const auto& raw = space.raw_names();
  auto it = std::find(raw.begin(), raw.end(), token);
  if (it != raw.end()) return TokenInfo{true, static_cast<std::size_t>(it - raw.begin())};
  return std::nullopt;
}

}  // namespace

TraversalString to_postorder(const FeatureSpace& space, const ParseTree& tree) {
  TraversalString out;
  postorder_into(space, tree, out);
  return out;
}

ParseTree parse_postorder(const FeatureSpace& space, std::span<const std::string> tokens) {
  std::vector<ParseTree> stack;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    auto info = lookup_token(space, tokens[pos]);
    if (!info) throw ParseError(ParseError::Kind::UnknownToken, pos, tokens[pos]);
    if (info->leaf) {
      stack.push_back(ParseTree::leaf(info->index));
      continue;
    }
    const auto arity = static_cast<std::size_t>(space.registry()[info->index].arity);
    if (stack.size() < arity) throw ParseError(ParseError::Kind::StackUnderflow, pos, tokens[pos]);
    std::vector<ParseTree> children(std::make_move_iterator(stack.end() - static_cast<std::ptrdiff_t>(arity)),
                                    std::make_move_iterator(stack.end()));
    stack.resize(stack.size() - arity);
    stack.push_back(ParseTree::apply(info->index, std::move(children)));
  }
  if (stack.size() != 1) throw ParseError(ParseError::Kind::NonSingularResult, tokens.size(), "");
  return std::move(stack.back());
}

ParseTree parse_postorder(const FeatureSpace& space, std::string_view text) {
  const auto tokens = split_tokens(text);
  return parse_postorder(space, std::span<const std::string>(tokens));
}

bool is_stack_evaluable(const FeatureSpace& space, std::span<const std::string> tokens) {
  std::size_t depth = 0;
  for (const auto& tok : tokens) {
    auto info = lookup_token(space, tok);
    if (!info) return false;
    if (info->leaf) {
      ++depth;
      continue;
    }
    const auto arity = static_cast<std::size_t>(space.registry()[info->index].arity);
    if (depth < arity) return false;
    depth = depth - arity + 1;
  }
  return depth == 1;
}

namespace {

std::vector<TraversalString> variants(const FeatureSpace& space, const ParseTree& node,
                                      std::size_t limit) {
  if (node.is_leaf()) return {TraversalString{token_of(space, node)}};

  const auto& children = node.children();
  std::vector<std::vector<TraversalString>> child_variants;
  child_variants.reserve(children.size());
  for (const auto& c : children) child_variants.push_back(variants(space, c, limit));

  std::vector<std::size_t> perm(children.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const bool commutative = space.registry()[node.index()].commutative;

  std::vector<TraversalString> out;
  std::set<TraversalString> seen;
  do {
    // Odometer over the variant lists of the permuted children.
    std::vector<std::size_t> digit(children.size(), 0);
    bool more = true;
    while (more) {
      TraversalString s;
      for (std::size_t j = 0; j < perm.size(); ++j) {
        const auto& part = child_variants[perm[j]][digit[j]];
        s.insert(s.end(), part.begin(), part.end());
      }
      s.push_back(token_of(space, node));
      if (seen.insert(s).second) {
        out.push_back(std::move(s));
        if (out.size() >= limit) return out;
      }
      more = false;
      for (std::size_t j = digit.size(); j-- > 0;) {
        if (++digit[j] < child_variants[perm[j]].size()) {
          more = true;
          break;
        }
        digit[j] = 0;
      }
    }
  } while (commutative && std::next_permutation(perm.begin(), perm.end()));
  return out;
}

}  // namespace

std::vector<TraversalString> enumerate_equivalents(const FeatureSpace& space, const ParseTree& tree,
                                                   std::size_t limit) {
  if (limit == 0) throw std::invalid_argument("enumerate_equivalents: limit must be >= 1");
  return variants(space, tree, limit);
}

TraversalString canonical_form(const FeatureSpace& space, const ParseTree& tree) {
  if (tree.is_leaf()) return {token_of(space, tree)};
  std::vector<TraversalString> parts;
  parts.reserve(tree.children().size());
  for (const auto& c : tree.children()) parts.push_back(canonical_form(space, c));
  if (space.registry()[tree.index()].commutative) {
    std::vector<std::pair<std::string, std::size_t>> keyed;
    for (std::size_t i = 0; i < parts.size(); ++i) keyed.emplace_back(join_tokens(parts[i]), i);
    std::sort(keyed.begin(), keyed.end());
    std::vector<TraversalString> sorted;
    for (const auto& [key, i] : keyed) sorted.push_back(std::move(parts[i]));
    parts = std::move(sorted);
  }
  TraversalString out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  out.push_back(token_of(space, tree));
  return out;
}

std::string canonical_key(const FeatureSpace& space, const ParseTree& tree) {
  return join_tokens(canonical_form(space, tree));
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string to_infix(const FeatureSpace& space, const ParseTree& tree) {
  if (tree.is_leaf()) return token_of(space, tree);
  const auto& t = space.registry()[tree.index()];
  std::vector<std::string> args;
  for (const auto& c : tree.children()) args.push_back(to_infix(space, c));
  if (!t.infix_symbol.empty() && args.size() == 2)
    return "(" + args[0] + " " + t.infix_symbol + " " + args[1] + ")";
  std::string out = t.name + "(";
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) out += ", ";
    out += args[i];
  }
  return out + ")";
}

namespace {

ParseTree sample_node(const FeatureSpace& space, int budget, bool root, Rng& rng,
                      const SamplerOptions& options) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (budget <= 0 || (!root && coin(rng) < options.leaf_probability)) {
    std::uniform_int_distribution<std::size_t> pick(0, space.raw_count() - 1);
    return ParseTree::leaf(pick(rng));
  }
  std::uniform_int_distribution<std::size_t> pick(0, space.registry().size() - 1);
  const std::size_t t = pick(rng);
  std::vector<ParseTree> children;
  for (int i = 0; i < space.registry()[t].arity; ++i)
    children.push_back(sample_node(space, budget - 1, false, rng, options));
  return ParseTree::apply(t, std::move(children));
}

}  // namespace

ParseTree sample_random_tree(const FeatureSpace& space, int max_order, Rng& rng,
                             const SamplerOptions& options) {
  if (max_order < 1) throw std::invalid_argument("sample_random_tree: max_order must be >= 1");
  if (space.registry().size() == 0) throw std::invalid_argument("sample_random_tree: empty registry");
  return sample_node(space, max_order, true, rng, options);
}

std::optional<ParseTree> sample_unseen_tree(const FeatureSpace& space, int max_order, Rng& rng,
                                            const std::function<bool(const std::string&)>& seen,
                                            const SamplerOptions& options) {
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    ParseTree t = sample_random_tree(space, max_order, rng, options);
    if (!seen(canonical_key(space, t))) return t;
  }
  return std::nullopt;
}

std::size_t count_feature_space(const FeatureSpace& space, int max_order, std::size_t cap) {
  const std::size_t limit = cap + 1;
  // Trees of order <= j, saturating well above `limit` so the subtraction of
  // the leaves stays meaningful.
  const std::size_t ceiling = limit + space.raw_count();
  std::size_t total = space.raw_count();
  for (int j = 1; j <= max_order; ++j) {
    std::size_t next = space.raw_count();
    for (std::size_t t = 0; t < space.registry().size(); ++t) {
      std::size_t term = 1;
      for (int a = 0; a < space.registry()[t].arity; ++a) {
        term = (total != 0 && term > ceiling / total) ? ceiling : std::min(ceiling, term * total);
      }
      next = std::min(ceiling, next + term);
    }
    total = next;
  }
  return std::min(limit, total - space.raw_count());
}

std::optional<std::vector<ParseTree>> enumerate_feature_space(const FeatureSpace& space,
                                                              int max_order, std::size_t cap) {
  if (count_feature_space(space, max_order, cap) > cap) return std::nullopt;
  std::vector<ParseTree> level;
  for (std::size_t i = 0; i < space.raw_count(); ++i) level.push_back(ParseTree::leaf(i));
  for (int j = 1; j <= max_order; ++j) {
    std::vector<ParseTree> next;
    for (std::size_t i = 0; i < space.raw_count(); ++i) next.push_back(ParseTree::leaf(i));
    for (std::size_t t = 0; t < space.registry().size(); ++t) {
      const int arity = space.registry()[t].arity;
      std::vector<std::size_t> digit(static_cast<std::size_t>(arity), 0);
      while (true) {
        std::vector<ParseTree> children;
        for (auto d : digit) children.push_back(level[d]);
        next.push_back(ParseTree::apply(t, std::move(children)));
        int k = arity - 1;
        while (k >= 0 && ++digit[static_cast<std::size_t>(k)] == level.size()) digit[static_cast<std::size_t>(k--)] = 0;
        if (k < 0) break;
      }
    }
    level = std::move(next);
  }
  level.erase(level.begin(), level.begin() + static_cast<std::ptrdiff_t>(space.raw_count()));
  return level;
}

Vocabulary::Vocabulary(const FeatureSpace& space) {
  std::vector<std::string> content = space.registry().names();
  content.insert(content.end(), space.raw_names().begin(), space.raw_names().end());
  *this = Vocabulary(std::move(content));
}

Vocabulary::Vocabulary(std::vector<std::string> content_tokens) {
  tokens_ = {"<pad>", "<sos>", "<eos>"};
  tokens_.insert(tokens_.end(), content_tokens.begin(), content_tokens.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!lookup_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = lookup_.find(std::string(token));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw std::out_of_range("token '" + std::string(token) + "' is not in the vocabulary");
  return *found;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

TraversalString Vocabulary::decode(std::span<const int> ids) const {
  TraversalString out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

}  // namespace gradfe

#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "parabart/errors.hpp"

namespace parabart {

/// Constituency tree node. A node has children, or a terminal word, or
/// neither (a bare POS tag whose word was stripped).
struct ParseTree {
  std::string tag;
  std::vector<ParseTree> children;
  std::optional<std::string> terminal;

  bool operator==(const ParseTree&) const = default;
};

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_delim(char c) { return is_space(c) || c == '(' || c == ')'; }

class PtbReader {
 public:
  explicit PtbReader(std::string_view text) : text_(text) {}

  ParseTree read_tree() {
    skip_space();
    ParseTree tree = read_node();
    skip_space();
    if (pos_ != text_.size()) fail("trailing characters after tree");
    return tree;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(what, pos_ + 1); }

  void skip_space() {
    while (pos_ < text_.size() && is_space(text_[pos_])) ++pos_;
  }

  char peek() const {
    if (pos_ >= text_.size()) fail_eof();
    return text_[pos_];
  }

  [[noreturn]] void fail_eof() const { throw ParseError("unexpected end of input", text_.size() + 1); }

  std::string read_atom() {
    std::size_t start = pos_;
    while (pos_ < text_.size() && !is_delim(text_[pos_])) ++pos_;
    return std::string(text_.substr(start, pos_ - start));
  }

  ParseTree read_node() {
    if (peek() != '(') fail("expected '('");
    ++pos_;
    skip_space();
    ParseTree node;
    node.tag = read_atom();
    if (node.tag.empty()) {
      if (pos_ >= text_.size()) fail_eof();
      fail("empty constituent tag");
    }
    skip_space();
    if (peek() == '(') {
      while (peek() == '(') {
        node.children.push_back(read_node());
        skip_space();
      }
      if (peek() != ')') fail("terminal word mixed with child constituents");
    } else if (peek() != ')') {
      node.terminal = read_atom();
      skip_space();
      if (peek() != ')') fail("expected ')' after terminal word");
    }
    ++pos_;
    return node;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline void linearize_into(const ParseTree& t, std::vector<std::string>& out) {
  out.emplace_back("(");
  out.push_back(t.tag);
  for (const auto& c : t.children) linearize_into(c, out);
  out.emplace_back(")");
}

inline void bracket_into(const ParseTree& t, bool terminals, std::string& out) {
  out += '(';
  out += t.tag;
  for (const auto& c : t.children) {
    out += ' ';
    bracket_into(c, terminals, out);
  }
  if (terminals && t.terminal) {
    out += ' ';
    out += *t.terminal;
  }
  out += ')';
}

}  // namespace detail

/// Parses PTB-style bracketing such as "(S (NP (DT This) (NN book)) (. .))".
/// Throws ParseError carrying the 1-based byte offset of the problem.
inline ParseTree parse_ptb(std::string_view text) { return detail::PtbReader(text).read_tree(); }

/// Token sequence over {"(", ")"} and tags; terminal words are dropped.
inline std::vector<std::string> linearize(const ParseTree& tree) {
  std::vector<std::string> out;
  detail::linearize_into(tree, out);
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

/// Compact bracketed form, e.g. "(S (NP (DT) (NN)) (. ))" without terminals.
inline std::string to_bracketed(const ParseTree& tree, bool with_terminals = false) {
  std::string out;
  detail::bracket_into(tree, with_terminals, out);
  return out;
}

inline ParseTree strip_terminals(ParseTree tree) {
  tree.terminal.reset();
  for (auto& c : tree.children) c = strip_terminals(std::move(c));
  return tree;
}

inline std::size_t node_count(const ParseTree& tree) {
  std::size_t n = 1;
  for (const auto& c : tree.children) n += node_count(c);
  return n;
}

/// Longest root-to-leaf path counted in nodes (a single node has depth 1).
inline std::size_t tree_depth(const ParseTree& tree) {
  std::size_t best = 0;
  for (const auto& c : tree.children) best = std::max(best, tree_depth(c));
  return best + 1;
}

/// Terminal words in left-to-right order.
inline std::vector<std::string> leaves(const ParseTree& tree) {
  std::vector<std::string> out;
  auto walk = [&](auto&& self, const ParseTree& t) -> void {
    if (t.terminal) out.push_back(*t.terminal);
    for (const auto& c : t.children) self(self, c);
  };
  walk(walk, tree);
  return out;
}

template <typename Fn>
void for_each_node(const ParseTree& tree, Fn&& fn) {
  fn(tree);
  for (const auto& c : tree.children) for_each_node(c, fn);
}

/// Global constituent tag set. Index order is the BoW vector order.
class TagSet {
 public:
  TagSet() = default;
  explicit TagSet(std::vector<std::string> tags) {
    for (auto& t : tags) add(std::move(t));
  }

  /// Sorted union of every tag in `trees`.
  static TagSet from_trees(const std::vector<ParseTree>& trees) {
    std::vector<std::string> all;
    for (const auto& t : trees) for_each_node(t, [&](const ParseTree& n) { all.push_back(n.tag); });
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return TagSet(std::move(all));
  }

  static TagSet load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open tagset file " + path);
    TagSet set;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      set.add(line);
    }
    return set;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write tagset file " + path);
    for (const auto& t : tags_) out << t << '\n';
  }

  void add(std::string tag) {
    if (tag.empty()) throw ConfigError("tagset: empty tag");
    if (index_.count(tag)) throw ConfigError("tagset: duplicate tag " + tag);
    index_.emplace(tag, tags_.size());
    tags_.push_back(std::move(tag));
  }

  bool contains(const std::string& tag) const { return index_.count(tag) != 0; }
  std::size_t index_of(const std::string& tag) const {
    auto it = index_.find(tag);
    if (it == index_.end()) throw ConfigError("tag not in tagset: " + tag);
    return it->second;
  }
  std::size_t size() const { return tags_.size(); }
  const std::vector<std::string>& tags() const { return tags_; }

 private:
  std::vector<std::string> tags_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Normalized tag counts of one tree. Every node counts: root, phrases,
/// POS leaves and punctuation.
struct TagBow {
  std::map<std::string, float> weights;
};

namespace detail {
inline std::map<std::string, std::size_t> tag_counts(const ParseTree& tree, const TagSet& tagset) {
  std::map<std::string, std::size_t> counts;
  for_each_node(tree, [&](const ParseTree& n) { ++counts[n.tag]; });
  std::string unknown;
  for (const auto& [tag, n] : counts) {
    if (!tagset.contains(tag)) unknown += (unknown.empty() ? "" : ", ") + tag;
  }
  if (!unknown.empty()) throw ConfigError("tags missing from tagset: " + unknown);
  return counts;
}
}  // namespace detail

inline TagBow tag_bow(const ParseTree& tree, const TagSet& tagset) {
  const auto counts = detail::tag_counts(tree, tagset);
  const double total = static_cast<double>(node_count(tree));
  TagBow bow;
  for (const auto& [tag, n] : counts) bow.weights[tag] = static_cast<float>(static_cast<double>(n) / total);
  return bow;
}

/// Dense BoW in tagset order.
inline std::vector<float> tag_bow_vector(const ParseTree& tree, const TagSet& tagset) {
  const auto counts = detail::tag_counts(tree, tagset);
  const double total = static_cast<double>(node_count(tree));
  std::vector<float> out(tagset.size(), 0.0f);
  for (const auto& [tag, n] : counts) out[tagset.index_of(tag)] = static_cast<float>(static_cast<double>(n) / total);
  return out;
}

/// Child tags of the first S node in pre-order; the root's child tags when
/// the tree has no S node.
inline std::vector<std::string> top_level_constituents(const ParseTree& tree) {
  const ParseTree* found = nullptr;
  auto search = [&](auto&& self, const ParseTree& t) -> void {
    if (found) return;
    if (t.tag == "S") {
      found = &t;
      return;
    }
    for (const auto& c : t.children) self(self, c);
  };
  search(search, tree);
  const ParseTree& anchor = found ? *found : tree;
  std::vector<std::string> out;
  for (const auto& c : anchor.children) out.push_back(c.tag);
  return out;
}

enum class TopLevelMatch { Sequence, Multiset };

inline bool same_top_level(const ParseTree& a, const ParseTree& b, TopLevelMatch mode = TopLevelMatch::Sequence) {
  auto ta = top_level_constituents(a);
  auto tb = top_level_constituents(b);
  if (mode == TopLevelMatch::Multiset) {
    std::sort(ta.begin(), ta.end());
    std::sort(tb.begin(), tb.end());
  }
  return ta == tb;
}

}  // namespace parabart

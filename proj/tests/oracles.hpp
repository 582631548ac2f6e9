#pragma once

// Reference implementations written independently of the library code, plus
// a driver that compares both on random instances.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "parabart/eval.hpp"
#include "parabart/syntax.hpp"

namespace parabart::check {

inline ParseTree random_tree(std::mt19937_64& rng, int depth) {
  static const std::vector<std::string> tags{"S", "NP", "VP", "PP", "DT", "NN", "VBZ", "ADJP", ".", ",", "SBAR", "ADVP"};
  ParseTree t;
  t.tag = tags[rng() % tags.size()];
  const int kids = depth <= 0 ? 0 : static_cast<int>(rng() % 4);
  for (int i = 0; i < kids; ++i) t.children.push_back(random_tree(rng, depth - 1));
  if (kids == 0 && rng() % 2) t.terminal = "w" + std::to_string(rng() % 50);
  return t;
}

/// Tag frequencies by explicit stack traversal.
inline std::map<std::string, double> tag_bow_oracle(const ParseTree& root) {
  std::map<std::string, double> counts;
  double total = 0;
  std::vector<const ParseTree*> stack{&root};
  while (!stack.empty()) {
    const ParseTree* n = stack.back();
    stack.pop_back();
    counts[n->tag] += 1;
    total += 1;
    for (const auto& c : n->children) stack.push_back(&c);
  }
  for (auto& [tag, v] : counts) v /= total;
  return counts;
}

/// Bracket/tag sequence built from an explicit open/close event stack.
inline std::vector<std::string> linearize_oracle(const ParseTree& root) {
  std::vector<std::string> out;
  std::vector<std::pair<const ParseTree*, bool>> stack{{&root, false}};
  while (!stack.empty()) {
    auto [n, closing] = stack.back();
    stack.pop_back();
    if (closing) {
      out.push_back(")");
      continue;
    }
    out.push_back("(");
    out.push_back(n->tag);
    stack.push_back({n, true});
    for (auto it = n->children.rbegin(); it != n->children.rend(); ++it) stack.push_back({&*it, false});
  }
  return out;
}

/// First S in pre-order via an explicit stack; root as fallback.
inline std::vector<std::string> top_level_oracle(const ParseTree& root) {
  const ParseTree* anchor = &root;
  std::vector<const ParseTree*> stack{&root};
  while (!stack.empty()) {
    const ParseTree* n = stack.back();
    stack.pop_back();
    if (n->tag == "S") {
      anchor = n;
      break;
    }
    for (auto it = n->children.rbegin(); it != n->children.rend(); ++it) stack.push_back(&*it);
  }
  std::vector<std::string> out;
  for (const auto& c : anchor->children) out.push_back(c.tag);
  return out;
}

/// Raw-moment form in long double.
inline long double pearson_oracle(const std::vector<float>& x, const std::vector<float>& y) {
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const long double n = static_cast<long double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

inline long double cosine_oracle(const std::vector<float>& a, const std::vector<float>& b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Sorts once and counts predicted positives by binary search for every
/// threshold on the grid; ties keep the smallest threshold.
inline ThresholdResult threshold_oracle(const std::vector<float>& scores, const std::vector<int>& labels) {
  std::vector<std::pair<double, int>> sorted;
  for (std::size_t i = 0; i < scores.size(); ++i) sorted.emplace_back(static_cast<double>(scores[i]), labels[i]);
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> positives_from(sorted.size() + 1, 0);  // labels==1 in sorted[i..]
  for (std::size_t i = sorted.size(); i-- > 0;) positives_from[i] = positives_from[i + 1] + (sorted[i].second == 1);
  const std::size_t total_pos = positives_from[0];
  ThresholdResult best{0.0, -1.0};
  for (int k = -100; k <= 100; ++k) {
    const double t = k / 100.0;
    const auto cut = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), std::pair<double, int>{t, -1}) - sorted.begin());
    const std::size_t true_pos = positives_from[cut];
    const std::size_t true_neg = cut - (total_pos - true_pos);
    const double acc = static_cast<double>(true_pos + true_neg) / static_cast<double>(sorted.size());
    if (acc > best.accuracy) best = {t, acc};
  }
  return best;
}

struct OracleReport {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  std::string first_failure;

  void fail(const std::string& what) {
    if (failures++ == 0) first_failure = what;
  }
};

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t n, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

/// Compares every checked function against its oracle on `n` random instances.
inline std::vector<OracleReport> run_oracles(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  OracleReport bow{"tag_bow"}, lin{"linearize_round_trip"}, top{"top_level_constituents"}, pr{"pearson"},
      cos{"cosine"}, thr{"threshold_accuracy"};
  for (std::size_t i = 0; i < n; ++i) {
    const ParseTree tree = random_tree(rng, 1 + static_cast<int>(rng() % 5));
    const std::string id = " (instance " + std::to_string(i) + ")";

    std::vector<ParseTree> one{tree};
    const TagSet tags = TagSet::from_trees(one);
    ++bow.instances;
    const auto expected = tag_bow_oracle(tree);
    const auto dense = tag_bow_vector(tree, tags);
    const auto sparse = tag_bow(tree, tags).weights;
    if (sparse.size() != expected.size()) bow.fail("support size" + id);
    for (const auto& [tag, w] : expected) {
      if (std::abs(dense[tags.index_of(tag)] - w) > 1e-6 || std::abs(sparse.at(tag) - w) > 1e-6) bow.fail(tag + id);
    }

    ++lin.instances;
    const auto tokens = linearize(tree);
    if (tokens != linearize_oracle(tree)) lin.fail("token mismatch" + id);
    const ParseTree back = parse_ptb(join_tokens(tokens));
    if (back != strip_terminals(tree) || linearize(back) != tokens) lin.fail("round trip" + id);

    ++top.instances;
    if (top_level_constituents(tree) != top_level_oracle(tree)) top.fail(to_bracketed(tree) + id);

    const std::size_t len = 2 + rng() % 60;
    const auto x = random_vector(rng, len, -3.0f, 3.0f);
    auto y = random_vector(rng, len, -3.0f, 3.0f);
    for (std::size_t k = 0; k < len; ++k) y[k] += static_cast<float>(rng() % 3) * x[k];
    ++pr.instances;
    if (std::abs(static_cast<long double>(pearson(x, y)) - pearson_oracle(x, y)) > 1e-6L) pr.fail("value" + id);

    ++cos.instances;
    const auto a = random_vector(rng, 1 + rng() % 64, -1.0f, 1.0f);
    const auto b = random_vector(rng, a.size(), -1.0f, 1.0f);
    if (std::abs(static_cast<long double>(cosine(a, b)) - cosine_oracle(a, b)) > 1e-6L) cos.fail("value" + id);

    ++thr.instances;
    const std::size_t m = 1 + rng() % 80;
    std::vector<float> scores(m);
    std::vector<int> labels(m);
    for (std::size_t k = 0; k < m; ++k) {
      labels[k] = static_cast<int>(rng() % 2);
      // Mix of on-grid and off-grid scores to exercise the >= boundary.
      scores[k] = rng() % 3 == 0 ? static_cast<float>(static_cast<int>(rng() % 201) - 100) / 100.0f
                                 : std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng) + 0.3f * labels[k];
    }
    const auto got = threshold_accuracy(scores, labels);
    const auto want = threshold_oracle(scores, labels);
    if (got.accuracy != want.accuracy || got.threshold != want.threshold) thr.fail("best" + id);
  }
  return {bow, lin, top, pr, cos, thr};
}

}  // namespace parabart::check

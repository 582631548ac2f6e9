#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <random>

#include "parabart/syntax.hpp"

using namespace parabart;

namespace {

const char* kExampleParse = "(S (NP (DT This) (NN book)) (VP (VBZ is) (ADJP good)) (. .))";
const char* kExampleBare = "(S (NP (DT) (NN)) (VP (VBZ) (ADJP)) (.))";

// Random tree over a small tag alphabet; leaves optionally carry words.
ParseTree random_tree(std::mt19937_64& rng, int depth, bool words) {
  static const std::vector<std::string> tags{"S", "NP", "VP", "PP", "DT", "NN", "VBZ", "ADJP", ".", ",", "SBAR"};
  ParseTree t;
  t.tag = tags[rng() % tags.size()];
  const int kids = depth <= 0 ? 0 : static_cast<int>(rng() % 4);
  for (int i = 0; i < kids; ++i) t.children.push_back(random_tree(rng, depth - 1, words));
  if (kids == 0 && words && rng() % 2) t.terminal = "w" + std::to_string(rng() % 100);
  return t;
}

std::map<std::string, double> count_oracle(const ParseTree& t) {
  std::map<std::string, double> counts;
  std::vector<const ParseTree*> stack{&t};
  double total = 0;
  while (!stack.empty()) {
    const ParseTree* n = stack.back();
    stack.pop_back();
    counts[n->tag] += 1;
    total += 1;
    for (const auto& c : n->children) stack.push_back(&c);
  }
  for (auto& [k, v] : counts) v /= total;
  return counts;
}

}  // namespace

TEST(ParsePtb, WorkedExampleStructure) {
  const auto t = parse_ptb(kExampleBare);
  EXPECT_EQ(t.tag, "S");
  ASSERT_EQ(t.children.size(), 3u);
  EXPECT_EQ(t.children[0].tag, "NP");
  EXPECT_EQ(t.children[1].tag, "VP");
  EXPECT_EQ(t.children[2].tag, ".");
}

TEST(ParsePtb, KeepsTerminals) {
  const auto t = parse_ptb(kExampleParse);
  EXPECT_EQ(t.children[0].children[0].terminal, "This");
  EXPECT_EQ(leaves(t), (std::vector<std::string>{"This", "book", "is", "good", "."}));
}

TEST(ParsePtb, MinimalTree) {
  const auto t = parse_ptb("(X)");
  EXPECT_EQ(t.tag, "X");
  EXPECT_TRUE(t.children.empty());
  EXPECT_FALSE(t.terminal);
}

TEST(ParsePtb, UnbalancedInputReportsOffsetSeven) {
  try {
    parse_ptb("(S (NP");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 7u);
  }
}

TEST(ParsePtb, MalformedInputs) {
  for (const char* bad : {"", "S", "()", "( )", "(S))", "(S) x", "(S (NP) word)", "(S a b)", "(S (NP)"}) {
    EXPECT_THROW(parse_ptb(bad), ParseError) << bad;
  }
}

TEST(ParsePtb, WhitespaceIsInsignificant) {
  EXPECT_EQ(parse_ptb("  ( S\n( NP )\t(VP) ) "), parse_ptb("(S (NP) (VP))"));
}

TEST(Linearize, WorkedExampleTokens) {
  const std::vector<std::string> expect{"(", "S", "(", "NP", "(", "DT", ")", "(", "NN", ")", ")", "(", "VP", "(",
                                        "VBZ", ")", "(", "ADJP", ")", ")", "(", ".", ")", ")"};
  EXPECT_EQ(linearize(parse_ptb(kExampleParse)), expect);
  EXPECT_EQ(to_bracketed(parse_ptb(kExampleParse)), kExampleBare);
}

TEST(Linearize, SingleNode) { EXPECT_EQ(linearize(parse_ptb("(X)")), (std::vector<std::string>{"(", "X", ")"})); }

TEST(Linearize, RoundTripOnRandomTrees) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto t = random_tree(rng, 4, true);
    const auto tokens = linearize(t);
    EXPECT_EQ(tokens.size(), 3 * node_count(t));
    const auto back = parse_ptb(join_tokens(tokens));
    EXPECT_EQ(back, strip_terminals(t));
    EXPECT_EQ(linearize(back), tokens);
    EXPECT_EQ(parse_ptb(to_bracketed(t, true)), t);
  }
}

TEST(TagBow, WorkedExampleIsUniformOverEightTags) {
  const auto t = parse_ptb(kExampleParse);
  const auto tags = TagSet::from_trees({t});
  EXPECT_EQ(tags.size(), 8u);
  const auto bow = tag_bow(t, tags);
  ASSERT_EQ(bow.weights.size(), 8u);
  for (const auto& [tag, w] : bow.weights) EXPECT_FLOAT_EQ(w, 0.125f) << tag;
  for (float w : tag_bow_vector(t, tags)) EXPECT_FLOAT_EQ(w, 0.125f);
}

TEST(TagBow, HandCounts) {
  const auto single = parse_ptb("(S)");
  EXPECT_FLOAT_EQ(tag_bow(single, TagSet({"S"})).weights.at("S"), 1.0f);
  const auto t = parse_ptb("(S (NP) (NP))");
  const auto bow = tag_bow(t, TagSet({"NP", "S"}));
  EXPECT_FLOAT_EQ(bow.weights.at("S"), 1.0f / 3);
  EXPECT_FLOAT_EQ(bow.weights.at("NP"), 2.0f / 3);
  EXPECT_EQ(tag_bow_vector(t, TagSet({"S", "NP", "VP"})), (std::vector<float>{1.0f / 3, 2.0f / 3, 0.0f}));
}

TEST(TagBow, UnknownTagErrorNamesTheTag) {
  try {
    tag_bow(parse_ptb("(S (FOO) (BAR))"), TagSet({"S"}));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("FOO"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("BAR"), std::string::npos);
  }
}

TEST(TagBow, MatchesCountingOracleOnRandomTrees) {
  std::mt19937_64 rng(77);
  std::vector<ParseTree> trees;
  for (int i = 0; i < 200; ++i) trees.push_back(random_tree(rng, 4, false));
  const auto tags = TagSet::from_trees(trees);
  for (const auto& t : trees) {
    const auto oracle = count_oracle(t);
    const auto bow = tag_bow(t, tags);
    double total = 0;
    ASSERT_EQ(bow.weights.size(), oracle.size());
    for (const auto& [tag, w] : oracle) {
      EXPECT_NEAR(bow.weights.at(tag), w, 1e-6);
      total += bow.weights.at(tag);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(TopLevel, Examples) {
  EXPECT_EQ(top_level_constituents(parse_ptb(kExampleParse)), (std::vector<std::string>{"NP", "VP", "."}));
  EXPECT_EQ(top_level_constituents(parse_ptb("(S (VP))")), (std::vector<std::string>{"VP"}));
  EXPECT_EQ(top_level_constituents(parse_ptb("(ROOT (S (NP) (VP)))")), (std::vector<std::string>{"NP", "VP"}));
  EXPECT_EQ(top_level_constituents(parse_ptb("(FRAG (NP) (PP))")), (std::vector<std::string>{"NP", "PP"}));
}

TEST(TopLevel, InvariantBelowDepthOne) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    auto t = parse_ptb("(S (NP (DT) (NN)) (VP (VBZ) (NP)) (.))");
    const auto before = top_level_constituents(t);
    for (auto& child : t.children) {
      auto replacement = random_tree(rng, 3, false);
      child.children = replacement.children;
    }
    // the S search must not find a new S inside the replaced subtrees first
    EXPECT_EQ(top_level_constituents(t), before);
  }
}

TEST(TopLevel, SequenceVersusMultiset) {
  const auto a = parse_ptb("(S (NP) (VP) (.))");
  const auto b = parse_ptb("(S (VP) (NP) (.))");
  EXPECT_FALSE(same_top_level(a, b));
  EXPECT_TRUE(same_top_level(a, b, TopLevelMatch::Multiset));
  EXPECT_TRUE(same_top_level(a, parse_ptb("(S (NP (DT)) (VP (VB)) (.))")));
}

TEST(TagSet, FileRoundTripKeepsOrder) {
  const auto path = std::filesystem::temp_directory_path() / "tagset_test.txt";
  TagSet tags({"S", "NP", "."});
  tags.save(path.string());
  const auto back = TagSet::load(path.string());
  EXPECT_EQ(back.tags(), tags.tags());
  EXPECT_EQ(back.index_of("."), 2u);
  std::filesystem::remove(path);
  EXPECT_THROW(TagSet({"S", "S"}), ConfigError);
}

TEST(Tree, DepthAndCount) {
  const auto t = parse_ptb(kExampleBare);
  EXPECT_EQ(node_count(t), 8u);
  EXPECT_EQ(tree_depth(t), 3u);
  EXPECT_EQ(tree_depth(parse_ptb("(X)")), 1u);
}

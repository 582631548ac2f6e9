#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "parabart/errors.hpp"
#include "parabart/syntax.hpp"

namespace parabart {

using TokenIds = std::vector<std::int32_t>;

/// Lowercased whitespace tokenization.
inline std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : sentence) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kBos = 2;
  static constexpr std::int32_t kEos = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::size_t kReserved = 5;

  Vocab() : tokens_{"<pad>", "<unk>", "<s>", "</s>", "<mask>"} { reindex(); }

  /// Frequency-descending, then lexicographic, over tokens seen at least
  /// min_count times.
  static Vocab build(const std::vector<std::string>& sentences, std::size_t min_count) {
    if (min_count < 1) throw ConfigError("build_vocab: min_count must be >= 1");
    if (sentences.empty()) throw ConfigError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences)
      for (auto& tok : tokenize(s)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, n] : ranked) {
      if (n >= min_count && !v.index_.count(tok)) {
        v.index_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
        v.tokens_.push_back(tok);
      }
    }
    return v;
  }

  /// Restores a vocabulary from its full token list (reserved entries first).
  static Vocab from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    if (tokens.size() < kReserved ||
        !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
      throw ConfigError("vocab: token list does not start with the reserved entries");
    }
    v.tokens_ = std::move(tokens);
    v.reindex();
    return v;
  }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  static bool is_special(std::int32_t id) { return id >= 0 && static_cast<std::size_t>(id) < kReserved; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
        throw ConfigError("vocab: duplicate token " + tokens_[i]);
      }
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct Encoded {
  TokenIds ids;
  std::vector<std::uint8_t> mask;
};

/// BOS + ids + EOS, truncated to max_len with EOS kept last. No padding.
inline TokenIds encode_ids(std::string_view sentence, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("encode: max_len must be >= 3");
  auto toks = tokenize(sentence);
  const std::size_t body = std::min(toks.size(), max_len - 2);
  TokenIds ids;
  ids.reserve(body + 2);
  ids.push_back(Vocab::kBos);
  for (std::size_t i = 0; i < body; ++i) ids.push_back(vocab.id(toks[i]));
  ids.push_back(Vocab::kEos);
  return ids;
}

/// encode_ids padded with PAD to exactly max_len; mask marks non-pad slots.
inline Encoded encode(std::string_view sentence, const Vocab& vocab, std::size_t max_len) {
  Encoded out;
  out.ids = encode_ids(sentence, vocab, max_len);
  out.mask.assign(out.ids.size(), 1);
  out.ids.resize(max_len, Vocab::kPad);
  out.mask.resize(max_len, 0);
  return out;
}

/// Inverse of encode for in-vocabulary text: stops at EOS, skips BOS/PAD.
inline std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == Vocab::kEos) break;
    if (id == Vocab::kBos || id == Vocab::kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

/// Input alphabet of the syntactic encoder: PAD, "(", ")", then the tags in
/// tagset order.
class ParseVocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kOpen = 1;
  static constexpr std::int32_t kClose = 2;
  static constexpr std::int32_t kFirstTag = 3;

  explicit ParseVocab(const TagSet& tagset) : tagset_(&tagset) {}

  std::size_t size() const { return tagset_->size() + static_cast<std::size_t>(kFirstTag); }

  std::int32_t id(const std::string& token) const {
    if (token == "(") return kOpen;
    if (token == ")") return kClose;
    if (!tagset_->contains(token)) throw ConfigError("unknown parse token: " + token);
    return kFirstTag + static_cast<std::int32_t>(tagset_->index_of(token));
  }

  /// Linearized ids; throws when longer than max_len (a truncated
  /// linearization would no longer describe a tree).
  TokenIds encode(const ParseTree& tree, std::size_t max_len) const {
    auto toks = linearize(tree);
    if (toks.size() > max_len) {
      throw ConfigError("linearized parse has " + std::to_string(toks.size()) + " tokens, limit " +
                        std::to_string(max_len));
    }
    TokenIds ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
  }

 private:
  const TagSet* tagset_;
};

struct ParaphrasePair {
  std::string sent1;
  std::string sent2;
  std::string parse1;
  std::string parse2;
  std::optional<int> template_id1;
  std::optional<int> template_id2;

  bool operator==(const ParaphrasePair&) const = default;
};

struct Diagnostic {
  std::size_t line = 0;
  std::string message;
};

struct CorpusLoad {
  std::vector<ParaphrasePair> pairs;
  std::vector<Diagnostic> skipped;
};

inline std::string to_jsonl(const ParaphrasePair& p) {
  nlohmann::ordered_json j;
  j["sent1"] = p.sent1;
  j["sent2"] = p.sent2;
  j["parse1"] = p.parse1;
  j["parse2"] = p.parse2;
  if (p.template_id1) j["template_id1"] = *p.template_id1;
  if (p.template_id2) j["template_id2"] = *p.template_id2;
  return j.dump();
}

inline ParaphrasePair pair_from_json(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  if (!j.is_object()) throw ConfigError("record is not a JSON object");
  ParaphrasePair p;
  auto field = [&](const char* key) {
    if (!j.contains(key)) throw ConfigError(std::string("missing field ") + key);
    if (!j[key].is_string()) throw ConfigError(std::string("field ") + key + " is not a string");
    std::string v = j[key].get<std::string>();
    if (v.empty()) throw ConfigError(std::string("field ") + key + " is empty");
    return v;
  };
  p.sent1 = field("sent1");
  p.sent2 = field("sent2");
  p.parse1 = field("parse1");
  p.parse2 = field("parse2");
  for (auto [key, dst] : {std::pair{"template_id1", &p.template_id1}, std::pair{"template_id2", &p.template_id2}}) {
    if (j.contains(key)) {
      if (!j[key].is_number_integer()) throw ConfigError(std::string("field ") + key + " is not an integer");
      *dst = j[key].get<int>();
    }
  }
  try {
    parse_ptb(p.parse1);
  } catch (const ParseError& e) {
    throw ConfigError(std::string("parse1: ") + e.what());
  }
  try {
    parse_ptb(p.parse2);
  } catch (const ParseError& e) {
    throw ConfigError(std::string("parse2: ") + e.what());
  }
  return p;
}

/// Reads a JSON-lines corpus. Invalid lines are skipped and reported with
/// their 1-based line number; in strict mode the first one aborts.
inline CorpusLoad load_corpus(const std::string& path, bool strict = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path);
  CorpusLoad out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.pairs.push_back(pair_from_json(line));
    } catch (const std::exception& e) {
      if (strict) throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
      out.skipped.push_back({lineno, e.what()});
    }
  }
  return out;
}

inline std::string corpus_to_string(const std::vector<ParaphrasePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += to_jsonl(p);
    out += '\n';
  }
  return out;
}

inline void save_corpus(const std::string& path, const std::vector<ParaphrasePair>& pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path);
  out << corpus_to_string(pairs);
}

inline Vocab build_vocab(const std::vector<ParaphrasePair>& pairs, std::size_t min_count) {
  std::vector<std::string> sentences;
  sentences.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    sentences.push_back(p.sent1);
    sentences.push_back(p.sent2);
  }
  return Vocab::build(sentences, min_count);
}

// ---------------------------------------------------------------------------
// Synthetic paraphrase corpus

/// One meaning: who did what to whom, and how.
struct SemanticFrame {
  std::string agent;
  std::string action;
  std::string patient;
  std::string modifier;
};

struct RenderedSentence {
  std::string text;
  std::string parse;
};

namespace synth {

inline const std::vector<std::string>& template_names() {
  static const std::vector<std::string> names{"active", "passive", "fronted", "cleft", "fronted-passive",
                                              "dislocated"};
  return names;
}

inline std::size_t max_templates() { return template_names().size(); }

inline RenderedSentence render(const SemanticFrame& f, std::size_t tmpl) {
  const auto& [a, v, p, m] = f;
  const std::string np_a = "(NP (DT the) (NN " + a + "))";
  const std::string np_p = "(NP (DT the) (NN " + p + "))";
  const std::string advp = "(ADVP (RB " + m + "))";
  const std::string by_agent = "(PP (IN by) " + np_a + ")";
  switch (tmpl) {
    case 0:
      return {"the " + a + " " + v + " the " + p + " " + m + " .",
              "(S " + np_a + " (VP (VBD " + v + ") " + np_p + " " + advp + ") (. .))"};
    case 1:
      return {"the " + p + " was " + v + " by the " + a + " " + m + " .",
              "(S " + np_p + " (VP (VBD was) (VP (VBN " + v + ") " + by_agent + " " + advp + ")) (. .))"};
    case 2:
      return {m + " , the " + a + " " + v + " the " + p + " .",
              "(S " + advp + " (, ,) " + np_a + " (VP (VBD " + v + ") " + np_p + ") (. .))"};
    case 3:
      return {"it was the " + a + " that " + v + " the " + p + " " + m + " .",
              "(S (NP (PRP it)) (VP (VBD was) (NP " + np_a + " (SBAR (WHNP (WDT that)) (S (VP (VBD " + v + ") " +
                  np_p + " " + advp + "))))) (. .))"};
    case 4:
      return {m + " , the " + p + " was " + v + " by the " + a + " .",
              "(S " + advp + " (, ,) " + np_p + " (VP (VBD was) (VP (VBN " + v + ") " + by_agent + ")) (. .))"};
    case 5:
      return {"the " + p + " , the " + a + " " + v + " it " + m + " .",
              "(S " + np_p + " (, ,) " + np_a + " (VP (VBD " + v + ") (NP (PRP it)) " + advp + ") (. .))"};
    default:
      throw ConfigError("unknown template id " + std::to_string(tmpl));
  }
}

inline std::vector<std::string> make_pool(const std::vector<std::string>& base, std::size_t n) {
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t round = i / base.size();
    out.push_back(base[i % base.size()] + (round ? std::to_string(round + 1) : ""));
  }
  return out;
}

struct WordPools {
  std::vector<std::string> agents, actions, patients, modifiers;
};

/// Four disjoint pools splitting n content words as evenly as possible.
inline WordPools make_pools(std::size_t n_content_words) {
  static const std::vector<std::string> agents{
      "cat", "dog", "farmer", "teacher", "pilot", "child", "doctor", "sailor", "baker", "poet",
      "judge", "nurse", "wolf", "horse", "king", "queen", "student", "artist", "driver", "monk",
      "tiger", "lawyer", "singer", "miner", "clerk", "guard", "hunter", "scout", "chef", "fox"};
  static const std::vector<std::string> actions{
      "chased", "painted", "cleaned", "watched", "pushed", "carried", "opened", "visited", "followed",
      "repaired", "washed", "moved", "lifted", "dropped", "kicked", "touched", "pulled", "noticed",
      "ignored", "guarded", "filled", "cooked", "signed", "checked", "locked", "burned", "buried",
      "sorted", "packed", "wrapped"};
  static const std::vector<std::string> patients{
      "ball", "car", "door", "letter", "box", "window", "table", "boat", "bottle", "fence",
      "basket", "lamp", "bridge", "wagon", "bell", "rope", "chair", "book", "map", "coin",
      "shirt", "drum", "kettle", "ladder", "barrel", "carpet", "mirror", "pillow", "bucket", "jar"};
  static const std::vector<std::string> modifiers{
      "quickly", "slowly", "yesterday", "today", "carefully", "quietly", "happily", "twice",
      "again", "early", "late", "gently", "loudly", "badly", "eagerly", "calmly", "boldly",
      "rarely", "often", "briefly", "nightly", "openly", "barely", "wisely", "warmly",
      "proudly", "sadly", "neatly", "firmly", "freely"};
  const std::size_t base = n_content_words / 4, extra = n_content_words % 4;
  WordPools pools;
  pools.agents = make_pool(agents, base + (extra > 0));
  pools.actions = make_pool(actions, base + (extra > 1));
  pools.patients = make_pool(patients, base + (extra > 2));
  pools.modifiers = make_pool(modifiers, base);
  return pools;
}

}  // namespace synth

struct SyntheticOptions {
  std::size_t n_pairs = 2000;
  std::size_t n_content_words = 120;
  std::size_t n_templates = 6;
  std::uint64_t seed = 7;
};

/// Each pair renders one random frame through two distinct templates.
inline std::vector<ParaphrasePair> gen_synthetic(const SyntheticOptions& opt) {
  if (opt.n_pairs == 0) throw ConfigError("gen_synthetic: n_pairs must be >= 1");
  if (opt.n_templates < 2 || opt.n_templates > synth::max_templates()) {
    throw ConfigError("gen_synthetic: n_templates must be in [2, " + std::to_string(synth::max_templates()) + "]");
  }
  if (opt.n_content_words < 4) throw ConfigError("gen_synthetic: n_content_words must be >= 4");
  const auto pools = synth::make_pools(opt.n_content_words);
  std::mt19937_64 rng(opt.seed);
  auto pick = [&](const std::vector<std::string>& pool) -> const std::string& {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  std::vector<ParaphrasePair> out;
  out.reserve(opt.n_pairs);
  for (std::size_t i = 0; i < opt.n_pairs; ++i) {
    SemanticFrame f{pick(pools.agents), pick(pools.actions), pick(pools.patients), pick(pools.modifiers)};
    const auto t1 = std::uniform_int_distribution<std::size_t>(0, opt.n_templates - 1)(rng);
    auto t2 = std::uniform_int_distribution<std::size_t>(0, opt.n_templates - 2)(rng);
    if (t2 >= t1) ++t2;
    auto s1 = synth::render(f, t1);
    auto s2 = synth::render(f, t2);
    out.push_back({std::move(s1.text), std::move(s2.text), std::move(s1.parse), std::move(s2.parse),
                   static_cast<int>(t1), static_cast<int>(t2)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// TSV evaluation formats

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

template <typename Row, typename ParseRow>
std::vector<Row> read_tsv(const std::string& path, std::vector<Diagnostic>& problems, ParseRow&& parse_row) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Row> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      rows.push_back(parse_row(split_tabs(line)));
    } catch (const std::exception& e) {
      problems.push_back({lineno, e.what()});
    }
  }
  return rows;
}

inline double parse_number(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("bad ") + what + ": '" + s + "'");
  }
}

struct StsRow {
  double score = 0.0;
  std::string sent1, sent2;
};

/// `score<TAB>sent1<TAB>sent2`, score in [0, 5].
inline std::vector<StsRow> read_sts_tsv(const std::string& path, std::vector<Diagnostic>& problems) {
  return read_tsv<StsRow>(path, problems, [](const std::vector<std::string>& f) {
    if (f.size() != 3) throw ConfigError("expected 3 tab-separated fields, got " + std::to_string(f.size()));
    StsRow r{parse_number(f[0], "score"), f[1], f[2]};
    if (r.score < 0.0 || r.score > 5.0) throw ConfigError("score outside [0, 5]");
    if (tokenize(r.sent1).empty() || tokenize(r.sent2).empty()) throw ConfigError("empty sentence");
    return r;
  });
}

enum class Split { Train, Valid, Test };

struct ProbeRow {
  Split split = Split::Train;
  int label = 0;
  std::string sentence;
};

/// `split<TAB>label<TAB>sentence`, split in {tr, va, te}.
inline std::vector<ProbeRow> read_probe_tsv(const std::string& path, std::vector<Diagnostic>& problems) {
  return read_tsv<ProbeRow>(path, problems, [](const std::vector<std::string>& f) {
    if (f.size() != 3) throw ConfigError("expected 3 tab-separated fields, got " + std::to_string(f.size()));
    ProbeRow r;
    if (f[0] == "tr") r.split = Split::Train;
    else if (f[0] == "va") r.split = Split::Valid;
    else if (f[0] == "te") r.split = Split::Test;
    else throw ConfigError("split must be tr, va or te, got '" + f[0] + "'");
    const double label = parse_number(f[1], "label");
    if (label != static_cast<int>(label) || label < 0) throw ConfigError("label must be a non-negative integer");
    r.label = static_cast<int>(label);
    r.sentence = f[2];
    if (tokenize(r.sentence).empty()) throw ConfigError("empty sentence");
    return r;
  });
}

inline void write_probe_tsv(const std::string& path, const std::vector<ProbeRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : rows) {
    out << (r.split == Split::Train ? "tr" : r.split == Split::Valid ? "va" : "te") << '\t' << r.label << '\t'
        << r.sentence << '\n';
  }
}

struct LabeledPair {
  int label = 0;
  std::string sent1, sent2, parse1, parse2;
  bool operator==(const LabeledPair&) const = default;
};

inline std::string to_tsv_line(const LabeledPair& p) {
  return std::to_string(p.label) + '\t' + p.sent1 + '\t' + p.sent2 + '\t' + p.parse1 + '\t' + p.parse2;
}

/// `label<TAB>sent1<TAB>sent2<TAB>parse1<TAB>parse2`, label in {0, 1}.
inline std::vector<LabeledPair> read_pair_tsv(const std::string& path, std::vector<Diagnostic>& problems) {
  return read_tsv<LabeledPair>(path, problems, [](const std::vector<std::string>& f) {
    if (f.size() != 5) throw ConfigError("expected 5 tab-separated fields, got " + std::to_string(f.size()));
    LabeledPair p;
    if (f[0] == "0") p.label = 0;
    else if (f[0] == "1") p.label = 1;
    else throw ConfigError("label must be 0 or 1, got '" + f[0] + "'");
    p.sent1 = f[1];
    p.sent2 = f[2];
    p.parse1 = f[3];
    p.parse2 = f[4];
    parse_ptb(p.parse1);
    parse_ptb(p.parse2);
    return p;
  });
}

inline std::string pairs_to_tsv(const std::vector<LabeledPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += to_tsv_line(p);
    out += '\n';
  }
  return out;
}

inline void write_pair_tsv(const std::string& path, const std::vector<LabeledPair>& pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << pairs_to_tsv(pairs);
}

/// Labeled pool for paraphrase detection: every corpus pair as a positive,
/// plus one negative per pair made from sent1 of pair i and sent2 of another
/// pair with a different semantic frame.
inline std::vector<LabeledPair> labeled_pool(const std::vector<ParaphrasePair>& pairs, std::uint64_t seed) {
  if (pairs.size() < 2) throw ConfigError("labeled_pool: need at least 2 pairs");
  std::mt19937_64 rng(seed);
  auto content = [](const std::string& s) {
    auto t = tokenize(s);
    std::sort(t.begin(), t.end());
    return t;
  };
  std::vector<LabeledPair> out;
  for (const auto& p : pairs) out.push_back({1, p.sent1, p.sent2, p.parse1, p.parse2});
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto mine = content(pairs[i].sent1);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t j = pick(rng);
      if (j == i || content(pairs[j].sent1) == mine) continue;
      out.push_back({0, pairs[i].sent1, pairs[j].sent2, pairs[i].parse1, pairs[j].parse2});
      break;
    }
  }
  return out;
}

}  // namespace parabart

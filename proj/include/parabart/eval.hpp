#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "parabart/adamw.hpp"
#include "parabart/checkpoint.hpp"
#include "parabart/data.hpp"
#include "parabart/model.hpp"
#include "parabart/ops.hpp"
#include "parabart/syntax.hpp"
#include "parabart/training.hpp"

namespace parabart {

using Embedding = std::vector<float>;

/// a.b / (|a| |b|). Throws on a zero vector.
inline float cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vector lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine: zero vector");
  return static_cast<float>(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
}

/// Sample Pearson correlation. Throws when either input is constant.
inline float pearson(std::span<const float> x, std::span<const float> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: lengths differ");
  if (x.size() < 2) throw ConfigError("pearson: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson: undefined for constant input");
  return static_cast<float>(std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0));
}

/// Mean-pooled semantic embeddings, no dropout, no graph.
inline std::vector<Embedding> embed_sentences(const ParaBart<float>& model, const Vocab& vocab,
                                              const std::vector<std::string>& sentences, std::size_t batch = 64) {
  NoGradGuard no_grad;
  std::vector<Embedding> out;
  out.reserve(sentences.size());
  const std::size_t d = model.config().d_model;
  for (std::size_t start = 0; start < sentences.size(); start += batch) {
    const std::size_t end = std::min(sentences.size(), start + batch);
    std::vector<TokenIds> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(encode_ids(sentences[i], vocab, model.config().max_sent_len));
    auto packed = PackedBatch::pack(seqs);
    auto ubar = model.pool(model.encode_semantic(packed), packed);
    for (std::size_t r = 0; r < end - start; ++r) {
      out.emplace_back(ubar.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                       ubar.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  return out;
}

struct SimilarityResult {
  std::vector<float> cosines;
  float pearson_r = 0.0f;
};

inline SimilarityResult sts_eval(const ParaBart<float>& model, const Vocab& vocab, const std::vector<StsRow>& rows) {
  std::vector<std::string> left, right;
  std::vector<float> gold;
  for (const auto& r : rows) {
    left.push_back(r.sent1);
    right.push_back(r.sent2);
    gold.push_back(static_cast<float>(r.score));
  }
  const auto a = embed_sentences(model, vocab, left);
  const auto b = embed_sentences(model, vocab, right);
  SimilarityResult res;
  for (std::size_t i = 0; i < rows.size(); ++i) res.cosines.push_back(cosine(a[i], b[i]));
  res.pearson_r = pearson(res.cosines, gold);
  return res;
}

// ---------------------------------------------------------------------------
// Probing

struct ProbeData {
  std::vector<Embedding> features;
  std::vector<int> labels;
  std::vector<Split> splits;
};

struct ProbeOptions {
  std::size_t hidden = 50;
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
};

struct ProbeResult {
  std::string task;
  float train_accuracy = 0.0f;
  float val_accuracy = 0.0f;
  float test_accuracy = 0.0f;
  std::size_t best_epoch = 0;
};

/// MLP (d -> hidden -> classes, ReLU) on frozen features. The reported
/// accuracies come from the epoch with the highest validation accuracy
/// (earliest on ties).
inline ProbeResult probe(const ProbeData& data, const ProbeOptions& opt, const std::string& task = "probe") {
  const std::size_t n = data.features.size();
  if (n == 0 || data.labels.size() != n || data.splits.size() != n) throw ConfigError("probe: inconsistent data");
  const std::size_t d = data.features.front().size();
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < n; ++i) {
    if (data.features[i].size() != d) throw ShapeError("probe: ragged features");
    if (data.labels[i] < 0) throw ConfigError("probe: negative label");
    (data.splits[i] == Split::Train ? tr : data.splits[i] == Split::Valid ? va : te).push_back(i);
  }
  if (tr.empty() || va.empty() || te.empty()) throw ConfigError("probe: tr, va and te splits are all required");
  const int max_label = *std::max_element(data.labels.begin(), data.labels.end());
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  bool two_classes = false;
  for (std::size_t i : tr) two_classes = two_classes || data.labels[i] != data.labels[tr.front()];
  if (!two_classes) throw ConfigError("probe: training split has a single class");

  std::mt19937_64 rng(opt.seed);
  auto init = [&](std::size_t in, std::size_t out) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<float> w(in * out);
    for (auto& v : w) v = static_cast<float>(dist(rng));
    return Tensor::from_data({in, out}, std::move(w), true);
  };
  Tensor w1 = init(d, opt.hidden), b1 = Tensor::zeros({opt.hidden}, true);
  Tensor w2 = init(opt.hidden, classes), b2 = Tensor::zeros({classes}, true);
  AdamW<float> adam;
  adam.add_group({w1, b1, w2, b2}, AdamWOptions{opt.lr, 0.9, 0.999, 1e-8, 0.0});

  auto features = [&](std::span<const std::size_t> idx) {
    std::vector<float> x;
    x.reserve(idx.size() * d);
    for (std::size_t i : idx) x.insert(x.end(), data.features[i].begin(), data.features[i].end());
    return Tensor::from_data({idx.size(), d}, std::move(x));
  };
  auto forward = [&](const Tensor& x) { return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2); };
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    NoGradGuard no_grad;
    auto logits = forward(features(idx));
    std::size_t hit = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = logits.data().subspan(r * classes, classes);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += pred == data.labels[idx[r]];
    }
    return static_cast<float>(hit) / static_cast<float>(idx.size());
  };

  ProbeResult best;
  best.task = task;
  best.val_accuracy = -1.0f;
  std::vector<std::size_t> order = tr;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(opt.batch_size, order.size() - start));
      TokenIds y;
      for (std::size_t i : idx) y.push_back(data.labels[i]);
      adam.zero_grad();
      auto loss = cross_entropy_mean(forward(features(idx)), y);
      loss.backward();
      adam.step();
    }
    const float val = accuracy(va);
    if (val > best.val_accuracy) {
      best.val_accuracy = val;
      best.train_accuracy = accuracy(tr);
      best.test_accuracy = accuracy(te);
      best.best_epoch = epoch;
    }
  }
  return best;
}

/// With probability 1/2 swaps one random adjacent token pair (label 1),
/// otherwise leaves the sentence intact (label 0). Sentences with fewer
/// than two distinct adjacent tokens always get label 0.
inline std::vector<std::pair<std::string, int>> bshift_labels(const std::vector<std::string>& sentences,
                                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::string, int>> out;
  for (const auto& s : sentences) {
    auto toks = tokenize(s);
    std::vector<std::size_t> swappable;
    for (std::size_t i = 0; i + 1 < toks.size(); ++i)
      if (toks[i] != toks[i + 1]) swappable.push_back(i);
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    int label = 0;
    if (flip && !swappable.empty()) {
      const auto k = swappable[std::uniform_int_distribution<std::size_t>(0, swappable.size() - 1)(rng)];
      std::swap(toks[k], toks[k + 1]);
      label = 1;
    }
    std::string joined;
    for (std::size_t i = 0; i < toks.size(); ++i) joined += (i ? " " : "") + toks[i];
    out.emplace_back(std::move(joined), label);
  }
  return out;
}

/// Tree depth (nodes on the longest root-to-leaf path) as the class label.
inline std::vector<int> treedepth_labels(const std::vector<ParseTree>& trees) {
  std::vector<int> out;
  for (const auto& t : trees) out.push_back(static_cast<int>(tree_depth(t)));
  return out;
}

/// Class id of each tree's top-level constituent sequence among the k most
/// frequent sequences (frequency descending, then lexicographic); all other
/// sequences share class k.
inline std::vector<int> topconst_labels(const std::vector<ParseTree>& trees, std::size_t k = 19) {
  std::vector<std::string> keys;
  std::map<std::string, std::size_t> counts;
  for (const auto& t : trees) {
    keys.push_back(join_tokens(top_level_constituents(t)));
    ++counts[keys.back()];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::map<std::string, int> id;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) id[ranked[i].first] = static_cast<int>(i);
  std::vector<int> out;
  for (const auto& key : keys) {
    auto it = id.find(key);
    out.push_back(it == id.end() ? static_cast<int>(k) : it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Paraphrase detection with a similarity threshold

struct ThresholdResult {
  double threshold = -1.0;
  double accuracy = 0.0;
};

/// Scans t = -1.00, -0.99, ..., 1.00, predicting a paraphrase iff
/// score >= t. Returns the best accuracy and the smallest t reaching it.
inline ThresholdResult threshold_accuracy(std::span<const float> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) throw ConfigError("threshold_accuracy: need equal, non-empty inputs");
  ThresholdResult best{-1.0, -1.0};
  for (int step = -100; step <= 100; ++step) {
    const double t = step / 100.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const int pred = static_cast<double>(scores[i]) >= t ? 1 : 0;
      correct += pred == labels[i];
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(scores.size());
    if (acc > best.accuracy) best = {t, acc};
  }
  return best;
}

struct EasyHardSplit {
  std::vector<LabeledPair> easy;
  std::vector<LabeledPair> hard;
  std::size_t easy_pool = 0;
  std::size_t hard_pool = 0;
  std::size_t negative_pool = 0;
};

/// Positives sharing their top-level constituents go to the easy pool, the
/// rest to the hard pool. Samples n positives from each pool and n
/// negatives; both outputs carry the same negatives in the same order.
inline EasyHardSplit split_easy_hard(const std::vector<LabeledPair>& pairs, std::size_t n_per_class, std::uint64_t seed,
                                     TopLevelMatch match = TopLevelMatch::Sequence) {
  std::vector<std::size_t> easy, hard, neg;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].label == 0) {
      neg.push_back(i);
      continue;
    }
    const bool same = same_top_level(parse_ptb(pairs[i].parse1), parse_ptb(pairs[i].parse2), match);
    (same ? easy : hard).push_back(i);
  }
  EasyHardSplit out;
  out.easy_pool = easy.size();
  out.hard_pool = hard.size();
  out.negative_pool = neg.size();
  if (easy.size() < n_per_class || hard.size() < n_per_class || neg.size() < n_per_class) {
    throw ConfigError("split_easy_hard: need " + std::to_string(n_per_class) + " per class; available easy=" +
                      std::to_string(easy.size()) + " hard=" + std::to_string(hard.size()) +
                      " negatives=" + std::to_string(neg.size()));
  }
  std::mt19937_64 rng(seed);
  auto sample = [&](std::vector<std::size_t> pool) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(n_per_class);
    std::sort(pool.begin(), pool.end());
    return pool;
  };
  const auto easy_idx = sample(easy);
  const auto hard_idx = sample(hard);
  const auto neg_idx = sample(neg);
  for (auto i : easy_idx) out.easy.push_back(pairs[i]);
  for (auto i : hard_idx) out.hard.push_back(pairs[i]);
  for (auto i : neg_idx) {
    out.easy.push_back(pairs[i]);
    out.hard.push_back(pairs[i]);
  }
  return out;
}

/// Cosine scores for each pair followed by the threshold search.
inline ThresholdResult pair_eval(const ParaBart<float>& model, const Vocab& vocab, const std::vector<LabeledPair>& pairs,
                                 std::vector<float>* scores_out = nullptr) {
  std::vector<std::string> left, right;
  std::vector<int> labels;
  for (const auto& p : pairs) {
    left.push_back(p.sent1);
    right.push_back(p.sent2);
    labels.push_back(p.label);
  }
  const auto a = embed_sentences(model, vocab, left);
  const auto b = embed_sentences(model, vocab, right);
  std::vector<float> scores;
  for (std::size_t i = 0; i < pairs.size(); ++i) scores.push_back(cosine(a[i], b[i]));
  if (scores_out) *scores_out = scores;
  return threshold_accuracy(scores, labels);
}

/// Fraction of queries whose most cosine-similar candidate is their own
/// partner (same index). Ties resolve to the lowest index.
inline double retrieval_top1(const std::vector<Embedding>& queries, const std::vector<Embedding>& candidates) {
  if (queries.size() != candidates.size() || queries.empty()) throw ConfigError("retrieval_top1: need equal, non-empty sets");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::size_t arg = 0;
    float best = -2.0f;
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      const float c = cosine(queries[i], candidates[j]);
      if (c > best) {
        best = c;
        arg = j;
      }
    }
    hit += arg == i;
  }
  return static_cast<double>(hit) / static_cast<double>(queries.size());
}

// ---------------------------------------------------------------------------
// Checkpoint directories

struct LoadedModel {
  ModelBundle bundle;
  std::unique_ptr<ParaBart<float>> model;
  std::string checkpoint_hash;
};

/// Loads `<dir>/model.json` and `<dir>/<which>.pbt` (which = best, final, epoch-N).
inline LoadedModel load_model(const std::string& dir, const std::string& which = "best") {
  namespace fs = std::filesystem;
  auto meta = nlohmann::json::parse(read_file((fs::path(dir) / "model.json").string()));
  LoadedModel out;
  out.bundle.config = model_config_from_json(meta.at("model"));
  out.bundle.vocab = Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
  out.bundle.tagset = TagSet(meta.at("tagset").get<std::vector<std::string>>());
  const auto& tc = meta.at("train");
  out.bundle.train.seed = tc.value("seed", std::uint64_t{0});
  out.bundle.train.mode = parse_train_mode(tc.value("mode", std::string("full")));
  const std::string bytes = read_file((fs::path(dir) / (which + ".pbt")).string());
  out.checkpoint_hash = fnv1a_hex(bytes);
  out.model = std::make_unique<ParaBart<float>>(out.bundle.config, 0);
  out.model->load_state(decode_pbt1(bytes));
  return out;
}

}  // namespace parabart

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "parabart/grad_check.hpp"
#include "parabart/model.hpp"
#include "parabart/ops.hpp"
#include "parabart/training.hpp"

namespace parabart {

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kCompositeTolerance = 1e-4;

struct GradCase {
  std::string name;
  GradCheckReport report;
};

namespace detail {

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return TensorD::from_data(std::move(shape), std::move(data));
}

// Values bounded away from zero so relu's kink is never straddled by +-h.
inline TensorD away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = sign(rng) ? mag(rng) : -mag(rng);
  return TensorD::from_data(std::move(shape), std::move(data));
}

inline std::vector<std::int32_t> random_ids(std::size_t n, std::size_t bound, std::mt19937_64& rng) {
  std::vector<std::int32_t> out(n);
  for (auto& v : out) v = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(0, bound - 1)(rng));
  return out;
}

inline std::vector<ParaphrasePair> composite_fixture() {
  return {
      {"the cat saw a dog .", "a dog was seen by the cat .",
       "(S (NP (DT the) (NN cat)) (VP (VBD saw) (NP (DT a) (NN dog))) (. .))",
       "(S (NP (DT a) (NN dog)) (VP (VBD was) (VP (VBN seen) (PP (IN by) (NP (DT the) (NN cat))))) (. .))",
       std::nullopt, std::nullopt},
      {"yesterday the dog ran .", "the dog ran yesterday .",
       "(S (NP (NN yesterday)) (NP (DT the) (NN dog)) (VP (VBD ran)) (. .))",
       "(S (NP (DT the) (NN dog)) (VP (VBD ran) (NP (NN yesterday))) (. .))", std::nullopt, std::nullopt},
  };
}

}  // namespace detail

/// Finite-difference checks of every differentiable op for one seed.
inline std::vector<GradCase> op_gradient_cases(std::uint64_t seed) {
  using detail::random_tensor;
  std::mt19937_64 rng(seed);
  std::vector<GradCase> out;
  auto run = [&](const std::string& name, const std::function<TensorD(const std::vector<TensorD>&)>& op,
                 const std::vector<TensorD>& inputs) {
    out.push_back({name, grad_check(op, inputs, kOpTolerance, 1e-5, seed)});
  };
  using In = const std::vector<TensorD>&;

  run("matmul", [](In x) { return matmul(x[0], x[1]); }, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});
  run("matmul_nt", [](In x) { return matmul_nt(x[0], x[1]); }, {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)});
  run("transpose", [](In x) { return transpose(x[0]); }, {random_tensor({3, 5}, rng)});
  run("reshape", [](In x) { return reshape(x[0], {5, 3}); }, {random_tensor({3, 5}, rng)});
  run("add", [](In x) { return add(x[0], x[1]); }, {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  run("sub", [](In x) { return sub(x[0], x[1]); }, {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  run("mul", [](In x) { return mul(x[0], x[1]); }, {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  run("scale", [](In x) { return scale(x[0], 0.37); }, {random_tensor({2, 3}, rng)});
  run("add_bias", [](In x) { return add_bias(x[0], x[1]); }, {random_tensor({4, 3}, rng), random_tensor({3}, rng)});
  run("sum", [](In x) { return sum(x[0]); }, {random_tensor({3, 3}, rng)});
  run("relu", [](In x) { return relu(x[0]); }, {detail::away_from_zero({3, 4}, rng)});
  run("gelu", [](In x) { return gelu(x[0]); }, {random_tensor({3, 4}, rng, -3.0, 3.0)});
  run("log", [](In x) { return log(x[0]); }, {random_tensor({3, 4}, rng, 0.5, 2.0)});
  run("softmax_rows", [](In x) { return softmax(x[0], -1); }, {random_tensor({3, 5}, rng, -2.0, 2.0)});
  run("softmax_cols", [](In x) { return softmax(x[0], 0); }, {random_tensor({4, 3}, rng, -2.0, 2.0)});
  run("layer_norm", [](In x) { return layer_norm(x[0], x[1], x[2]); },
      {random_tensor({3, 6}, rng, -2.0, 2.0), random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)});

  const auto targets = detail::random_ids(4, 6, rng);
  const std::vector<std::uint8_t> keep{1, 0, 1, 1};
  run("cross_entropy", [targets, keep](In x) { return cross_entropy(x[0], targets, keep); },
      {random_tensor({4, 6}, rng, -2.0, 2.0)});
  run("soft_cross_entropy", [](In x) { return soft_cross_entropy(x[0], softmax(x[1], -1)); },
      {random_tensor({3, 5}, rng, -2.0, 2.0), random_tensor({3, 5}, rng, -2.0, 2.0)});

  const auto rows = detail::random_ids(7, 5, rng);
  run("gather_rows", [rows](In x) { return gather_rows(x[0], rows); }, {random_tensor({5, 3}, rng)});
  run("concat_rows", [](In x) { return concat_rows<double>({x[0], x[1]}); },
      {random_tensor({2, 3}, rng), random_tensor({4, 3}, rng)});
  const std::vector<Segment> segs{{0, 3}, {3, 4}};
  const std::vector<std::uint8_t> valid{1, 1, 0, 1, 1, 1, 0};
  run("segment_mean", [segs, valid](In x) { return segment_mean(x[0], segs, valid); }, {random_tensor({7, 4}, rng)});

  const std::uint64_t drop_seed = rng();
  run("dropout", [drop_seed](In x) {
        std::mt19937_64 r(drop_seed);
        return dropout(x[0], 0.3, r);
      },
      {random_tensor({4, 5}, rng)});

  AttentionLayout self_attn{{{0, 3}, {3, 4}}, {{0, 3}, {3, 4}}, {1, 1, 1, 1, 1, 0, 1}, false};
  run("attention", [self_attn](In x) { return attention(x[0], x[1], x[2], 2, self_attn); },
      {random_tensor({7, 4}, rng), random_tensor({7, 4}, rng), random_tensor({7, 4}, rng)});
  AttentionLayout causal{{{0, 3}, {3, 4}}, {{0, 3}, {3, 4}}, {}, true};
  run("attention_causal", [causal](In x) { return attention(x[0], x[1], x[2], 2, causal); },
      {random_tensor({7, 4}, rng), random_tensor({7, 4}, rng), random_tensor({7, 4}, rng)});
  AttentionLayout cross{{{0, 2}, {2, 3}}, {{0, 4}, {4, 2}}, {}, false};
  run("attention_cross", [cross](In x) { return attention(x[0], x[1], x[2], 2, cross); },
      {random_tensor({5, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
  return out;
}

/// Checks d(L_para - lambda * L_adv)/d(theta) for every parameter of a small
/// double-precision model on a fixed 2-example batch.
inline GradCase composite_gradient_case(std::uint64_t seed, double lambda_adv = 0.1) {
  const auto corpus = detail::composite_fixture();
  const Vocab vocab = build_vocab(corpus, 1);
  std::vector<ParseTree> trees;
  for (const auto& p : corpus) {
    trees.push_back(parse_ptb(p.parse1));
    trees.push_back(parse_ptb(p.parse2));
  }
  const TagSet tags = TagSet::from_trees(trees);
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_enc_layers_sem = 1;
  mc.n_enc_layers_syn = 1;
  mc.n_dec_layers = 1;
  mc.d_ff = 12;
  mc.vocab_size = vocab.size();
  mc.tagset_size = tags.size();
  mc.lambda_adv = lambda_adv;
  const auto prepared = prepare_pairs(corpus, vocab, tags, mc);
  const std::vector<std::size_t> idx{0, 1};
  const auto batch = make_batch<double, std::mt19937_64>(prepared.pairs, idx, 0.0, nullptr);

  auto model = std::make_shared<ParaBart<double>>(mc, seed);
  std::vector<TensorD> params;
  for (const auto& t : model->params().trainable()) params.push_back(t.detach());
  auto op = [model, batch, lambda_adv](const std::vector<TensorD>& x) {
    model->rebind_parameters(x);
    auto [para, adv] = batch_losses(*model, batch, TrainMode::Full, true);
    return sub(para, scale(adv, lambda_adv));
  };
  return {"composite", grad_check(op, params, kCompositeTolerance, 1e-5, seed)};
}

}  // namespace parabart

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "parabart/adamw.hpp"
#include "parabart/checkpoint.hpp"
#include "parabart/data.hpp"
#include "parabart/model.hpp"
#include "parabart/syntax.hpp"

namespace parabart {

enum class TrainMode { Full, NoAdv, NoAdvNoSyntax };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Full: return "full";
    case TrainMode::NoAdv: return "no-adv";
    case TrainMode::NoAdvNoSyntax: return "no-adv-no-syntax";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "full") return TrainMode::Full;
  if (s == "no-adv" || s == "no_adv") return TrainMode::NoAdv;
  if (s == "no-adv-no-syntax" || s == "no_adv_no_syntax") return TrainMode::NoAdvNoSyntax;
  throw ConfigError("unknown training mode '" + s + "' (expected full, no-adv, no-adv-no-syntax)");
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr_encoder_and_disc = 2e-5;
  double lr_rest = 1e-4;
  double lambda_adv = 0.1;
  double word_dropout_p = 0.2;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t disc_steps = 1;  // inner updates per outer update
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::Full;
  double val_fraction = 0.05;
  std::size_t min_count = 1;

  void validate() const {
    if (word_dropout_p < 0.0 || word_dropout_p >= 1.0) throw ConfigError("word_dropout_p must be in [0, 1)");
    if (lambda_adv < 0.0) throw ConfigError("lambda_adv must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (clip_norm <= 0.0) throw ConfigError("clip_norm must be > 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_encoder_and_disc", c.lr_encoder_and_disc},
          {"lr_rest", c.lr_rest},
          {"lambda_adv", c.lambda_adv},
          {"word_dropout_p", c.word_dropout_p},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"disc_steps", c.disc_steps},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"val_fraction", c.val_fraction},
          {"min_count", c.min_count}};
}

/// splitmix64 finalizer; derives independent RNG streams from the root seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kStep = 3;
}  // namespace stream

/// Replaces each non-special token with MASK with probability p.
/// BOS, EOS and PAD are never touched.
template <typename Rng>
TokenIds word_dropout(std::span<const std::int32_t> ids, std::span<const std::uint8_t> mask, double p, Rng& rng) {
  TokenIds out(ids.begin(), ids.end());
  if (p <= 0.0) return out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (Vocab::is_special(out[i]) && out[i] != Vocab::kUnk) continue;
    if (u(rng) < p) out[i] = Vocab::kMask;
  }
  return out;
}

/// A paraphrase pair in model-ready form.
struct EncodedPair {
  TokenIds source;        // BOS S1 EOS
  TokenIds target;        // BOS S2 EOS
  TokenIds target_parse;  // linearized P2
  std::vector<float> source_bow;  // tag BoW of P1
};

struct PreparedCorpus {
  std::vector<EncodedPair> pairs;
  std::vector<Diagnostic> skipped;  // line = 1-based index into the input list
};

inline PreparedCorpus prepare_pairs(const std::vector<ParaphrasePair>& pairs, const Vocab& vocab,
                                    const TagSet& tagset, const ModelConfig& config) {
  PreparedCorpus out;
  ParseVocab pv(tagset);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      const auto p1 = parse_ptb(pairs[i].parse1);
      const auto p2 = parse_ptb(pairs[i].parse2);
      EncodedPair e;
      e.source = encode_ids(pairs[i].sent1, vocab, config.max_sent_len);
      e.target = encode_ids(pairs[i].sent2, vocab, config.max_sent_len);
      e.target_parse = pv.encode(p2, config.max_parse_len);
      e.source_bow = tag_bow_vector(p1, tagset);
      out.pairs.push_back(std::move(e));
    } catch (const std::exception& ex) {
      out.skipped.push_back({i + 1, ex.what()});
    }
  }
  return out;
}

/// Tensors for one optimization step.
template <typename T>
struct StepBatch {
  PackedBatch source;
  PackedBatch prefix;
  TokenIds targets;
  PackedBatch parse;
  BasicTensor<T> bow;  // [B x |T|]
};

template <typename T, typename Rng>
StepBatch<T> make_batch(const std::vector<EncodedPair>& pairs, std::span<const std::size_t> indices,
                        double word_dropout_p, Rng* rng) {
  StepBatch<T> b;
  std::vector<TokenIds> src, prefix, parse;
  std::vector<T> bow;
  for (std::size_t idx : indices) {
    const auto& e = pairs.at(idx);
    src.push_back(rng ? word_dropout(e.source, {}, word_dropout_p, *rng) : e.source);
    prefix.emplace_back(e.target.begin(), e.target.end() - 1);
    b.targets.insert(b.targets.end(), e.target.begin() + 1, e.target.end());
    parse.push_back(e.target_parse);
    bow.insert(bow.end(), e.source_bow.begin(), e.source_bow.end());
  }
  b.source = PackedBatch::pack(src);
  b.prefix = PackedBatch::pack(prefix);
  b.parse = PackedBatch::pack(parse);
  const std::size_t tags = indices.empty() ? 0 : pairs.at(indices[0]).source_bow.size();
  b.bow = BasicTensor<T>::from_data({indices.size(), tags}, std::move(bow));
  return b;
}

struct Losses {
  double para = 0.0;  // mean over the batch of the summed token NLL
  double adv = 0.0;   // mean over the batch
};

/// Paraphrase and adversarial losses of a batch, both averaged over examples.
/// Returns {L_para, L_adv} tensors; L_adv is undefined when not requested.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> batch_losses(const ParaBart<T>& model, const StepBatch<T>& batch,
                                                       TrainMode mode, bool with_adv,
                                                       std::mt19937_64* dropout_rng = nullptr) {
  const T inv_b = T{1} / static_cast<T>(batch.source.size());
  auto u = model.encode_semantic(batch.source, dropout_rng);
  auto ubar = model.pool(u, batch.source);
  BasicTensor<T> logits;
  if (mode == TrainMode::NoAdvNoSyntax) {
    logits = model.decode_logits(ubar, nullptr, nullptr, batch.prefix, dropout_rng);
  } else {
    auto v = model.encode_syntactic(batch.parse, dropout_rng);
    logits = model.decode_logits(ubar, &v, &batch.parse, batch.prefix, dropout_rng);
  }
  auto para = scale(cross_entropy(logits, batch.targets), inv_b);
  BasicTensor<T> adv;
  if (with_adv) adv = scale(soft_cross_entropy(model.discriminator_logits(ubar), batch.bow), inv_b);
  return {para, adv};
}

/// Optimizers and bookkeeping for alternating adversarial training.
template <typename T>
class Trainer {
 public:
  Trainer(ParaBart<T>& model, const TrainConfig& config) : model_(model), config_(config) {
    config_.validate();
    const auto& params = model_.params();
    AdamWOptions enc{config_.lr_encoder_and_disc, 0.9, 0.999, 1e-8, config_.weight_decay};
    AdamWOptions rest{config_.lr_rest, 0.9, 0.999, 1e-8, config_.weight_decay};
    disc_params_ = params.select({"dis."});
    outer_params_ = params.select({"tok_emb", "sem.", "parse_emb", "syn.", "dec."});
    inner_.add_group(disc_params_, enc);
    outer_.add_group(params.select({"tok_emb", "sem."}), enc);
    outer_.add_group(params.select({"parse_emb", "syn.", "dec."}), rest);
  }

  enum class Phase { Inner, Outer };
  /// Called right after each optimizer update; used to audit which tensors moved.
  using PhaseHook = std::function<void(Phase)>;
  void set_phase_hook(PhaseHook hook) { phase_hook_ = std::move(hook); }

  struct StepRecord {
    std::size_t step = 0;
    double l_para = 0.0;
    double l_adv = 0.0;
    double grad_norm = 0.0;       // outer, before clipping
    double disc_grad_norm = 0.0;  // inner, before clipping
    double seconds = 0.0;
  };

  /// One iteration: discriminator update(s) on detached ū, then an update of
  /// encoders and decoder on L_para - lambda * L_adv with the discriminator
  /// frozen. Both phases see the same word-dropped source.
  StepRecord step(const std::vector<EncodedPair>& pairs, std::span<const std::size_t> indices) {
    const auto start = std::chrono::steady_clock::now();
    StepRecord rec;
    rec.step = ++steps_;
    std::mt19937_64 rng(mix_seed(config_.seed, stream::kStep, rec.step));
    const bool adversarial = config_.mode == TrainMode::Full;
    const double lambda = adversarial ? config_.lambda_adv : 0.0;
    auto batch = make_batch<T>(pairs, indices, config_.word_dropout_p, &rng);
    std::mt19937_64 dropout_rng(mix_seed(config_.seed, stream::kStep, rec.step) ^ 0x5bd1e995ULL);
    auto* drop = model_.config().dropout > 0.0 ? &dropout_rng : nullptr;

    if (adversarial) {
      BasicTensor<T> ubar;
      {
        NoGradGuard no_grad;
        auto u = model_.encode_semantic(batch.source, drop);
        ubar = model_.pool(u, batch.source);
      }
      const T inv_b = T{1} / static_cast<T>(indices.size());
      for (std::size_t k = 0; k < config_.disc_steps; ++k) {
        model_.params().zero_grad();
        auto adv = scale(soft_cross_entropy(model_.discriminator_logits(ubar), batch.bow), inv_b);
        require_finite(adv.item(), "L_adv (inner)", rec.step);
        adv.backward();
        rec.disc_grad_norm = clip_grad_norm<T>(disc_params_, config_.clip_norm);
        inner_.step();
        if (phase_hook_) phase_hook_(Phase::Inner);
      }
    }

    model_.params().zero_grad();
    auto [para, adv] = batch_losses(model_, batch, config_.mode, adversarial, drop);
    require_finite(para.item(), "L_para", rec.step);
    BasicTensor<T> objective = para;
    if (adversarial) {
      require_finite(adv.item(), "L_adv", rec.step);
      objective = sub(para, scale(adv, static_cast<T>(lambda)));
      rec.l_adv = static_cast<double>(adv.item());
    }
    objective.backward();
    rec.grad_norm = clip_grad_norm<T>(outer_params_, config_.clip_norm);
    outer_.step();
    if (phase_hook_) phase_hook_(Phase::Outer);
    model_.params().zero_grad();
    rec.l_para = static_cast<double>(para.item());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  /// Mean per-pair L_para with dropout off.
  double validation_loss(const std::vector<EncodedPair>& pairs, std::span<const std::size_t> indices) const {
    if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
    NoGradGuard no_grad;
    double total = 0.0;
    for (std::size_t start = 0; start < indices.size(); start += config_.batch_size) {
      const std::size_t end = std::min(indices.size(), start + config_.batch_size);
      auto chunk = indices.subspan(start, end - start);
      auto batch = make_batch<T, std::mt19937_64>(pairs, chunk, 0.0, nullptr);
      auto [para, adv] = batch_losses(model_, batch, config_.mode, false);
      total += static_cast<double>(para.item()) * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(indices.size());
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t n) { steps_ = n; }
  AdamW<T>& inner_optimizer() { return inner_; }
  AdamW<T>& outer_optimizer() { return outer_; }
  const TrainConfig& config() const { return config_; }

  /// Optimizer moments as named tensors for resumable checkpoints.
  std::vector<NamedTensor> optimizer_state() {
    std::vector<NamedTensor> out;
    auto dump = [&](const std::string& tag, AdamW<T>& opt) {
      std::size_t slot = 0;
      for (auto& group : opt.groups()) {
        for (auto& param : group.params) {
          const std::string name = tag + "." + std::to_string(slot);
          out.push_back({name + ".m", to_float(param.shape(), opt.first_moments()[slot])});
          out.push_back({name + ".v", to_float(param.shape(), opt.second_moments()[slot])});
          ++slot;
        }
      }
    };
    dump("inner", inner_);
    dump("outer", outer_);
    return out;
  }

  void load_optimizer_state(const std::vector<NamedTensor>& tensors) {
    std::size_t pos = 0;
    auto load = [&](AdamW<T>& opt) {
      for (std::size_t slot = 0; slot < opt.first_moments().size(); ++slot) {
        if (pos + 1 >= tensors.size()) throw IoError("optimizer state truncated");
        copy_into(tensors[pos++], opt.first_moments()[slot]);
        copy_into(tensors[pos++], opt.second_moments()[slot]);
      }
    };
    load(inner_);
    load(outer_);
    if (pos != tensors.size()) throw IoError("optimizer state has extra tensors");
  }

 private:
  static Tensor to_float(const Shape& shape, const std::vector<T>& v) {
    return Tensor::from_data(shape, std::vector<float>(v.begin(), v.end()));
  }
  static void copy_into(const NamedTensor& src, std::vector<T>& dst) {
    if (src.tensor.numel() != dst.size()) throw IoError("optimizer state shape mismatch for " + src.name);
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.begin());
  }
  static void require_finite(double v, const char* what, std::size_t step) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step) + " (value " +
                         std::to_string(v) + ")");
    }
  }

  ParaBart<T>& model_;
  TrainConfig config_;
  std::vector<BasicTensor<T>> disc_params_, outer_params_;
  AdamW<T> inner_, outer_;
  std::size_t steps_ = 0;
  PhaseHook phase_hook_;
};

using StepRecord = Trainer<float>::StepRecord;

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  std::vector<double> val_para;  // index 0 = before training, k = after epoch k
  std::size_t best_epoch = 0;

  std::string steps_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "step,l_para,l_adv,grad_norm,seconds\n";
    for (const auto& r : steps) os << r.step << ',' << r.l_para << ',' << r.l_adv << ',' << r.grad_norm << ',' << r.seconds << '\n';
    return os.str();
  }
  std::string val_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,val_l_para\n";
    for (std::size_t e = 0; e < val_para.size(); ++e) os << e << ',' << val_para[e] << '\n';
    return os.str();
  }
};

/// Everything needed to rebuild a trained model.
struct ModelBundle {
  ModelConfig config;
  Vocab vocab;
  TagSet tagset;
  TrainConfig train;
};

inline nlohmann::json bundle_json(const ModelBundle& b) {
  return {{"format", "parabart-checkpoint-1"},
          {"model", to_json(b.config)},
          {"train", to_json(b.train)},
          {"vocab", b.vocab.tokens()},
          {"tagset", b.tagset.tags()}};
}

struct TrainResult {
  ModelBundle bundle;
  TrainLog log;
  std::vector<NamedTensor> final_state;
  std::vector<NamedTensor> best_state;
  std::vector<std::size_t> train_indices, val_indices;
  PreparedCorpus prepared;
};

/// Progress hook invoked after each epoch with (epoch, validation L_para).
using EpochCallback = std::function<void(std::size_t, double)>;

/// Builds vocabulary and tagset, then runs the epoch loop. The last
/// val_fraction of the corpus (file order) is held out for validation. When
/// out_dir is non-empty, checkpoints are written per epoch and at the best
/// validation loss; `resume` continues from the state saved there.
inline TrainResult train(const std::vector<ParaphrasePair>& corpus, ModelConfig model_config,
                         const TrainConfig& config, const std::string& out_dir = "", bool resume = false,
                         const EpochCallback& on_epoch = {}) {
  namespace fs = std::filesystem;
  config.validate();
  if (corpus.size() < 2) throw ConfigError("train: corpus needs at least 2 pairs");
  const std::size_t n_val = static_cast<std::size_t>(std::floor(config.val_fraction * static_cast<double>(corpus.size())));
  const std::size_t n_train = corpus.size() - n_val;
  std::vector<ParaphrasePair> train_pairs(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(n_train));

  TrainResult result;
  result.bundle.vocab = build_vocab(train_pairs, config.min_count);
  std::vector<ParseTree> trees;
  for (const auto& p : corpus) {
    trees.push_back(parse_ptb(p.parse1));
    trees.push_back(parse_ptb(p.parse2));
  }
  result.bundle.tagset = TagSet::from_trees(trees);
  model_config.vocab_size = result.bundle.vocab.size();
  model_config.tagset_size = result.bundle.tagset.size();
  model_config.lambda_adv = config.lambda_adv;
  result.bundle.config = model_config;
  result.bundle.train = config;

  result.prepared = prepare_pairs(corpus, result.bundle.vocab, result.bundle.tagset, model_config);
  // Map corpus positions to prepared indices, dropping pairs that failed.
  std::vector<std::size_t> skipped_lines;
  for (const auto& d : result.prepared.skipped) skipped_lines.push_back(d.line - 1);
  std::size_t prepared_idx = 0, skip_pos = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (skip_pos < skipped_lines.size() && skipped_lines[skip_pos] == i) {
      ++skip_pos;
      continue;
    }
    (i < n_train ? result.train_indices : result.val_indices).push_back(prepared_idx++);
  }
  if (result.train_indices.empty()) throw ConfigError("train: no usable training pairs");

  ParaBart<float> model(model_config, mix_seed(config.seed, stream::kInit));
  Trainer<float> trainer(model, config);
  result.log.seed = config.seed;

  std::size_t start_epoch = 1;
  double best = std::numeric_limits<double>::infinity();
  const auto& prepared = result.prepared.pairs;

  auto save_state = [&](std::size_t epoch_done) {
    if (out_dir.empty()) return;
    save_pbt1((fs::path(out_dir) / "final.pbt").string(), model.state());
    save_pbt1((fs::path(out_dir) / "optimizer.pbt").string(), trainer.optimizer_state());
    nlohmann::json st{{"epoch", epoch_done},
                      {"steps", trainer.steps()},
                      {"inner_steps", trainer.inner_optimizer().step_count()},
                      {"outer_steps", trainer.outer_optimizer().step_count()},
                      {"best_val", best},
                      {"best_epoch", result.log.best_epoch},
                      {"val_para", result.log.val_para}};
    write_file((fs::path(out_dir) / "state.json").string(), st.dump(2) + "\n");
    write_file((fs::path(out_dir) / "train_log.csv").string(), result.log.steps_csv());
    write_file((fs::path(out_dir) / "val_log.csv").string(), result.log.val_csv());
  };

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "model.json").string(), bundle_json(result.bundle).dump(2) + "\n");
    result.bundle.tagset.save((fs::path(out_dir) / "tagset.txt").string());
  }

  if (resume) {
    if (out_dir.empty()) throw ConfigError("train: resume needs an output directory");
    const fs::path state_path = fs::path(out_dir) / "state.json";
    if (!fs::exists(state_path)) throw IoError("train: nothing to resume in " + out_dir);
    auto st = nlohmann::json::parse(read_file(state_path.string()));
    model.load_state(load_pbt1((fs::path(out_dir) / "final.pbt").string()));
    trainer.load_optimizer_state(load_pbt1((fs::path(out_dir) / "optimizer.pbt").string()));
    trainer.set_steps(st.at("steps").get<std::size_t>());
    trainer.inner_optimizer().set_step_count(st.at("inner_steps").get<std::size_t>());
    trainer.outer_optimizer().set_step_count(st.at("outer_steps").get<std::size_t>());
    best = st.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : st.at("best_val").get<double>();
    result.log.best_epoch = st.at("best_epoch").get<std::size_t>();
    result.log.val_para = st.at("val_para").get<std::vector<double>>();
    start_epoch = st.at("epoch").get<std::size_t>() + 1;
    result.best_state = load_pbt1((fs::path(out_dir) / "best.pbt").string());
  } else {
    result.log.val_para.push_back(trainer.validation_loss(prepared, result.val_indices));
    best = result.log.val_para.back();
    result.best_state = model.state();
    if (on_epoch) on_epoch(0, result.log.val_para.back());
    if (!out_dir.empty()) save_pbt1((fs::path(out_dir) / "best.pbt").string(), result.best_state);
  }

  for (std::size_t epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order = result.train_indices;
    std::mt19937_64 shuffle_rng(mix_seed(config.seed, stream::kShuffle, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      result.log.steps.push_back(trainer.step(prepared, std::span<const std::size_t>(order).subspan(start, end - start)));
    }
    const double val = trainer.validation_loss(prepared, result.val_indices);
    result.log.val_para.push_back(val);
    if (!(val >= best) || result.val_indices.empty()) {
      best = val;
      result.log.best_epoch = epoch;
      result.best_state = model.state();
      if (!out_dir.empty()) save_pbt1((fs::path(out_dir) / "best.pbt").string(), result.best_state);
    }
    if (!out_dir.empty()) {
      save_pbt1((fs::path(out_dir) / ("epoch-" + std::to_string(epoch) + ".pbt")).string(), model.state());
    }
    save_state(epoch);
    if (on_epoch) on_epoch(epoch, val);
  }
  result.final_state = model.state();
  return result;
}

}  // namespace parabart

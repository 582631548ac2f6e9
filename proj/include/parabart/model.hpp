#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "parabart/checkpoint.hpp"
#include "parabart/data.hpp"
#include "parabart/ops.hpp"

namespace parabart {

enum class Activation { Gelu, Relu };

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers_sem = 2;
  std::size_t n_enc_layers_syn = 1;
  std::size_t n_dec_layers = 1;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t tagset_size = 0;
  std::size_t max_sent_len = 40;
  std::size_t max_parse_len = 160;
  double dropout = 0.0;
  double lambda_adv = 0.1;
  Activation activation = Activation::Gelu;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
    };
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(n_enc_layers_sem, "n_enc_layers_sem");
    positive(n_enc_layers_syn, "n_enc_layers_syn");
    positive(n_dec_layers, "n_dec_layers");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(tagset_size, "tagset_size");
    positive(max_sent_len, "max_sent_len");
    positive(max_parse_len, "max_parse_len");
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
    if (lambda_adv < 0.0) throw ConfigError("model config: lambda_adv must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},           {"n_heads", c.n_heads},
          {"n_enc_layers_sem", c.n_enc_layers_sem}, {"n_enc_layers_syn", c.n_enc_layers_syn},
          {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},     {"tagset_size", c.tagset_size},
          {"max_sent_len", c.max_sent_len}, {"max_parse_len", c.max_parse_len},
          {"dropout", c.dropout},           {"lambda_adv", c.lambda_adv},
          {"activation", c.activation == Activation::Gelu ? "gelu" : "relu"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_enc_layers_sem = j.at("n_enc_layers_sem").get<std::size_t>();
  c.n_enc_layers_syn = j.at("n_enc_layers_syn").get<std::size_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.tagset_size = j.at("tagset_size").get<std::size_t>();
  c.max_sent_len = j.at("max_sent_len").get<std::size_t>();
  c.max_parse_len = j.at("max_parse_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.lambda_adv = j.at("lambda_adv").get<double>();
  c.activation = j.value("activation", "gelu") == "relu" ? Activation::Relu : Activation::Gelu;
  c.validate();
  return c;
}

/// Sequences packed row-wise. `valid` marks non-pad rows (empty = all valid).
struct PackedBatch {
  TokenIds ids;
  std::vector<std::uint8_t> valid;
  std::vector<Segment> segments;

  static PackedBatch pack(const std::vector<TokenIds>& seqs) {
    PackedBatch b;
    for (const auto& s : seqs) {
      b.segments.push_back({b.ids.size(), s.size()});
      b.ids.insert(b.ids.end(), s.begin(), s.end());
    }
    b.valid.assign(b.ids.size(), 1);
    return b;
  }

  /// One padded sequence with its pad mask.
  static PackedBatch single(std::span<const std::int32_t> ids, std::span<const std::uint8_t> mask) {
    if (!mask.empty() && mask.size() != ids.size()) throw ShapeError("pad mask length differs from ids");
    PackedBatch b;
    b.ids.assign(ids.begin(), ids.end());
    if (mask.empty()) b.valid.assign(ids.size(), 1);
    else b.valid.assign(mask.begin(), mask.end());
    b.segments.push_back({0, ids.size()});
    return b;
  }

  std::size_t size() const { return segments.size(); }
  std::size_t rows() const { return ids.size(); }
};

/// Named parameter bundle with stable insertion order.
template <typename T>
class ModelParams {
 public:
  const BasicTensor<T>& add(const std::string& name, BasicTensor<T> tensor) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    if (tensor.requires_grad()) trainable_slots_.push_back(entries_.size());
    entries_.emplace_back(name, std::move(tensor));
    return entries_.back().second;
  }

  const BasicTensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, BasicTensor<T>>>& entries() const { return entries_; }

  /// Trainable tensors whose name starts with any of the prefixes.
  std::vector<BasicTensor<T>> select(std::initializer_list<std::string_view> prefixes) const {
    std::vector<BasicTensor<T>> out;
    for (const auto& [name, t] : entries_) {
      if (!t.requires_grad()) continue;
      for (auto p : prefixes) {
        if (std::string_view(name).substr(0, p.size()) == p) {
          out.push_back(t);
          break;
        }
      }
    }
    return out;
  }

  std::vector<BasicTensor<T>> trainable() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& [name, t] : entries_)
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (const auto& [name, t] : entries_) t.zero_grad();
  }

  std::vector<NamedTensor> to_named() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : entries_) out.push_back({name, t.template cast<float>()});
    return out;
  }

  /// Replaces the trainable tensors, in trainable() order, with new handles.
  /// Slots are fixed at construction, so handles without grad may be bound too.
  void rebind(const std::vector<BasicTensor<T>>& tensors) {
    if (tensors.size() != trainable_slots_.size()) throw ShapeError("rebind: expected " +
        std::to_string(trainable_slots_.size()) + " tensors, got " + std::to_string(tensors.size()));
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      auto& [name, t] = entries_[trainable_slots_[k]];
      if (tensors[k].shape() != t.shape()) throw ShapeError("rebind: shape mismatch at " + name);
      t = tensors[k];
    }
  }

  /// Overwrites values in place; names and shapes must match exactly.
  void assign(const std::vector<NamedTensor>& tensors) const {
    if (tensors.size() != entries_.size()) {
      throw IoError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model has " +
                    std::to_string(entries_.size()));
    }
    for (const auto& nt : tensors) {
      const auto& dst = get(nt.name);
      if (dst.shape() != nt.tensor.shape()) {
        throw IoError("checkpoint shape mismatch for " + nt.name + ": " + shape_str(nt.tensor.shape()) + " vs " +
                      shape_str(dst.shape()));
      }
      auto out = dst.mutable_data();
      auto in = nt.tensor.data();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(in[i]);
    }
  }

 private:
  std::vector<std::pair<std::string, BasicTensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> trainable_slots_;
};

/// Sinusoidal position table [rows x d].
template <typename T>
std::vector<T> sinusoidal_table(std::size_t rows, std::size_t d) {
  std::vector<T> out(rows * d);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      out[pos * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return out;
}

/// Semantic encoder, syntactic encoder, decoder and linear syntax
/// discriminator sharing one parameter bundle.
template <typename T>
class ParaBart {
 public:
  using TensorT = BasicTensor<T>;

  ParaBart(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    add_random("tok_emb", {config_.vocab_size, d}, emb_std, rng);
    add_random("parse_emb", {config_.tagset_size + ParseVocab::kFirstTag, d}, emb_std, rng);
    const std::size_t pos_rows = std::max(config_.max_sent_len, config_.max_parse_len);
    params_.add("pos_enc", TensorT::from_data({pos_rows, d}, sinusoidal_table<T>(pos_rows, d)));
    for (std::size_t l = 0; l < config_.n_enc_layers_sem; ++l) add_encoder_layer("sem.L" + std::to_string(l), rng);
    add_norm("sem.ln_f");
    for (std::size_t l = 0; l < config_.n_enc_layers_syn; ++l) add_encoder_layer("syn.L" + std::to_string(l), rng);
    add_norm("syn.ln_f");
    for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
      const std::string p = "dec.L" + std::to_string(l);
      add_norm(p + ".ln1");
      add_attention(p + ".self", rng);
      add_norm(p + ".ln2");
      add_attention(p + ".cross", rng);
      add_norm(p + ".ln3");
      add_ffn(p + ".ff", rng);
    }
    add_norm("dec.ln_f");
    add_random("dis.W", {config_.tagset_size, d}, emb_std, rng);
    params_.add("dis.b", TensorT::zeros({config_.tagset_size}, true));
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams<T>& params() const { return params_; }

  /// Contextual semantic representations U, packed [rows x d_model].
  TensorT encode_semantic(const PackedBatch& batch, std::mt19937_64* dropout_rng = nullptr) const {
    check_lengths(batch, config_.max_sent_len, "semantic input");
    check_ids(batch, config_.vocab_size, "token");
    TensorT x = embed(p("tok_emb"), batch, dropout_rng);
    AttentionLayout layout{batch.segments, batch.segments, batch.valid, false};
    for (std::size_t l = 0; l < config_.n_enc_layers_sem; ++l) {
      x = encoder_layer("sem.L" + std::to_string(l), x, layout, dropout_rng);
    }
    return norm("sem.ln_f", x);
  }

  /// Mean of U over valid rows of each segment: [segments x d_model].
  TensorT pool(const TensorT& u, const PackedBatch& batch) const {
    return segment_mean(u, batch.segments, batch.valid);
  }

  /// Contextual syntactic representations V over linearized parses.
  TensorT encode_syntactic(const PackedBatch& batch, std::mt19937_64* dropout_rng = nullptr) const {
    check_lengths(batch, config_.max_parse_len, "parse input");
    check_ids(batch, config_.tagset_size + ParseVocab::kFirstTag, "parse token");
    TensorT x = embed(p("parse_emb"), batch, dropout_rng);
    AttentionLayout layout{batch.segments, batch.segments, batch.valid, false};
    for (std::size_t l = 0; l < config_.n_enc_layers_syn; ++l) {
      x = encoder_layer("syn.L" + std::to_string(l), x, layout, dropout_rng);
    }
    return norm("syn.ln_f", x);
  }

  /// Next-token logits [prefix rows x vocab]. The decoder memory of example b
  /// is ū_b followed by the rows of V in parse segment b; with `syntax`
  /// null the memory is ū_b alone.
  TensorT decode_logits(const TensorT& ubar, const TensorT* syntax, const PackedBatch* parse,
                        const PackedBatch& prefix, std::mt19937_64* dropout_rng = nullptr) const {
    const std::size_t batch = prefix.size();
    if (ubar.rank() != 2 || ubar.dim(0) != batch || ubar.dim(1) != config_.d_model) {
      throw ShapeError("decode_logits: ubar must be [" + std::to_string(batch) + " x d_model], got " +
                       shape_str(ubar.shape()));
    }
    check_lengths(prefix, config_.max_sent_len, "target prefix");
    check_ids(prefix, config_.vocab_size, "token");

    TensorT memory;
    AttentionLayout cross;
    cross.queries = prefix.segments;
    if (syntax) {
      if (!parse || parse->size() != batch) throw ShapeError("decode_logits: parse batch size mismatch");
      if (syntax->dim(0) != parse->rows()) throw ShapeError("decode_logits: V rows differ from parse batch");
      std::vector<std::int32_t> order;
      for (std::size_t b = 0; b < batch; ++b) {
        cross.keys.push_back({order.size(), 1 + parse->segments[b].length});
        order.push_back(static_cast<std::int32_t>(b));
        cross.key_valid.push_back(1);
        for (std::size_t r = 0; r < parse->segments[b].length; ++r) {
          const std::size_t row = parse->segments[b].begin + r;
          order.push_back(static_cast<std::int32_t>(batch + row));
          cross.key_valid.push_back(parse->valid.empty() ? 1 : parse->valid[row]);
        }
      }
      memory = gather_rows(concat_rows<T>({ubar, *syntax}), order);
    } else {
      memory = ubar;
      for (std::size_t b = 0; b < batch; ++b) cross.keys.push_back({b, 1});
    }

    AttentionLayout self_layout{prefix.segments, prefix.segments, prefix.valid, true};
    TensorT x = embed(p("tok_emb"), prefix, dropout_rng);
    for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
      const std::string name = "dec.L" + std::to_string(l);
      x = add(x, maybe_dropout(attention_block(name + ".self", norm(name + ".ln1", x), nullptr, self_layout),
                               dropout_rng));
      x = add(x, maybe_dropout(attention_block(name + ".cross", norm(name + ".ln2", x), &memory, cross),
                               dropout_rng));
      x = add(x, maybe_dropout(ffn(name + ".ff", norm(name + ".ln3", x)), dropout_rng));
    }
    return matmul_nt(norm("dec.ln_f", x), p("tok_emb"));
  }

  /// W ū + b for each row of ubar: [rows x |T|].
  TensorT discriminator_logits(const TensorT& ubar) const {
    return add_bias(matmul_nt(ubar, p("dis.W")), p("dis.b"));
  }

  /// softmax(W ū + b), a distribution over the tagset.
  TensorT discriminate(const TensorT& ubar) const { return softmax(discriminator_logits(ubar), -1); }

  std::vector<NamedTensor> state() const { return params_.to_named(); }
  void load_state(const std::vector<NamedTensor>& tensors) const { params_.assign(tensors); }
  void rebind_parameters(const std::vector<TensorT>& tensors) { params_.rebind(tensors); }

 private:
  const TensorT& p(const std::string& name) const { return params_.get(name); }

  void add_random(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    params_.add(name, TensorT::from_data(std::move(shape), std::move(data), true));
  }
  void add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    add_random(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    params_.add(name + ".b", TensorT::zeros({out}, true));
  }
  void add_norm(const std::string& name) {
    params_.add(name + ".g", TensorT::full({config_.d_model}, T{1}, true));
    params_.add(name + ".b", TensorT::zeros({config_.d_model}, true));
  }
  void add_attention(const std::string& name, std::mt19937_64& rng) {
    for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(name + part, config_.d_model, config_.d_model, rng);
  }
  void add_ffn(const std::string& name, std::mt19937_64& rng) {
    add_linear(name + ".in", config_.d_model, config_.d_ff, rng);
    add_linear(name + ".out", config_.d_ff, config_.d_model, rng);
  }
  void add_encoder_layer(const std::string& name, std::mt19937_64& rng) {
    add_norm(name + ".ln1");
    add_attention(name + ".attn", rng);
    add_norm(name + ".ln2");
    add_ffn(name + ".ff", rng);
  }

  static void check_lengths(const PackedBatch& batch, std::size_t limit, const char* what) {
    for (const auto& s : batch.segments) {
      if (s.length > limit) {
        throw ConfigError(std::string(what) + " of length " + std::to_string(s.length) + " exceeds limit " +
                          std::to_string(limit));
      }
      if (s.length == 0) throw ConfigError(std::string(what) + " is empty");
    }
  }
  static void check_ids(const PackedBatch& batch, std::size_t bound, const char* what) {
    for (auto id : batch.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= bound) {
        throw IndexError(std::string(what) + " id " + std::to_string(id) + " outside [0, " + std::to_string(bound) +
                         ")");
      }
    }
  }

  TensorT maybe_dropout(const TensorT& x, std::mt19937_64* rng) const {
    if (!rng || config_.dropout <= 0.0) return x;
    return dropout(x, static_cast<T>(config_.dropout), *rng);
  }

  TensorT embed(const TensorT& table, const PackedBatch& batch, std::mt19937_64* rng) const {
    std::vector<std::int32_t> positions;
    positions.reserve(batch.rows());
    for (const auto& s : batch.segments)
      for (std::size_t i = 0; i < s.length; ++i) positions.push_back(static_cast<std::int32_t>(i));
    TensorT tok = scale(gather_rows(table, batch.ids), static_cast<T>(std::sqrt(static_cast<double>(config_.d_model))));
    return maybe_dropout(add(tok, gather_rows(p("pos_enc"), positions)), rng);
  }

  TensorT norm(const std::string& name, const TensorT& x) const {
    return layer_norm(x, p(name + ".g"), p(name + ".b"));
  }

  TensorT linear(const std::string& name, const TensorT& x) const {
    return add_bias(matmul(x, p(name + ".w")), p(name + ".b"));
  }

  TensorT attention_block(const std::string& name, const TensorT& x, const TensorT* memory,
                          const AttentionLayout& layout) const {
    const TensorT& kv = memory ? *memory : x;
    TensorT q = linear(name + ".q", x);
    TensorT k = linear(name + ".k", kv);
    TensorT v = linear(name + ".v", kv);
    return linear(name + ".o", attention(q, k, v, config_.n_heads, layout));
  }

  TensorT ffn(const std::string& name, const TensorT& x) const {
    TensorT h = linear(name + ".in", x);
    h = config_.activation == Activation::Gelu ? gelu(h) : relu(h);
    return linear(name + ".out", h);
  }

  TensorT encoder_layer(const std::string& name, const TensorT& x, const AttentionLayout& layout,
                        std::mt19937_64* rng) const {
    TensorT y = add(x, maybe_dropout(attention_block(name + ".attn", norm(name + ".ln1", x), nullptr, layout), rng));
    return add(y, maybe_dropout(ffn(name + ".ff", norm(name + ".ln2", y)), rng));
  }

  ModelConfig config_;
  ModelParams<T> params_;
};

// ---------------------------------------------------------------------------
// Single-sequence entry points

template <typename T>
BasicTensor<T> encode_semantic(const ParaBart<T>& model, std::span<const std::int32_t> ids,
                               std::span<const std::uint8_t> mask = {}) {
  return model.encode_semantic(PackedBatch::single(ids, mask));
}

/// Mean over the unmasked rows of U: [d_model].
template <typename T>
BasicTensor<T> mean_pool(const BasicTensor<T>& u, std::span<const std::uint8_t> mask = {}) {
  const Segment whole{0, u.dim(0)};
  return reshape(segment_mean(u, std::span<const Segment>(&whole, 1), mask), {u.dim(1)});
}

template <typename T>
BasicTensor<T> encode_syntactic(const ParaBart<T>& model, std::span<const std::int32_t> ids,
                                std::span<const std::uint8_t> mask = {}) {
  return model.encode_syntactic(PackedBatch::single(ids, mask));
}

/// ubar: [d_model]; syntax: [n x d_model] or undefined for the no-syntax
/// ablation; returns [prefix length x vocab].
template <typename T>
BasicTensor<T> decode_logits(const ParaBart<T>& model, const BasicTensor<T>& ubar, const BasicTensor<T>& syntax,
                             std::span<const std::uint8_t> syntax_mask, std::span<const std::int32_t> prefix) {
  auto u = reshape(ubar, {1, ubar.numel()});
  auto prefix_batch = PackedBatch::single(prefix, {});
  if (!syntax.defined()) return model.decode_logits(u, nullptr, nullptr, prefix_batch);
  std::vector<std::int32_t> dummy(syntax.dim(0), 0);
  auto parse_batch = PackedBatch::single(dummy, syntax_mask);
  return model.decode_logits(u, &syntax, &parse_batch, prefix_batch);
}

/// Summed negative log-likelihood of the target tokens over unmasked positions.
template <typename T>
BasicTensor<T> paraphrase_loss(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                               std::span<const std::uint8_t> mask = {}) {
  return cross_entropy(logits, targets, mask);
}

/// ubar: [d_model] -> distribution over the tagset [|T|].
template <typename T>
BasicTensor<T> discriminate(const ParaBart<T>& model, const BasicTensor<T>& ubar) {
  return reshape(model.discriminate(reshape(ubar, {1, ubar.numel()})), {model.config().tagset_size});
}

/// -sum_t h(t) log y_h(t) on a probability vector y_h.
template <typename T>
BasicTensor<T> adversarial_loss(const BasicTensor<T>& y_h, const BasicTensor<T>& h) {
  detail::require_same_shape(y_h.shape(), h.shape(), "adversarial_loss");
  return scale(sum(mul(h, log(y_h))), T{-1});
}

/// The same quantity evaluated from discriminator logits through a stable
/// log-sum-exp; summed over rows.
template <typename T>
BasicTensor<T> adversarial_loss_from_logits(const BasicTensor<T>& logits, const BasicTensor<T>& h) {
  return soft_cross_entropy(logits, h);
}

}  // namespace parabart

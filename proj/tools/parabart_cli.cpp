#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "parabart/parabart.hpp"

#ifndef PARABART_GIT_DESCRIBE
#define PARABART_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace parabart;

namespace {

struct Options {
  std::string corpus, out, model, pairs, mode = "full", which = "best";
  std::vector<std::string> data;
  std::uint64_t seed = 1;
  std::size_t n = 0;
  std::size_t hidden = 50;
  std::size_t templates = 6, words = 120;
  std::string pairs_out, probe_out;
  bool resume = false;
  bool multiset = false;
  std::size_t grad_seeds = 10;
  TrainConfig train;
  ModelConfig model_cfg;
  std::size_t probe_epochs = 20;
};

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

json input_hashes(const std::vector<std::string>& paths) {
  json out = json::object();
  for (const auto& p : paths) out[p] = fnv1a_hex(read_file(p));
  return out;
}

void write_json(const fs::path& path, const json& j) { write_file(path.string(), j.dump(2) + "\n"); }

json manifest(const std::string& verb, const std::string& cmd, const json& config, std::uint64_t seed,
              const std::vector<std::string>& inputs, const json& outputs) {
  return {{"command", verb},      {"argv", cmd},
          {"config", config},     {"seed", seed},
          {"git_describe", PARABART_GIT_DESCRIBE},
          {"inputs", input_hashes(inputs)},
          {"outputs", outputs}};
}

// Reports go to --out when given (a .json file), else beside the model.
fs::path report_path(const Options& o, const std::string& task) {
  if (!o.out.empty()) return o.out;
  return fs::path(o.model) / (task + "_report.json");
}

fs::path manifest_beside(const fs::path& artifact) {
  return artifact.parent_path() / (artifact.filename().string() + ".manifest.json");
}

void emit_report(const Options& o, const std::string& cmd, const std::string& verb, json report,
                 const std::vector<std::string>& inputs) {
  const fs::path path = report_path(o, verb);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json(path, report);
  write_json(manifest_beside(path), manifest(verb, cmd, report, o.seed, inputs, {path.string()}));
  std::cout << report.dump(2) << "\n";
}

template <typename Row>
void require_clean(const std::string& path, const std::vector<Diagnostic>& problems) {
  if (problems.empty()) return;
  std::string msg = path + ": " + std::to_string(problems.size()) + " malformed row(s)";
  for (std::size_t i = 0; i < std::min<std::size_t>(problems.size(), 5); ++i) {
    msg += "\n  line " + std::to_string(problems[i].line) + ": " + problems[i].message;
  }
  throw ConfigError(msg);
}

int cmd_gen_synth(const Options& o, const std::string& cmd) {
  SyntheticOptions so;
  so.n_pairs = o.n ? o.n : 2000;
  so.n_content_words = o.words;
  so.n_templates = o.templates;
  so.seed = o.seed;
  const auto pairs = gen_synthetic(so);
  save_corpus(o.out, pairs);
  json outputs = json::array({o.out});
  if (!o.pairs_out.empty()) {
    write_pair_tsv(o.pairs_out, labeled_pool(pairs, o.seed));
    outputs.push_back(o.pairs_out);
  }
  if (!o.probe_out.empty()) {
    std::vector<ProbeRow> rows;
    for (const auto& p : pairs) {
      for (const auto& [s, t] : {std::pair{&p.sent1, p.template_id1}, std::pair{&p.sent2, p.template_id2}}) {
        const std::size_t k = rows.size() % 10;
        rows.push_back({k < 8 ? Split::Train : k == 8 ? Split::Valid : Split::Test, *t, *s});
      }
    }
    write_probe_tsv(o.probe_out, rows);
    outputs.push_back(o.probe_out);
  }
  json config{{"n_pairs", so.n_pairs}, {"n_content_words", so.n_content_words}, {"n_templates", so.n_templates}};
  write_json(manifest_beside(o.out), manifest("gen-synth", cmd, config, o.seed, {}, outputs));
  std::cout << "wrote " << pairs.size() << " pairs to " << o.out << "\n";
  return 0;
}

int cmd_train(Options o, const std::string& cmd) {
  auto load = load_corpus(o.corpus);
  for (const auto& d : load.skipped) std::cerr << o.corpus << ":" << d.line << ": skipped: " << d.message << "\n";
  o.train.seed = o.seed;
  o.train.mode = parse_train_mode(o.mode);
  auto res = train(load.pairs, o.model_cfg, o.train, o.out, o.resume, [](std::size_t epoch, double val) {
    std::cout << "epoch " << epoch << " val_l_para " << val << std::endl;
  });
  json config{{"train", to_json(o.train)}, {"model", to_json(res.bundle.config)}};
  const std::string final_hash = fnv1a_hex(read_file((fs::path(o.out) / "final.pbt").string()));
  const std::string best_hash = fnv1a_hex(read_file((fs::path(o.out) / "best.pbt").string()));
  json outputs{{"final.pbt", final_hash}, {"best.pbt", best_hash}, {"best_epoch", res.log.best_epoch}};
  write_json(fs::path(o.out) / "manifest.json", manifest("train", cmd, config, o.seed, {o.corpus}, outputs));
  std::cout << "final checkpoint " << final_hash << ", best epoch " << res.log.best_epoch << "\n";
  return 0;
}

int cmd_embed(const Options& o, const std::string& cmd) {
  if (o.data.size() != 1) throw ConfigError("embed takes exactly one --data file");
  auto loaded = load_model(o.model, o.which);
  std::vector<std::string> sentences;
  {
    std::ifstream in(o.data[0]);
    if (!in) throw IoError("cannot open " + o.data[0]);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!tokenize(line).empty()) sentences.push_back(line);
    }
  }
  const auto emb = embed_sentences(*loaded.model, loaded.bundle.vocab, sentences);
  std::ofstream out(o.out, std::ios::trunc);
  if (!out) throw IoError("cannot write " + o.out);
  out.precision(9);
  for (const auto& e : emb) {
    for (std::size_t i = 0; i < e.size(); ++i) out << (i ? "\t" : "") << e[i];
    out << '\n';
  }
  out.close();
  json config{{"checkpoint", o.which}, {"checkpoint_hash", loaded.checkpoint_hash}};
  write_json(manifest_beside(o.out), manifest("embed", cmd, config, o.seed, {o.data[0]}, json::array({o.out})));
  std::cout << "embedded " << emb.size() << " sentences into " << o.out << "\n";
  return 0;
}

int cmd_eval_sts(const Options& o, const std::string& cmd) {
  if (o.data.empty()) throw ConfigError("eval-sts needs at least one --data file");
  auto loaded = load_model(o.model, o.which);
  json per_file = json::object();
  double total = 0.0;
  for (const auto& path : o.data) {
    std::vector<Diagnostic> problems;
    auto rows = read_sts_tsv(path, problems);
    require_clean<StsRow>(path, problems);
    const auto r = sts_eval(*loaded.model, loaded.bundle.vocab, rows);
    per_file[path] = r.pearson_r;
    total += r.pearson_r;
  }
  const double mean = total / static_cast<double>(o.data.size());
  json report{{"task", "sts"},       {"metric", "pearson_r"}, {"value", mean},
              {"pearson_r", mean},   {"per_file", per_file},  {"seed", o.seed},
              {"checkpoint_hash", loaded.checkpoint_hash}};
  emit_report(o, cmd, "eval-sts", report, o.data);
  return 0;
}

int cmd_probe(const Options& o, const std::string& cmd) {
  if (o.data.size() != 1) throw ConfigError("probe takes exactly one --data file");
  auto loaded = load_model(o.model, o.which);
  std::vector<Diagnostic> problems;
  const auto rows = read_probe_tsv(o.data[0], problems);
  require_clean<ProbeRow>(o.data[0], problems);
  ProbeData pd;
  std::vector<std::string> sentences;
  for (const auto& r : rows) {
    sentences.push_back(r.sentence);
    pd.labels.push_back(r.label);
    pd.splits.push_back(r.split);
  }
  pd.features = embed_sentences(*loaded.model, loaded.bundle.vocab, sentences);
  ProbeOptions po;
  po.hidden = o.hidden;
  po.seed = o.seed;
  po.epochs = o.probe_epochs;
  const auto res = probe(pd, po, fs::path(o.data[0]).stem().string());
  json report{{"task", "probe:" + res.task},
              {"metric", "test_accuracy"},
              {"value", res.test_accuracy},
              {"train_accuracy", res.train_accuracy},
              {"val_accuracy", res.val_accuracy},
              {"test_accuracy", res.test_accuracy},
              {"best_epoch", res.best_epoch},
              {"hidden", o.hidden},
              {"seed", o.seed},
              {"checkpoint_hash", loaded.checkpoint_hash}};
  emit_report(o, cmd, "probe", report, o.data);
  return 0;
}

int cmd_qqp_split(const Options& o, const std::string& cmd) {
  if (o.n == 0) throw ConfigError("qqp-split needs --n >= 1");
  std::vector<Diagnostic> problems;
  const auto pairs = read_pair_tsv(o.pairs, problems);
  require_clean<LabeledPair>(o.pairs, problems);
  const auto split = split_easy_hard(pairs, o.n, o.seed, o.multiset ? TopLevelMatch::Multiset : TopLevelMatch::Sequence);
  fs::create_directories(o.out);
  const fs::path easy = fs::path(o.out) / "easy.tsv", hard = fs::path(o.out) / "hard.tsv";
  write_pair_tsv(easy.string(), split.easy);
  write_pair_tsv(hard.string(), split.hard);
  json config{{"n", o.n},
              {"match", o.multiset ? "multiset" : "sequence"},
              {"easy_pool", split.easy_pool},
              {"hard_pool", split.hard_pool},
              {"negative_pool", split.negative_pool}};
  json outputs{{"easy.tsv", fnv1a_hex(read_file(easy.string()))}, {"hard.tsv", fnv1a_hex(read_file(hard.string()))}};
  write_json(fs::path(o.out) / "manifest.json", manifest("qqp-split", cmd, config, o.seed, {o.pairs}, outputs));
  std::cout << "easy pool " << split.easy_pool << ", hard pool " << split.hard_pool << ", negatives "
            << split.negative_pool << "; wrote " << easy.string() << " and " << hard.string() << "\n";
  return 0;
}

int cmd_qqp_eval(const Options& o, const std::string& cmd) {
  if (o.data.empty()) throw ConfigError("qqp-eval needs at least one --data file");
  auto loaded = load_model(o.model, o.which);
  json per_file = json::object();
  double total = 0.0;
  std::optional<double> threshold;
  for (const auto& path : o.data) {
    std::vector<Diagnostic> problems;
    const auto pairs = read_pair_tsv(path, problems);
    require_clean<LabeledPair>(path, problems);
    const auto r = pair_eval(*loaded.model, loaded.bundle.vocab, pairs);
    per_file[path] = {{"accuracy", r.accuracy}, {"threshold", r.threshold}};
    total += r.accuracy;
    if (o.data.size() == 1) threshold = r.threshold;
  }
  json report{{"task", "paraphrase-detection"},
              {"metric", "accuracy"},
              {"value", total / static_cast<double>(o.data.size())},
              {"per_file", per_file},
              {"seed", o.seed},
              {"checkpoint_hash", loaded.checkpoint_hash}};
  if (threshold) report["threshold"] = *threshold;
  emit_report(o, cmd, "qqp-eval", report, o.data);
  return 0;
}

int cmd_grad_check(const Options& o, const std::string& cmd) {
  json cases = json::array();
  bool ok = true;
  double worst_op = 0.0, worst_composite = 0.0;
  for (std::size_t s = 0; s < o.grad_seeds; ++s) {
    const std::uint64_t seed = o.seed + s;
    auto results = op_gradient_cases(seed);
    results.push_back(composite_gradient_case(seed));
    for (const auto& c : results) {
      const bool pass = c.report.passed();
      ok = ok && pass;
      (c.name == "composite" ? worst_composite : worst_op) =
          std::max(c.name == "composite" ? worst_composite : worst_op, c.report.max_rel_error);
      if (!pass) {
        std::cerr << "FAIL " << c.name << " seed " << seed << " max_rel_error " << c.report.max_rel_error
                  << (c.report.failure.empty() ? "" : " (" + c.report.failure + ")") << "\n";
      }
      cases.push_back({{"op", c.name}, {"seed", seed}, {"max_rel_error", c.report.max_rel_error}, {"passed", pass}});
    }
  }
  json report{{"task", "grad-check"},
              {"metric", "max_rel_error"},
              {"value", std::max(worst_op, worst_composite)},
              {"ops_max_rel_error", worst_op},
              {"composite_max_rel_error", worst_composite},
              {"tolerance_ops", kOpTolerance},
              {"tolerance_composite", kCompositeTolerance},
              {"passed", ok},
              {"seed", o.seed},
              {"cases", cases}};
  if (!o.out.empty()) {
    write_json(o.out, report);
    write_json(manifest_beside(o.out), manifest("grad-check", cmd, {{"seeds", o.grad_seeds}}, o.seed, {}, json::array({o.out})));
  }
  std::cout << "ops max rel error " << worst_op << " (tol " << kOpTolerance << "), composite " << worst_composite
            << " (tol " << kCompositeTolerance << "): " << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

void add_model_flags(CLI::App* app, Options& o) {
  app->add_option("--max-sent-len", o.model_cfg.max_sent_len, "Max sentence length incl. BOS/EOS")->capture_default_str();
  app->add_option("--max-parse-len", o.model_cfg.max_parse_len, "Max linearized parse length")->capture_default_str();
  app->add_option("--d-model", o.model_cfg.d_model, "Model width")->capture_default_str();
  app->add_option("--heads", o.model_cfg.n_heads, "Attention heads")->capture_default_str();
  app->add_option("--layers-sem", o.model_cfg.n_enc_layers_sem, "Semantic encoder layers")->capture_default_str();
  app->add_option("--layers-syn", o.model_cfg.n_enc_layers_syn, "Syntactic encoder layers")->capture_default_str();
  app->add_option("--layers-dec", o.model_cfg.n_dec_layers, "Decoder layers")->capture_default_str();
}

void add_model_input(CLI::App* app, Options& o) {
  app->add_option("--model", o.model, "Model directory written by train")->required();
  app->add_option("--checkpoint", o.which, "Checkpoint name inside the model directory (best, final, epoch-N)")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parabart: syntax-guided paraphrase training and sentence-embedding evaluation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "Show help for every command");
  Options o;
  const std::string cmd = command_line(argc, argv);

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic paraphrase corpus (JSONL)");
  gen->add_option("--out", o.out, "Output corpus path")->required();
  gen->add_option("--n", o.n, "Number of pairs (default 2000)");
  gen->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  gen->add_option("--templates", o.templates, "Number of syntactic templates (2-6)")->capture_default_str();
  gen->add_option("--words", o.words, "Number of content words")->capture_default_str();
  gen->add_option("--pairs-out", o.pairs_out, "Also write a labeled pair TSV (positives and negatives)");
  gen->add_option("--probe-out", o.probe_out, "Also write a template-id probing TSV");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--corpus", o.corpus, "Training corpus (JSONL)")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", o.out, "Output model directory")->required();
  tr->add_option("--seed", o.seed, "Root seed")->capture_default_str();
  tr->add_option("--epochs", o.train.epochs, "Epochs")->capture_default_str();
  tr->add_option("--batch-size", o.train.batch_size, "Batch size")->capture_default_str();
  tr->add_option("--lr-enc", o.train.lr_encoder_and_disc, "Learning rate of the semantic encoder and discriminator")
      ->capture_default_str();
  tr->add_option("--lr-rest", o.train.lr_rest, "Learning rate of the syntactic encoder and decoder")->capture_default_str();
  tr->add_option("--lambda-adv", o.train.lambda_adv, "Adversarial loss weight")->capture_default_str();
  tr->add_option("--word-dropout", o.train.word_dropout_p, "Word dropout probability")->capture_default_str();
  tr->add_option("--mode", o.mode, "Training mode")
      ->check(CLI::IsMember({"full", "no-adv", "no-adv-no-syntax"}))
      ->capture_default_str();
  tr->add_flag("--resume", o.resume, "Continue from the state saved in --out");
  add_model_flags(tr, o);

  auto* emb = app.add_subcommand("embed", "Write sentence embeddings, one TSV row per input line");
  add_model_input(emb, o);
  emb->add_option("--data", o.data, "Text file, one sentence per line")->required()->check(CLI::ExistingFile);
  emb->add_option("--out", o.out, "Output TSV")->required();
  emb->add_option("--seed", o.seed, "Recorded in the manifest")->capture_default_str();

  auto* sts = app.add_subcommand("eval-sts", "Pearson r between cosine similarity and gold scores");
  add_model_input(sts, o);
  sts->add_option("--data", o.data, "STS TSV file(s); several files report the unweighted mean")
      ->required()
      ->check(CLI::ExistingFile);
  sts->add_option("--out", o.out, "Report path (default <model>/eval-sts_report.json)");
  sts->add_option("--seed", o.seed, "Recorded in the report")->capture_default_str();

  auto* pr = app.add_subcommand("probe", "Train an MLP probe on frozen sentence embeddings");
  add_model_input(pr, o);
  pr->add_option("--data", o.data, "Probing TSV (split, label, sentence)")->required()->check(CLI::ExistingFile);
  pr->add_option("--hidden", o.hidden, "Hidden units")->capture_default_str();
  pr->add_option("--epochs", o.probe_epochs, "Probe training epochs")->capture_default_str();
  pr->add_option("--seed", o.seed, "Probe seed")->capture_default_str();
  pr->add_option("--out", o.out, "Report path (default <model>/probe_report.json)");

  auto* qs = app.add_subcommand("qqp-split", "Split labeled pairs into easy and hard evaluation files");
  qs->add_option("--pairs", o.pairs, "Labeled pair TSV")->required()->check(CLI::ExistingFile);
  qs->add_option("--n", o.n, "Pairs sampled per class")->required();
  qs->add_option("--seed", o.seed, "Sampling seed")->capture_default_str();
  qs->add_option("--out", o.out, "Output directory")->required();
  qs->add_flag("--multiset", o.multiset, "Compare top-level constituents as multisets");

  auto* qe = app.add_subcommand("qqp-eval", "Paraphrase detection accuracy with the best cosine threshold");
  add_model_input(qe, o);
  qe->add_option("--data", o.data, "Labeled pair TSV file(s)")->required()->check(CLI::ExistingFile);
  qe->add_option("--out", o.out, "Report path (default <model>/qqp-eval_report.json)");
  qe->add_option("--seed", o.seed, "Recorded in the report")->capture_default_str();

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks of every op and the composite loss");
  gc->add_option("--seed", o.seed, "First seed")->capture_default_str();
  gc->add_option("--n", o.grad_seeds, "Number of seeds")->capture_default_str();
  gc->add_option("--out", o.out, "Optional JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_synth(o, cmd);
    if (*tr) return cmd_train(o, cmd);
    if (*emb) return cmd_embed(o, cmd);
    if (*sts) return cmd_eval_sts(o, cmd);
    if (*pr) return cmd_probe(o, cmd);
    if (*qs) return cmd_qqp_split(o, cmd);
    if (*qe) return cmd_qqp_eval(o, cmd);
    if (*gc) return cmd_grad_check(o, cmd);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

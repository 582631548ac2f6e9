// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Long-running (about 20 minutes on one core).
//
//   acceptance                        run everything
//   acceptance --report FILE          run everything, also write the lines to FILE, exit 0
//   acceptance --check N FILE         exit 0 iff FILE records criterion N as PASS

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "parabart/parabart.hpp"
#include "partition_audit.hpp"

using namespace parabart;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& why) {
    if (!ok) {
      pass = false;
      detail << " [violated: " << why << "]";
    }
  }
};

int failures = 0;
std::ofstream report_file;

void report(int id, const std::string& title, Verdict& v) {
  if (!v.pass) ++failures;
  std::ostringstream line;
  line << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << title << ":" << v.detail.str();
  std::cout << line.str() << std::endl;
  if (report_file.is_open()) report_file << line.str() << std::endl;
}

int check_report(const std::string& id, const std::string& path) {
  std::ifstream in(path);
  const std::string prefix = "criterion " + id + " ";
  for (std::string line; std::getline(in, line);) {
    if (line.rfind(prefix, 0) == 0) {
      std::cout << line << std::endl;
      return line.compare(prefix.size(), 4, "PASS") == 0 ? 0 : 1;
    }
  }
  std::cout << "criterion " << id << " FAIL  no result recorded in " << path << std::endl;
  return 1;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  Verdict v;
  const auto start = Clock::now();
  double worst_op = 0.0, worst_composite = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (const auto& c : op_gradient_cases(seed)) {
      worst_op = std::max(worst_op, c.report.max_rel_error);
      checked += c.report.checked;
      v.require(c.report.passed(), c.name + " seed " + std::to_string(seed) + " " + c.report.failure);
    }
    const auto c = composite_gradient_case(seed);
    worst_composite = std::max(worst_composite, c.report.max_rel_error);
    checked += c.report.checked;
    v.require(c.report.passed(), "composite seed " + std::to_string(seed) + " " + c.report.failure);
  }
  const double elapsed = seconds_since(start);
  v.require(worst_op < 1e-5, "op error >= 1e-5");
  v.require(worst_composite < 1e-4, "composite error >= 1e-4");
  v.require(elapsed < 60.0, "runtime >= 60 s");
  v.detail << " 10 seeds, " << checked << " partials, max rel err ops " << worst_op << " composite "
           << worst_composite << ", " << elapsed << " s";
  report(1, "gradient suite", v);
}

void oracle_suite() {
  Verdict v;
  for (const auto& r : check::run_oracles(2024, 200)) {
    v.detail << " " << r.name << " " << r.instances - r.failures << "/" << r.instances;
    v.require(r.instances >= 100, r.name + " has fewer than 100 instances");
    v.require(r.failures == 0, r.name + ": " + r.first_failure);
  }
  report(2, "exact-oracle suite", v);
}

void worked_example() {
  Verdict v;
  const std::string expected = "(S (NP (DT) (NN)) (VP (VBZ) (ADJP)) (.))";
  const auto tree = parse_ptb("(S (NP (DT This) (NN book)) (VP (VBZ is) (ADJP good)) (. .))");
  std::string spaced;
  for (char c : expected) {
    if (c == '(' || c == ')') spaced += std::string(" ") + c + " ";
    else spaced += c;
  }
  std::vector<std::string> expected_tokens;
  std::istringstream in(spaced);
  for (std::string tok; in >> tok;) expected_tokens.push_back(tok);
  const auto tokens = linearize(tree);
  v.require(tokens == expected_tokens, "linearization differs: " + join_tokens(tokens));
  v.require(to_bracketed(tree) == expected, "bracketed form differs: " + to_bracketed(tree));

  const TagSet tags = TagSet::from_trees({tree});
  const auto bow = tag_bow_vector(tree, tags);
  v.require(bow.size() == 8, "tagset size " + std::to_string(bow.size()));
  for (float w : bow) v.require(w == 0.125f, "bow weight " + std::to_string(w));
  const auto top = top_level_constituents(tree);
  v.require(top == std::vector<std::string>{"NP", "VP", "."}, "top level " + join_tokens(top));
  v.detail << " " << tokens.size() << " tokens, bow " << bow.size() << "x0.125, top-level [" << join_tokens(top) << "]";
  report(3, "example fidelity", v);
}

// ---------------------------------------------------------------------------

struct ModeRun {
  double probe = 0.0;
  double retrieval = 0.0;
};

/// Held-out material for the probing and retrieval measurements.
struct HeldOut {
  ProbeData probe;
  std::vector<std::string> sentences, queries, candidates;
};

HeldOut make_held_out() {
  HeldOut h;
  const auto held = gen_synthetic({1000, 120, 6, 1007});
  for (const auto& p : held) {
    h.sentences.push_back(p.sent1);
    h.probe.labels.push_back(*p.template_id1);
    h.sentences.push_back(p.sent2);
    h.probe.labels.push_back(*p.template_id2);
  }
  for (std::size_t i = 0; i < h.sentences.size(); ++i)
    h.probe.splits.push_back(i % 10 < 8 ? Split::Train : i % 10 == 8 ? Split::Valid : Split::Test);
  for (std::size_t i = 0; i < 200; ++i) {
    h.queries.push_back(held[i].sent1);
    h.candidates.push_back(held[i].sent2);
  }
  return h;
}

ModeRun measure(const TrainResult& r, const HeldOut& h) {
  ParaBart<float> model(r.bundle.config, 0);
  model.load_state(r.final_state);
  ProbeData data = h.probe;
  data.features = embed_sentences(model, r.bundle.vocab, h.sentences);
  ModeRun out;
  out.probe = probe(data, ProbeOptions{}, "template").test_accuracy;
  out.retrieval = retrieval_top1(embed_sentences(model, r.bundle.vocab, h.queries),
                                 embed_sentences(model, r.bundle.vocab, h.candidates));
  return out;
}

TrainResult train_mode(const std::vector<ParaphrasePair>& corpus, TrainMode mode, std::uint64_t seed) {
  TrainConfig tc;
  tc.mode = mode;
  tc.seed = seed;
  return train(corpus, ModelConfig{}, tc);
}

TrainResult smoke_training(const std::vector<ParaphrasePair>& corpus) {
  Verdict v;
  std::set<int> templates;
  for (const auto& p : corpus) templates.insert(*p.template_id1), templates.insert(*p.template_id2);
  const auto start = Clock::now();
  auto first = train_mode(corpus, TrainMode::Full, 1);
  const double elapsed = seconds_since(start);
  const auto second = train_mode(corpus, TrainMode::Full, 1);
  const double v0 = first.log.val_para.front(), v_end = first.log.val_para.back();
  bool identical = encode_pbt1(first.final_state) == encode_pbt1(second.final_state) &&
                   first.log.val_para == second.log.val_para && first.log.steps.size() == second.log.steps.size();
  for (std::size_t i = 0; identical && i < first.log.steps.size(); ++i)
    identical = first.log.steps[i].l_para == second.log.steps[i].l_para &&
                first.log.steps[i].l_adv == second.log.steps[i].l_adv;
  v.require(corpus.size() == 2000, "corpus size");
  v.require(templates.size() >= 4, "fewer than 4 templates");
  v.require(first.bundle.vocab.size() <= 200, "vocab > 200");
  v.require(num_threads() == 1, "more than one thread");
  v.require(elapsed < 900.0, "training took >= 15 min");
  v.require(v_end <= 0.5 * v0, "validation L_para above 50% of epoch 0");
  v.require(identical, "rerun differs");
  v.detail << " " << corpus.size() << " pairs, " << templates.size() << " templates, vocab "
           << first.bundle.vocab.size() << ", 10 epochs in " << elapsed << " s, val L_para " << v0 << " -> " << v_end
           << " (ratio " << v_end / v0 << "), rerun " << (identical ? "bitwise identical" : "DIFFERENT");
  report(4, "smoke training", v);
  return first;
}

void mode_trends(const std::vector<ParaphrasePair>& corpus, const TrainResult& full_seed1) {
  const HeldOut held = make_held_out();
  const std::vector<std::pair<std::string, TrainMode>> modes{
      {"full", TrainMode::Full}, {"no-adv", TrainMode::NoAdv}, {"no-adv-no-syntax", TrainMode::NoAdvNoSyntax}};
  std::map<std::string, std::vector<double>> probes, retrievals;
  for (const auto& [name, mode] : modes) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto run = mode == TrainMode::Full && seed == 1 ? measure(full_seed1, held)
                                                             : measure(train_mode(corpus, mode, seed), held);
      probes[name].push_back(run.probe);
      retrievals[name].push_back(run.retrieval);
      std::cout << "  " << name << " seed " << seed << ": probe " << run.probe << ", retrieval " << run.retrieval
                << std::endl;
    }
  }
  const double pf = median(probes["full"]), pa = median(probes["no-adv"]), pn = median(probes["no-adv-no-syntax"]);
  Verdict five;
  five.require(pf <= pa, "full > no-adv");
  five.require(pa <= pn, "no-adv > no-adv-no-syntax");
  five.require(pn - pf >= 0.05, "full less than 5 points below no-adv-no-syntax");
  five.detail << " median template-probe accuracy full " << pf << " <= no-adv " << pa << " <= no-adv-no-syntax " << pn
              << ", gap " << 100.0 * (pn - pf) << " points";
  report(5, "syntactic probing trend", five);

  const double rf = median(retrievals["full"]), rn = median(retrievals["no-adv-no-syntax"]);
  const double baseline = 5.0 / 200.0;
  Verdict six;
  six.require(rf >= rn, "full below no-adv-no-syntax");
  six.require(rf >= baseline && rn >= baseline, "below 5x random baseline");
  six.detail << " median top-1 retrieval full " << rf << " vs no-adv-no-syntax " << rn << " (no-adv "
             << median(retrievals["no-adv"]) << "), 5x random = " << baseline;
  report(6, "paraphrase retrieval trend", six);
}

void easy_hard_protocol(const TrainResult& trained) {
  Verdict v;
  const auto pool = labeled_pool(gen_synthetic({1000, 120, 6, 2007}), 3);
  const std::size_t n = 200;
  const auto split = split_easy_hard(pool, n, 11);
  std::size_t positives = 0;
  for (const auto& p : pool) positives += p.label == 1;
  v.require(split.easy_pool + split.hard_pool == positives, "pools do not cover the positives");

  std::set<std::string> easy_pos, hard_pos;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = split.easy[i];
    const auto& h = split.hard[i];
    v.require(e.label == 1 && h.label == 1, "positive slot holds a negative");
    v.require(same_top_level(parse_ptb(e.parse1), parse_ptb(e.parse2)), "easy positive with differing top level");
    v.require(!same_top_level(parse_ptb(h.parse1), parse_ptb(h.parse2)), "hard positive with matching top level");
    easy_pos.insert(to_tsv_line(e));
    hard_pos.insert(to_tsv_line(h));
  }
  for (const auto& line : easy_pos) v.require(hard_pos.count(line) == 0, "positive in both files");

  const auto dir = fs::temp_directory_path() / "parabart_acceptance_qqp";
  fs::create_directories(dir);
  write_pair_tsv((dir / "easy.tsv").string(), split.easy);
  write_pair_tsv((dir / "hard.tsv").string(), split.hard);
  auto negatives_bytes = [&](const std::string& file) {
    std::istringstream in(read_file((dir / file).string()));
    std::string line, out;
    for (std::size_t i = 0; std::getline(in, line); ++i)
      if (i >= n) out += line + "\n";
    return out;
  };
  const auto easy_neg = negatives_bytes("easy.tsv");
  v.require(!easy_neg.empty() && easy_neg == negatives_bytes("hard.tsv"), "negatives differ between files");

  ParaBart<float> model(trained.bundle.config, 0);
  model.load_state(trained.final_state);
  std::ostringstream acc;
  for (const char* file : {"easy.tsv", "hard.tsv"}) {
    std::vector<Diagnostic> problems;
    const auto rows = read_pair_tsv((dir / file).string(), problems);
    v.require(problems.empty() && rows.size() == 2 * n, std::string(file) + " did not read back");
    std::vector<float> scores;
    const auto got = pair_eval(model, trained.bundle.vocab, rows, &scores);
    std::vector<int> labels;
    for (const auto& r : rows) labels.push_back(r.label);
    const auto want = check::threshold_oracle(scores, labels);
    v.require(got.accuracy == want.accuracy && got.threshold == want.threshold,
              std::string("threshold search differs from brute force on ") + file);
    acc << " " << file << " acc " << got.accuracy << " @ t=" << got.threshold << " (oracle " << want.accuracy << ")";
  }
  fs::remove_all(dir);
  v.detail << " pools easy " << split.easy_pool << " hard " << split.hard_pool << " neg " << split.negative_pool
           << ", " << n << " per class, shared negatives byte-identical;" << acc.str();
  report(7, "easy/hard protocol", v);
}

void parameter_partition(const std::vector<ParaphrasePair>& corpus) {
  Verdict v;
  const auto vocab = build_vocab(corpus, 1);
  std::vector<ParseTree> trees;
  for (const auto& p : corpus) trees.push_back(parse_ptb(p.parse1)), trees.push_back(parse_ptb(p.parse2));
  const TagSet tags = TagSet::from_trees(trees);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.tagset_size = tags.size();
  const auto prepared = prepare_pairs(corpus, vocab, tags, mc);
  ParaBart<float> model(mc, 1);
  const TrainConfig tc;
  Trainer<float> trainer(model, tc);
  const auto audit = check::audit_partition(model, trainer, prepared.pairs, 100, tc.batch_size);
  v.require(audit.steps == 100 && audit.inner_updates == 100 && audit.outer_updates == 100, "update count");
  v.require(audit.violations.empty(), audit.violations.empty() ? "" : audit.violations.front());
  v.detail << " " << audit.steps << " steps, " << audit.inner_updates << " inner + " << audit.outer_updates
           << " outer updates audited over " << model.params().entries().size() << " tensors, "
           << audit.violations.size() << " violations";
  report(8, "parameter partition", v);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  if (args.size() == 3 && args[0] == "--check") return check_report(args[1], args[2]);
  const bool to_file = args.size() == 2 && args[0] == "--report";
  if (!args.empty() && !to_file) {
    std::cerr << "usage: acceptance [--report FILE | --check N FILE]" << std::endl;
    return 2;
  }
  if (to_file) {
    report_file.open(args[1], std::ios::trunc);
    if (!report_file) {
      std::cerr << "cannot write " << args[1] << std::endl;
      return 2;
    }
  }
  set_num_threads(1);
  gradient_suite();
  oracle_suite();
  worked_example();
  const auto corpus = gen_synthetic({2000, 120, 6, 7});
  const auto full_seed1 = smoke_training(corpus);
  mode_trends(corpus, full_seed1);
  easy_hard_protocol(full_seed1);
  parameter_partition(corpus);
  std::cout << (failures == 0 ? "all criteria PASS" : std::to_string(failures) + " criteria FAIL") << std::endl;
  return failures == 0 || to_file ? 0 : 1;
}

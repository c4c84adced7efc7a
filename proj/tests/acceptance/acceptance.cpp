// Acceptance checks. Each criterion prints one line:
//   criterion <n> PASS|FAIL <name>: <detail> (<seconds> s)
// and the exit status is non-zero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "daptkit/cli.hpp"
#include "daptkit/corpus.hpp"
#include "daptkit/eval.hpp"
#include "daptkit/mlm_data.hpp"
#include "daptkit/model.hpp"
#include "daptkit/rng.hpp"
#include "daptkit/tokenizer.hpp"
#include "daptkit/trainer.hpp"
#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace daptkit;
using tokenizer::TokenId;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string name;
  double budget_seconds;  // 0 means no limit
  std::function<Outcome()> run;
};

std::string fmt(const char* pattern, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, value);
  return buf;
}

// ---------------------------------------------------------------------------
// 1

Outcome split_rows() {
  struct Row {
    std::size_t n;
    eval::SplitSizes expected;
  };
  const Row rows[] = {{13722, {9879, 1098, 2745}}, {141186, {101653, 11295, 28238}}, {269230, {193845, 21539, 53846}}};
  Outcome o{true, ""};
  for (const auto& r : rows) {
    const auto parts = eval::split(r.n, eval::SplitSpec{});
    const eval::SplitSizes got{parts.train.size(), parts.validate.size(), parts.test.size()};
    const bool ok = got == r.expected && eval::split_sizes(r.n, eval::SplitSpec{}) == r.expected;
    o.pass = o.pass && ok;
    o.detail += std::to_string(r.n) + " -> " + std::to_string(got.train) + "/" + std::to_string(got.validate) + "/" +
                std::to_string(got.test) + (ok ? "" : " (wrong)") + (r.n == 269230 ? "" : "; ");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2

Outcome table_deltas() {
  const auto fx = eval::load_results_fixture(testing::fixture_dir() / "results_table.json");
  const auto deltas = eval::compute_deltas(fx.report);
  double worst = 0.0;
  std::size_t compared = 0;
  bool all_found = true;
  for (const auto& pub : fx.published_deltas) {
    const eval::DeltaRow* mine = nullptr;
    for (const auto& d : deltas) {
      if (d.name == pub.name && d.vocab == pub.vocab) mine = &d;
    }
    if (mine == nullptr) {
      all_found = false;
      continue;
    }
    for (const auto& [metric, value] : pub.values) {
      worst = std::max(worst, std::abs(mine->values.at(metric) - value) * 100.0);
      ++compared;
    }
  }
  return {all_found && compared > 0 && worst <= 0.01 + 1e-9,
          std::to_string(compared) + " delta cells, worst deviation " + fmt("%.4f", worst) + " points"};
}

// ---------------------------------------------------------------------------
// 3

Outcome gradients() {
  const model::ModelConfig configs[] = {testing::tiny(11, 8, 1, 2, 6), testing::tiny(13, 8, 2, 4, 5),
                                        testing::tiny(9, 12, 1, 3, 4), testing::tiny(10, 8, 1, 1, 5)};
  double worst = 0.0;
  std::uint64_t seed = 1;
  for (const auto& c : configs) {
    const auto e = testing::gradient_errors(c, seed++);
    worst = std::max({worst, e.mlm, e.classify});
  }
  return {worst < 1e-4, "worst relative error " + fmt("%.2e", worst) + " over 4 configurations, both heads"};
}

// ---------------------------------------------------------------------------
// 4

Outcome tokenizer_oracle() {
  Rng rng(2024);
  int matched = 0;
  std::size_t max_merges = 0;
  std::vector<std::vector<std::string>> vocabs;
  for (int trial = 0; trial < 20; ++trial) {
    std::string text;
    const auto letters = 3 + rng.uniform_index(4);
    while (true) {
      std::string word;
      const auto len = 1 + rng.uniform_index(6);
      for (std::uint64_t i = 0; i < len; ++i) word += static_cast<char>('a' + rng.uniform_index(letters));
      if (text.size() + word.size() + 1 > 200) break;
      text += word + ' ';
    }
    const std::vector<corpus::Document> docs = {{"d", "s", text}};
    const auto wc = tokenizer::count_words(docs);
    const std::size_t budget = tokenizer::kNumSpecial + tokenizer::alphabet(wc).size() + 10;
    const auto r = tokenizer::train_vocabulary(docs, {budget, 2});
    const auto sim = oracle::simulate_wordpiece(wc, budget);
    bool same = r.vocab.tokens() == sim.tokens && r.merges.size() == sim.merges.size();
    for (std::size_t i = 0; same && i < sim.merges.size(); ++i) {
      same = r.merges[i].left == sim.merges[i].left && r.merges[i].right == sim.merges[i].right &&
             r.merges[i].pair_count == sim.merges[i].count;
    }
    matched += same ? 1 : 0;
    max_merges = std::max(max_merges, r.merges.size());
    vocabs.push_back(r.vocab.tokens());
  }

  int greedy_ok = 0;
  const int encodings = 10000;
  for (int i = 0; i < encodings; ++i) {
    const auto& tokens = vocabs[static_cast<std::size_t>(i) % vocabs.size()];
    const auto vocab = tokenizer::Vocabulary::from_tokens(tokens);
    std::string word;
    const auto len = 1 + rng.uniform_index(10);
    for (std::uint64_t k = 0; k < len; ++k) word += static_cast<char>('a' + rng.uniform_index(7));
    std::vector<TokenId> ids;
    tokenizer::encode_word(word, vocab, ids);
    std::vector<std::string> pieces;
    for (auto id : ids) pieces.push_back(vocab.token(id));
    greedy_ok += pieces == oracle::greedy_segment(word, tokens) ? 1 : 0;
  }
  return {matched == 20 && max_merges <= 10 && greedy_ok == encodings,
          std::to_string(matched) + "/20 corpora match the simulator (at most " + std::to_string(max_merges) +
              " merges), " + std::to_string(greedy_ok) + "/" + std::to_string(encodings) + " greedy encodings"};
}

// ---------------------------------------------------------------------------
// 5

Outcome masking_statistics() {
  std::vector<std::string> tokens(tokenizer::kSpecialTokens.begin(), tokenizer::kSpecialTokens.end());
  for (int i = 0; i < 60; ++i) tokens.push_back("w" + std::to_string(i));
  const auto vocab = tokenizer::Vocabulary::from_tokens(tokens);

  // Segments sprinkled with special ids so the exclusion is exercised.
  Rng rng(5);
  std::vector<mlm::Segment> segments;
  std::int64_t maskable = 0;
  while (maskable < 120000) {
    mlm::Segment seg = {tokenizer::kClsId};
    for (int i = 1; i < 128; ++i) {
      TokenId id = static_cast<TokenId>(tokenizer::kNumSpecial + rng.uniform_index(60));
      if (rng.uniform() < 0.05) id = static_cast<TokenId>(rng.uniform_index(tokenizer::kNumSpecial));
      seg.push_back(id);
      if (!tokenizer::is_special(id)) ++maskable;
    }
    segments.push_back(std::move(seg));
  }
  mlm::MaskingConfig cfg;
  cfg.max_seq = 128;
  const auto examples = mlm::mask_segments(segments, vocab, cfg, 17);

  std::int64_t selected = 0, as_mask = 0, special_violations = 0;
  for (std::size_t s = 0; s < examples.size(); ++s) {
    const auto& ex = examples[s];
    const std::set<std::int32_t> picked(ex.mask_positions.begin(), ex.mask_positions.end());
    for (std::size_t i = 0; i < segments[s].size(); ++i) {
      const TokenId original = segments[s][i];
      const bool is_picked = picked.count(static_cast<std::int32_t>(i)) > 0;
      if (tokenizer::is_special(original) && (is_picked || ex.input_ids[i] != original)) ++special_violations;
    }
    selected += static_cast<std::int64_t>(ex.mask_positions.size());
    for (auto p : ex.mask_positions) as_mask += ex.input_ids[static_cast<std::size_t>(p)] == tokenizer::kMaskId;
  }
  const double n = static_cast<double>(maskable);
  const double rate = static_cast<double>(selected) / n;
  const double se = std::sqrt(0.15 * 0.85 / n);
  const double mask_share = static_cast<double>(as_mask) / static_cast<double>(selected);
  const double mask_se = std::sqrt(0.8 * 0.2 / static_cast<double>(selected));
  const bool pass = std::abs(rate - 0.15) <= 3 * se && special_violations == 0 && std::abs(mask_share - 0.8) <= 3 * mask_se;
  return {pass, std::to_string(maskable) + " maskable positions, rate " + fmt("%.5f", rate) + " (" +
                    fmt("%.2f", (rate - 0.15) / se) + " SE), [MASK] share " + fmt("%.4f", mask_share) + ", " +
                    std::to_string(special_violations) + " special positions touched"};
}

// ---------------------------------------------------------------------------
// 6

Outcome metric_oracles() {
  Rng rng(606);
  double worst_auc = 0.0, worst_f1 = 0.0, worst_acc = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 2 + rng.uniform_index(300);
    const int k = 2 + static_cast<int>(rng.uniform_index(5));
    std::vector<double> scores(n);
    std::vector<std::int32_t> labels(n), preds(n), gold(n);
    // Coarse scores force plenty of ties.
    const auto levels = 2 + rng.uniform_index(30);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng.uniform_index(levels)) / static_cast<double>(levels);
      labels[i] = static_cast<std::int32_t>(rng.uniform_index(2));
      preds[i] = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
      gold[i] = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
    }
    labels[0] = 0;
    labels[1] = 1;
    const double auc = eval::auc_binary(scores, labels);
    worst_auc = std::max({worst_auc, std::abs(auc - oracle::auc_pairs(scores, labels)),
                          std::abs(auc - oracle::auc_trapezoid(scores, labels))});
    worst_f1 = std::max(worst_f1, std::abs(eval::f1_macro(preds, gold, k) - oracle::f1_macro(preds, gold, k)));
    worst_acc = std::max(worst_acc, std::abs(eval::accuracy(preds, gold) - oracle::accuracy(preds, gold, k)));
  }
  return {worst_auc <= 1e-12 && worst_f1 <= 1e-12 && worst_acc <= 1e-12,
          "100 instances, worst |diff| auc " + fmt("%.1e", worst_auc) + ", f1 " + fmt("%.1e", worst_f1) +
              ", accuracy " + fmt("%.1e", worst_acc)};
}

// ---------------------------------------------------------------------------
// 7

Outcome training_sanity() {
  // The two topics of the toy task keep the corpus under 1,000 tokens.
  const auto domain_dir = testing::fixture_dir() / "toy" / "domain";
  const std::vector<std::filesystem::path> inputs = {domain_dir / "fractions.txt", domain_dir / "geometry.txt"};
  const auto docs = corpus::ingest(inputs, "domain");
  const auto vocab = tokenizer::train_vocabulary(docs, {200, 2}).vocab;
  const auto segments = mlm::pack_sequences(docs, vocab, 64);
  std::int64_t token_count = 0;
  for (const auto& s : segments) token_count += static_cast<std::int64_t>(s.size()) - 1;  // without [CLS]

  mlm::MaskingConfig masking;
  masking.max_seq = 64;
  const auto examples = mlm::mask_segments(segments, vocab, masking, 7);

  model::ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.max_seq = 64;
  cfg.hidden_dim = 64;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  cfg.ffn_dim = 128;
  cfg.num_labels = 2;
  cfg.dropout_rate = 0.0;
  trainer::TrainPlan plan;
  plan.learning_rate = 2e-3;
  plan.batch_size = 8;
  plan.max_steps = 2000;
  plan.max_seq = 64;
  plan.seed = 11;
  const auto pre = trainer::pretrain(model::init_model(cfg, 11), examples, plan);
  const double mlm_acc = trainer::mlm_accuracy(pre.state, examples);

  // Separable task: the label is the topic of the sentence.
  const auto task = mlm::read_labeled_table(testing::fixture_dir() / "toy" / "task.csv");
  eval::SplitSpec split_spec;
  split_spec.train_frac = 0.6;
  split_spec.validate_frac = 0.25;
  split_spec.test_frac = 0.15;
  split_spec.seed = 3;
  const auto split = eval::split_dataset(task.examples, split_spec);
  const auto train = mlm::build_classify_examples(split.train, vocab, 64, task.num_labels());
  const auto validate = mlm::build_classify_examples(split.validate, vocab, 64, task.num_labels());
  trainer::TrainPlan ft;
  ft.strategy = trainer::Strategy::kBase;
  ft.learning_rate = 2e-3;
  ft.batch_size = 4;
  ft.epochs = 5;
  ft.max_seq = 64;
  // Fine-tuning starts from a fresh model and must reach 1.0 for every seed.
  std::vector<double> val_acc;
  for (std::uint64_t seed : {3, 4, 5}) {
    ft.seed = seed;
    const auto initial = model::with_classifier(model::init_model(cfg, seed), task.num_labels(), seed);
    val_acc.push_back(trainer::finetune(initial, train, validate, ft).best_validation_accuracy);
  }
  const double worst_val = *std::min_element(val_acc.begin(), val_acc.end());

  const bool pass = token_count <= 1000 && vocab.size() <= 200 && mlm_acc >= 0.95 && worst_val == 1.0;
  return {pass, std::to_string(token_count) + " tokens, vocab " + std::to_string(vocab.size()) +
                    ", masked accuracy " + fmt("%.4f", mlm_acc) +
                    " after 2000 steps, lowest validation accuracy over 3 fine-tuning seeds " + fmt("%.3f", worst_val) +
                    " on " + std::to_string(validate.size()) + " examples"};
}

// ---------------------------------------------------------------------------
// 8

// Two topics, each with its own pool of made-up words; function words are
// shared. Domain text places topic words together, so masked-LM training can
// group words by topic, including words the task training split never shows.
struct TopicWorld {
  std::vector<std::vector<std::string>> pools;
  std::vector<std::string> fillers = {"the", "of", "and", "to", "in", "is"};

  explicit TopicWorld(std::uint64_t seed, int per_topic) : pools(2) {
    Rng rng(seed);
    std::set<std::string> used(fillers.begin(), fillers.end());
    for (auto& pool : pools) {
      while (static_cast<int>(pool.size()) < per_topic) {
        std::string w;
        const auto len = 4 + rng.uniform_index(3);
        for (std::uint64_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng.uniform_index(26));
        if (used.insert(w).second) pool.push_back(w);
      }
    }
  }

  std::string sentence(Rng& rng, std::size_t topic, int content_words) const {
    std::string s;
    for (int i = 0; i < content_words; ++i) {
      if (!s.empty()) s += ' ';
      if (i % 2 == 1) s += fillers[rng.uniform_index(fillers.size())] + ' ';
      s += pools[topic][rng.uniform_index(pools[topic].size())];
    }
    return s + '.';
  }
};

Outcome directional_dapt() {
  const int per_topic = 150;
  const TopicWorld world(88, per_topic);
  Rng rng(89);
  std::vector<corpus::Document> domain;
  for (int d = 0; d < 3000; ++d) {
    const auto topic = static_cast<std::size_t>(d % 2);
    std::string text;
    for (int s = 0; s < 3; ++s) text += world.sentence(rng, topic, 6) + ' ';
    domain.push_back({"doc" + std::to_string(d), "domain", corpus::normalize(text)});
  }
  eval::TaskSpec task;
  task.task_id = "topic";
  task.metrics = {"accu", "auc"};
  task.data.label_names = {"0", "1"};
  // Two content words per example, so many test words never occur in the
  // task's training split.
  for (int i = 0; i < 200; ++i) {
    const auto topic = static_cast<std::size_t>(rng.uniform_index(2));
    task.data.examples.push_back({world.sentence(rng, topic, 2), static_cast<std::int32_t>(topic)});
  }

  const auto vocab = tokenizer::train_vocabulary(domain, {4 * per_topic + 300, 2}).vocab;
  model::ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.max_seq = 32;
  cfg.hidden_dim = 32;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.ffn_dim = 64;
  cfg.num_labels = 2;
  cfg.dropout_rate = 0.1;

  mlm::MaskingConfig masking;
  masking.max_seq = 32;
  const auto segments = mlm::pack_sequences(domain, vocab, 32);
  const auto examples = mlm::mask_segments(segments, vocab, masking, 21);
  trainer::TrainPlan plan;
  plan.learning_rate = 2e-3;
  plan.batch_size = 16;
  plan.max_steps = 4000;
  plan.max_seq = 32;
  plan.seed = 21;
  const auto fresh = model::init_model(cfg, 21);
  const auto dapt = trainer::run_strategy(fresh, trainer::Strategy::kDapt, examples, {}, plan);

  auto recipe_for = [&](const model::ModelState& initial) {
    eval::FinetuneRecipe r;
    r.vocab = vocab;
    r.initial = initial;
    r.masking = masking;
    r.finetune_plan.strategy = trainer::Strategy::kBase;
    r.finetune_plan.learning_rate = 1e-3;
    r.finetune_plan.batch_size = 8;
    r.finetune_plan.epochs = 8;
    r.finetune_plan.max_seq = 32;
    return eval::recipe_runner(std::move(r));
  };
  const std::vector<eval::MethodSpec> methods = {{"base", "orig", recipe_for(fresh)},
                                                 {"dapt", "orig", recipe_for(dapt.state)}};
  const std::vector<eval::TaskSpec> tasks = {task};
  eval::ProtocolOptions opts;
  const auto report = eval::run_protocol(tasks, methods, opts);
  std::cout << eval::render_markdown(report);

  const auto& b = report.find("base", "orig")->metrics.at("topic_accu");
  const auto& d = report.find("dapt", "orig")->metrics.at("topic_accu");
  const double k = static_cast<double>(opts.seeds.size());
  const double se = std::sqrt((b.std * b.std + d.std * d.std) / k);
  const bool pass = d.mean >= b.mean || b.mean - d.mean <= 2 * se;
  return {pass, "mean test accuracy over " + std::to_string(opts.seeds.size()) + " seeds: dapt " + fmt("%.4f", d.mean) +
                    ", base " + fmt("%.4f", b.mean) + ", difference " + fmt("%+.4f", d.mean - b.mean) +
                    " (standard error " + fmt("%.4f", se) + ")"};
}

// ---------------------------------------------------------------------------
// 9

Outcome determinism() {
  testing::TempDir dir("daptkit-accept");
  const auto toy = testing::fixture_dir() / "toy";
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  testing::write_file(dir / "protocol.json", R"({
  "tasks": [{"id": "kt", "data": ")" + (toy / "task.csv").string() + R"(", "metrics": ["auc", "accu"]}],
  "methods": [{"method": "base", "vocab": "orig", "vocab_file": "vocab.txt"},
              {"method": "dapt", "vocab": "orig", "vocab_file": "vocab.txt", "init": "dapt.ckpt"},
              {"method": "dapt_tapt", "vocab": "orig", "vocab_file": "vocab.txt", "init": "dapt.ckpt"}],
  "model": {"max_seq": 32, "hidden_dim": 16, "num_layers": 1, "num_heads": 2, "ffn_dim": 32},
  "seeds": [1, 2],
  "tapt_plan": {"strategy": "tapt", "max_steps": 10, "batch_size": 8, "learning_rate": 0.001},
  "finetune_plan": {"strategy": "base", "epochs": 2, "batch_size": 8, "learning_rate": 0.001}
})");
  const std::vector<std::vector<std::string>> steps = {
      {"ingest", (toy / "domain").string(), "--source", "domain", "--out", p("docs.jsonl")},
      {"train-vocab", p("docs.jsonl"), "--budget", "120", "--out", p("vocab.txt"), "--merges", p("merges.jsonl")},
      {"pack", p("docs.jsonl"), "--vocab", p("vocab.txt"), "--max-seq", "32", "--out", p("seg.jsonl")},
      {"mask", "--segments", p("seg.jsonl"), "--vocab", p("vocab.txt"), "--seed", "3", "--out", p("mlm.jsonl")},
      {"pretrain", "--examples", p("mlm.jsonl"), "--vocab", p("vocab.txt"), "--max-seq", "32", "--hidden-dim", "16",
       "--num-layers", "1", "--num-heads", "2", "--ffn-dim", "32", "--max-steps", "30", "--batch-size", "8",
       "--learning-rate", "0.001", "--seed", "1", "--out", p("dapt.ckpt"), "--log", p("dapt.log"),
       "--checkpoint-dir", p("ckpts")},
      {"finetune", "--data", (toy / "task.csv").string(), "--vocab", p("vocab.txt"), "--init", p("dapt.ckpt"),
       "--epochs", "2", "--batch-size", "8", "--learning-rate", "0.001", "--seed", "2", "--out", p("ft.ckpt"), "--log",
       p("ft.log")},
      {"evaluate", "--protocol", p("protocol.json"), "--seed", "4", "--out", p("report.json"), "--markdown",
       p("report.md")},
      {"report", "--input", p("report.json"), "--out", p("report2.md")},
  };
  std::map<std::string, std::string> first;
  std::size_t differing = 0;
  for (int round = 0; round < 2; ++round) {
    for (const auto& s : steps) {
      std::ostringstream out, err;
      if (cli::run(s, out, err) != cli::kExitOk) return {false, s[0] + " failed: " + err.str()};
    }
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir.path())) {
      if (!entry.is_regular_file()) continue;
      const auto name = std::filesystem::relative(entry.path(), dir.path()).string();
      const auto bytes = testing::read_file(entry.path());
      if (round == 0) {
        first[name] = bytes;
      } else if (first.count(name) == 0 || first[name] != bytes) {
        ++differing;
      }
    }
  }
  return {differing == 0 && first.size() >= 12,
          std::to_string(first.size()) + " artifacts compared after two runs, " + std::to_string(differing) +
              " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> selected;
  app.add_option("--criterion", selected, "Run only these criteria (1-9)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "split arithmetic", 1, split_rows},
      {2, "delta report", 1, table_deltas},
      {3, "gradient verification", 60, gradients},
      {4, "tokenizer oracle", 30, tokenizer_oracle},
      {5, "masking statistics", 10, masking_statistics},
      {6, "metric oracles", 10, metric_oracles},
      {7, "training sanity", 300, training_sanity},
      {8, "directional dapt effect", 900, directional_dapt},
      {9, "determinism", 0, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.number) == selected.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && seconds > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.budget_seconds) + " s budget";
    }
    std::cout << "criterion " << c.number << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << c.name << ": " << o.detail
              << " (" << fmt("%.2f", seconds) << " s)" << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}

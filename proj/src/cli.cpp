#include "daptkit/cli.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "daptkit/corpus.hpp"
#include "daptkit/eval.hpp"
#include "daptkit/hash.hpp"
#include "daptkit/mlm_data.hpp"
#include "daptkit/model.hpp"
#include "daptkit/tokenizer.hpp"
#include "daptkit/trainer.hpp"
#include "json.hpp"

namespace daptkit::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kSubcommands = {"ingest",   "stats",   "train-vocab", "compare-vocab", "pack",
                                               "mask",     "pretrain", "finetune",   "evaluate",      "report"};

std::string flag_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::vector<std::string> config_inputs(const json& value) {
  if (value.is_null()) return {};
  if (value.is_string()) return {value.get<std::string>()};
  if (value.is_array()) {
    std::vector<std::string> out;
    for (const auto& v : value) {
      auto part = config_inputs(v);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  return {value.dump()};
}

// A JSON object whose scalar members apply to every subcommand and whose
// object members, keyed by subcommand name, apply to that subcommand only.
// Keys may use '_' or '-'. Section entries win over top-level ones.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(std::vector<std::string> sections) : sections_(std::move(sections)) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("config file: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      if (!value.is_object()) continue;
      if (std::find(sections_.begin(), sections_.end(), key) == sections_.end()) {
        throw ParseError("config file: unknown section '" + key + "'");
      }
      for (const auto& [k, v] : value.items()) items.push_back({{key}, flag_key(k), config_inputs(v)});
    }
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) continue;
      for (const auto& s : sections_) items.push_back({{s}, flag_key(key), config_inputs(value)});
    }
    return items;
  }

 private:
  std::vector<std::string> sections_;
};

std::string env_name(const std::string& flag) {
  std::string out = "DAPTKIT_";
  for (char c : flag) out.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

struct Common {
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool with_seed) {
  if (with_seed) sub->add_option("--seed", c.seed, "Random seed, echoed into output headers");
  sub->add_option("--jobs", c.jobs, "Worker thread cap")->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "Output path");
}

const std::string& require_out(const Common& c) {
  if (c.out.empty()) throw ValidationError("--out is required");
  return c.out;
}

std::string files_hash(const std::vector<fs::path>& files) {
  Fnv1a h;
  for (const auto& f : files) h.update(hash_file(f.string()));
  return h.hex();
}

std::vector<fs::path> to_paths(const std::vector<std::string>& inputs) {
  return {inputs.begin(), inputs.end()};
}

std::vector<corpus::Document> load_documents(const std::vector<fs::path>& files, const std::string& source,
                                             unsigned jobs) {
  corpus::IngestOptions opts;
  opts.jobs = jobs;
  return corpus::ingest(files, source, opts);
}

void emit(std::ostream& out, const json& summary) { out << summary.dump() << '\n'; }

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

// Model dimensions shared by pretrain and finetune when no checkpoint is given.
struct ModelFlags {
  int max_seq = 128;
  int hidden_dim = 128;
  int num_layers = 4;
  int num_heads = 4;
  int ffn_dim = 512;
  double dropout = 0.1;
  CLI::Option* max_seq_opt = nullptr;

  void add(CLI::App* sub) {
    max_seq_opt = sub->add_option("--max-seq", max_seq, "Sequence length in tokens");
    sub->add_option("--hidden-dim", hidden_dim, "Hidden width");
    sub->add_option("--num-layers", num_layers, "Encoder layers");
    sub->add_option("--num-heads", num_heads, "Attention heads");
    sub->add_option("--ffn-dim", ffn_dim, "Feed-forward width");
    sub->add_option("--dropout", dropout, "Dropout rate");
  }

  model::ModelConfig config(std::size_t vocab_size, int seq) const {
    model::ModelConfig c;
    c.vocab_size = static_cast<int>(vocab_size);
    c.max_seq = seq;
    c.hidden_dim = hidden_dim;
    c.num_layers = num_layers;
    c.num_heads = num_heads;
    c.ffn_dim = ffn_dim;
    c.dropout_rate = dropout;
    return c;
  }
};

// Plan fields settable by flag; flags that were given override a --plan file.
struct PlanFlags {
  std::string plan_file;
  std::string strategy;
  double learning_rate = 5e-5;
  int batch_size = 32;
  std::int64_t max_steps = 2000;
  std::int64_t epochs = 5;
  double warmup_fraction = 0.1;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* sub, bool pretraining) {
    opts["plan"] = sub->add_option("--plan", plan_file, "Train plan JSON file");
    if (pretraining) {
      opts["strategy"] = sub->add_option("--strategy", strategy, "dapt, tapt or dapt_plus_tapt");
      opts["max_steps"] = sub->add_option("--max-steps", max_steps, "Optimizer steps");
    } else {
      opts["epochs"] = sub->add_option("--epochs", epochs, "Passes over the training split");
    }
    opts["learning_rate"] = sub->add_option("--learning-rate", learning_rate, "Peak learning rate");
    opts["batch_size"] = sub->add_option("--batch-size", batch_size, "Examples per step");
    opts["warmup_fraction"] = sub->add_option("--warmup-fraction", warmup_fraction, "Share of steps spent warming up");
  }

  bool given(const std::string& name) const {
    const auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }

  trainer::TrainPlan build(bool pretraining, std::uint64_t seed) const {
    trainer::TrainPlan p;
    if (!plan_file.empty()) {
      p = trainer::load_plan(plan_file);
    } else if (pretraining) {
      p.max_steps = max_steps;
    } else {
      p.strategy = trainer::Strategy::kBase;
      p.epochs = epochs;
    }
    if (given("strategy")) p.strategy = trainer::parse_strategy(strategy);
    if (given("learning_rate")) p.learning_rate = learning_rate;
    if (given("batch_size")) p.batch_size = batch_size;
    if (given("warmup_fraction")) p.warmup_fraction = warmup_fraction;
    if (given("max_steps")) {
      p.max_steps = max_steps;
      p.epochs.reset();
    }
    if (given("epochs")) {
      p.epochs = epochs;
      p.max_steps.reset();
    }
    p.seed = seed;
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Subcommands

struct IngestArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string source = "domain";
  bool dedupe = false;
};

void run_ingest(const IngestArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const auto files = corpus::expand_inputs(to_paths(a.inputs));
  corpus::IngestOptions opts;
  opts.dedupe = a.dedupe;
  opts.jobs = a.common.jobs;
  const auto docs = corpus::ingest(files, a.source, opts);
  const std::string in_hash = files_hash(files);
  corpus::write_documents(path, docs,
                          {{"format", "daptkit-documents"},
                           {"version", 1},
                           {"source", a.source},
                           {"count", docs.size()},
                           {"inputs_hash", in_hash}});
  const auto s = corpus::stats(docs);
  emit(out, {{"command", "ingest"},
             {"documents", s.document_count},
             {"tokens", s.token_count},
             {"inputs_hash", in_hash},
             {"output_hash", hash_file(path)},
             {"out", path}});
}

struct StatsArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string source = "domain";
};

void run_stats(const StatsArgs& a, std::ostream& out) {
  const auto files = corpus::expand_inputs(to_paths(a.inputs));
  const auto s = corpus::stats(load_documents(files, a.source, a.common.jobs));
  json summary = {{"command", "stats"}};
  summary.update(s.to_json());
  if (!a.common.out.empty()) write_text(a.common.out, s.to_json().dump(2) + "\n");
  emit(out, summary);
}

struct TrainVocabArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string source = "domain";
  std::size_t budget = 30522;
  std::int64_t min_pair_count = 2;
  std::string merges_out;
};

void run_train_vocab(const TrainVocabArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const auto files = corpus::expand_inputs(to_paths(a.inputs));
  const auto docs = load_documents(files, a.source, a.common.jobs);
  tokenizer::TrainOptions opts;
  opts.budget = a.budget;
  opts.min_pair_count = a.min_pair_count;
  const auto result = tokenizer::train_vocabulary(docs, opts);
  tokenizer::save_vocab(result.vocab, path);
  if (!a.merges_out.empty()) {
    std::string text;
    for (const auto& m : result.merges) {
      text += json{{"left", m.left}, {"right", m.right}, {"merged", m.merged}, {"count", m.pair_count}}.dump() + "\n";
    }
    write_text(a.merges_out, text);
  }
  emit(out, {{"command", "train-vocab"},
             {"vocab_size", result.vocab.size()},
             {"alphabet_size", result.alphabet_size},
             {"merges", result.merges.size()},
             {"fertility", tokenizer::fertility(docs, result.vocab)},
             {"inputs_hash", files_hash(files)},
             {"vocab_hash", result.vocab.content_hash()},
             {"out", path}});
}

struct CompareVocabArgs {
  Common common;
  std::string left;
  std::string right;
  std::size_t lo = 0;
  std::size_t hi = 0;
};

void run_compare_vocab(const CompareVocabArgs& a, std::ostream& out) {
  const auto diff = tokenizer::compare_vocabularies(tokenizer::load_vocab(a.left), tokenizer::load_vocab(a.right),
                                                    a.lo, a.hi);
  json summary = {{"command", "compare-vocab"}, {"ranks", a.hi - a.lo + 1}};
  summary.update(diff.to_json());
  summary["counts"] = {{"shared", diff.shared.size()},
                       {"left_only", diff.left_only.size()},
                       {"right_only", diff.right_only.size()}};
  if (!a.common.out.empty()) write_text(a.common.out, diff.to_json().dump(2) + "\n");
  emit(out, summary);
}

struct PackArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string vocab;
  std::size_t max_seq = 128;
  std::string source = "domain";
};

void run_pack(const PackArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const auto files = corpus::expand_inputs(to_paths(a.inputs));
  const auto docs = load_documents(files, a.source, a.common.jobs);
  const auto vocab = tokenizer::load_vocab(a.vocab);
  const auto segments = mlm::pack_sequences(docs, vocab, a.max_seq);
  std::size_t tokens = 0;
  for (const auto& s : segments) tokens += s.size();
  mlm::write_segments(path, segments,
                      {{"max_seq", a.max_seq}, {"vocab_hash", vocab.content_hash()}, {"inputs_hash", files_hash(files)}});
  emit(out, {{"command", "pack"},
             {"documents", docs.size()},
             {"segments", segments.size()},
             {"tokens", tokens},
             {"output_hash", hash_file(path)},
             {"out", path}});
}

struct MaskArgs {
  Common common;
  std::string segments;
  std::string vocab;
  mlm::MaskingConfig masking;
};

void run_mask(const MaskArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const auto vocab = tokenizer::load_vocab(a.vocab);
  const auto [header, segments] = mlm::read_segments(a.segments);
  if (header.contains("vocab_hash") && header["vocab_hash"] != vocab.content_hash()) {
    throw ValidationError("segments were packed with a different vocabulary (hash " +
                          header["vocab_hash"].get<std::string>() + ", given " + vocab.content_hash() + ")");
  }
  mlm::MaskingConfig cfg = a.masking;
  cfg.max_seq = header.value("max_seq", cfg.max_seq);
  const auto examples = mlm::mask_segments(segments, vocab, cfg, a.common.seed, a.common.jobs);
  std::size_t masked = 0;
  std::size_t maskable = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    masked += examples[i].mask_positions.size();
    for (auto id : segments[i]) maskable += tokenizer::is_special(id) ? 0 : 1;
  }
  mlm::write_mlm_examples(path, examples,
                          {{"max_seq", cfg.max_seq},
                           {"vocab_hash", vocab.content_hash()},
                           {"segments_hash", hash_file(a.segments)},
                           {"seed", a.common.seed},
                           {"rate", cfg.rate},
                           {"mask_fraction", cfg.mask_fraction},
                           {"random_fraction", cfg.random_fraction}});
  emit(out, {{"command", "mask"},
             {"examples", examples.size()},
             {"masked_positions", masked},
             {"maskable_positions", maskable},
             {"seed", a.common.seed},
             {"output_hash", hash_file(path)},
             {"out", path}});
}

struct PretrainArgs {
  Common common;
  std::string examples;
  std::string task_examples;
  std::string vocab;
  std::string init;
  std::string log;
  std::string checkpoint_dir;
  bool timing = false;
  ModelFlags model;
  PlanFlags plan;
};

model::ModelState initial_state(const std::string& init, const std::string& vocab_path, const ModelFlags& flags,
                                int max_seq, std::uint64_t seed, std::string& vocab_hash) {
  std::optional<tokenizer::Vocabulary> vocab;
  if (!vocab_path.empty()) {
    vocab = tokenizer::load_vocab(vocab_path);
    vocab_hash = vocab->content_hash();
  }
  if (!init.empty()) {
    auto state = model::load_checkpoint(init);
    if (vocab && static_cast<std::size_t>(state.config.vocab_size) != vocab->size()) {
      throw ValidationError("checkpoint vocab_size " + std::to_string(state.config.vocab_size) +
                            " does not match the vocabulary size " + std::to_string(vocab->size()));
    }
    return state;
  }
  if (!vocab) throw ValidationError("either --init or --vocab is required");
  return model::init_model(flags.config(vocab->size(), max_seq), seed);
}

void run_pretrain(const PretrainArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const auto plan = a.plan.build(true, a.common.seed);
  if (plan.strategy == trainer::Strategy::kBase) throw ValidationError("strategy base has no pretraining stage");
  if (plan.strategy == trainer::Strategy::kDaptPlusTapt && a.task_examples.empty()) {
    throw ValidationError("strategy dapt_plus_tapt needs --task-examples");
  }

  const auto [header, examples] = mlm::read_mlm_examples(a.examples);
  std::vector<mlm::MlmExample> task;
  if (!a.task_examples.empty()) task = mlm::read_mlm_examples(a.task_examples).second;
  const int max_seq = a.model.max_seq_opt->count() > 0 ? a.model.max_seq : header.value("max_seq", a.model.max_seq);

  std::string vocab_hash;
  auto state = initial_state(a.init, a.vocab, a.model, max_seq, a.common.seed, vocab_hash);
  const std::string init_hash = model::content_hash(state);

  json meta = {{"seed", a.common.seed},
               {"plan", plan.to_json()},
               {"examples_hash", hash_file(a.examples)},
               {"init_hash", init_hash}};
  if (!a.task_examples.empty()) meta["task_examples_hash"] = hash_file(a.task_examples);
  if (!vocab_hash.empty()) meta["vocab_hash"] = vocab_hash;

  trainer::TrainOptions opts;
  opts.jobs = a.common.jobs;
  opts.record_timing = a.timing;
  if (!a.checkpoint_dir.empty()) {
    fs::create_directories(a.checkpoint_dir);
    opts.on_checkpoint = [&](std::int64_t step, const model::ModelState& s) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%06lld.ckpt", static_cast<long long>(step));
      json m = meta;
      m["step"] = step;
      model::save_checkpoint(s, fs::path(a.checkpoint_dir) / name, m);
    };
  }

  const bool task_only = plan.strategy == trainer::Strategy::kTapt;
  const std::span<const mlm::MlmExample> domain(examples);
  const std::span<const mlm::MlmExample> task_span = task_only ? domain : std::span<const mlm::MlmExample>(task);
  auto result = trainer::run_strategy(std::move(state), plan.strategy, domain, task_span, plan, opts);
  const auto& last_stage = plan.strategy == trainer::Strategy::kDapt ? domain : task_span;
  const double accuracy = trainer::mlm_accuracy(result.state, last_stage, a.common.jobs);

  meta["mlm_accuracy"] = accuracy;
  model::save_checkpoint(result.state, path, meta);
  if (!a.log.empty()) result.log.write(a.log);
  const double final_loss = result.log.records.empty() ? 0.0 : result.log.records.back().loss;
  emit(out, {{"command", "pretrain"},
             {"strategy", trainer::to_string(plan.strategy)},
             {"steps", *plan.max_steps},
             {"final_loss", final_loss},
             {"mlm_accuracy", accuracy},
             {"seed", a.common.seed},
             {"state_hash", model::content_hash(result.state)},
             {"out", path}});
}

struct FinetuneArgs {
  Common common;
  std::string data;
  std::string vocab;
  std::string init;
  std::string log;
  bool timing = false;
  ModelFlags model;
  PlanFlags plan;
};

void run_finetune(const FinetuneArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  if (a.vocab.empty()) throw ValidationError("--vocab is required");
  const auto plan = a.plan.build(false, a.common.seed);
  const auto dataset = mlm::read_labeled_table(a.data);
  eval::SplitSpec spec;
  spec.seed = a.common.seed;
  const auto split = eval::split_dataset(dataset.examples, spec);

  std::string vocab_hash;
  auto state = initial_state(a.init, a.vocab, a.model, a.model.max_seq, a.common.seed, vocab_hash);
  state = model::with_classifier(std::move(state), dataset.num_labels(), a.common.seed);
  const auto vocab = tokenizer::load_vocab(a.vocab);
  const auto max_seq = static_cast<std::size_t>(state.config.max_seq);
  const auto train = mlm::build_classify_examples(split.train, vocab, max_seq, dataset.num_labels());
  const auto validate = mlm::build_classify_examples(split.validate, vocab, max_seq, dataset.num_labels());
  const auto test = mlm::build_classify_examples(split.test, vocab, max_seq, dataset.num_labels());

  trainer::TrainOptions opts;
  opts.jobs = a.common.jobs;
  opts.record_timing = a.timing;
  auto result = trainer::finetune(std::move(state), train, validate, plan, opts);
  const double test_accuracy = trainer::classify_accuracy(result.state, test, a.common.jobs);

  json meta = {{"seed", a.common.seed},
               {"plan", plan.to_json()},
               {"data_hash", hash_file(a.data)},
               {"vocab_hash", vocab_hash},
               {"label_names", dataset.label_names},
               {"best_epoch", result.best_epoch}};
  if (!a.init.empty()) meta["init_hash"] = hash_file(a.init);
  model::save_checkpoint(result.state, path, meta);
  if (!a.log.empty()) result.log.write(a.log);
  emit(out, {{"command", "finetune"},
             {"num_labels", dataset.num_labels()},
             {"split", {{"train", split.train.size()}, {"validate", split.validate.size()}, {"test", split.test.size()}}},
             {"best_epoch", result.best_epoch},
             {"best_validation_accuracy", result.best_validation_accuracy},
             {"test_accuracy", test_accuracy},
             {"seed", a.common.seed},
             {"state_hash", model::content_hash(result.state)},
             {"out", path}});
}

struct EvaluateArgs {
  Common common;
  std::string protocol;
  std::vector<std::uint64_t> seeds;
  std::string markdown;
};

// Protocol file:
// {
//   "tasks":   [{"id": "kt", "data": "kt.csv", "metrics": ["auc", "accu"]}],
//   "methods": [{"method": "dapt", "vocab": "orig", "vocab_file": "v.txt",
//                "init": "dapt.ckpt", "task_pretrain": false}],
//   "model": {...}, "seeds": [...], "split": {"train": .72, ...},
//   "tapt_plan": {...}, "finetune_plan": {...}, "masking": {...},
//   "prior_best": "table.json", "f1_average": "macro"
// }
// Relative paths are resolved against the protocol file's directory. A method
// without "init" starts from a fresh model seeded with --seed; tapt and
// dapt_tapt methods pretrain on the training split text unless
// "task_pretrain" says otherwise.
void run_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const fs::path protocol_path(a.protocol);
  const json p = read_json(protocol_path);
  const fs::path base = protocol_path.parent_path();

  std::vector<eval::TaskSpec> tasks;
  json input_hashes = json::object();
  for (const auto& jt : p.at("tasks")) {
    eval::TaskSpec t;
    t.task_id = jt.at("id").get<std::string>();
    const auto data_path = resolve(base, jt.at("data").get<std::string>());
    t.data = mlm::read_labeled_table(data_path);
    t.metrics = jt.value("metrics", std::vector<std::string>{});
    input_hashes["task:" + t.task_id] = hash_file(data_path.string());
    tasks.push_back(std::move(t));
  }

  model::ModelConfig model_defaults;
  const json jm = p.value("model", json::object());
  trainer::TrainPlan tapt_plan = trainer::TrainPlan::from_json(
      p.value("tapt_plan", json{{"strategy", "tapt"}, {"max_steps", 200}}));
  trainer::TrainPlan finetune_plan =
      trainer::TrainPlan::from_json(p.value("finetune_plan", json{{"strategy", "base"}, {"epochs", 5}}));
  mlm::MaskingConfig masking;
  const json jmask = p.value("masking", json::object());
  masking.rate = jmask.value("rate", masking.rate);
  masking.mask_fraction = jmask.value("mask_fraction", masking.mask_fraction);
  masking.random_fraction = jmask.value("random_fraction", masking.random_fraction);

  std::vector<eval::MethodSpec> methods;
  for (const auto& jmeth : p.at("methods")) {
    const std::string name = jmeth.at("method").get<std::string>();
    eval::FinetuneRecipe recipe;
    const auto vocab_path = resolve(base, jmeth.at("vocab_file").get<std::string>());
    recipe.vocab = tokenizer::load_vocab(vocab_path);
    if (jmeth.contains("init")) {
      const auto init_path = resolve(base, jmeth.at("init").get<std::string>());
      recipe.initial = model::load_checkpoint(init_path);
      input_hashes["init:" + name + "/" + jmeth.value("vocab", "orig")] = hash_file(init_path.string());
    } else {
      json cfg = jm;
      cfg["vocab_size"] = recipe.vocab.size();
      recipe.initial = model::init_model(model::ModelConfig::from_json(cfg), a.common.seed);
    }
    if (static_cast<std::size_t>(recipe.initial.config.vocab_size) != recipe.vocab.size()) {
      throw ValidationError("method " + name + ": model vocab_size does not match " + vocab_path.string());
    }
    recipe.task_pretrain = jmeth.value("task_pretrain", name == "tapt" || name == "dapt_tapt");
    recipe.tapt_plan = tapt_plan;
    recipe.masking = masking;
    recipe.finetune_plan = finetune_plan;
    recipe.jobs = a.common.jobs;
    methods.push_back({name, jmeth.value("vocab", "orig"), eval::recipe_runner(std::move(recipe))});
  }

  eval::ProtocolOptions opts;
  if (!a.seeds.empty()) {
    opts.seeds = a.seeds;
  } else if (p.contains("seeds")) {
    opts.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
  }
  if (p.contains("split")) {
    const auto& js = p.at("split");
    opts.split.train_frac = js.value("train", opts.split.train_frac);
    opts.split.validate_frac = js.value("validate", opts.split.validate_frac);
    opts.split.test_frac = js.value("test", opts.split.test_frac);
  }
  opts.f1_average = eval::parse_f1_average(p.value("f1_average", "macro"));
  if (p.contains("prior_best")) {
    const auto fixture_path = resolve(base, p.at("prior_best").get<std::string>());
    opts.prior_best = eval::load_results_fixture(fixture_path).report;
    opts.include_prior_best = true;
  }

  auto report = eval::run_protocol(tasks, methods, opts);
  report.meta["seed"] = a.common.seed;
  report.meta["inputs"] = input_hashes;
  report.meta["protocol_hash"] = hash_file(protocol_path.string());
  write_text(path, eval::render_json(report));
  if (!a.markdown.empty()) write_text(a.markdown, eval::render_markdown(report));
  emit(out, {{"command", "evaluate"},
             {"rows", report.rows.size()},
             {"deltas", report.deltas.size()},
             {"seeds", opts.seeds},
             {"seed", a.common.seed},
             {"report_hash", hash_file(path)},
             {"out", path}});
}

struct ReportArgs {
  Common common;
  std::string input;
  std::string format = "markdown";
};

void run_report(const ReportArgs& a, std::ostream& out) {
  const auto& path = require_out(a.common);
  const json j = read_json(a.input);
  eval::EvalReport report;
  if (j.value("format", "") == "daptkit-report") {
    report = eval::EvalReport::from_json(j);
  } else {
    report = eval::parse_results_fixture(j).report;
    report.deltas = eval::compute_deltas(report);
  }
  report.meta["input_hash"] = hash_file(a.input);
  if (a.format == "markdown") {
    write_text(path, eval::render_markdown(report));
  } else if (a.format == "json") {
    write_text(path, eval::render_json(report));
  } else {
    throw ValidationError("unknown report format '" + a.format + "' (expected markdown or json)");
  }
  emit(out, {{"command", "report"},
             {"format", a.format},
             {"rows", report.rows.size()},
             {"deltas", report.deltas.size()},
             {"output_hash", hash_file(path)},
             {"out", path}});
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-adaptive pretraining toolkit: corpus ingestion, WordPiece vocabularies, masked-LM "
               "pretraining, fine-tuning and evaluation.",
               "daptkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "JSON configuration file; flags override it");
  app.config_formatter(std::make_shared<JsonConfig>(kSubcommands));

  std::map<std::string, std::function<void()>> handlers;

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Normalize raw text or JSONL into a document file");
  s_ingest->add_option("inputs", ingest.inputs, "Files or directories")->required();
  s_ingest->add_option("--source", ingest.source, "Source label");
  s_ingest->add_flag("--dedupe", ingest.dedupe, "Drop documents with repeated text");
  add_common(s_ingest, ingest.common, false);
  handlers["ingest"] = [&] { run_ingest(ingest, out); };

  StatsArgs stats;
  auto* s_stats = app.add_subcommand("stats", "Document and token counts per source");
  s_stats->add_option("inputs", stats.inputs, "Files or directories");
  s_stats->add_option("--source", stats.source, "Source label for plain-text inputs");
  add_common(s_stats, stats.common, false);
  handlers["stats"] = [&] { run_stats(stats, out); };

  TrainVocabArgs tv;
  auto* s_tv = app.add_subcommand("train-vocab", "Induce a WordPiece vocabulary");
  s_tv->add_option("inputs", tv.inputs, "Files or directories")->required();
  s_tv->add_option("--source", tv.source, "Source label for plain-text inputs");
  s_tv->add_option("--budget", tv.budget, "Vocabulary size including special tokens");
  s_tv->add_option("--min-pair-count", tv.min_pair_count, "Smallest pair count eligible for a merge");
  s_tv->add_option("--merges", tv.merges_out, "Write the merge sequence as JSONL");
  add_common(s_tv, tv.common, false);
  handlers["train-vocab"] = [&] { run_train_vocab(tv, out); };

  CompareVocabArgs cv;
  auto* s_cv = app.add_subcommand("compare-vocab", "Diff two vocabularies over a rank tier");
  s_cv->add_option("left", cv.left, "First vocab.txt")->required();
  s_cv->add_option("right", cv.right, "Second vocab.txt")->required();
  s_cv->add_option("--lo", cv.lo, "First rank (token id) of the tier")->required();
  s_cv->add_option("--hi", cv.hi, "Last rank of the tier, inclusive")->required();
  add_common(s_cv, cv.common, false);
  handlers["compare-vocab"] = [&] { run_compare_vocab(cv, out); };

  PackArgs pack;
  auto* s_pack = app.add_subcommand("pack", "Tokenize documents and pack them into fixed-length segments");
  s_pack->add_option("inputs", pack.inputs, "Document files or directories")->required();
  s_pack->add_option("--vocab", pack.vocab, "vocab.txt")->required();
  s_pack->add_option("--max-seq", pack.max_seq, "Segment length including [CLS]");
  s_pack->add_option("--source", pack.source, "Source label for plain-text inputs");
  add_common(s_pack, pack.common, false);
  handlers["pack"] = [&] { run_pack(pack, out); };

  MaskArgs mask;
  auto* s_mask = app.add_subcommand("mask", "Apply MLM masking to packed segments");
  s_mask->add_option("--segments", mask.segments, "Segments file from pack")->required();
  s_mask->add_option("--vocab", mask.vocab, "vocab.txt used for packing")->required();
  s_mask->add_option("--rate", mask.masking.rate, "Selection probability per token");
  s_mask->add_option("--mask-fraction", mask.masking.mask_fraction, "Share of selections replaced by [MASK]");
  s_mask->add_option("--random-fraction", mask.masking.random_fraction, "Share replaced by a random token");
  add_common(s_mask, mask.common, true);
  handlers["mask"] = [&] { run_mask(mask, out); };

  PretrainArgs pre;
  auto* s_pre = app.add_subcommand("pretrain", "Masked-LM pretraining (dapt, tapt or dapt_plus_tapt)");
  s_pre->add_option("--examples", pre.examples, "Masked examples (domain, or task for tapt)")->required();
  s_pre->add_option("--task-examples", pre.task_examples, "Task examples for the second dapt_plus_tapt stage");
  s_pre->add_option("--vocab", pre.vocab, "vocab.txt; sizes a fresh model");
  s_pre->add_option("--init", pre.init, "Start from this checkpoint");
  s_pre->add_option("--log", pre.log, "Training log (JSONL)");
  s_pre->add_option("--checkpoint-dir", pre.checkpoint_dir, "Periodic checkpoints");
  s_pre->add_flag("--timing", pre.timing, "Record wall-clock milliseconds in the log");
  pre.model.add(s_pre);
  pre.plan.add(s_pre, true);
  add_common(s_pre, pre.common, true);
  handlers["pretrain"] = [&] { run_pretrain(pre, out); };

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune", "Fine-tune a classifier on a labeled CSV/TSV task");
  s_ft->add_option("--data", ft.data, "Task table with text and label columns")->required();
  s_ft->add_option("--vocab", ft.vocab, "vocab.txt")->required();
  s_ft->add_option("--init", ft.init, "Start from this checkpoint");
  s_ft->add_option("--log", ft.log, "Training log (JSONL)");
  s_ft->add_flag("--timing", ft.timing, "Record wall-clock milliseconds in the log");
  ft.model.add(s_ft);
  ft.plan.add(s_ft, false);
  add_common(s_ft, ft.common, true);
  handlers["finetune"] = [&] { run_finetune(ft, out); };

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "Run the multi-seed evaluation protocol");
  s_ev->add_option("--protocol", ev.protocol, "Protocol JSON file")->required();
  s_ev->add_option("--seeds", ev.seeds, "Override the protocol seeds");
  s_ev->add_option("--markdown", ev.markdown, "Also render the report as markdown");
  add_common(s_ev, ev.common, true);
  handlers["evaluate"] = [&] { run_evaluate(ev, out); };

  ReportArgs rep;
  auto* s_rep = app.add_subcommand("report", "Render a report or a results table");
  s_rep->add_option("--input", rep.input, "Report JSON or results fixture")->required();
  s_rep->add_option("--format", rep.format, "markdown or json");
  add_common(s_rep, rep.common, false);
  handlers["report"] = [&] { run_report(rep, out); };

  for (auto* sub : app.get_subcommands({})) {
    for (auto* opt : sub->get_options()) {
      const auto& names = opt->get_lnames();
      if (!names.empty() && names.front() != "help") opt->envname(env_name(names.front()));
    }
  }

  if (argc < 2) {
    err << app.help();
    return kExitUsage;
  }
  const std::string first = argv[1];
  if (first.empty() || (first[0] != '-' && !handlers.count(first))) {
    err << "daptkit: unknown subcommand '" << first << "'\n\n" << app.help();
    return kExitUsage;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    const bool bad_value = dynamic_cast<const CLI::ConversionError*>(&e) != nullptr ||
                           dynamic_cast<const CLI::ValidationError*>(&e) != nullptr;
    return bad_value ? kExitFailure : kExitUsage;
  } catch (const Error& e) {
    err << "daptkit: " << e.what() << "\n";
    return kExitFailure;
  }

  for (auto* sub : app.get_subcommands()) {
    try {
      handlers.at(sub->get_name())();
      return kExitOk;
    } catch (const Error& e) {
      err << "daptkit " << sub->get_name() << ": " << e.what() << "\n";
      return kExitFailure;
    } catch (const std::exception& e) {
      err << "daptkit " << sub->get_name() << ": " << e.what() << "\n";
      return kExitFailure;
    }
  }
  err << app.help();
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("daptkit");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace daptkit::cli

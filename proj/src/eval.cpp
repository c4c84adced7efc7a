#include "daptkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "daptkit/rng.hpp"

namespace daptkit::eval {
namespace {

// Guards the floor/ceil against representation error in frac * n.
constexpr double kSplitGuard = 1e-9;
constexpr double kHalfUnit = 0.005 / 100.0;

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ValidationError(std::string(what) + ": " + std::to_string(a) + " predictions but " + std::to_string(b) +
                          " labels");
  }
  if (a == 0) throw ValidationError(std::string(what) + ": empty input");
}

double round_reported(double fraction) { return std::round(fraction * 10000.0) / 100.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Splits

void SplitSpec::validate() const {
  for (double f : {train_frac, validate_frac, test_frac}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("split fractions must lie in [0, 1]");
  }
  if (std::abs(train_frac + validate_frac + test_frac - 1.0) > 1e-9) {
    throw ValidationError("split fractions must sum to 1");
  }
}

SplitSizes split_sizes(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  if (n < 3) throw ValidationError("cannot split " + std::to_string(n) + " examples; at least 3 are required");
  const double dn = static_cast<double>(n);
  SplitSizes s;
  s.train = static_cast<std::size_t>(std::floor(spec.train_frac * dn + kSplitGuard));
  s.validate = static_cast<std::size_t>(std::ceil(spec.validate_frac * dn - kSplitGuard));
  s.train = std::min(s.train, n);
  s.validate = std::min(s.validate, n - s.train);
  s.test = n - s.train - s.validate;
  return s;
}

SplitIndices split(std::size_t n, const SplitSpec& spec) {
  const SplitSizes sizes = split_sizes(n, spec);
  const auto order = Rng(spec.seed).permutation(n);
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sizes.train));
  out.validate.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes.train),
                      order.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.validate));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.validate), order.end());
  return out;
}

DatasetSplit split_dataset(std::span<const mlm::LabeledText> examples, const SplitSpec& spec) {
  const auto idx = split(examples.size(), spec);
  DatasetSplit out;
  for (auto i : idx.train) out.train.push_back(examples[i]);
  for (auto i : idx.validate) out.validate.push_back(examples[i]);
  for (auto i : idx.test) out.test.push_back(examples[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
  check_lengths(predictions.size(), labels.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<std::vector<std::int64_t>> confusion_matrix(std::span<const std::int32_t> predictions,
                                                        std::span<const std::int32_t> labels, int num_labels) {
  check_lengths(predictions.size(), labels.size(), "confusion_matrix");
  if (num_labels < 1) throw ValidationError("num_labels must be >= 1");
  std::vector<std::vector<std::int64_t>> counts(static_cast<std::size_t>(num_labels),
                                                std::vector<std::int64_t>(static_cast<std::size_t>(num_labels)));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (auto v : {predictions[i], labels[i]}) {
      if (v < 0 || v >= num_labels) {
        throw ValidationError("label " + std::to_string(v) + " at index " + std::to_string(i) + " outside [0, " +
                              std::to_string(num_labels) + ")");
      }
    }
    ++counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return counts;
}

F1Average parse_f1_average(std::string_view name) {
  if (name == "macro") return F1Average::kMacro;
  if (name == "micro") return F1Average::kMicro;
  if (name == "weighted") return F1Average::kWeighted;
  throw ValidationError("unknown F1 average '" + std::string(name) + "' (expected macro, micro or weighted)");
}

double f1(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels, int num_labels,
          F1Average average) {
  const auto cm = confusion_matrix(predictions, labels, num_labels);
  const auto k = static_cast<std::size_t>(num_labels);
  std::int64_t tp_all = 0;
  double macro = 0.0;
  double weighted = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t tp = cm[c][c];
    std::int64_t support = 0;
    std::int64_t predicted = 0;
    for (std::size_t j = 0; j < k; ++j) {
      support += cm[c][j];
      predicted += cm[j][c];
    }
    tp_all += tp;
    // 2PR / (P + R) simplifies to 2TP / (support + predicted).
    const double score = support + predicted == 0 ? 0.0 : 2.0 * static_cast<double>(tp) /
                                                              static_cast<double>(support + predicted);
    macro += score;
    weighted += score * static_cast<double>(support);
  }
  switch (average) {
    case F1Average::kMacro:
      return macro / static_cast<double>(k);
    case F1Average::kMicro:
      return static_cast<double>(tp_all) / static_cast<double>(labels.size());
    case F1Average::kWeighted:
      return weighted / static_cast<double>(labels.size());
  }
  return macro / static_cast<double>(k);
}

double auc_binary(std::span<const double> scores, std::span<const std::int32_t> labels) {
  check_lengths(scores.size(), labels.size(), "auc_binary");
  std::int64_t positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("auc_binary: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw ValidationError("auc_binary: non-finite score at index " + std::to_string(i));
    positives += labels[i];
  }
  const auto n = static_cast<std::int64_t>(labels.size());
  const std::int64_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw ValidationError("auc_binary: both classes must be present");

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of 1-based ranks of the positives, ties sharing their average rank.
  // Ranks are doubled so that tie averages stay integral.
  std::int64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::int64_t tied_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) tied_pos += labels[order[j++]];
    const auto first = static_cast<std::int64_t>(i) + 1;
    const auto last = static_cast<std::int64_t>(j);
    twice_rank_sum += tied_pos * (first + last);
    i = j;
  }
  const std::int64_t twice_u = twice_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

double auc_multiclass(std::span<const double> probabilities, std::size_t num_classes,
                      std::span<const std::int32_t> labels) {
  if (num_classes < 2) throw ValidationError("auc_multiclass: at least 2 classes are required");
  if (probabilities.size() != labels.size() * num_classes) {
    throw ValidationError("auc_multiclass: probability matrix does not match " + std::to_string(labels.size()) +
                          " x " + std::to_string(num_classes));
  }
  for (std::size_t r = 0; r < labels.size(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) sum += probabilities[r * num_classes + c];
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("auc_multiclass: row " + std::to_string(r) + " sums to " +
                                                          std::to_string(sum));
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= num_classes) {
      throw ValidationError("auc_multiclass: label out of range at index " + std::to_string(r));
    }
  }
  std::set<std::int32_t> present(labels.begin(), labels.end());
  if (present.size() < 2) throw ValidationError("auc_multiclass: at least two classes must be present in labels");

  double total = 0.0;
  std::vector<double> column(labels.size());
  std::vector<std::int32_t> is_class(labels.size());
  for (std::int32_t c : present) {
    for (std::size_t r = 0; r < labels.size(); ++r) {
      column[r] = probabilities[r * num_classes + static_cast<std::size_t>(c)];
      is_class[r] = labels[r] == c ? 1 : 0;
    }
    total += auc_binary(column, is_class);
  }
  return total / static_cast<double>(present.size());
}

std::vector<std::int32_t> argmax_rows(std::span<const double> probabilities, std::size_t num_classes) {
  std::vector<std::int32_t> out;
  for (std::size_t r = 0; r + num_classes <= probabilities.size(); r += num_classes) {
    const auto row = probabilities.subspan(r, num_classes);
    out.push_back(static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  s.per_seed.assign(values.begin(), values.end());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

const ReportRow* EvalReport::find(std::string_view method, std::string_view vocab) const {
  for (const auto& r : rows) {
    if (r.method == method && r.vocab == vocab) return &r;
  }
  return nullptr;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, s] : r.metrics) m[name] = {{"mean", s.mean}, {"std", s.std}, {"per_seed", s.per_seed}};
    jrows.push_back({{"method", r.method}, {"vocab", r.vocab}, {"metrics", m}});
  }
  nlohmann::json jdeltas = nlohmann::json::array();
  for (const auto& d : deltas) {
    jdeltas.push_back({{"name", d.name},
                       {"vocab", d.vocab},
                       {"minuend", {{"method", d.minuend_method}, {"vocab", d.minuend_vocab}}},
                       {"subtrahend", {{"method", d.subtrahend_method}, {"vocab", d.subtrahend_vocab}}},
                       {"values", d.values}});
  }
  return {{"format", "daptkit-report"}, {"version", 1},    {"metrics", metrics},
          {"rows", jrows},              {"deltas", jdeltas}, {"meta", meta}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.metrics = j.at("metrics").get<std::vector<std::string>>();
    for (const auto& jr : j.at("rows")) {
      ReportRow row{jr.at("method").get<std::string>(), jr.at("vocab").get<std::string>(), {}};
      for (const auto& [name, s] : jr.at("metrics").items()) {
        row.metrics[name] = {s.at("mean").get<double>(), s.at("std").get<double>(),
                             s.at("per_seed").get<std::vector<double>>()};
      }
      r.rows.push_back(std::move(row));
    }
    for (const auto& jd : j.at("deltas")) {
      r.deltas.push_back({jd.at("name").get<std::string>(), jd.at("vocab").get<std::string>(),
                          jd.at("minuend").at("method").get<std::string>(),
                          jd.at("minuend").at("vocab").get<std::string>(),
                          jd.at("subtrahend").at("method").get<std::string>(),
                          jd.at("subtrahend").at("vocab").get<std::string>(),
                          jd.at("values").get<std::map<std::string, double>>()});
    }
    r.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  return r;
}

std::vector<DeltaRow> compute_deltas(const EvalReport& report) {
  struct Rule {
    const char* name;
    const char* subtrahend;
  };
  static constexpr Rule kRules[] = {{"d-p", "prior_best"}, {"d-b", "base"}, {"d-t", "tapt"}, {"d-dt", "dapt_tapt"}};
  std::vector<DeltaRow> out;
  for (const Rule& rule : kRules) {
    for (const auto& row : report.rows) {
      if (row.method != "dapt") continue;
      const ReportRow* other = nullptr;
      for (const char* v : {row.vocab.c_str(), "orig", "n/a"}) {
        if ((other = report.find(rule.subtrahend, v)) != nullptr) break;
      }
      if (other == nullptr) continue;
      DeltaRow d{rule.name, row.vocab, row.method, row.vocab, other->method, other->vocab, {}};
      for (const auto& m : report.metrics) {
        const auto a = row.metrics.find(m);
        const auto b = other->metrics.find(m);
        if (a != row.metrics.end() && b != other->metrics.end()) d.values[m] = a->second.mean - b->second.mean;
      }
      out.push_back(std::move(d));
    }
  }
  return out;
}

std::vector<std::string> check_deltas(const EvalReport& report) {
  std::vector<std::string> problems;
  for (const auto& d : report.deltas) {
    const ReportRow* a = report.find(d.minuend_method, d.minuend_vocab);
    const ReportRow* b = report.find(d.subtrahend_method, d.subtrahend_vocab);
    if (a == nullptr || b == nullptr) {
      problems.push_back(d.name + "/" + d.vocab + ": operand row missing");
      continue;
    }
    for (const auto& [metric, value] : d.values) {
      const auto ma = a->metrics.find(metric);
      const auto mb = b->metrics.find(metric);
      if (ma == a->metrics.end() || mb == b->metrics.end()) {
        problems.push_back(d.name + "/" + d.vocab + " " + metric + ": operand value missing");
        continue;
      }
      const double expected = ma->second.mean - mb->second.mean;
      if (std::abs(expected - value) > kHalfUnit + 1e-12) {
        problems.push_back(d.name + "/" + d.vocab + " " + metric + ": stored " + format_percent(value) +
                           ", operands give " + format_percent(expected));
      }
    }
  }
  return problems;
}

ResultsFixture parse_results_fixture(const nlohmann::json& j) {
  ResultsFixture f;
  try {
    f.report.metrics = j.value("metrics", kTableMetrics);
    for (const auto& jr : j.at("rows")) {
      ReportRow row{jr.at("method").get<std::string>(), jr.at("vocab").get<std::string>(), {}};
      for (const auto& [name, v] : jr.at("values").items()) row.metrics[name] = {v.get<double>() / 100.0, 0.0, {}};
      f.report.rows.push_back(std::move(row));
    }
    if (j.contains("deltas")) {
      for (const auto& jd : j.at("deltas")) {
        DeltaRow d;
        d.name = jd.at("name").get<std::string>();
        d.vocab = jd.at("vocab").get<std::string>();
        for (const auto& [name, v] : jd.at("values").items()) d.values[name] = v.get<double>() / 100.0;
        f.published_deltas.push_back(std::move(d));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("results fixture: ") + e.what());
  }
  f.report.meta = {{"source", "fixture"}};
  return f;
}

ResultsFixture load_results_fixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  try {
    return parse_results_fixture(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

std::string format_percent(double fraction) {
  double v = round_reported(fraction);
  if (v == 0.0) v = 0.0;  // drop the sign of negative zero
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string render_markdown(const EvalReport& report) {
  const auto problems = check_deltas(report);
  if (!problems.empty()) {
    std::string msg = "report deltas are inconsistent with their rows:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }

  // Best and runner-up per column, compared at reported precision.
  std::map<std::string, std::pair<double, std::optional<double>>> marks;
  for (const auto& m : report.metrics) {
    std::vector<double> values;
    for (const auto& r : report.rows) {
      if (auto it = r.metrics.find(m); it != r.metrics.end()) values.push_back(round_reported(it->second.mean));
    }
    if (values.empty()) continue;
    std::sort(values.begin(), values.end(), std::greater<>());
    std::optional<double> second;
    if (values.size() > 1 && values[1] != values[0]) second = values[1];
    marks[m] = {values[0], second};
  }

  std::string out = "| Method | Vocab |";
  for (const auto& m : report.metrics) out += " " + m + " |";
  out += "\n| --- | --- |";
  for (std::size_t i = 0; i < report.metrics.size(); ++i) out += " ---: |";
  out += "\n";
  for (const auto& r : report.rows) {
    out += "| " + r.method + " | " + r.vocab + " |";
    for (const auto& m : report.metrics) {
      const auto it = r.metrics.find(m);
      if (it == r.metrics.end()) {
        out += " - |";
        continue;
      }
      std::string cell = format_percent(it->second.mean);
      const double shown = round_reported(it->second.mean);
      const auto& [best, second] = marks[m];
      if (shown == best) {
        cell = "**" + cell + "**";
      } else if (second && shown == *second) {
        cell = "<u>" + cell + "</u>";
      }
      if (it->second.per_seed.size() > 1) cell += " ± " + format_percent(it->second.std);
      out += " " + cell + " |";
    }
    out += "\n";
  }
  for (const auto& d : report.deltas) {
    out += "| " + d.name + " | " + d.vocab + " |";
    for (const auto& m : report.metrics) {
      const auto it = d.values.find(m);
      out += " " + (it == d.values.end() ? std::string("-") : format_percent(it->second)) + " |";
    }
    out += "\n";
  }
  return out;
}

std::string render_json(const EvalReport& report) { return report.to_json().dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Protocol

std::vector<std::string> default_task_metrics(std::string_view task_id) {
  if (task_id == "kc") return {"f1", "accu"};
  if (task_id == "ag") return {"auc"};
  if (task_id == "kt") return {"auc", "accu"};
  return {"f1", "accu", "auc"};
}

MethodRunner recipe_runner(FinetuneRecipe recipe) {
  return [recipe = std::move(recipe)](const SeedContext& ctx) {
    const auto& task = *ctx.task;
    const auto& split = *ctx.split;
    const int num_labels = task.data.num_labels();
    model::ModelState state = model::with_classifier(recipe.initial, num_labels, ctx.seed);
    const auto max_seq = static_cast<std::size_t>(state.config.max_seq);
    trainer::TrainOptions topts;
    topts.jobs = recipe.jobs;

    if (recipe.task_pretrain) {
      std::vector<corpus::Document> docs;
      for (std::size_t i = 0; i < split.train.size(); ++i) {
        docs.push_back({task.task_id + ":" + std::to_string(i), task.task_id, split.train[i].text});
      }
      mlm::MaskingConfig masking = recipe.masking;
      masking.max_seq = max_seq;
      const auto segments = mlm::pack_sequences(docs, recipe.vocab, max_seq);
      const auto examples = mlm::mask_segments(segments, recipe.vocab, masking, ctx.seed, recipe.jobs);
      trainer::TrainPlan plan = recipe.tapt_plan;
      plan.strategy = trainer::Strategy::kTapt;
      plan.seed = ctx.seed;
      state = trainer::pretrain(std::move(state), examples, plan, topts).state;
    }

    const auto train = mlm::build_classify_examples(split.train, recipe.vocab, max_seq, num_labels);
    const auto validate = mlm::build_classify_examples(split.validate, recipe.vocab, max_seq, num_labels);
    const auto test = mlm::build_classify_examples(split.test, recipe.vocab, max_seq, num_labels);
    trainer::TrainPlan plan = recipe.finetune_plan;
    plan.seed = ctx.seed;
    const auto tuned = trainer::finetune(std::move(state), train, validate, plan, topts);

    const auto logits = model::predict_logits(tuned.state, test, recipe.jobs);
    std::vector<double> probs;
    probs.reserve(logits.values.size());
    for (std::size_t r = 0; r < logits.rows; ++r) {
      const auto p = model::softmax<float>(logits.row(r));
      probs.insert(probs.end(), p.begin(), p.end());
    }
    return probs;
  };
}

EvalReport run_protocol(std::span<const TaskSpec> tasks, std::span<const MethodSpec> methods,
                        const ProtocolOptions& options) {
  if (options.seeds.empty()) throw ValidationError("run_protocol: no seeds given");
  if (std::set<std::uint64_t>(options.seeds.begin(), options.seeds.end()).size() != options.seeds.size()) {
    throw ValidationError("run_protocol: seeds must be distinct");
  }

  EvalReport report;
  for (const auto& task : tasks) {
    const auto metrics = task.metrics.empty() ? default_task_metrics(task.task_id) : task.metrics;
    for (const auto& m : metrics) {
      if (m != "f1" && m != "accu" && m != "auc") throw ValidationError("unknown metric '" + m + "'");
      report.metrics.push_back(task.task_id + "_" + m);
    }
  }

  if (options.include_prior_best) {
    const ReportRow* prior = options.prior_best ? options.prior_best->find("prior_best", "n/a") : nullptr;
    if (prior == nullptr) throw ValidationError("run_protocol: missing fixture row for prior_best");
    report.rows.push_back(*prior);
  }

  for (const auto& method : methods) {
    ReportRow row{method.method, method.vocab, {}};
    for (const auto& task : tasks) {
      const auto metrics = task.metrics.empty() ? default_task_metrics(task.task_id) : task.metrics;
      const auto k = static_cast<std::size_t>(task.data.num_labels());
      std::map<std::string, std::vector<double>> per_seed;
      for (const std::uint64_t seed : options.seeds) {
        SplitSpec spec = options.split;
        spec.seed = seed;
        const DatasetSplit split = split_dataset(task.data.examples, spec);
        const SeedContext ctx{seed, &task, &split};
        const auto probs = method.run(ctx);
        if (probs.size() != split.test.size() * k) {
          throw ValidationError("method " + method.method + " returned " + std::to_string(probs.size()) +
                                " probabilities for " + std::to_string(split.test.size()) + " test examples");
        }
        std::vector<std::int32_t> labels;
        for (const auto& ex : split.test) labels.push_back(ex.label);
        const auto predictions = argmax_rows(probs, k);
        for (const auto& m : metrics) {
          double value = 0.0;
          if (m == "f1") {
            value = f1(predictions, labels, static_cast<int>(k), options.f1_average);
          } else if (m == "accu") {
            value = accuracy(predictions, labels);
          } else if (k == 2) {
            std::vector<double> positive;
            for (std::size_t r = 0; r < labels.size(); ++r) positive.push_back(probs[r * 2 + 1]);
            value = auc_binary(positive, labels);
          } else {
            value = auc_multiclass(probs, k, labels);
          }
          per_seed[task.task_id + "_" + m].push_back(value);
        }
      }
      for (const auto& [name, values] : per_seed) row.metrics[name] = summarize(values);
    }
    report.rows.push_back(std::move(row));
  }
  report.deltas = compute_deltas(report);
  report.meta = {{"seeds", options.seeds},
                 {"split", {{"train", options.split.train_frac},
                            {"validate", options.split.validate_frac},
                            {"test", options.split.test_frac}}}};
  return report;
}

}  // namespace daptkit::eval

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "daptkit/mlm_data.hpp"
#include "daptkit/model.hpp"
#include "daptkit/tokenizer.hpp"
#include "daptkit/trainer.hpp"
#include "json.hpp"

namespace daptkit::eval {

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double train_frac = 0.72;
  double validate_frac = 0.08;
  double test_frac = 0.20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t validate = 0;
  std::size_t test = 0;
  bool operator==(const SplitSizes&) const = default;
};

/// train = floor(train_frac * n), validate = ceil(validate_frac * n), test =
/// the remainder. Throws for n < 3.
SplitSizes split_sizes(std::size_t n, const SplitSpec& spec);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validate;
  std::vector<std::size_t> test;
};

/// Seeded permutation of 0..n-1 cut into the three parts.
SplitIndices split(std::size_t n, const SplitSpec& spec);

struct DatasetSplit {
  std::vector<mlm::LabeledText> train;
  std::vector<mlm::LabeledText> validate;
  std::vector<mlm::LabeledText> test;
};

DatasetSplit split_dataset(std::span<const mlm::LabeledText> examples, const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels);

/// counts[label][prediction].
std::vector<std::vector<std::int64_t>> confusion_matrix(std::span<const std::int32_t> predictions,
                                                        std::span<const std::int32_t> labels, int num_labels);

enum class F1Average { kMacro, kMicro, kWeighted };

F1Average parse_f1_average(std::string_view name);

/// Per-class F1 is 0 when precision + recall is 0. Macro averages over all
/// num_labels classes, weighted uses label support.
double f1(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels, int num_labels,
          F1Average average = F1Average::kMacro);

inline double f1_macro(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels,
                       int num_labels) {
  return f1(predictions, labels, num_labels, F1Average::kMacro);
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from average ranks.
double auc_binary(std::span<const double> scores, std::span<const std::int32_t> labels);

/// One-vs-rest macro average over classes present in `labels`. `probabilities`
/// is row-major n x num_classes with rows summing to 1.
double auc_multiclass(std::span<const double> probabilities, std::size_t num_classes,
                      std::span<const std::int32_t> labels);

std::vector<std::int32_t> argmax_rows(std::span<const double> probabilities, std::size_t num_classes);

// ---------------------------------------------------------------------------
// Reports

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::vector<double> per_seed;

  bool operator==(const MetricSummary&) const = default;
};

MetricSummary summarize(std::span<const double> values);

struct ReportRow {
  std::string method;
  std::string vocab;
  std::map<std::string, MetricSummary> metrics;

  bool operator==(const ReportRow&) const = default;
};

struct DeltaRow {
  std::string name;  // e.g. "d-p"
  std::string vocab;
  std::string minuend_method;
  std::string minuend_vocab;
  std::string subtrahend_method;
  std::string subtrahend_vocab;
  std::map<std::string, double> values;

  bool operator==(const DeltaRow&) const = default;
};

/// Metric values are fractions in [0, 1]; rendering converts to percent.
struct EvalReport {
  std::vector<std::string> metrics;  // column order
  std::vector<ReportRow> rows;
  std::vector<DeltaRow> deltas;
  nlohmann::json meta = nlohmann::json::object();

  const ReportRow* find(std::string_view method, std::string_view vocab) const;

  bool operator==(const EvalReport&) const = default;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

inline const std::vector<std::string> kTableMetrics = {"kc_f1", "kc_accu", "ag_auc", "kt_auc", "kt_accu"};

/// Difference rows of the comparison table. For each vocabulary v with a dapt
/// row: d-p = dapt - prior_best, d-b = dapt - base, d-t = dapt - tapt and
/// d-dt = dapt - dapt_tapt. The subtrahend uses vocabulary v when that row
/// exists, else "orig", else "n/a". Pairs with a missing row are skipped.
std::vector<DeltaRow> compute_deltas(const EvalReport& report);

/// Checks every delta row against its operand rows. Returns a description of
/// each disagreement larger than half a reported unit (0.005 percent).
std::vector<std::string> check_deltas(const EvalReport& report);

/// A results table given in percent: {"metrics": [...], "rows": [{"method",
/// "vocab", "values": {...}}], "deltas": [{"name", "vocab", "values"}]}.
/// Rows become fractions with no per-seed data; deltas are kept as published.
struct ResultsFixture {
  EvalReport report;
  std::vector<DeltaRow> published_deltas;
};

ResultsFixture load_results_fixture(const std::filesystem::path& path);
ResultsFixture parse_results_fixture(const nlohmann::json& j);

/// Percent with two decimals; negative zero prints as 0.00.
std::string format_percent(double fraction);

/// Markdown table. Per metric column the highest value among the method rows
/// (compared at reported precision) is bold and the runner-up underlined. A
/// tie for best bolds every tied cell and leaves no underline. Throws
/// ValidationError if a delta row disagrees with its operands.
std::string render_markdown(const EvalReport& report);

std::string render_json(const EvalReport& report);

// ---------------------------------------------------------------------------
// Protocol

struct TaskSpec {
  std::string task_id;  // "kc", "ag", "kt" or any other name
  mlm::LabeledDataset data;
  /// Subset of {"f1", "accu", "auc"}; columns are named <task_id>_<metric>.
  std::vector<std::string> metrics;
};

/// Default metric list by task id: kc -> f1, accu; ag -> auc; kt -> auc, accu;
/// anything else -> f1, accu, auc.
std::vector<std::string> default_task_metrics(std::string_view task_id);

struct SeedContext {
  std::uint64_t seed = 0;
  const TaskSpec* task = nullptr;
  const DatasetSplit* split = nullptr;
};

/// Class probabilities for the test split, row-major test_size x num_labels.
using MethodRunner = std::function<std::vector<double>(const SeedContext&)>;

struct MethodSpec {
  std::string method;
  std::string vocab;
  MethodRunner run;
};

/// Fine-tunes `initial` (after an optional task-adaptive pretraining stage on
/// the training split text) and predicts the test split.
struct FinetuneRecipe {
  tokenizer::Vocabulary vocab;
  model::ModelState initial;
  bool task_pretrain = false;
  trainer::TrainPlan tapt_plan;      // max_steps; seed replaced by the run seed
  mlm::MaskingConfig masking;        // max_seq replaced by the model's
  trainer::TrainPlan finetune_plan;  // epochs; seed replaced by the run seed
  unsigned jobs = 1;
};

MethodRunner recipe_runner(FinetuneRecipe recipe);

struct ProtocolOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  SplitSpec split;  // seed replaced by each run seed
  F1Average f1_average = F1Average::kMacro;
  /// Source of the prior_best row, which is never computed.
  std::optional<EvalReport> prior_best;
  bool include_prior_best = false;
};

/// For each method, task and seed: split, run, score. Rows hold mean and
/// sample std over seeds; delta rows are derived at the end.
EvalReport run_protocol(std::span<const TaskSpec> tasks, std::span<const MethodSpec> methods,
                        const ProtocolOptions& options);

}  // namespace daptkit::eval

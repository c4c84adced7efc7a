#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "daptkit/mlm_data.hpp"
#include "daptkit/model.hpp"
#include "json.hpp"

namespace daptkit::trainer {

using model::ModelState;

enum class Strategy { kBase, kTapt, kDapt, kDaptPlusTapt };

std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view name);

struct TrainPlan {
  Strategy strategy = Strategy::kDapt;
  double learning_rate = 5e-5;
  int batch_size = 32;
  std::optional<std::int64_t> max_steps;  // pretraining
  std::optional<std::int64_t> epochs;     // fine-tuning
  int max_seq = 128;
  std::uint64_t seed = 0;
  double warmup_fraction = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys so that typos in plan files are not silently ignored.
  static TrainPlan from_json(const nlohmann::json& j);
};

TrainPlan load_plan(const std::filesystem::path& path);

/// Linear warmup over the first floor(warmup_fraction * total_steps) updates,
/// then linear decay reaching 0 at total_steps.
double scheduled_lr(double peak, double warmup_fraction, std::int64_t step, std::int64_t total_steps);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with bias correction. Weight decay is decoupled and skips bias and
/// norm tensors.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const model::Parameters<float>& like, AdamConfig config = {});

  /// Throws TrainingError naming the first tensor holding a NaN or Inf
  /// gradient; the state is left untouched in that case.
  void step(model::Parameters<float>& params, const model::Parameters<float>& grads, double learning_rate);

  std::int64_t steps_taken() const { return steps_; }

 private:
  AdamConfig config_;
  model::Parameters<float> first_;
  model::Parameters<float> second_;
  std::int64_t steps_ = 0;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct LogRecord {
  std::string phase;  // "dapt", "tapt" or "finetune"
  std::int64_t step = 0;
  std::int64_t epoch = 0;  // fine-tuning only
  double loss = 0.0;
  double accuracy = 0.0;  // MLM accuracy of the batch, or training accuracy of the epoch
  double learning_rate = 0.0;
  std::optional<double> validation_accuracy;
  std::optional<double> wall_ms;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<LogRecord> records;
  nlohmann::json summary = nlohmann::json::object();

  /// One JSON object per record, then {"summary": ...}.
  std::string to_jsonl() const;
  void write(const std::filesystem::path& path) const;
  void append(const TrainLog& other);
};

struct TrainOptions {
  unsigned jobs = 1;
  bool record_timing = false;  // wall_ms makes logs non-reproducible
  std::int64_t log_every = 0;  // 0 means max(1, max_steps / 10)
  // Called every max(1, max_steps / 10) steps and after the final step.
  std::function<void(std::int64_t step, const ModelState& state)> on_checkpoint;
};

struct PretrainResult {
  ModelState state;
  TrainLog log;
};

/// MLM pretraining for plan.max_steps updates over seeded per-epoch shuffles
/// of `examples`. Examples without masked positions are ignored.
PretrainResult pretrain(ModelState state, std::span<const mlm::MlmExample> examples, const TrainPlan& plan,
                        const TrainOptions& options = {});

/// Fraction of masked positions whose argmax equals the target.
double mlm_accuracy(const ModelState& state, std::span<const mlm::MlmExample> examples, unsigned jobs = 1);

/// Fraction of examples whose argmax class equals the label.
double classify_accuracy(const ModelState& state, std::span<const mlm::ClassifyExample> examples,
                         unsigned jobs = 1);

struct FinetuneResult {
  ModelState state;
  TrainLog log;
  std::int64_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_validation_accuracy = 0.0;
};

/// 1-based index of the highest accuracy; ties go to the earliest epoch.
std::int64_t select_best_epoch(std::span<const double> validation_accuracies);

/// Fine-tunes for plan.epochs passes and returns the state after the epoch
/// with the best validation accuracy.
FinetuneResult finetune(ModelState state, std::span<const mlm::ClassifyExample> train,
                        std::span<const mlm::ClassifyExample> validate, const TrainPlan& plan,
                        const TrainOptions& options = {});

/// Applies the pretraining stages of a strategy: none for base, the task
/// examples for tapt, the domain examples for dapt, and both in that order for
/// dapt_plus_tapt.
PretrainResult run_strategy(ModelState state, Strategy strategy, std::span<const mlm::MlmExample> domain,
                            std::span<const mlm::MlmExample> task, const TrainPlan& plan,
                            const TrainOptions& options = {});

}  // namespace daptkit::trainer

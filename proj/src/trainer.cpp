#include "daptkit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "daptkit/rng.hpp"

namespace daptkit::trainer {
namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::size_t kEvalChunk = 64;

bool decays(model::TensorRole role) {
  return role == model::TensorRole::kEmbedding || role == model::TensorRole::kWeight;
}

template <typename Example>
std::vector<Example> gather(std::span<const Example> pool, std::span<const std::size_t> order, std::size_t begin,
                            std::size_t end) {
  std::vector<Example> batch;
  batch.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) batch.push_back(pool[order[i]]);
  return batch;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::kBase:
      return "base";
    case Strategy::kTapt:
      return "tapt";
    case Strategy::kDapt:
      return "dapt";
    case Strategy::kDaptPlusTapt:
      return "dapt_plus_tapt";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::kBase, Strategy::kTapt, Strategy::kDapt, Strategy::kDaptPlusTapt}) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("unknown strategy '" + std::string(name) + "' (expected base, tapt, dapt or dapt_plus_tapt)");
}

void TrainPlan::validate() const {
  std::vector<std::string> problems;
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) problems.push_back("learning_rate must be > 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (max_steps.has_value() == epochs.has_value()) problems.push_back("exactly one of max_steps and epochs must be set");
  if (max_steps && *max_steps < 0) problems.push_back("max_steps must be >= 0");
  if (epochs && *epochs < 0) problems.push_back("epochs must be >= 0");
  if (max_seq < 2) problems.push_back("max_seq must be >= 2");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) problems.push_back("warmup_fraction must lie in [0, 1]");
  if (problems.empty()) return;
  std::string msg = "invalid train plan:";
  for (const auto& p : problems) msg += " " + p + ";";
  msg.pop_back();
  throw ValidationError(msg);
}

nlohmann::json TrainPlan::to_json() const {
  nlohmann::json j = {{"strategy", to_string(strategy)}, {"learning_rate", learning_rate},
                      {"batch_size", batch_size},         {"max_seq", max_seq},
                      {"seed", seed},                     {"warmup_fraction", warmup_fraction}};
  if (max_steps) j["max_steps"] = *max_steps;
  if (epochs) j["epochs"] = *epochs;
  return j;
}

TrainPlan TrainPlan::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("train plan must be a JSON object");
  static const std::vector<std::string> kKeys = {"strategy", "learning_rate", "batch_size", "max_steps",
                                                 "epochs",   "max_seq",       "seed",       "warmup_fraction"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ValidationError("train plan: unknown field '" + key + "'");
    }
  }
  TrainPlan p;
  try {
    if (j.contains("strategy")) p.strategy = parse_strategy(j.at("strategy").get<std::string>());
    p.learning_rate = j.value("learning_rate", p.learning_rate);
    p.batch_size = j.value("batch_size", p.batch_size);
    if (j.contains("max_steps") && !j.at("max_steps").is_null()) p.max_steps = j.at("max_steps").get<std::int64_t>();
    if (j.contains("epochs") && !j.at("epochs").is_null()) p.epochs = j.at("epochs").get<std::int64_t>();
    p.max_seq = j.value("max_seq", p.max_seq);
    p.seed = j.value("seed", p.seed);
    p.warmup_fraction = j.value("warmup_fraction", p.warmup_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train plan: ") + e.what());
  }
  p.validate();
  return p;
}

TrainPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  try {
    return TrainPlan::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

double scheduled_lr(double peak, double warmup_fraction, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0 || step >= total_steps) return 0.0;
  const auto warmup = static_cast<std::int64_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

AdamOptimizer::AdamOptimizer(const model::Parameters<float>& like, AdamConfig config)
    : config_(config), first_(like.zeros_like()), second_(like.zeros_like()) {}

void AdamOptimizer::step(model::Parameters<float>& params, const model::Parameters<float>& grads,
                         double learning_rate) {
  if (grads.tensors.size() != params.tensors.size()) {
    throw ValidationError("gradient set has " + std::to_string(grads.tensors.size()) + " tensors, parameters have " +
                          std::to_string(params.tensors.size()));
  }
  for (std::size_t t = 0; t < grads.tensors.size(); ++t) {
    const auto& g = grads.tensors[t];
    if (g.values.size() != params.tensors[t].values.size()) {
      throw ValidationError("gradient for '" + g.name + "' does not match the parameter shape");
    }
    for (float v : g.values) {
      if (!std::isfinite(v)) throw TrainingError("non-finite gradient in tensor '" + g.name + "'");
    }
  }

  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].values;
    const auto& g = grads.tensors[t].values;
    auto& m = first_.tensors[t].values;
    auto& v = second_.tensors[t].values;
    const double decay = decays(params.tensors[t].role) ? config_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / correction1) / (std::sqrt(vi / correction2) + config_.epsilon);
      const double pi = p[i];
      p[i] = static_cast<float>(pi - learning_rate * (update + decay * pi));
    }
  }
}

nlohmann::json LogRecord::to_json() const {
  nlohmann::json j = {{"phase", phase}, {"step", step}};
  if (phase == "finetune") j["epoch"] = epoch;
  j["loss"] = loss;
  j["accuracy"] = accuracy;
  j["learning_rate"] = learning_rate;
  if (validation_accuracy) j["validation_accuracy"] = *validation_accuracy;
  if (wall_ms) j["wall_ms"] = *wall_ms;
  return j;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) out += r.to_json().dump() + "\n";
  out += nlohmann::json{{"summary", summary}}.dump() + "\n";
  return out;
}

void TrainLog::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << to_jsonl();
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

void TrainLog::append(const TrainLog& other) {
  records.insert(records.end(), other.records.begin(), other.records.end());
  if (!summary.is_array()) summary = summary.empty() ? nlohmann::json::array() : nlohmann::json::array({summary});
  if (other.summary.is_array()) {
    for (const auto& s : other.summary) summary.push_back(s);
  } else if (!other.summary.empty()) {
    summary.push_back(other.summary);
  }
}

PretrainResult pretrain(ModelState state, std::span<const mlm::MlmExample> examples, const TrainPlan& plan,
                        const TrainOptions& options) {
  plan.validate();
  if (plan.strategy == Strategy::kBase) throw ValidationError("pretrain: the base strategy has no pretraining stage");
  if (!plan.max_steps) throw ValidationError("pretrain: the plan must set max_steps");
  if (*plan.max_steps == 0) return {std::move(state), {}};
  if (examples.empty()) throw ValidationError("pretrain: the example stream is empty");

  std::vector<mlm::MlmExample> pool;
  for (const auto& ex : examples) {
    if (!ex.mask_positions.empty()) pool.push_back(ex);
  }
  if (pool.empty()) throw ValidationError("pretrain: no example has a masked position");

  const std::int64_t total = *plan.max_steps;
  const std::string phase(to_string(plan.strategy));
  PretrainResult result{std::move(state), {}};
  const std::int64_t cadence = std::max<std::int64_t>(1, total / 10);
  const std::int64_t log_every = options.log_every > 0 ? options.log_every : cadence;
  const auto batch_size = static_cast<std::size_t>(plan.batch_size);
  const std::uint64_t shuffle_seed = derive_seed(plan.seed, kShuffleStream);
  const std::uint64_t dropout_seed = derive_seed(plan.seed, kDropoutStream);

  AdamOptimizer optimizer(result.state);
  std::vector<std::size_t> order;
  std::size_t cursor = pool.size();
  std::uint64_t epoch = 0;
  const auto start = std::chrono::steady_clock::now();
  double last_loss = 0.0;
  double last_accuracy = 0.0;
  for (std::int64_t step = 0; step < total; ++step) {
    if (cursor >= pool.size()) {
      order = Rng(derive_seed(shuffle_seed, epoch++)).permutation(pool.size());
      cursor = 0;
    }
    const std::size_t end = std::min(pool.size(), cursor + batch_size);
    const auto batch = gather<mlm::MlmExample>(pool, order, cursor, end);
    cursor = end;

    model::ForwardOptions fwd;
    fwd.train_mode = true;
    fwd.dropout_seed = derive_seed(dropout_seed, static_cast<std::uint64_t>(step));
    fwd.jobs = options.jobs;
    const auto lg = model::loss_and_grads<float>(result.state, batch, fwd);
    if (!std::isfinite(lg.loss)) throw TrainingError("non-finite loss at step " + std::to_string(step + 1));
    const double lr = scheduled_lr(plan.learning_rate, plan.warmup_fraction, step, total);
    optimizer.step(result.state, lg.grads, lr);
    last_loss = lg.loss;
    last_accuracy = static_cast<double>(lg.correct) / static_cast<double>(lg.predictions);

    const std::int64_t done = step + 1;
    if (done % log_every == 0 || done == total) {
      LogRecord rec;
      rec.phase = phase;
      rec.step = done;
      rec.loss = lg.loss;
      rec.accuracy = last_accuracy;
      rec.learning_rate = lr;
      if (options.record_timing) rec.wall_ms = elapsed_ms(start);
      result.log.records.push_back(std::move(rec));
    }
    if (options.on_checkpoint && (done % cadence == 0 || done == total)) options.on_checkpoint(done, result.state);
  }

  result.log.summary = {{"phase", phase},
                        {"steps", total},
                        {"examples", pool.size()},
                        {"final_loss", last_loss},
                        {"final_batch_accuracy", last_accuracy},
                        {"seed", plan.seed},
                        {"state_hash", model::content_hash(result.state)}};
  return result;
}

double mlm_accuracy(const ModelState& state, std::span<const mlm::MlmExample> examples, unsigned jobs) {
  std::vector<mlm::MlmExample> chunk;
  std::int64_t correct = 0;
  std::int64_t total = 0;
  model::ForwardOptions opts;
  opts.jobs = jobs;
  auto flush = [&] {
    if (chunk.empty()) return;
    const auto out = model::forward_mlm<float>(state, chunk, opts);
    correct += out.correct;
    total += static_cast<std::int64_t>(out.targets.size());
    chunk.clear();
  };
  for (const auto& ex : examples) {
    if (ex.mask_positions.empty()) continue;
    chunk.push_back(ex);
    if (chunk.size() == kEvalChunk) flush();
  }
  flush();
  if (total == 0) throw ValidationError("mlm_accuracy: no masked positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double classify_accuracy(const ModelState& state, std::span<const mlm::ClassifyExample> examples, unsigned jobs) {
  if (examples.empty()) throw ValidationError("classify_accuracy: no examples");
  std::int64_t correct = 0;
  model::ForwardOptions opts;
  opts.jobs = jobs;
  for (std::size_t i = 0; i < examples.size(); i += kEvalChunk) {
    const auto n = std::min(kEvalChunk, examples.size() - i);
    correct += model::forward_classify<float>(state, examples.subspan(i, n), opts).correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::int64_t select_best_epoch(std::span<const double> validation_accuracies) {
  if (validation_accuracies.empty()) throw ValidationError("select_best_epoch: no epochs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < validation_accuracies.size(); ++i) {
    if (validation_accuracies[i] > validation_accuracies[best]) best = i;
  }
  return static_cast<std::int64_t>(best) + 1;
}

FinetuneResult finetune(ModelState state, std::span<const mlm::ClassifyExample> train,
                        std::span<const mlm::ClassifyExample> validate, const TrainPlan& plan,
                        const TrainOptions& options) {
  plan.validate();
  if (!plan.epochs) throw ValidationError("finetune: the plan must set epochs");
  const int num_labels = state.config.num_labels;
  for (auto set : {train, validate}) {
    for (const auto& ex : set) {
      if (ex.label < 0 || ex.label >= num_labels) {
        throw ValidationError("finetune: label " + std::to_string(ex.label) + " does not fit the model's " +
                              std::to_string(num_labels) + " labels (num_labels mismatch)");
      }
    }
  }

  FinetuneResult result{std::move(state), {}, 0, 0.0};
  const std::int64_t epochs = *plan.epochs;
  if (epochs == 0) {
    result.log.summary = {{"phase", "finetune"}, {"epochs", 0}, {"seed", plan.seed}};
    return result;
  }
  if (train.empty()) throw ValidationError("finetune: the training set is empty");
  if (validate.empty()) throw ValidationError("finetune: the validation set is empty");

  const auto batch_size = static_cast<std::size_t>(plan.batch_size);
  const auto batches_per_epoch = static_cast<std::int64_t>((train.size() + batch_size - 1) / batch_size);
  const std::int64_t total = epochs * batches_per_epoch;
  const std::uint64_t shuffle_seed = derive_seed(plan.seed, kShuffleStream);
  const std::uint64_t dropout_seed = derive_seed(plan.seed, kDropoutStream);

  AdamOptimizer optimizer(result.state);
  ModelState best_state = result.state;
  std::vector<double> val_history;
  std::int64_t step = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = Rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch))).permutation(train.size());
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < train.size(); begin += batch_size, ++step) {
      const auto batch = gather<mlm::ClassifyExample>(train, order, begin, std::min(train.size(), begin + batch_size));
      model::ForwardOptions fwd;
      fwd.train_mode = true;
      fwd.dropout_seed = derive_seed(dropout_seed, static_cast<std::uint64_t>(step));
      fwd.jobs = options.jobs;
      const auto lg = model::loss_and_grads<float>(result.state, batch, fwd);
      if (!std::isfinite(lg.loss)) throw TrainingError("non-finite loss at step " + std::to_string(step + 1));
      lr = scheduled_lr(plan.learning_rate, plan.warmup_fraction, step, total);
      optimizer.step(result.state, lg.grads, lr);
      loss_sum += lg.loss * static_cast<double>(batch.size());
      correct += lg.correct;
    }
    const double val_acc = classify_accuracy(result.state, validate, options.jobs);
    val_history.push_back(val_acc);
    if (select_best_epoch(val_history) == epoch + 1) best_state = result.state;

    LogRecord rec;
    rec.phase = "finetune";
    rec.step = step;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(train.size());
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    rec.learning_rate = lr;
    rec.validation_accuracy = val_acc;
    if (options.record_timing) rec.wall_ms = elapsed_ms(start);
    result.log.records.push_back(std::move(rec));
    if (options.on_checkpoint) options.on_checkpoint(step, result.state);
  }

  result.best_epoch = select_best_epoch(val_history);
  result.best_validation_accuracy = val_history[static_cast<std::size_t>(result.best_epoch - 1)];
  result.state = std::move(best_state);
  result.log.summary = {{"phase", "finetune"},
                        {"epochs", epochs},
                        {"steps", total},
                        {"best_epoch", result.best_epoch},
                        {"best_validation_accuracy", result.best_validation_accuracy},
                        {"seed", plan.seed},
                        {"state_hash", model::content_hash(result.state)}};
  return result;
}

PretrainResult run_strategy(ModelState state, Strategy strategy, std::span<const mlm::MlmExample> domain,
                            std::span<const mlm::MlmExample> task, const TrainPlan& plan,
                            const TrainOptions& options) {
  TrainPlan stage = plan;
  switch (strategy) {
    case Strategy::kBase:
      return {std::move(state), {}};
    case Strategy::kTapt:
      stage.strategy = Strategy::kTapt;
      return pretrain(std::move(state), task, stage, options);
    case Strategy::kDapt:
      stage.strategy = Strategy::kDapt;
      return pretrain(std::move(state), domain, stage, options);
    case Strategy::kDaptPlusTapt: {
      stage.strategy = Strategy::kDapt;
      auto first = pretrain(std::move(state), domain, stage, options);
      stage.strategy = Strategy::kTapt;
      auto second = pretrain(std::move(first.state), task, stage, options);
      first.log.append(second.log);
      return {std::move(second.state), std::move(first.log)};
    }
  }
  return {std::move(state), {}};
}

}  // namespace daptkit::trainer

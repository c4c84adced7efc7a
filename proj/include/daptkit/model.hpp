#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "daptkit/error.hpp"
#include "daptkit/mlm_data.hpp"
#include "json.hpp"

namespace daptkit::model {

using tokenizer::TokenId;

struct ModelConfig {
  int vocab_size = 0;
  int max_seq = 128;
  int hidden_dim = 128;
  int num_layers = 4;
  int num_heads = 4;
  int ffn_dim = 512;
  int num_labels = 2;
  double dropout_rate = 0.1;

  /// Throws ValidationError listing every violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

enum class TensorRole { kEmbedding, kWeight, kBias, kNormScale, kNormShift };

template <typename T>
struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  TensorRole role = TensorRole::kWeight;
  std::vector<T> values;
};

/// Named parameter tensors in a fixed order determined by the config. The
/// same container holds gradients.
template <typename T>
struct Parameters {
  ModelConfig config;
  std::vector<Tensor<T>> tensors;

  Tensor<T>& at(std::string_view name);
  const Tensor<T>& at(std::string_view name) const;
  std::size_t parameter_count() const;

  Parameters zeros_like() const;
  template <typename U>
  Parameters<U> cast() const;
};

using ModelState = Parameters<float>;

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;
  TensorRole role;
};

/// Tensor names and shapes, in storage order. The MLM output layer has no
/// weight of its own: it reuses "embeddings.token" and adds "mlm.bias".
std::vector<TensorSpec> parameter_layout(const ModelConfig& config);

/// Truncated normal (std 0.02, cut at 2 std) for embeddings and weights,
/// ones for norm scales, zeros for biases and shifts.
ModelState init_model(const ModelConfig& config, std::uint64_t seed);

/// Replaces the classifier head with a freshly initialized one of `num_labels`.
ModelState with_classifier(ModelState state, int num_labels, std::uint64_t seed);

/// FNV-1a over the config and every tensor's name, shape and float bytes.
std::string content_hash(const ModelState& state);

template <typename T>
struct Logits {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  std::span<const T> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

/// Numerically stable softmax of one logit row.
template <typename T>
std::vector<double> softmax(std::span<const T> logits);

struct ForwardOptions {
  bool train_mode = false;         // enables dropout
  std::uint64_t dropout_seed = 0;  // per-example masks use derive_seed(dropout_seed, index)
  unsigned jobs = 1;
};

template <typename T>
struct MlmOutput {
  double loss = 0.0;
  Logits<T> logits;                // one row per masked position, batch order
  std::vector<TokenId> targets;
  std::int64_t correct = 0;        // argmax == target
};

template <typename T>
struct ClassifyOutput {
  double loss = 0.0;
  Logits<T> logits;                // batch x num_labels
  std::int64_t correct = 0;
};

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  Parameters<T> grads;
  std::int64_t correct = 0;
  std::int64_t predictions = 0;
};

/// Mean cross-entropy over every masked position in the batch.
template <typename T>
MlmOutput<T> forward_mlm(const Parameters<T>& params, std::span<const mlm::MlmExample> batch,
                         const ForwardOptions& options = {});

/// Mean cross-entropy of the [CLS] classifier over the batch.
template <typename T>
ClassifyOutput<T> forward_classify(const Parameters<T>& params, std::span<const mlm::ClassifyExample> batch,
                                   const ForwardOptions& options = {});

template <typename T>
LossAndGrads<T> loss_and_grads(const Parameters<T>& params, std::span<const mlm::MlmExample> batch,
                               const ForwardOptions& options = {});

template <typename T>
LossAndGrads<T> loss_and_grads(const Parameters<T>& params, std::span<const mlm::ClassifyExample> batch,
                               const ForwardOptions& options = {});

/// Eval-mode classifier logits.
Logits<float> predict_logits(const ModelState& state, std::span<const mlm::ClassifyExample> batch,
                             unsigned jobs = 1);

/// Attention probabilities for one sequence in eval mode, indexed
/// [layer][head][query * max_seq + key]. Rows and columns at or beyond
/// attention_len are zero.
std::vector<std::vector<std::vector<double>>> attention_weights(const ModelState& state,
                                                               std::span<const TokenId> input_ids,
                                                               std::int32_t attention_len);

class CheckpointError : public Error {
 public:
  enum class Kind { kFormat, kVersion, kShape, kTruncated, kConfigMismatch };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr int kCheckpointVersion = 1;

/// Container: 8-byte magic "DAPTCKPT", u64 little-endian header length, JSON
/// header (format_version, config, tensor directory, content hash, metadata),
/// then little-endian float32 payloads in directory order.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

/// Rejects version, shape and payload-length mismatches with distinct kinds.
/// When `expected` is given the stored config must equal it.
ModelState load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace daptkit::model

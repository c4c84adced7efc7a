#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "daptkit/corpus.hpp"
#include "daptkit/tokenizer.hpp"
#include "json.hpp"

namespace daptkit::mlm {

using tokenizer::TokenId;
using Segment = std::vector<TokenId>;

/// A packed sequence of exactly max_seq ids with its masked positions.
/// Positions at or beyond attention_len hold [PAD].
struct MlmExample {
  std::vector<TokenId> input_ids;
  std::vector<std::int32_t> mask_positions;  // sorted, unique
  std::vector<TokenId> target_ids;           // original ids at mask_positions
  std::int32_t attention_len = 0;

  bool operator==(const MlmExample&) const = default;
};

/// [CLS] text [SEP] [PAD]... with a class label.
struct ClassifyExample {
  std::vector<TokenId> input_ids;
  std::int32_t label = 0;
  std::int32_t attention_len = 0;

  bool operator==(const ClassifyExample&) const = default;
};

struct LabeledText {
  std::string text;
  std::int32_t label = 0;
};

struct LabeledDataset {
  std::vector<LabeledText> examples;
  std::vector<std::string> label_names;  // label id -> original label string

  std::int32_t num_labels() const { return static_cast<std::int32_t>(label_names.size()); }
};

struct MaskingConfig {
  double rate = 0.15;
  // Replacement mix for selected positions; the remainder is left unchanged.
  double mask_fraction = 0.8;
  double random_fraction = 0.1;
  std::size_t max_seq = 128;

  void validate() const;
};

/// Concatenates each document's ids followed by [SEP], then cuts the stream
/// into chunks of max_seq - 1 ids, each prefixed with [CLS]. The last chunk
/// may be short.
std::vector<Segment> pack_token_streams(std::span<const std::vector<TokenId>> documents, std::size_t max_seq);

/// Sentence-splits and encodes each document, then packs.
std::vector<Segment> pack_sequences(std::span<const corpus::Document> documents, const tokenizer::Vocabulary& vocab,
                                    std::size_t max_seq);

/// Selects each non-special position independently with probability `rate`
/// and applies the replacement mix. Draws come from Rng(seed) in position
/// order, so the result is a pure function of its arguments.
MlmExample apply_masking(std::span<const TokenId> segment, const tokenizer::Vocabulary& vocab,
                         const MaskingConfig& config, std::uint64_t seed);

/// Masks segment i with seed + i.
std::vector<MlmExample> mask_segments(std::span<const Segment> segments, const tokenizer::Vocabulary& vocab,
                                      const MaskingConfig& config, std::uint64_t seed, unsigned jobs = 1);

/// Writes the targets back over the masked positions.
std::vector<TokenId> restore_masked(const MlmExample& example);

/// Encodes, keeps the first max_seq - 2 ids, wraps in [CLS]..[SEP] and pads.
std::vector<ClassifyExample> build_classify_examples(std::span<const LabeledText> dataset,
                                                     const tokenizer::Vocabulary& vocab, std::size_t max_seq,
                                                     std::int32_t num_labels);

/// Reads a CSV or TSV (by extension) with a header containing "text" and
/// "label". Distinct label strings map to contiguous ids: numeric order if
/// every label is an integer, otherwise lexicographic order.
LabeledDataset read_labeled_table(const std::filesystem::path& path);

/// RFC 4180 style parsing with a configurable delimiter.
std::vector<std::vector<std::string>> parse_delimited(std::string_view text, char delimiter);

// JSONL dataset files: one header object, then one record per line.
void write_segments(const std::filesystem::path& path, std::span<const Segment> segments,
                    const nlohmann::json& header);
std::pair<nlohmann::json, std::vector<Segment>> read_segments(const std::filesystem::path& path);
void write_mlm_examples(const std::filesystem::path& path, std::span<const MlmExample> examples,
                        const nlohmann::json& header);
std::pair<nlohmann::json, std::vector<MlmExample>> read_mlm_examples(const std::filesystem::path& path);

}  // namespace daptkit::mlm

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "daptkit/corpus.hpp"
#include "json.hpp"

namespace daptkit::tokenizer {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr TokenId kNumSpecial = 5;
inline constexpr std::array<std::string_view, 5> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
inline constexpr std::string_view kContinuationPrefix = "##";

constexpr bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

/// Ordered subword inventory. Token id is the position in the list; the five
/// special tokens always occupy ids 0-4.
class Vocabulary {
 public:
  /// Specials only.
  Vocabulary();

  /// Validates uniqueness, non-empty whitespace-free tokens and the special
  /// prefix. Throws ValidationError naming the offending (1-based) position.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::optional<TokenId> find(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Longest token in bytes. Bounds the candidate lengths tried by encode.
  std::size_t max_piece_bytes() const { return max_piece_bytes_; }

  /// FNV-1a over the serialized vocab.txt bytes.
  std::string content_hash() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_bytes_ = 0;
};

/// Whitespace split, then every character that is not an ASCII letter or
/// digit, '#', or a non-ASCII letter becomes a word of its own.
std::vector<std::string> pre_tokenize(std::string_view text);

struct MergeRecord {
  std::string left;
  std::string right;
  std::string merged;
  std::int64_t pair_count = 0;

  bool operator==(const MergeRecord&) const = default;
};

struct TrainResult {
  Vocabulary vocab;
  std::vector<MergeRecord> merges;
  std::size_t alphabet_size = 0;
};

struct TrainOptions {
  std::size_t budget = 30522;
  std::int64_t min_pair_count = 2;
};

/// WordPiece induction from pre-tokenized word counts. Pairs are ranked by
/// count(pair) / (count(left) * count(right)) compared exactly in integer
/// arithmetic; ties go to the lexicographically smallest merged string.
TrainResult train_wordpiece(const std::map<std::string, std::int64_t>& word_counts, const TrainOptions& options);

/// Counts pre-tokenized words across the documents and runs train_wordpiece.
TrainResult train_vocabulary(std::span<const corpus::Document> documents, const TrainOptions& options);

/// Distinct characters plus the continuation forms actually observed.
std::vector<std::string> alphabet(const std::map<std::string, std::int64_t>& word_counts);

std::map<std::string, std::int64_t> count_words(std::span<const corpus::Document> documents);

/// Greedy longest-match-first segmentation of every pre-tokenized word. A
/// word with an unmatched position becomes a single [UNK].
std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);

/// Appends the pieces of one pre-tokenized word to `out`.
void encode_word(std::string_view word, const Vocabulary& vocab, std::vector<TokenId>& out);

/// Joins pieces with spaces, fusing "##" pieces onto the previous piece.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

/// vocab.txt: one token per line, LF-terminated, line index = id.
void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);
std::string serialize_vocab(const Vocabulary& vocab);
Vocabulary parse_vocab(std::string_view text);

struct VocabDiff {
  std::size_t rank_lo = 0;
  std::size_t rank_hi = 0;
  std::vector<std::string> left_only;
  std::vector<std::string> right_only;
  std::vector<std::string> shared;

  bool operator==(const VocabDiff&) const = default;
  nlohmann::json to_json() const;
};

/// Partitions the tokens ranked within [rank_lo, rank_hi] (inclusive) in
/// each vocabulary into shared / left-only / right-only.
VocabDiff compare_vocabularies(const Vocabulary& left, const Vocabulary& right, std::size_t rank_lo,
                               std::size_t rank_hi);

/// Emitted pieces per whitespace word.
double fertility(std::span<const corpus::Document> documents, const Vocabulary& vocab);

}  // namespace daptkit::tokenizer

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace daptkit::corpus {

/// One source text. `text` is normalized: non-empty, and free of control
/// characters other than newline.
struct Document {
  std::string id;
  std::string source;
  std::string text;

  bool operator==(const Document&) const = default;
};

struct SourceCounts {
  std::int64_t documents = 0;
  std::int64_t tokens = 0;

  bool operator==(const SourceCounts&) const = default;
};

struct CorpusStats {
  std::int64_t document_count = 0;
  std::int64_t token_count = 0;  // whitespace-delimited tokens
  std::map<std::string, SourceCounts> per_source;

  bool operator==(const CorpusStats&) const = default;
  nlohmann::json to_json() const;
};

struct IngestOptions {
  bool dedupe = false;    // drop documents whose normalized text was already seen
  unsigned jobs = 1;      // files read concurrently; output order is unaffected
};

/// Reads every file in `paths` (plain text or .jsonl) and returns documents in
/// path order, then record order. Ids are "<file name>:<record index>" unless
/// a JSONL record carries its own "id".
std::vector<Document> ingest(std::span<const std::filesystem::path> paths, std::string_view source,
                             const IngestOptions& options = {});

/// Expands directories into their regular files (recursively, sorted).
std::vector<std::filesystem::path> expand_inputs(std::span<const std::filesystem::path> inputs);

/// Collapses space/tab runs, trims each line, drops control characters except
/// newline, and trims blank lines at both ends. Everything else is preserved
/// byte-for-byte.
std::string normalize(std::string_view text);

/// A slice of raw plain-text input. Paragraph blocks and separator blocks
/// (runs of blank lines) alternate and together cover the input exactly.
struct TextBlock {
  std::string_view text;
  bool separator = false;
};

std::vector<TextBlock> split_paragraphs(std::string_view raw);

/// Splits on '.', '!' or '?' followed by whitespace and then an ASCII
/// uppercase letter or digit. Decimal numbers are never split because their
/// point is not followed by whitespace.
std::vector<std::string> split_sentences(std::string_view text);

CorpusStats stats(std::span<const Document> documents);

/// Documents as JSONL, preceded by one header line ({"format": ...}).
void write_documents(const std::filesystem::path& path, std::span<const Document> documents,
                     const nlohmann::json& header);

}  // namespace daptkit::corpus

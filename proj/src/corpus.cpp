#include "daptkit/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <sstream>
#include <unordered_set>

#include "daptkit/error.hpp"
#include "daptkit/utf8.hpp"

namespace daptkit::corpus {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_blank_line(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return is_space(c); });
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  return buf.str();
}

void require_utf8(std::string_view bytes, const std::filesystem::path& path) {
  if (auto bad = utf8::find_invalid(bytes)) {
    throw EncodingError("'" + path.string() + "' is not valid UTF-8 (byte offset " + std::to_string(*bad) +
                        ")");
  }
}

bool is_jsonl(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".jsonl" || ext == ".ndjson";
}

std::vector<Document> read_plain_text(std::string_view bytes, const std::string& name, std::string_view source) {
  std::vector<Document> out;
  std::size_t record = 0;
  for (const TextBlock& block : split_paragraphs(bytes)) {
    if (block.separator) continue;
    const std::size_t index = record++;
    std::string text = normalize(block.text);
    if (text.empty()) continue;
    out.push_back({name + ":" + std::to_string(index), std::string(source), std::move(text)});
  }
  return out;
}

std::vector<Document> read_jsonl(std::string_view bytes, const std::string& name, std::string_view source) {
  std::vector<Document> out;
  std::size_t record = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string_view::npos) end = bytes.size();
    const std::string_view line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (is_blank_line(line)) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(name + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!obj.is_object()) throw ParseError(name + ":" + std::to_string(line_no) + ": expected a JSON object");
    // Files written by write_documents start with a header record.
    if (line_no == 1 && obj.contains("format") && !obj.contains("text")) continue;

    auto text_it = obj.find("text");
    if (text_it == obj.end() || !text_it->is_string()) {
      throw ParseError(name + ":" + std::to_string(line_no) + ": missing string field \"text\"");
    }
    const std::size_t index = record++;
    std::string text = normalize(text_it->get<std::string>());
    if (text.empty()) continue;

    Document doc;
    auto id_it = obj.find("id");
    doc.id = (id_it != obj.end() && id_it->is_string()) ? id_it->get<std::string>()
                                                         : name + ":" + std::to_string(index);
    auto src_it = obj.find("source");
    doc.source = (src_it != obj.end() && src_it->is_string()) ? src_it->get<std::string>() : std::string(source);
    doc.text = std::move(text);
    out.push_back(std::move(doc));
  }
  return out;
}

std::vector<Document> read_one(const std::filesystem::path& path, std::string_view source) {
  const std::string bytes = read_bytes(path);
  require_utf8(bytes, path);
  const std::string name = path.filename().string();
  return is_jsonl(path) ? read_jsonl(bytes, name, source) : read_plain_text(bytes, name, source);
}

}  // namespace

nlohmann::json CorpusStats::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [source, counts] : per_source) {
    per[source] = {{"documents", counts.documents}, {"tokens", counts.tokens}};
  }
  return {{"document_count", document_count}, {"token_count", token_count}, {"per_source_counts", per}};
}

std::vector<std::filesystem::path> expand_inputs(std::span<const std::filesystem::path> inputs) {
  std::vector<std::filesystem::path> out;
  for (const auto& input : inputs) {
    std::error_code ec;
    if (std::filesystem::is_directory(input, ec)) {
      std::vector<std::filesystem::path> found;
      for (const auto& entry : std::filesystem::recursive_directory_iterator(input)) {
        if (entry.is_regular_file()) found.push_back(entry.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (std::filesystem::exists(input, ec)) {
      out.push_back(input);
    } else {
      throw IoError("input path '" + input.string() + "' does not exist");
    }
  }
  return out;
}

std::vector<Document> ingest(std::span<const std::filesystem::path> paths, std::string_view source,
                             const IngestOptions& options) {
  std::vector<std::vector<Document>> per_file(paths.size());
  const std::size_t jobs = std::max<std::size_t>(1, options.jobs);
  if (jobs == 1 || paths.size() < 2) {
    for (std::size_t i = 0; i < paths.size(); ++i) per_file[i] = read_one(paths[i], source);
  } else {
    // Files are claimed in strides; results are merged by path position.
    std::vector<std::future<void>> workers;
    for (std::size_t w = 0; w < std::min(jobs, paths.size()); ++w) {
      workers.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < paths.size(); i += jobs) per_file[i] = read_one(paths[i], source);
      }));
    }
    for (auto& f : workers) f.get();
  }

  std::vector<Document> out;
  std::unordered_set<std::string> ids;
  std::unordered_set<std::string> seen_text;
  for (auto& docs : per_file) {
    for (auto& doc : docs) {
      if (options.dedupe && !seen_text.insert(doc.text).second) continue;
      if (!ids.insert(doc.id).second) throw ValidationError("duplicate document id '" + doc.id + "'");
      out.push_back(std::move(doc));
    }
  }
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::string line;
  bool pending_space = false;
  bool first_line = true;
  std::size_t blank_run = 0;  // blank lines held back until more content arrives

  auto flush_line = [&] {
    if (line.empty()) {
      if (!first_line) ++blank_run;
    } else {
      if (!first_line) out.append(blank_run + 1, '\n');
      out += line;
      first_line = false;
      blank_run = 0;
    }
    line.clear();
    pending_space = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == '\n') {
      flush_line();
    } else if (c == ' ' || c == '\t') {
      pending_space = !line.empty();
    } else if (c < 0x20 || c == 0x7F) {
      continue;
    } else if (c == 0xC2 && i + 1 < text.size() && static_cast<unsigned char>(text[i + 1]) >= 0x80 &&
               static_cast<unsigned char>(text[i + 1]) <= 0x9F) {
      ++i;  // C1 control, U+0080..U+009F
    } else {
      if (pending_space) line += ' ';
      pending_space = false;
      line += static_cast<char>(c);
    }
  }
  flush_line();
  return out;
}

std::vector<TextBlock> split_paragraphs(std::string_view raw) {
  std::vector<TextBlock> blocks;
  std::size_t block_start = 0;
  bool in_separator = false;
  std::size_t pos = 0;
  while (pos < raw.size()) {
    std::size_t end = raw.find('\n', pos);
    const std::size_t next = end == std::string_view::npos ? raw.size() : end + 1;
    const bool blank = is_blank_line(raw.substr(pos, next - pos));
    if (pos == 0) {
      in_separator = blank;
    } else if (blank != in_separator) {
      blocks.push_back({raw.substr(block_start, pos - block_start), in_separator});
      block_start = pos;
      in_separator = blank;
    }
    pos = next;
  }
  if (block_start < raw.size()) blocks.push_back({raw.substr(block_start), in_separator});
  return blocks;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push_trimmed = [&out](std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    if (!s.empty()) out.emplace_back(s);
  };

  std::size_t start = 0;
  for (std::size_t i = 0; i + 1 < text.size(); ++i) {
    const char c = text[i];
    if ((c != '.' && c != '!' && c != '?') || !is_space(text[i + 1])) continue;
    std::size_t j = i + 1;
    while (j < text.size() && is_space(text[j])) ++j;
    if (j == text.size()) break;
    const auto next = static_cast<unsigned char>(text[j]);
    if ((next >= 'A' && next <= 'Z') || (next >= '0' && next <= '9')) {
      push_trimmed(text.substr(start, i + 1 - start));
      start = j;
      i = j - 1;
    }
  }
  push_trimmed(text.substr(start));
  return out;
}

CorpusStats stats(std::span<const Document> documents) {
  CorpusStats s;
  for (const Document& doc : documents) {
    std::int64_t tokens = 0;
    bool in_token = false;
    for (char c : doc.text) {
      if (is_space(c)) {
        in_token = false;
      } else if (!in_token) {
        in_token = true;
        ++tokens;
      }
    }
    ++s.document_count;
    s.token_count += tokens;
    auto& per = s.per_source[doc.source];
    ++per.documents;
    per.tokens += tokens;
  }
  return s;
}

void write_documents(const std::filesystem::path& path, std::span<const Document> documents,
                     const nlohmann::json& header) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << header.dump() << '\n';
  for (const Document& doc : documents) {
    out << nlohmann::json{{"id", doc.id}, {"source", doc.source}, {"text", doc.text}}.dump() << '\n';
  }
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

}  // namespace daptkit::corpus

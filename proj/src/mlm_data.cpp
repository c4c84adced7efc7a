#include "daptkit/mlm_data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>

#include "daptkit/error.hpp"
#include "daptkit/rng.hpp"
#include "daptkit/utf8.hpp"

namespace daptkit::mlm {
namespace {

using tokenizer::kClsId;
using tokenizer::kMaskId;
using tokenizer::kNumSpecial;
using tokenizer::kPadId;
using tokenizer::kSepId;

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

template <typename Fn>
nlohmann::json read_jsonl_records(const std::filesystem::path& path, std::string_view expected_format, Fn&& on_record) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  nlohmann::json header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (header.is_null()) {
      if (!obj.is_object() || obj.value("format", "") != expected_format) {
        throw ParseError(path.string() + ": expected a header with format \"" + std::string(expected_format) + "\"");
      }
      header = std::move(obj);
      continue;
    }
    try {
      on_record(obj);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad record: " + e.what());
    }
  }
  if (header.is_null()) throw ParseError(path.string() + ": missing header line");
  return header;
}

}  // namespace

void MaskingConfig::validate() const {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("masking rate must lie in [0, 1]");
  if (!(mask_fraction >= 0.0 && random_fraction >= 0.0 && mask_fraction + random_fraction <= 1.0 + 1e-12)) {
    throw ValidationError("mask and random replacement fractions must be non-negative and sum to at most 1");
  }
  if (max_seq < 2) throw ValidationError("max_seq must be at least 2");
}

std::vector<Segment> pack_token_streams(std::span<const std::vector<TokenId>> documents, std::size_t max_seq) {
  if (max_seq < 8) throw ValidationError("max_seq must be at least 8 for packing, got " + std::to_string(max_seq));
  std::vector<Segment> segments;
  Segment current{kClsId};
  auto push = [&](TokenId id) {
    current.push_back(id);
    if (current.size() == max_seq) {
      segments.push_back(std::move(current));
      current.assign(1, kClsId);
    }
  };
  for (const auto& doc : documents) {
    for (TokenId id : doc) push(id);
    push(kSepId);
  }
  if (current.size() > 1) segments.push_back(std::move(current));
  return segments;
}

std::vector<Segment> pack_sequences(std::span<const corpus::Document> documents, const tokenizer::Vocabulary& vocab,
                                    std::size_t max_seq) {
  std::vector<std::vector<TokenId>> streams;
  streams.reserve(documents.size());
  for (const auto& doc : documents) {
    std::vector<TokenId> ids;
    for (const std::string& sentence : corpus::split_sentences(doc.text)) {
      for (const std::string& word : tokenizer::pre_tokenize(sentence)) tokenizer::encode_word(word, vocab, ids);
    }
    streams.push_back(std::move(ids));
  }
  return pack_token_streams(streams, max_seq);
}

MlmExample apply_masking(std::span<const TokenId> segment, const tokenizer::Vocabulary& vocab,
                         const MaskingConfig& config, std::uint64_t seed) {
  config.validate();
  if (segment.size() > config.max_seq) {
    throw ValidationError("segment of length " + std::to_string(segment.size()) + " exceeds max_seq " +
                          std::to_string(config.max_seq));
  }
  const auto vocab_size = static_cast<TokenId>(vocab.size());
  const std::uint64_t random_pool = vocab.size() > static_cast<std::size_t>(kNumSpecial)
                                        ? vocab.size() - static_cast<std::size_t>(kNumSpecial)
                                        : 0;
  Rng rng(seed);
  MlmExample ex;
  ex.input_ids.assign(config.max_seq, kPadId);
  ex.attention_len = static_cast<std::int32_t>(segment.size());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const TokenId id = segment[i];
    if (id < 0 || id >= vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " at position " + std::to_string(i) +
                            " is outside the vocabulary");
    }
    ex.input_ids[i] = id;
    if (tokenizer::is_special(id)) continue;
    if (!(rng.uniform() < config.rate)) continue;
    ex.mask_positions.push_back(static_cast<std::int32_t>(i));
    ex.target_ids.push_back(id);
    const double r = rng.uniform();
    if (r < config.mask_fraction) {
      ex.input_ids[i] = kMaskId;
    } else if (r < config.mask_fraction + config.random_fraction && random_pool > 0) {
      ex.input_ids[i] = kNumSpecial + static_cast<TokenId>(rng.uniform_index(random_pool));
    }
  }
  return ex;
}

std::vector<MlmExample> mask_segments(std::span<const Segment> segments, const tokenizer::Vocabulary& vocab,
                                      const MaskingConfig& config, std::uint64_t seed, unsigned jobs) {
  std::vector<MlmExample> out(segments.size());
  const std::size_t workers = std::max(1U, jobs);
  if (workers == 1 || segments.size() < 2) {
    for (std::size_t i = 0; i < segments.size(); ++i) out[i] = apply_masking(segments[i], vocab, config, seed + i);
    return out;
  }
  std::vector<std::future<void>> tasks;
  for (std::size_t w = 0; w < std::min(workers, segments.size()); ++w) {
    tasks.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < segments.size(); i += workers) {
        out[i] = apply_masking(segments[i], vocab, config, seed + i);
      }
    }));
  }
  for (auto& t : tasks) t.get();
  return out;
}

std::vector<TokenId> restore_masked(const MlmExample& example) {
  std::vector<TokenId> ids = example.input_ids;
  for (std::size_t k = 0; k < example.mask_positions.size(); ++k) {
    ids[static_cast<std::size_t>(example.mask_positions[k])] = example.target_ids[k];
  }
  return ids;
}

std::vector<ClassifyExample> build_classify_examples(std::span<const LabeledText> dataset,
                                                     const tokenizer::Vocabulary& vocab, std::size_t max_seq,
                                                     std::int32_t num_labels) {
  if (max_seq < 2) throw ValidationError("max_seq must be at least 2");
  std::vector<ClassifyExample> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const LabeledText& rec = dataset[i];
    if (rec.label < 0 || rec.label >= num_labels) {
      throw ValidationError("record " + std::to_string(i) + ": label " + std::to_string(rec.label) +
                            " outside [0, " + std::to_string(num_labels) + ")");
    }
    std::vector<TokenId> ids = tokenizer::encode(rec.text, vocab);
    if (ids.size() > max_seq - 2) ids.resize(max_seq - 2);
    ClassifyExample ex;
    ex.input_ids.reserve(max_seq);
    ex.input_ids.push_back(kClsId);
    ex.input_ids.insert(ex.input_ids.end(), ids.begin(), ids.end());
    ex.input_ids.push_back(kSepId);
    ex.attention_len = static_cast<std::int32_t>(ex.input_ids.size());
    ex.input_ids.resize(max_seq, kPadId);
    ex.label = rec.label;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<std::string>> parse_delimited(std::string_view text, char delimiter) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == delimiter) {
      end_field();
    } else if (c == '\n') {
      end_row();
    } else if (c == '\r') {
      if (i + 1 >= text.size() || text[i + 1] != '\n') end_row();
    } else {
      field += c;
      field_started = true;
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field");
  if (field_started || !row.empty()) end_row();
  return rows;
}

LabeledDataset read_labeled_table(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  if (auto bad = utf8::find_invalid(bytes)) {
    throw EncodingError("'" + path.string() + "' is not valid UTF-8 (byte offset " + std::to_string(*bad) + ")");
  }
  const char delimiter = path.extension() == ".tsv" ? '\t' : ',';
  std::vector<std::vector<std::string>> rows;
  try {
    rows = parse_delimited(bytes, delimiter);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (rows.empty()) throw ParseError(path.string() + ": missing header row");
  const auto& header = rows.front();
  const auto text_col = std::find(header.begin(), header.end(), "text") - header.begin();
  const auto label_col = std::find(header.begin(), header.end(), "label") - header.begin();
  if (static_cast<std::size_t>(text_col) == header.size() || static_cast<std::size_t>(label_col) == header.size()) {
    throw ParseError(path.string() + ": header must contain \"text\" and \"label\" columns");
  }

  std::vector<std::pair<std::string, std::string>> raw;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(r + 1) + " has " + std::to_string(row.size()) +
                       " fields, expected " + std::to_string(header.size()));
    }
    raw.emplace_back(corpus::normalize(row[text_col]), row[label_col]);
  }

  std::set<std::string> distinct;
  for (const auto& [text, label] : raw) distinct.insert(label);
  std::vector<std::string> names(distinct.begin(), distinct.end());
  auto as_integer = [](const std::string& s) -> std::optional<long long> {
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
  };
  if (std::all_of(names.begin(), names.end(), [&](const std::string& s) { return as_integer(s).has_value(); })) {
    std::sort(names.begin(), names.end(),
              [&](const std::string& a, const std::string& b) { return *as_integer(a) < *as_integer(b); });
  }
  std::map<std::string, std::int32_t> ids;
  for (std::size_t i = 0; i < names.size(); ++i) ids.emplace(names[i], static_cast<std::int32_t>(i));

  LabeledDataset ds;
  ds.label_names = std::move(names);
  ds.examples.reserve(raw.size());
  for (auto& [text, label] : raw) ds.examples.push_back({std::move(text), ids.at(label)});
  return ds;
}

void write_segments(const std::filesystem::path& path, std::span<const Segment> segments,
                    const nlohmann::json& header) {
  auto out = open_for_write(path);
  nlohmann::json h = header;
  h["format"] = "daptkit-segments";
  h["version"] = 1;
  h["count"] = segments.size();
  out << h.dump() << '\n';
  for (const auto& seg : segments) out << nlohmann::json{{"ids", seg}}.dump() << '\n';
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

std::pair<nlohmann::json, std::vector<Segment>> read_segments(const std::filesystem::path& path) {
  std::vector<Segment> segments;
  auto header = read_jsonl_records(path, "daptkit-segments", [&](const nlohmann::json& rec) {
    segments.push_back(rec.at("ids").get<Segment>());
  });
  return {std::move(header), std::move(segments)};
}

void write_mlm_examples(const std::filesystem::path& path, std::span<const MlmExample> examples,
                        const nlohmann::json& header) {
  auto out = open_for_write(path);
  nlohmann::json h = header;
  h["format"] = "daptkit-mlm";
  h["version"] = 1;
  h["count"] = examples.size();
  out << h.dump() << '\n';
  for (const auto& ex : examples) {
    out << nlohmann::json{{"input_ids", ex.input_ids},
                          {"mask_positions", ex.mask_positions},
                          {"target_ids", ex.target_ids},
                          {"attention_len", ex.attention_len}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

std::pair<nlohmann::json, std::vector<MlmExample>> read_mlm_examples(const std::filesystem::path& path) {
  std::vector<MlmExample> examples;
  auto header = read_jsonl_records(path, "daptkit-mlm", [&](const nlohmann::json& rec) {
    MlmExample ex;
    ex.input_ids = rec.at("input_ids").get<std::vector<TokenId>>();
    ex.mask_positions = rec.at("mask_positions").get<std::vector<std::int32_t>>();
    ex.target_ids = rec.at("target_ids").get<std::vector<TokenId>>();
    ex.attention_len = rec.at("attention_len").get<std::int32_t>();
    if (ex.mask_positions.size() != ex.target_ids.size()) throw ParseError("mask_positions/target_ids length mismatch");
    examples.push_back(std::move(ex));
  });
  return {std::move(header), std::move(examples)};
}

}  // namespace daptkit::mlm

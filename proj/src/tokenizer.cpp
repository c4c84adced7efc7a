#include "daptkit/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "daptkit/error.hpp"
#include "daptkit/hash.hpp"
#include "daptkit/utf8.hpp"

namespace daptkit::tokenizer {
namespace {

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Non-ASCII code points in these ranges split like ASCII punctuation.
bool is_symbol_code_point(char32_t cp) {
  return (cp >= 0xA0 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 || (cp >= 0x2000 && cp <= 0x2BFF) ||
         (cp >= 0x3000 && cp <= 0x303F) || (cp >= 0xFF01 && cp <= 0xFF0F);
}

bool is_word_char(std::string_view text, std::size_t pos) {
  const auto c = static_cast<unsigned char>(text[pos]);
  if (c < 0x80) return std::isalnum(c) != 0 || c == '#';
  return !is_symbol_code_point(utf8::decode_at(text, pos));
}

bool has_continuation_prefix(std::string_view token) {
  return token.size() > kContinuationPrefix.size() && token.starts_with(kContinuationPrefix);
}

std::string piece_body(const std::string& token) {
  return has_continuation_prefix(token) ? token.substr(kContinuationPrefix.size()) : token;
}

// Split a word into its initial character and "##"-prefixed continuations.
std::vector<std::string> initial_symbols(std::string_view word) {
  std::vector<std::string> cps = utf8::split_code_points(word);
  for (std::size_t i = 1; i < cps.size(); ++i) cps[i] = std::string(kContinuationPrefix) + cps[i];
  return cps;
}

class MergeState {
 public:
  explicit MergeState(const std::map<std::string, std::int64_t>& word_counts) {
    for (const auto& [word, count] : word_counts) {
      if (word.empty() || count <= 0) continue;
      std::vector<int> seg;
      for (const std::string& s : initial_symbols(word)) seg.push_back(intern(s));
      words_.push_back({std::move(seg), count});
    }
    for (std::size_t w = 0; w < words_.size(); ++w) add_word(w);
  }

  int intern(const std::string& symbol) {
    auto [it, inserted] = symbol_ids_.try_emplace(symbol, static_cast<int>(symbols_.size()));
    if (inserted) {
      symbols_.push_back(symbol);
      symbol_counts_.push_back(0);
    }
    return it->second;
  }

  const std::string& symbol(int id) const { return symbols_[id]; }

  struct Candidate {
    int left = -1;
    int right = -1;
    std::int64_t count = 0;
  };

  std::optional<Candidate> best_pair(std::int64_t min_count) const {
    std::optional<Candidate> best;
    std::string best_merged;
    for (const auto& [key, count] : pair_counts_) {
      if (count < min_count) continue;
      const Candidate c{static_cast<int>(key >> 32), static_cast<int>(key & 0xffffffffU), count};
      if (!best) {
        best = c;
        best_merged = merged_string(c.left, c.right);
        continue;
      }
      // score = count / (count(left) * count(right)); compare by cross-multiplication.
      const __int128 lhs = static_cast<__int128>(c.count) * symbol_counts_[best->left] * symbol_counts_[best->right];
      const __int128 rhs = static_cast<__int128>(best->count) * symbol_counts_[c.left] * symbol_counts_[c.right];
      if (lhs < rhs) continue;
      std::string merged = merged_string(c.left, c.right);
      if (lhs == rhs) {
        if (merged > best_merged) continue;
        if (merged == best_merged &&
            std::tie(symbols_[c.left], symbols_[c.right]) >= std::tie(symbols_[best->left], symbols_[best->right])) {
          continue;
        }
      }
      best = c;
      best_merged = std::move(merged);
    }
    return best;
  }

  std::string merged_string(int left, int right) const { return symbols_[left] + piece_body(symbols_[right]); }

  void apply_merge(int left, int right, int merged) {
    const auto where = pair_words_.find(key(left, right));
    if (where == pair_words_.end()) return;
    const std::set<std::size_t> affected = where->second;
    for (std::size_t w : affected) {
      remove_word(w);
      auto& seg = words_[w].symbols;
      std::vector<int> next;
      next.reserve(seg.size());
      for (std::size_t i = 0; i < seg.size(); ++i) {
        if (i + 1 < seg.size() && seg[i] == left && seg[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(seg[i]);
        }
      }
      seg = std::move(next);
      add_word(w);
    }
  }

 private:
  struct Word {
    std::vector<int> symbols;
    std::int64_t count;
  };

  static std::uint64_t key(int left, int right) {
    return (static_cast<std::uint64_t>(left) << 32) | static_cast<std::uint32_t>(right);
  }

  void add_word(std::size_t w) {
    const Word& word = words_[w];
    for (std::size_t i = 0; i < word.symbols.size(); ++i) {
      symbol_counts_[word.symbols[i]] += word.count;
      if (i + 1 < word.symbols.size()) {
        const auto k = key(word.symbols[i], word.symbols[i + 1]);
        pair_counts_[k] += word.count;
        pair_words_[k].insert(w);
      }
    }
  }

  void remove_word(std::size_t w) {
    const Word& word = words_[w];
    for (std::size_t i = 0; i < word.symbols.size(); ++i) {
      symbol_counts_[word.symbols[i]] -= word.count;
      if (i + 1 < word.symbols.size()) {
        const auto k = key(word.symbols[i], word.symbols[i + 1]);
        auto it = pair_counts_.find(k);
        it->second -= word.count;
        if (it->second == 0) pair_counts_.erase(it);
        // A pair repeated within the word was already unlinked on its first occurrence.
        auto words_it = pair_words_.find(k);
        if (words_it == pair_words_.end()) continue;
        words_it->second.erase(w);
        if (words_it->second.empty()) pair_words_.erase(words_it);
      }
    }
  }

  std::vector<Word> words_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> symbol_ids_;
  std::vector<std::int64_t> symbol_counts_;
  // Ordered map keeps the candidate scan deterministic.
  std::map<std::uint64_t, std::int64_t> pair_counts_;
  std::unordered_map<std::uint64_t, std::set<std::size_t>> pair_words_;
};

}  // namespace

Vocabulary::Vocabulary() {
  for (std::string_view s : kSpecialTokens) {
    index_.emplace(std::string(s), static_cast<TokenId>(tokens_.size()));
    tokens_.emplace_back(s);
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecialTokens.size()) {
    throw ValidationError("vocabulary needs at least the " + std::to_string(kSpecialTokens.size()) +
                          " special tokens, got " + std::to_string(tokens.size()));
  }
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    const std::string where = "token " + std::to_string(i + 1);
    if (i < kSpecialTokens.size() && t != kSpecialTokens[i]) {
      throw ValidationError(where + ": expected special token " + std::string(kSpecialTokens[i]) + ", found '" +
                            t + "'");
    }
    if (t.empty()) throw ValidationError(where + ": empty token");
    if (std::any_of(t.begin(), t.end(), is_ascii_space)) throw ValidationError(where + ": token contains whitespace");
    if (!v.index_.emplace(t, static_cast<TokenId>(i)).second) {
      throw ValidationError(where + ": duplicate token '" + t + "'");
    }
    v.max_piece_bytes_ = std::max(v.max_piece_bytes_, t.size());
  }
  v.tokens_ = std::move(tokens);
  return v;
}

std::optional<TokenId> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::content_hash() const { return hash_bytes(serialize_vocab(*this)); }

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_ascii_space(text[i])) {
      flush();
      ++i;
      continue;
    }
    std::size_t len = utf8::sequence_length(static_cast<unsigned char>(text[i]));
    if (len == 0 || i + len > text.size()) len = 1;
    if (is_word_char(text, i)) {
      current.append(text.substr(i, len));
    } else {
      flush();
      words.emplace_back(text.substr(i, len));
    }
    i += len;
  }
  flush();
  return words;
}

std::vector<std::string> alphabet(const std::map<std::string, std::int64_t>& word_counts) {
  std::set<std::string> chars;
  for (const auto& [word, count] : word_counts) {
    if (count <= 0) continue;
    const auto cps = utf8::split_code_points(word);
    for (std::size_t i = 0; i < cps.size(); ++i) {
      chars.insert(cps[i]);
      if (i > 0) chars.insert(std::string(kContinuationPrefix) + cps[i]);
    }
  }
  return {chars.begin(), chars.end()};
}

std::map<std::string, std::int64_t> count_words(std::span<const corpus::Document> documents) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& doc : documents) {
    for (auto& w : pre_tokenize(doc.text)) ++counts[std::move(w)];
  }
  return counts;
}

TrainResult train_wordpiece(const std::map<std::string, std::int64_t>& word_counts, const TrainOptions& options) {
  const std::vector<std::string> chars = alphabet(word_counts);
  if (chars.empty()) throw ValidationError("cannot train a vocabulary on an empty corpus");
  const std::size_t minimum = kSpecialTokens.size() + chars.size();
  if (options.budget < minimum) {
    throw ValidationError("vocabulary budget " + std::to_string(options.budget) + " is below the minimum of " +
                          std::to_string(minimum) + " (5 special tokens + " + std::to_string(chars.size()) +
                          " characters)");
  }

  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  tokens.insert(tokens.end(), chars.begin(), chars.end());
  std::set<std::string> in_vocab(tokens.begin(), tokens.end());

  TrainResult result;
  result.alphabet_size = chars.size();
  MergeState state(word_counts);
  while (tokens.size() < options.budget) {
    const auto best = state.best_pair(options.min_pair_count);
    if (!best) break;
    std::string merged = state.merged_string(best->left, best->right);
    result.merges.push_back({state.symbol(best->left), state.symbol(best->right), merged, best->count});
    const int merged_id = state.intern(merged);
    state.apply_merge(best->left, best->right, merged_id);
    if (in_vocab.insert(merged).second) tokens.push_back(std::move(merged));
  }
  result.vocab = Vocabulary::from_tokens(std::move(tokens));
  return result;
}

TrainResult train_vocabulary(std::span<const corpus::Document> documents, const TrainOptions& options) {
  if (documents.empty()) throw ValidationError("cannot train a vocabulary on an empty corpus");
  return train_wordpiece(count_words(documents), options);
}

void encode_word(std::string_view word, const Vocabulary& vocab, std::vector<TokenId>& out) {
  const std::size_t mark = out.size();
  std::string candidate;
  std::size_t pos = 0;
  while (pos < word.size()) {
    // Code point boundaries reachable from pos, longest first.
    std::vector<std::size_t> ends;
    for (std::size_t end = pos; end < word.size() && end - pos < vocab.max_piece_bytes();) {
      std::size_t len = utf8::sequence_length(static_cast<unsigned char>(word[end]));
      if (len == 0) len = 1;
      end = std::min(word.size(), end + len);
      if (end - pos > vocab.max_piece_bytes()) break;
      ends.push_back(end);
    }
    std::optional<TokenId> match;
    std::size_t match_end = pos;
    for (auto it = ends.rbegin(); it != ends.rend() && !match; ++it) {
      candidate.assign(pos == 0 ? "" : kContinuationPrefix);
      candidate.append(word.substr(pos, *it - pos));
      if (auto id = vocab.find(candidate); id && !is_special(*id)) {
        match = id;
        match_end = *it;
      }
    }
    if (!match) {
      out.resize(mark);
      out.push_back(kUnkId);
      return;
    }
    out.push_back(*match);
    pos = match_end;
  }
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const std::string& word : pre_tokenize(text)) encode_word(word, vocab, ids);
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (!is_special(id) && has_continuation_prefix(tok)) {
      out.append(tok, kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

std::string serialize_vocab(const Vocabulary& vocab) {
  std::string out;
  for (const auto& t : vocab.tokens()) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary parse_vocab(std::string_view text) {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, std::size_t> first_seen;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string tok(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (tok.empty()) throw ParseError("vocab line " + std::to_string(line_no) + ": empty line");
    if (auto [it, inserted] = first_seen.emplace(tok, line_no); !inserted) {
      throw ParseError("vocab line " + std::to_string(line_no) + ": duplicate token '" + tok + "' (first on line " +
                       std::to_string(it->second) + ")");
    }
    tokens.push_back(std::move(tok));
  }
  try {
    return Vocabulary::from_tokens(std::move(tokens));
  } catch (const ValidationError& e) {
    throw ParseError(std::string("invalid vocabulary: ") + e.what());
  }
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << serialize_vocab(vocab);
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (auto bad = utf8::find_invalid(bytes)) {
    throw EncodingError("'" + path.string() + "' is not valid UTF-8 (byte offset " + std::to_string(*bad) + ")");
  }
  try {
    return parse_vocab(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

nlohmann::json VocabDiff::to_json() const {
  return {{"rank_lo", rank_lo},
          {"rank_hi", rank_hi},
          {"left_only", left_only},
          {"right_only", right_only},
          {"shared", shared}};
}

VocabDiff compare_vocabularies(const Vocabulary& left, const Vocabulary& right, std::size_t rank_lo,
                               std::size_t rank_hi) {
  const std::size_t limit = std::min(left.size(), right.size());
  if (rank_lo > rank_hi || rank_hi >= limit) {
    throw ValidationError("rank tier [" + std::to_string(rank_lo) + ", " + std::to_string(rank_hi) +
                          "] must satisfy lo <= hi < " + std::to_string(limit));
  }
  const auto& lt = left.tokens();
  const auto& rt = right.tokens();
  std::set<std::string> right_tier(rt.begin() + rank_lo, rt.begin() + rank_hi + 1);
  std::set<std::string> left_tier(lt.begin() + rank_lo, lt.begin() + rank_hi + 1);

  VocabDiff diff;
  diff.rank_lo = rank_lo;
  diff.rank_hi = rank_hi;
  for (std::size_t r = rank_lo; r <= rank_hi; ++r) {
    if (right_tier.count(lt[r])) {
      diff.shared.push_back(lt[r]);
    } else {
      diff.left_only.push_back(lt[r]);
    }
    if (!left_tier.count(rt[r])) diff.right_only.push_back(rt[r]);
  }
  return diff;
}

double fertility(std::span<const corpus::Document> documents, const Vocabulary& vocab) {
  std::int64_t words = 0;
  std::int64_t pieces = 0;
  for (const auto& doc : documents) {
    pieces += static_cast<std::int64_t>(encode(doc.text, vocab).size());
    std::istringstream in(doc.text);
    std::string w;
    while (in >> w) ++words;
  }
  if (words == 0) throw ValidationError("fertility is undefined for an empty corpus");
  return static_cast<double>(pieces) / static_cast<double>(words);
}

}  // namespace daptkit::tokenizer

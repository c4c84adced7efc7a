#include <map>

#include "daptkit/corpus.hpp"
#include "daptkit/error.hpp"
#include "daptkit/rng.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace daptkit;
using corpus::Document;

TEST_SUITE("corpus") {
  TEST_CASE("normalize collapses spaces and trims lines") {
    CHECK(corpus::normalize("") == "");
    CHECK(corpus::normalize("  a \t  b  ") == "a b");
    CHECK(corpus::normalize("\n\nx\n  y  \n\n") == "x\ny");
    CHECK(corpus::normalize("a\x01z") == "az");
    CHECK(corpus::normalize("caf\xc3\xa9  \xe2\x88\x91") == "caf\xc3\xa9 \xe2\x88\x91");
  }

  TEST_CASE("split_sentences keeps decimals intact") {
    CHECK(corpus::split_sentences("").empty());
    CHECK(corpus::split_sentences("What is 2.6 + -10.9? A: -8.3") ==
          std::vector<std::string>{"What is 2.6 + -10.9?", "A: -8.3"});
    CHECK(corpus::split_sentences("One.") == std::vector<std::string>{"One."});
    const auto s = corpus::split_sentences("x = 1.5 is small. Next point.");
    REQUIRE(s.size() == 2);
    CHECK(s[0].find("1.5") != std::string::npos);
    CHECK(corpus::split_sentences("see fig. a then") == std::vector<std::string>{"see fig. a then"});
  }

  TEST_CASE("split_paragraphs covers the input exactly") {
    const std::string raw = "p1 line\nmore\n\n\np2\n \nq";
    std::string joined;
    int paragraphs = 0;
    for (const auto& b : corpus::split_paragraphs(raw)) {
      joined += b.text;
      if (!b.separator) ++paragraphs;
    }
    CHECK(joined == raw);
    CHECK(paragraphs == 3);
  }

  TEST_CASE("stats counts whitespace tokens per source") {
    CHECK(corpus::stats({}) == corpus::CorpusStats{});
    const std::vector<Document> two = {{"1", "s", "a b"}, {"2", "s", "c"}};
    const auto st = corpus::stats(two);
    CHECK(st.document_count == 2);
    CHECK(st.token_count == 3);

    Rng rng(5);
    std::vector<Document> docs;
    std::map<std::string, std::int64_t> tokens_by_source;
    for (int i = 0; i < 40; ++i) {
      const std::string source = "src" + std::to_string(rng.uniform_index(3));
      std::string text;
      const auto n = 1 + rng.uniform_index(9);
      for (std::uint64_t w = 0; w < n; ++w) text += (w ? " " : "") + std::string(1, static_cast<char>('a' + w));
      docs.push_back({std::to_string(i), source, text});
      tokens_by_source[source] += static_cast<std::int64_t>(n);
    }
    const auto mixed = corpus::stats(docs);
    std::int64_t doc_sum = 0, tok_sum = 0;
    for (const auto& [src, c] : mixed.per_source) {
      doc_sum += c.documents;
      tok_sum += c.tokens;
      CHECK(c.tokens == tokens_by_source[src]);
    }
    CHECK(doc_sum == mixed.document_count);
    CHECK(tok_sum == mixed.token_count);
  }

  TEST_CASE("ingest reads text paragraphs and jsonl records") {
    testing::TempDir dir;
    testing::write_file(dir / "a.txt", "First para.\n\nSecond  para.\n");
    testing::write_file(dir / "b.jsonl", "{\"text\": \"rec one\"}\n\n{\"id\": \"custom\", \"text\": \"rec two\"}\n");
    const std::vector<std::filesystem::path> paths = {dir / "a.txt", dir / "b.jsonl"};
    const auto docs = corpus::ingest(paths, "math");
    REQUIRE(docs.size() == 4);
    CHECK(docs[0] == Document{"a.txt:0", "math", "First para."});
    CHECK(docs[1].text == "Second para.");
    CHECK(docs[2].id == "b.jsonl:0");
    CHECK(docs[3].id == "custom");

    corpus::IngestOptions par;
    par.jobs = 3;
    CHECK(corpus::ingest(paths, "math", par) == docs);
  }

  TEST_CASE("ingest dedupe and errors") {
    testing::TempDir dir;
    testing::write_file(dir / "a.txt", "same\n\nsame\n\nother");
    const std::vector<std::filesystem::path> one = {dir / "a.txt"};
    CHECK(corpus::ingest(one, "s").size() == 3);
    corpus::IngestOptions dd;
    dd.dedupe = true;
    CHECK(corpus::ingest(one, "s", dd).size() == 2);

    testing::write_file(dir / "bad.txt", "ok \xff\xfe");
    const std::vector<std::filesystem::path> bad = {dir / "bad.txt"};
    CHECK_THROWS_AS(corpus::ingest(bad, "s"), EncodingError);

    testing::write_file(dir / "bad.jsonl", "{\"text\": 3}\n");
    const std::vector<std::filesystem::path> badj = {dir / "bad.jsonl"};
    CHECK_THROWS_AS(corpus::ingest(badj, "s"), ParseError);

    const std::vector<std::filesystem::path> missing = {dir / "nope.txt"};
    CHECK_THROWS_AS(corpus::ingest(missing, "s"), IoError);
  }

  TEST_CASE("write_documents output is re-ingestible") {
    testing::TempDir dir;
    const std::vector<Document> docs = {{"x:0", "s", "alpha beta"}, {"x:1", "t", "gamma"}};
    corpus::write_documents(dir / "c.jsonl", docs, {{"format", "daptkit-corpus"}});
    const std::vector<std::filesystem::path> paths = {dir / "c.jsonl"};
    CHECK(corpus::ingest(paths, "ignored") == docs);
  }

  TEST_CASE("expand_inputs walks directories in sorted order") {
    testing::TempDir dir;
    std::filesystem::create_directories(dir / "sub");
    testing::write_file(dir / "b.txt", "b");
    testing::write_file(dir / "sub" / "a.txt", "a");
    const std::vector<std::filesystem::path> in = {dir.path()};
    const auto out = corpus::expand_inputs(in);
    REQUIRE(out.size() == 2);
    CHECK(out[0].filename() == "b.txt");
    CHECK(out[1].filename() == "a.txt");
  }
}

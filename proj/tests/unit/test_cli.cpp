#include <cstdlib>
#include <sstream>

#include "daptkit/cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace daptkit;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
  nlohmann::json summary() const { return nlohmann::json::parse(out); }
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

Result must(const std::vector<std::string>& args) {
  auto r = run(args);
  INFO(r.err);
  REQUIRE(r.code == cli::kExitOk);
  return r;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and exit codes") {
    CHECK(run({}).code == cli::kExitUsage);
    const auto bogus = run({"bogus"});
    CHECK(bogus.code == cli::kExitUsage);
    CHECK(bogus.err.find("train-vocab") != std::string::npos);
    CHECK(run({"train-vocab"}).code == cli::kExitUsage);
    CHECK(run({"stats", "/nonexistent/path/xyz"}).code == cli::kExitFailure);
    CHECK(run({"train-vocab", "x.txt", "--budget", "many"}).code == cli::kExitFailure);
    CHECK(run({"--help"}).code == cli::kExitOk);
  }

  TEST_CASE("stats on an empty directory") {
    testing::TempDir dir;
    std::filesystem::create_directories(dir / "empty");
    const auto r = must({"stats", (dir / "empty").string()});
    CHECK(r.summary().at("document_count") == 0);
    CHECK(r.summary().at("token_count") == 0);
  }

  TEST_CASE("toy pipeline is re-runnable with identical bytes") {
    testing::TempDir dir;
    const auto toy = testing::fixture_dir() / "toy";
    auto p = [&](const std::string& name) { return (dir / name).string(); };
    const std::vector<std::vector<std::string>> steps = {
        {"ingest", (toy / "domain").string(), "--source", "domain", "--out", p("docs.jsonl")},
        {"train-vocab", p("docs.jsonl"), "--budget", "120", "--out", p("vocab.txt"), "--merges", p("merges.jsonl")},
        {"pack", p("docs.jsonl"), "--vocab", p("vocab.txt"), "--max-seq", "32", "--out", p("seg.jsonl")},
        {"mask", "--segments", p("seg.jsonl"), "--vocab", p("vocab.txt"), "--seed", "3", "--out", p("mlm.jsonl")},
        {"pretrain", "--examples", p("mlm.jsonl"), "--vocab", p("vocab.txt"), "--max-seq", "32", "--hidden-dim", "16",
         "--num-layers", "1", "--num-heads", "2", "--ffn-dim", "32", "--max-steps", "20", "--batch-size", "8",
         "--learning-rate", "0.001", "--seed", "1", "--out", p("dapt.ckpt"), "--log", p("dapt.log")},
        {"finetune", "--data", (toy / "task.csv").string(), "--vocab", p("vocab.txt"), "--init", p("dapt.ckpt"),
         "--epochs", "2", "--batch-size", "8", "--learning-rate", "0.001", "--seed", "2", "--out", p("ft.ckpt"),
         "--log", p("ft.log")},
        {"report", "--input", (testing::fixture_dir() / "results_table.json").string(), "--out", p("table.md")},
    };
    std::map<std::string, std::string> first;
    for (int round = 0; round < 2; ++round) {
      std::vector<std::string> outs;
      for (const auto& s : steps) outs.push_back(must(s).out);
      for (const auto& entry : std::filesystem::directory_iterator(dir.path())) {
        const auto name = entry.path().filename().string();
        const auto bytes = testing::read_file(entry.path());
        if (round == 0) {
          first[name] = bytes;
        } else {
          INFO(name);
          CHECK(first.at(name) == bytes);
        }
      }
    }
    CHECK(first.size() == 10);
    const auto pre = nlohmann::json::parse(first.at("dapt.log").substr(first.at("dapt.log").rfind("{\"summary\"")));
    CHECK(pre.at("summary").at("steps") == 20);
    CHECK(first.at("table.md").find("**97.57**") != std::string::npos);
    CHECK(first.at("seg.jsonl").find("\"vocab_hash\"") != std::string::npos);
  }

  TEST_CASE("config file, flags and environment") {
    testing::TempDir dir;
    const auto domain = (testing::fixture_dir() / "toy" / "domain").string();
    testing::write_file(dir / "cfg.json", R"({"train-vocab": {"budget": 90}, "min_pair_count": 3})");
    auto size_of = [](const std::string& path) {
      std::ifstream in(path);
      std::string line;
      int n = 0;
      while (std::getline(in, line)) ++n;
      return n;
    };
    const auto v = (dir / "v.txt").string();
    must({"--config", (dir / "cfg.json").string(), "train-vocab", domain, "--out", v});
    CHECK(size_of(v) == 90);
    must({"--config", (dir / "cfg.json").string(), "train-vocab", domain, "--budget", "100", "--out", v});
    CHECK(size_of(v) == 100);

    setenv("DAPTKIT_BUDGET", "95", 1);
    must({"train-vocab", domain, "--out", v});
    unsetenv("DAPTKIT_BUDGET");
    CHECK(size_of(v) == 95);

    testing::write_file(dir / "bad.json", R"({"trian-vocab": {"budget": 90}})");
    CHECK(run({"--config", (dir / "bad.json").string(), "train-vocab", domain, "--out", v}).code != cli::kExitOk);
  }

  TEST_CASE("compare-vocab over a rank tier") {
    testing::TempDir dir;
    std::string a = "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n", b = a;
    for (int i = 5; i < 2200; ++i) {
      a += "a" + std::to_string(i) + "\n";
      b += (i % 2 ? "a" : "b") + std::to_string(i) + "\n";
    }
    testing::write_file(dir / "a.txt", a);
    testing::write_file(dir / "b.txt", b);
    must({"compare-vocab", (dir / "a.txt").string(), (dir / "b.txt").string(), "--lo", "2050", "--hi", "2100", "--out",
          (dir / "diff.json").string()});
    const auto diff = nlohmann::json::parse(testing::read_file(dir / "diff.json"));
    CHECK(diff.at("shared").size() + diff.at("left_only").size() == 51);
    CHECK(diff.at("shared").size() == 25);
  }
}

#include <cmath>
#include <set>

#include "daptkit/eval.hpp"
#include "daptkit/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace daptkit;
using namespace daptkit::eval;

namespace {

using Ints = std::vector<std::int32_t>;
using Reals = std::vector<double>;

std::string row_line(const std::string& markdown, const std::string& prefix) {
  const auto at = markdown.find(prefix);
  REQUIRE(at != std::string::npos);
  return markdown.substr(at, markdown.find('\n', at) - at);
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("split sizes reproduce the published task splits") {
    const SplitSpec spec;
    CHECK(split_sizes(13722, spec) == SplitSizes{9879, 1098, 2745});
    CHECK(split_sizes(141186, spec) == SplitSizes{101653, 11295, 28238});
    CHECK(split_sizes(269230, spec) == SplitSizes{193845, 21539, 53846});
    CHECK_THROWS_AS(split_sizes(2, spec), ValidationError);
  }

  TEST_CASE("split is a seeded exact partition") {
    SplitSpec spec;
    spec.seed = 4;
    const auto a = split(101, spec);
    const auto b = split(101, spec);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    std::set<std::size_t> all;
    for (const auto* part : {&a.train, &a.validate, &a.test}) all.insert(part->begin(), part->end());
    CHECK(all.size() == 101);
    CHECK(*all.rbegin() == 100);
    CHECK(a.train.size() == split_sizes(101, spec).train);
    spec.seed = 5;
    CHECK(split(101, spec).train != a.train);
  }

  TEST_CASE("accuracy and F1 closed forms") {
    CHECK(accuracy(Ints{1, 0, 1, 1}, Ints{1, 1, 1, 0}) == 0.5);
    CHECK(accuracy(Ints{0, 0}, Ints{1, 1}) == 0.0);
    CHECK(accuracy(Ints{2, 1}, Ints{2, 1}) == 1.0);
    CHECK(f1_macro(Ints{0, 1, 2}, Ints{0, 1, 2}, 3) == 1.0);
    CHECK(f1_macro(Ints{0, 0, 0, 0}, Ints{0, 0, 1, 1}, 2) == doctest::Approx(1.0 / 3.0));
    CHECK(f1_macro(Ints{0}, Ints{0}, 1) == 1.0);
    CHECK(f1(Ints{0, 0, 0, 0}, Ints{0, 0, 1, 1}, 2, F1Average::kMicro) == doctest::Approx(0.5));
    CHECK(f1(Ints{0, 0, 0, 0}, Ints{0, 0, 0, 1}, 2, F1Average::kWeighted) == doctest::Approx(0.75 * (6.0 / 7.0)));
    CHECK(parse_f1_average("weighted") == F1Average::kWeighted);
    CHECK_THROWS_AS(parse_f1_average("median"), ValidationError);
    CHECK_THROWS_AS(accuracy(Ints{1}, Ints{1, 0}), ValidationError);
    const auto cm = confusion_matrix(Ints{0, 1, 1}, Ints{0, 0, 1}, 2);
    CHECK(cm == std::vector<std::vector<std::int64_t>>{{1, 1}, {0, 1}});
  }

  TEST_CASE("binary AUC closed forms") {
    CHECK(auc_binary(Reals{0.9, 0.8, 0.3, 0.1}, Ints{1, 1, 0, 0}) == 1.0);
    CHECK(auc_binary(Reals{0.9, 0.8, 0.3, 0.1}, Ints{1, 0, 1, 0}) == 0.75);
    CHECK(auc_binary(Reals{0.5, 0.5, 0.5}, Ints{1, 0, 1}) == 0.5);
    CHECK_THROWS_AS(auc_binary(Reals{0.1, 0.2}, Ints{1, 1}), ValidationError);
  }

  TEST_CASE("metrics agree with the oracles on random instances") {
    Rng rng(21);
    for (int trial = 0; trial < 60; ++trial) {
      const auto n = 2 + rng.uniform_index(150);
      Reals scores(n);
      Ints labels(n), preds(n);
      const int k = 2 + static_cast<int>(rng.uniform_index(4));
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = static_cast<double>(rng.uniform_index(12)) / 11.0;
        labels[i] = static_cast<std::int32_t>(rng.uniform_index(2));
        preds[i] = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
      }
      labels[0] = 0;
      labels[1] = 1;
      CHECK(std::abs(auc_binary(scores, labels) - oracle::auc_pairs(scores, labels)) <= 1e-12);
      CHECK(std::abs(auc_binary(scores, labels) - oracle::auc_trapezoid(scores, labels)) <= 1e-12);

      Ints gold(n);
      for (auto& g : gold) g = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
      CHECK(std::abs(f1_macro(preds, gold, k) - oracle::f1_macro(preds, gold, k)) <= 1e-12);
      CHECK(accuracy(preds, gold) == doctest::Approx(oracle::accuracy(preds, gold, k)).epsilon(1e-15));

      // Permuting the examples changes nothing.
      const auto perm = rng.permutation(n);
      Reals s2(n);
      Ints l2(n), p2(n), g2(n);
      for (std::size_t i = 0; i < n; ++i) {
        s2[i] = scores[perm[i]];
        l2[i] = labels[perm[i]];
        p2[i] = preds[perm[i]];
        g2[i] = gold[perm[i]];
      }
      CHECK(auc_binary(s2, l2) == auc_binary(scores, labels));
      CHECK(f1_macro(p2, g2, k) == doctest::Approx(f1_macro(preds, gold, k)).epsilon(1e-15));
    }
  }

  TEST_CASE("multiclass AUC") {
    CHECK(auc_multiclass(Reals{1, 0, 0, 0, 1, 0, 0, 0, 1}, 3, Ints{0, 1, 2}) == 1.0);
    const Reals uniform(12, 1.0 / 3.0);
    CHECK(auc_multiclass(uniform, 3, Ints{0, 1, 2, 1}) == 0.5);

    const Reals probs = {0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4, 0.5, 0.1, 0.4};
    const Ints labels = {0, 1, 2, 2};
    double expected = 0.0;
    for (int c = 0; c < 3; ++c) {
      Reals s;
      Ints l;
      for (std::size_t i = 0; i < 4; ++i) {
        s.push_back(probs[i * 3 + static_cast<std::size_t>(c)]);
        l.push_back(labels[i] == c ? 1 : 0);
      }
      expected += oracle::auc_pairs(s, l) / 3.0;
    }
    CHECK(auc_multiclass(probs, 3, labels) == doctest::Approx(expected).epsilon(1e-12));
    CHECK_THROWS_AS(auc_multiclass(Reals{0.5, 0.6}, 2, Ints{0}), ValidationError);
  }

  TEST_CASE("summaries") {
    const auto same = summarize(Reals{0.7, 0.7, 0.7, 0.7, 0.7});
    CHECK(same.std == 0.0);
    CHECK(same.mean == doctest::Approx(0.7));
    const auto s = summarize(Reals{1.0, 2.0, 3.0});
    CHECK(s.std == doctest::Approx(1.0));
    CHECK(format_percent(0.92674) == "92.67");
    CHECK(format_percent(-0.00001) == "0.00");
  }

  TEST_CASE("published results table: deltas and marks") {
    const auto fx = load_results_fixture(testing::fixture_dir() / "results_table.json");
    EvalReport report = fx.report;
    report.deltas = compute_deltas(report);
    REQUIRE(report.deltas.size() == fx.published_deltas.size());
    for (const auto& pub : fx.published_deltas) {
      bool found = false;
      for (const auto& d : report.deltas) {
        if (d.name != pub.name || d.vocab != pub.vocab) continue;
        found = true;
        for (const auto& [metric, value] : pub.values) CHECK(std::abs(d.values.at(metric) - value) <= 0.0001 + 1e-12);
      }
      CHECK(found);
    }
    const auto* dp = &report.deltas[0];
    CHECK(dp->name == "d-p");
    CHECK(dp->values.at("kc_f1") * 100 == doctest::Approx(3.98));

    const auto md = render_markdown(report);
    CHECK(row_line(md, "| dapt_tapt | custom |").find("**97.57**") != std::string::npos);
    CHECK(row_line(md, "| dapt | orig |").find("**92.67**") != std::string::npos);
    CHECK(row_line(md, "| dapt_tapt | custom |").find("<u>92.65</u>") != std::string::npos);
    CHECK(row_line(md, "| d-dt | orig |").find("-1.44") != std::string::npos);

    CHECK(EvalReport::from_json(report.to_json()) == report);
    CHECK(nlohmann::json::parse(render_json(report)) == report.to_json());

    EvalReport broken = report;
    broken.deltas[0].values["kc_f1"] += 0.001;
    CHECK_THROWS_AS(render_markdown(broken), ValidationError);
  }

  TEST_CASE("ties for best bold every tied cell") {
    EvalReport r;
    r.metrics = {"m"};
    r.rows = {{"a", "orig", {{"m", {0.5, 0.0, {}}}}},
              {"b", "orig", {{"m", {0.500001, 0.0, {}}}}},
              {"c", "orig", {{"m", {0.4, 0.0, {}}}}}};
    const auto md = render_markdown(r);
    CHECK(row_line(md, "| a |").find("**50.00**") != std::string::npos);
    CHECK(row_line(md, "| b |").find("**50.00**") != std::string::npos);
    CHECK(md.find("<u>") == std::string::npos);
  }

  TEST_CASE("protocol over a stub method") {
    TaskSpec task;
    task.task_id = "kt";
    task.metrics = default_task_metrics("kt");
    task.data.label_names = {"0", "1"};
    for (int i = 0; i < 40; ++i) task.data.examples.push_back({"t" + std::to_string(i), i % 2});
    // Scores the true label perfectly.
    MethodSpec oracle_method{"dapt", "orig", [](const SeedContext& ctx) {
                               Reals p;
                               for (const auto& ex : ctx.split->test) {
                                 p.push_back(ex.label == 0 ? 0.9 : 0.1);
                                 p.push_back(ex.label == 0 ? 0.1 : 0.9);
                               }
                               return p;
                             }};
    MethodSpec flat{"base", "orig", [](const SeedContext& ctx) { return Reals(2 * ctx.split->test.size(), 0.5); }};
    ProtocolOptions opts;
    opts.seeds = {1, 2, 3};
    const std::vector<TaskSpec> tasks = {task};
    const std::vector<MethodSpec> methods = {flat, oracle_method};
    const auto report = run_protocol(tasks, methods, opts);
    CHECK(report.metrics == std::vector<std::string>{"kt_auc", "kt_accu"});
    const auto* best = report.find("dapt", "orig");
    REQUIRE(best != nullptr);
    CHECK(best->metrics.at("kt_auc").mean == 1.0);
    CHECK(best->metrics.at("kt_accu").per_seed.size() == 3);
    CHECK(report.find("base", "orig")->metrics.at("kt_auc").mean == 0.5);
    REQUIRE(report.deltas.size() == 1);
    CHECK(report.deltas[0].values.at("kt_auc") == 0.5);

    opts.seeds = {1, 1};
    CHECK_THROWS_AS(run_protocol(tasks, methods, opts), ValidationError);
    opts.seeds = {1};
    opts.include_prior_best = true;
    CHECK_THROWS_AS(run_protocol(tasks, methods, opts), ValidationError);
  }
}

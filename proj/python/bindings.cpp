#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "daptkit/cli.hpp"
#include "daptkit/corpus.hpp"
#include "daptkit/eval.hpp"
#include "daptkit/mlm_data.hpp"
#include "daptkit/model.hpp"
#include "daptkit/tokenizer.hpp"
#include "daptkit/trainer.hpp"

namespace py = pybind11;
using namespace daptkit;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

std::vector<corpus::Document> as_documents(const std::vector<std::string>& texts) {
  std::vector<corpus::Document> docs;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const std::string text = corpus::normalize(texts[i]);
    if (!text.empty()) docs.push_back({"text:" + std::to_string(i), "python", text});
  }
  return docs;
}

py::dict mlm_example_to_py(const mlm::MlmExample& ex) {
  py::dict d;
  d["input_ids"] = ex.input_ids;
  d["mask_positions"] = ex.mask_positions;
  d["target_ids"] = ex.target_ids;
  d["attention_len"] = ex.attention_len;
  return d;
}

mlm::MlmExample mlm_example_from_py(const py::dict& d) {
  mlm::MlmExample ex;
  ex.input_ids = d["input_ids"].cast<std::vector<tokenizer::TokenId>>();
  ex.mask_positions = d["mask_positions"].cast<std::vector<std::int32_t>>();
  ex.target_ids = d["target_ids"].cast<std::vector<tokenizer::TokenId>>();
  ex.attention_len = d["attention_len"].cast<std::int32_t>();
  return ex;
}

std::vector<mlm::MlmExample> mlm_examples_from_py(const py::list& items) {
  std::vector<mlm::MlmExample> out;
  for (const auto& item : items) out.push_back(mlm_example_from_py(item.cast<py::dict>()));
  return out;
}

std::vector<mlm::ClassifyExample> classify_examples(const std::vector<std::string>& texts,
                                                    const std::vector<std::int32_t>& labels,
                                                    const tokenizer::Vocabulary& vocab, std::size_t max_seq,
                                                    std::int32_t num_labels) {
  if (texts.size() != labels.size()) throw ValidationError("texts and labels differ in length");
  std::vector<mlm::LabeledText> rows;
  for (std::size_t i = 0; i < texts.size(); ++i) rows.push_back({corpus::normalize(texts[i]), labels[i]});
  return mlm::build_classify_examples(rows, vocab, max_seq, num_labels);
}

py::array_t<float> logits_array(const model::Logits<float>& logits) {
  py::array_t<float> arr({logits.rows, logits.cols});
  std::copy(logits.values.begin(), logits.values.end(), arr.mutable_data());
  return arr;
}

trainer::TrainPlan plan_from_py(const py::dict& d) { return trainer::TrainPlan::from_json(from_py(d)); }

py::dict log_to_py(const trainer::TrainLog& log) {
  py::list records;
  for (const auto& r : log.records) records.append(to_py(r.to_json()));
  py::dict out;
  out["records"] = records;
  out["summary"] = to_py(log.summary);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Domain-adaptive pretraining toolkit: C++ core bindings";

  py::register_exception<Error>(m, "DaptkitError", PyExc_RuntimeError);

  // corpus
  m.def("normalize", &corpus::normalize, py::arg("text"));
  m.def("split_sentences", &corpus::split_sentences, py::arg("text"));
  m.def(
      "ingest",
      [](const std::vector<std::string>& paths, const std::string& source, bool dedupe) {
        std::vector<std::filesystem::path> inputs(paths.begin(), paths.end());
        corpus::IngestOptions opts;
        opts.dedupe = dedupe;
        const auto docs = corpus::ingest(corpus::expand_inputs(inputs), source, opts);
        py::list out;
        for (const auto& d : docs) {
          py::dict item;
          item["id"] = d.id;
          item["source"] = d.source;
          item["text"] = d.text;
          out.append(item);
        }
        return out;
      },
      py::arg("paths"), py::arg("source") = "domain", py::arg("dedupe") = false);
  m.def(
      "corpus_stats", [](const std::vector<std::string>& texts) { return to_py(corpus::stats(as_documents(texts)).to_json()); },
      py::arg("texts"));

  // tokenizer
  py::class_<tokenizer::Vocabulary>(m, "Vocabulary")
      .def(py::init<>())
      .def_static("from_tokens", &tokenizer::Vocabulary::from_tokens, py::arg("tokens"))
      .def_static("load", [](const std::string& path) { return tokenizer::load_vocab(path); }, py::arg("path"))
      .def("save", [](const tokenizer::Vocabulary& v, const std::string& path) { tokenizer::save_vocab(v, path); },
           py::arg("path"))
      .def("tokens", &tokenizer::Vocabulary::tokens)
      .def("find", &tokenizer::Vocabulary::find, py::arg("token"))
      .def("token", &tokenizer::Vocabulary::token, py::arg("id"))
      .def("content_hash", &tokenizer::Vocabulary::content_hash)
      .def("encode", [](const tokenizer::Vocabulary& v, const std::string& text) { return tokenizer::encode(text, v); },
           py::arg("text"))
      .def("decode",
           [](const tokenizer::Vocabulary& v, const std::vector<tokenizer::TokenId>& ids) {
             return tokenizer::decode(ids, v);
           },
           py::arg("ids"))
      .def("__len__", &tokenizer::Vocabulary::size)
      .def("__contains__", &tokenizer::Vocabulary::contains)
      .def("__eq__", &tokenizer::Vocabulary::operator==);
  m.def("pre_tokenize", &tokenizer::pre_tokenize, py::arg("text"));
  m.def(
      "train_vocabulary",
      [](const std::vector<std::string>& texts, std::size_t budget, std::int64_t min_pair_count) {
        tokenizer::TrainOptions opts;
        opts.budget = budget;
        opts.min_pair_count = min_pair_count;
        auto result = tokenizer::train_vocabulary(as_documents(texts), opts);
        py::list merges;
        for (const auto& mr : result.merges) merges.append(py::make_tuple(mr.left, mr.right, mr.merged, mr.pair_count));
        return py::make_tuple(result.vocab, merges);
      },
      py::arg("texts"), py::arg("budget") = 30522, py::arg("min_pair_count") = 2);
  m.def(
      "compare_vocabularies",
      [](const tokenizer::Vocabulary& a, const tokenizer::Vocabulary& b, std::size_t lo, std::size_t hi) {
        return to_py(tokenizer::compare_vocabularies(a, b, lo, hi).to_json());
      },
      py::arg("left"), py::arg("right"), py::arg("rank_lo"), py::arg("rank_hi"));
  m.def(
      "fertility",
      [](const std::vector<std::string>& texts, const tokenizer::Vocabulary& v) {
        return tokenizer::fertility(as_documents(texts), v);
      },
      py::arg("texts"), py::arg("vocab"));

  // mlm data
  m.def(
      "pack_sequences",
      [](const std::vector<std::string>& texts, const tokenizer::Vocabulary& v, std::size_t max_seq) {
        return mlm::pack_sequences(as_documents(texts), v, max_seq);
      },
      py::arg("texts"), py::arg("vocab"), py::arg("max_seq") = 128);
  m.def(
      "mask_segments",
      [](const std::vector<mlm::Segment>& segments, const tokenizer::Vocabulary& v, double rate, std::size_t max_seq,
         std::uint64_t seed) {
        mlm::MaskingConfig cfg;
        cfg.rate = rate;
        cfg.max_seq = max_seq;
        py::list out;
        for (const auto& ex : mlm::mask_segments(segments, v, cfg, seed)) out.append(mlm_example_to_py(ex));
        return out;
      },
      py::arg("segments"), py::arg("vocab"), py::arg("rate") = 0.15, py::arg("max_seq") = 128, py::arg("seed") = 0);

  // model
  py::class_<model::ModelState>(m, "ModelState")
      .def_property_readonly("config", [](const model::ModelState& s) { return to_py(s.config.to_json()); })
      .def("content_hash", [](const model::ModelState& s) { return model::content_hash(s); })
      .def("parameter_count", &model::ModelState::parameter_count)
      .def("tensor_names",
           [](const model::ModelState& s) {
             std::vector<std::string> names;
             for (const auto& t : s.tensors) names.push_back(t.name);
             return names;
           })
      .def("tensor",
           [](const model::ModelState& s, const std::string& name) {
             const auto& t = s.at(name);
             std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
             py::array_t<float> arr(shape);
             std::copy(t.values.begin(), t.values.end(), arr.mutable_data());
             return arr;
           },
           py::arg("name"));
  m.def(
      "init_model",
      [](const py::dict& config, std::uint64_t seed) {
        return model::init_model(model::ModelConfig::from_json(from_py(config)), seed);
      },
      py::arg("config"), py::arg("seed") = 0);
  m.def("with_classifier", &model::with_classifier, py::arg("state"), py::arg("num_labels"), py::arg("seed") = 0);
  m.def(
      "save_checkpoint",
      [](const model::ModelState& s, const std::string& path, const py::dict& metadata) {
        model::save_checkpoint(s, path, from_py(metadata));
      },
      py::arg("state"), py::arg("path"), py::arg("metadata") = py::dict());
  m.def(
      "load_checkpoint", [](const std::string& path) { return model::load_checkpoint(path); }, py::arg("path"));
  m.def(
      "forward_mlm",
      [](const model::ModelState& s, const py::list& batch) {
        const auto out = model::forward_mlm<float>(s, mlm_examples_from_py(batch));
        return py::make_tuple(out.loss, logits_array(out.logits));
      },
      py::arg("state"), py::arg("batch"));
  m.def(
      "predict_logits",
      [](const model::ModelState& s, const std::vector<std::string>& texts, const tokenizer::Vocabulary& v) {
        const std::vector<std::int32_t> labels(texts.size(), 0);
        const auto examples = classify_examples(texts, labels, v, static_cast<std::size_t>(s.config.max_seq),
                                                s.config.num_labels);
        return logits_array(model::predict_logits(s, examples));
      },
      py::arg("state"), py::arg("texts"), py::arg("vocab"));

  // trainer
  m.def(
      "scheduled_lr", &trainer::scheduled_lr, py::arg("peak"), py::arg("warmup_fraction"), py::arg("step"),
      py::arg("total_steps"));
  m.def(
      "pretrain",
      [](model::ModelState s, const py::list& examples, const py::dict& plan) {
        const auto ex = mlm_examples_from_py(examples);
        auto result = trainer::pretrain(std::move(s), ex, plan_from_py(plan));
        return py::make_tuple(std::move(result.state), log_to_py(result.log));
      },
      py::arg("state"), py::arg("examples"), py::arg("plan"));
  m.def(
      "mlm_accuracy",
      [](const model::ModelState& s, const py::list& examples) {
        return trainer::mlm_accuracy(s, mlm_examples_from_py(examples));
      },
      py::arg("state"), py::arg("examples"));
  m.def(
      "finetune",
      [](model::ModelState s, const tokenizer::Vocabulary& v, const std::vector<std::string>& train_texts,
         const std::vector<std::int32_t>& train_labels, const std::vector<std::string>& val_texts,
         const std::vector<std::int32_t>& val_labels, const py::dict& plan) {
        const auto max_seq = static_cast<std::size_t>(s.config.max_seq);
        const auto train = classify_examples(train_texts, train_labels, v, max_seq, s.config.num_labels);
        const auto val = classify_examples(val_texts, val_labels, v, max_seq, s.config.num_labels);
        auto result = trainer::finetune(std::move(s), train, val, plan_from_py(plan));
        return py::make_tuple(std::move(result.state), log_to_py(result.log), result.best_epoch);
      },
      py::arg("state"), py::arg("vocab"), py::arg("train_texts"), py::arg("train_labels"), py::arg("val_texts"),
      py::arg("val_labels"), py::arg("plan"));

  // eval
  m.def(
      "split_sizes",
      [](std::size_t n) {
        const auto s = eval::split_sizes(n, {});
        return py::make_tuple(s.train, s.validate, s.test);
      },
      py::arg("n"));
  m.def(
      "split",
      [](std::size_t n, std::uint64_t seed) {
        eval::SplitSpec spec;
        spec.seed = seed;
        auto s = eval::split(n, spec);
        return py::make_tuple(s.train, s.validate, s.test);
      },
      py::arg("n"), py::arg("seed") = 0);
  m.def(
      "accuracy",
      [](const std::vector<std::int32_t>& p, const std::vector<std::int32_t>& l) { return eval::accuracy(p, l); },
      py::arg("predictions"), py::arg("labels"));
  m.def(
      "f1",
      [](const std::vector<std::int32_t>& p, const std::vector<std::int32_t>& l, int k, const std::string& average) {
        return eval::f1(p, l, k, eval::parse_f1_average(average));
      },
      py::arg("predictions"), py::arg("labels"), py::arg("num_labels"), py::arg("average") = "macro");
  m.def(
      "auc_binary",
      [](const std::vector<double>& s, const std::vector<std::int32_t>& l) { return eval::auc_binary(s, l); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "auc_multiclass",
      [](const std::vector<std::vector<double>>& probs, const std::vector<std::int32_t>& labels) {
        const std::size_t k = probs.empty() ? 0 : probs.front().size();
        std::vector<double> flat;
        for (const auto& row : probs) {
          if (row.size() != k) throw ValidationError("probability rows differ in length");
          flat.insert(flat.end(), row.begin(), row.end());
        }
        return eval::auc_multiclass(flat, k, labels);
      },
      py::arg("probabilities"), py::arg("labels"));
  m.def(
      "report_from_results",
      [](const py::dict& results, const std::string& format) {
        auto report = eval::parse_results_fixture(from_py(results)).report;
        report.deltas = eval::compute_deltas(report);
        if (format == "json") return eval::render_json(report);
        return eval::render_markdown(report);
      },
      py::arg("results"), py::arg("format") = "markdown");

  // cli
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}

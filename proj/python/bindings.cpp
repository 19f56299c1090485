#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mmchat/cli.hpp"
#include "mmchat/generator.hpp"
#include "mmchat/metrics.hpp"
#include "mmchat/retriever.hpp"
#include "mmchat/selftest.hpp"
#include "mmchat/session.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace mmchat;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

std::vector<corpus::Turn> history_from_py(const py::list& turns) {
  std::vector<corpus::Turn> out;
  for (const auto& t : turns) out.push_back(corpus::turn_from_json(from_py(t)));
  return out;
}

// Library exceptions surface as ValueError / LookupError / RuntimeError.
void register_errors(py::module_& m) {
  static py::exception<Error> base(m, "MmchatError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ValidationError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ParseError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const NotFoundError& e) {
      PyErr_SetString(PyExc_LookupError, e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });
}

class Retriever {
 public:
  Retriever(const fs::path& checkpoint, const fs::path& index) {
    auto loaded = retriever::load_checkpoint(checkpoint);
    model_ = std::move(loaded.model);
    vocab_ = std::move(loaded.vocab);
    index_ = retriever::CandidateIndex::load(index);
    if (index_.fingerprint != model_->fingerprint()) {
      throw ValidationError("index was built by retriever " + index_.fingerprint + ", checkpoint is " +
                            model_->fingerprint());
    }
  }

  std::vector<float> embed(const py::list& history) const {
    const auto ids = corpus::format_retriever_text(history_from_py(history), vocab_, model_->config().text.max_len);
    return retriever::embed_history(*model_, ids);
  }

  std::vector<std::pair<std::string, float>> rank(const py::list& history, int topk) const {
    const auto ranked = retriever::rank(index_, embed(history));
    std::vector<std::pair<std::string, float>> out;
    for (int i = 0; i < std::min<int>(topk, static_cast<int>(ranked.items.size())); ++i) {
      out.emplace_back(ranked.items[i].id, ranked.items[i].score);
    }
    return out;
  }

  std::optional<std::pair<std::string, float>> retrieve(const py::list& history, float threshold) const {
    const auto r = retriever::retrieve_top1(index_, embed(history), threshold);
    if (!r) return std::nullopt;
    return std::make_pair(r->id, r->score);
  }

  std::size_t size() const { return index_.size(); }

 private:
  std::unique_ptr<retriever::DualEncoder> model_;
  corpus::Vocabulary vocab_;
  retriever::CandidateIndex index_;
};

class Generator {
 public:
  explicit Generator(const fs::path& checkpoint) {
    auto loaded = generator::load_checkpoint(checkpoint);
    model_ = std::move(loaded.model);
    vocab_ = std::move(loaded.vocab);
  }

  std::string generate(const py::list& history, const std::optional<std::string>& image,
                       const std::optional<fs::path>& images, const std::string& strategy, float top_p,
                       std::uint64_t seed, int max_new_tokens) const {
    const auto prompt = corpus::format_generation_prompt(history_from_py(history), corpus::Speaker::kBot, vocab_);
    std::optional<corpus::PixelImage> pixels;
    if (model_->multimodal()) {
      const int side = model_->config().image.side;
      if (!image || *image == corpus::kDummyImage) {
        pixels = corpus::PixelImage::dummy(side);
      } else {
        if (!images) throw ValidationError("an image id needs the image manifest");
        pixels = corpus::ImageManifest::load(*images).load(*image, side);
      }
    }
    generator::SamplingConfig sc;
    sc.strategy = generator::strategy_from_string(strategy);
    sc.top_p = top_p;
    sc.seed = seed;
    sc.max_new_tokens = max_new_tokens;
    py::gil_scoped_release release;
    return vocab_.decode(generator::generate(*model_, prompt, pixels ? &*pixels : nullptr, sc));
  }

  bool multimodal() const { return model_->multimodal(); }

 private:
  std::unique_ptr<generator::DecoderModel> model_;
  corpus::Vocabulary vocab_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Image-augmented dialogue: preprocessing, retrieval, generation and metrics";
  m.attr("__version__") = MMCHAT_VERSION;
  register_errors(m);

  m.def("tokenize", &corpus::tokenize, py::arg("text"));

  py::class_<corpus::Vocabulary>(m, "Vocabulary")
      .def_static(
          "build",
          [](const std::vector<std::string>& texts, int min_freq, int max_size) {
            return corpus::Vocabulary::build(texts, min_freq, max_size);
          },
          py::arg("texts"), py::arg("min_freq") = 2, py::arg("max_size") = 8192)
      .def_static("load", &corpus::Vocabulary::load, py::arg("path"))
      .def("save", &corpus::Vocabulary::save, py::arg("path"))
      .def("encode", &corpus::Vocabulary::encode, py::arg("text"))
      .def(
          "decode", [](const corpus::Vocabulary& v, const std::vector<int>& ids) { return v.decode(ids); },
          py::arg("ids"))
      .def("id", [](const corpus::Vocabulary& v, const std::string& t) { return v.id(t); })
      .def("token", &corpus::Vocabulary::token)
      .def("__len__", &corpus::Vocabulary::size)
      .def("__contains__", [](const corpus::Vocabulary& v, const std::string& t) { return v.contains(t); });

  m.def(
      "preprocess",
      [](const fs::path& split, const std::optional<fs::path>& images) {
        const fs::path sibling = split.parent_path() / "images.json";
        const auto manifest = images                   ? corpus::ImageManifest::load(*images)
                              : fs::exists(sibling) ? corpus::ImageManifest::load(sibling)
                                                    : corpus::ImageManifest{};
        Diagnostics diag;
        const auto cleaned =
            corpus::preprocess(corpus::load_photochat(split, &diag),
                               [&](const std::string& id) { return manifest.available(id); }, diag);
        const auto rs = corpus::expand_retriever_samples(cleaned, &diag);
        const auto gs = corpus::expand_generator_samples(cleaned, &diag);
        nlohmann::json dialogues = nlohmann::json::array();
        for (const auto& d : cleaned.dialogues) dialogues.push_back(corpus::to_json(d));
        nlohmann::json warnings = nlohmann::json::array();
        for (const auto& d : diag.items()) warnings.push_back(d.subject + ": " + d.message);
        return to_py({{"dialogues", dialogues},
                      {"retriever", corpus::to_rows(rs)},
                      {"generator", corpus::to_rows(gs)},
                      {"diagnostics", warnings}});
      },
      py::arg("split"), py::arg("images") = py::none(),
      "Cleans one split file; returns dialogues, retriever and generator samples as dicts.\n"
      "Images resolve through `images`, else images.json beside the split.");

  auto mx = m.def_submodule("metrics", "Retrieval and generation metrics");
  mx.def("recall_at_k", &metrics::recall_at_k, py::arg("rank"), py::arg("k"));
  mx.def("reciprocal_rank", &metrics::reciprocal_rank, py::arg("rank"));
  mx.def(
      "bleu",
      [](const std::vector<std::string>& c, const std::vector<std::string>& r, int n) { return metrics::bleu(c, r, n); },
      py::arg("candidate"), py::arg("reference"), py::arg("n"));
  mx.def(
      "distinct", [](const std::vector<std::string>& c, int n) { return metrics::distinct(c, n); },
      py::arg("candidate"), py::arg("n"));
  mx.def(
      "perplexity", [](const std::vector<double>& nll) { return metrics::perplexity(nll); }, py::arg("token_nll"));

  py::class_<Retriever>(m, "Retriever")
      .def(py::init<const fs::path&, const fs::path&>(), py::arg("checkpoint"), py::arg("index"))
      .def("embed", &Retriever::embed, py::arg("history"))
      .def("rank", &Retriever::rank, py::arg("history"), py::arg("topk") = 10)
      .def("retrieve", &Retriever::retrieve, py::arg("history"), py::arg("threshold") = 0.15f)
      .def("__len__", &Retriever::size);

  py::class_<Generator>(m, "Generator")
      .def(py::init<const fs::path&>(), py::arg("checkpoint"))
      .def_property_readonly("multimodal", &Generator::multimodal)
      .def("generate", &Generator::generate, py::arg("history"), py::arg("image") = py::none(),
           py::arg("images") = py::none(), py::arg("strategy") = "nucleus", py::arg("top_p") = 0.1f,
           py::arg("seed") = 0, py::arg("max_new_tokens") = 40);

  m.def(
      "aggregate_eval",
      [](const fs::path& dir) { return to_py(chat::to_json(chat::aggregate_eval(dir))); }, py::arg("sessions_dir"));

  m.def(
      "selftest",
      [] {
        selftest::Report report;
        {
          py::gil_scoped_release release;
          report = selftest::run_all();
        }
        return std::make_pair(report.ok(), report.text());
      },
      "Runs the built-in checks; returns (ok, report text).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the mmchat command line in-process; returns (exit code, stdout, stderr).");
}

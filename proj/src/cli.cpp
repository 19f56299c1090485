#include "mmchat/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>

#include "mmchat/chat_service.hpp"
#include "mmchat/http_api.hpp"
#include "mmchat/selftest.hpp"
#include "mmchat/trainer.hpp"

namespace mmchat::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFoundError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) {
  const auto text = read_bytes(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

struct Context {
  fs::path workdir;
  std::ostream& out;
  std::ostream& err;

  fs::path at(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() || workdir.empty() ? path : workdir / path;
  }

  void report(const Diagnostics& diag) const {
    for (const auto& d : diag.items()) {
      err << (d.level == Diagnostic::Level::kError ? "error: " : "warning: ") << d.subject << ": " << d.message
          << "\n";
    }
  }
};

// Inputs are keyed by the path as given so manifests do not depend on --workdir.
json run_manifest(const std::string& command, const json& config, const std::vector<std::pair<std::string, fs::path>>& inputs,
                  std::vector<std::string> outputs) {
  json in = json::object();
  for (const auto& [name, path] : inputs) in[name] = file_fingerprint(path.string());
  std::sort(outputs.begin(), outputs.end());
  return {{"tool", "mmchat"}, {"version", MMCHAT_VERSION}, {"command", command},
          {"config", config}, {"inputs", in},         {"outputs", outputs}};
}

corpus::ImageManifest load_manifest(const Context& ctx, const std::string& path) {
  if (path.empty()) return {};
  return corpus::ImageManifest::load(ctx.at(path));
}

// Manifest JSON with file paths rewritten relative to `dir`.
json relocated_manifest(const corpus::ImageManifest& m, const fs::path& dir) {
  json j = json::object();
  const fs::path base = fs::absolute(dir).lexically_normal();
  for (const auto& id : m.ids()) {
    const auto& src = m.source(id);
    if (src.kind == corpus::ImageSource::Kind::kFile) {
      j[id] = {{"path", fs::absolute(src.path).lexically_normal().lexically_relative(base).generic_string()}};
    } else if (src.kind == corpus::ImageSource::Kind::kSynthetic) {
      j[id] = {{"synthetic", src.spec}};
    }
  }
  return j;
}

std::vector<corpus::Turn> read_history(const fs::path& p) {
  json j = read_json(p);
  if (j.is_object()) j = j.at("history");
  if (!j.is_array()) throw ValidationError(p.string() + ": history must be a JSON array of {speaker, text}");
  std::vector<corpus::Turn> turns;
  for (const auto& t : j) turns.push_back(corpus::turn_from_json(t));
  return turns;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string in, out, images;
  int min_freq = 2;
  int max_vocab = 8192;
  std::string vocab_split = "train";
};

int preprocess(const Context& ctx, const PreprocessArgs& a) {
  const fs::path in = ctx.at(a.in);
  const fs::path out = ctx.at(a.out);
  const std::string images_arg = a.images.empty() ? (fs::path(a.in) / "images.json").string() : a.images;
  const fs::path images = ctx.at(images_arg);
  if (!fs::is_directory(in)) throw NotFoundError("input directory " + in.string() + " does not exist");

  corpus::ImageManifest manifest;
  if (fs::exists(images)) {
    manifest = corpus::ImageManifest::load(images);
  } else {
    ctx.err << "warning: no image manifest at " << images.string() << "; every image counts as unavailable\n";
  }

  std::vector<fs::path> split_files;
  for (const auto& entry : fs::directory_iterator(in)) {
    if (entry.path().extension() != ".json") continue;
    if (fs::exists(images) && fs::equivalent(entry.path(), images)) continue;
    split_files.push_back(entry.path());
  }
  std::sort(split_files.begin(), split_files.end());
  if (split_files.empty()) throw NotFoundError("no split files (*.json) in " + in.string());

  fs::create_directories(out);
  const auto available = [&](const std::string& id) { return manifest.available(id); };
  std::vector<std::pair<std::string, fs::path>> inputs;
  if (fs::exists(images)) inputs.emplace_back(images_arg, images);
  std::vector<std::string> outputs{"vocab.json", "images.json"};
  json stats = json::object();
  std::vector<std::string> vocab_texts, all_texts;
  bool vocab_split_found = false;

  for (const auto& file : split_files) {
    Diagnostics diag;
    const auto raw = corpus::load_photochat(file, &diag);
    const auto split = corpus::preprocess(raw, available, diag);
    const auto rs = corpus::expand_retriever_samples(split, &diag);
    const auto gs = corpus::expand_generator_samples(split, &diag);
    ctx.report(diag);

    const std::string name = split.name;
    corpus::write_jsonl(out / (name + ".retriever.jsonl"), corpus::to_rows(rs));
    corpus::write_jsonl(out / (name + ".generator.jsonl"), corpus::to_rows(gs));
    outputs.push_back(name + ".retriever.jsonl");
    outputs.push_back(name + ".generator.jsonl");
    inputs.emplace_back((fs::path(a.in) / file.filename()).generic_string(), file);

    const auto texts = corpus::split_texts(split);
    all_texts.insert(all_texts.end(), texts.begin(), texts.end());
    if (name == a.vocab_split) {
      vocab_texts = texts;
      vocab_split_found = true;
    }
    stats[name] = {{"dialogues_in", raw.dialogues.size()},
                   {"dialogues_out", split.dialogues.size()},
                   {"retriever_samples", rs.size()},
                   {"generator_samples", gs.size()},
                   {"warnings", diag.warnings()},
                   {"errors", diag.errors()}};
    ctx.out << name << ": " << split.dialogues.size() << "/" << raw.dialogues.size() << " dialogues, " << rs.size()
            << " retriever samples, " << gs.size() << " generator samples\n";
  }

  if (!vocab_split_found) {
    ctx.err << "warning: no split named " << a.vocab_split << "; building the vocabulary from every split\n";
    vocab_texts = all_texts;
  }
  const auto vocab = corpus::Vocabulary::build(vocab_texts, a.min_freq, a.max_vocab);
  vocab.save(out / "vocab.json");
  write_json(out / "images.json", relocated_manifest(manifest, out));
  ctx.out << "vocabulary: " << vocab.size() << " tokens\n";

  const json config{{"min_freq", a.min_freq}, {"max_vocab", a.max_vocab}, {"vocab_split", a.vocab_split}};
  auto manifest_json = run_manifest("preprocess", config, inputs, outputs);
  manifest_json["stats"] = stats;
  write_json(out / "run_manifest.json", manifest_json);
  return kExitOk;
}

// --------------------------------------------------------------------- train

json default_train_config(trainer::Task task) {
  json model = task == trainer::Task::kRetriever ? retriever::to_json(retriever::RetrieverConfig{})
                                                 : generator::to_json(generator::GeneratorConfig{});
  return {{"train", trainer::to_json(trainer::TrainConfig::defaults(task))},
          {"model", model},
          {"data",
           {{"train", "data/train." + std::string(trainer::to_string(task)) + ".jsonl"},
            {"validation", "data/test." + std::string(trainer::to_string(task)) + ".jsonl"},
            {"vocab", "data/vocab.json"},
            {"images", "data/images.json"}}},
          {"eval", {{"max_new_tokens", 40}}}};
}

// Defaults overlaid with the user's file; vocab_size fields are filled from
// the vocabulary at train time.
json resolve_train_config(const Context& ctx, trainer::Task task, const std::string& config_path) {
  json config = default_train_config(task);
  if (!config_path.empty()) {
    const json user = read_json(ctx.at(config_path));
    if (!user.is_object()) throw ValidationError(config_path + ": config must be a JSON object");
    if (user.contains("train") && user["train"].contains("task") &&
        user["train"]["task"].get<std::string>() != trainer::to_string(task)) {
      throw ValidationError(config_path + ": train.task disagrees with --task");
    }
    config.merge_patch(user);
  }
  config["train"]["task"] = trainer::to_string(task);
  return config;
}

std::string optional_path(const json& data, const char* key) {
  return data.contains(key) && data[key].is_string() ? data[key].get<std::string>() : "";
}

struct TrainArgs {
  std::string task = "retriever";
  std::string config;
  std::string out;
  bool print_config = false;
};

template <typename Report>
void write_report(const fs::path& out_dir, json body, const Report& report) {
  body["metrics"] = metrics::to_json(report);
  write_json(out_dir / "report.json", body);
  write_text(out_dir / "report.csv", metrics::csv_header(report) + "\n" + metrics::csv_row(report) + "\n");
}

int train(const Context& ctx, const TrainArgs& a) {
  const auto task = trainer::task_from_string(a.task);
  json config = resolve_train_config(ctx, task, a.config);
  if (a.print_config) {
    ctx.out << config.dump(2) << "\n";
    return kExitOk;
  }
  if (a.out.empty()) throw ValidationError("--out is required unless --print-config is given");

  const fs::path out = ctx.at(a.out);
  const json& data = config.at("data");
  const auto tc = trainer::train_config_from_json(config.at("train"));
  tc.validate();
  const auto vocab = corpus::Vocabulary::load(ctx.at(data.at("vocab").get<std::string>()));
  const std::string images_arg = optional_path(data, "images");
  const auto manifest = load_manifest(ctx, images_arg);
  const std::string train_arg = data.at("train").get<std::string>();
  const std::string valid_arg = optional_path(data, "validation");

  std::vector<std::pair<std::string, fs::path>> inputs{{train_arg, ctx.at(train_arg)},
                                                        {data.at("vocab").get<std::string>(),
                                                         ctx.at(data.at("vocab").get<std::string>())}};
  if (!valid_arg.empty()) inputs.emplace_back(valid_arg, ctx.at(valid_arg));
  if (!images_arg.empty()) inputs.emplace_back(images_arg, ctx.at(images_arg));

  trainer::TrainIo io;
  io.out_dir = out;
  io.manifest = &manifest;
  io.on_step = [&](std::int64_t step, double loss) {
    if (step % 50 == 0) ctx.err << "step " << step << " loss " << loss << "\n";
  };

  fs::create_directories(out);
  json report_body{{"task", a.task}};
  trainer::TrainResult result;
  if (task == trainer::Task::kRetriever) {
    auto mc = retriever::retriever_config_from_json(config.at("model"));
    if (mc.text.vocab_size == 0) mc.text.vocab_size = vocab.size();
    config["model"] = retriever::to_json(mc);
    report_body["config_fingerprint"] = hex64(fnv1a(config.dump()));
    const auto train_set = corpus::read_retriever_samples(ctx.at(train_arg));
    std::optional<std::vector<corpus::RetrieverSample>> valid;
    if (!valid_arg.empty()) valid = corpus::read_retriever_samples(ctx.at(valid_arg));
    retriever::DualEncoder model(mc);
    result = trainer::train(tc, model, vocab, train_set, valid ? &*valid : nullptr, io);

    const auto best = retriever::load_checkpoint(out / "best.ckpt");
    const auto& eval_set = valid ? *valid : train_set;
    Diagnostics diag;
    const auto index = retriever::build_index(*best.model, manifest, trainer::candidate_ids(eval_set), &diag);
    ctx.report(diag);
    report_body["split"] = valid ? valid_arg : train_arg;
    report_body["checkpoint_fingerprint"] = best.model->fingerprint();
    report_body["best_step"] = result.best_step;
    report_body["steps"] = result.steps;
    write_report(out, report_body, trainer::evaluate_retriever(*best.model, best.vocab, eval_set, index, tc.collate));
  } else {
    auto mc = generator::generator_config_from_json(config.at("model"));
    if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
    config["model"] = generator::to_json(mc);
    report_body["config_fingerprint"] = hex64(fnv1a(config.dump()));
    const auto train_set = corpus::read_generator_samples(ctx.at(train_arg));
    std::optional<std::vector<corpus::GeneratorSample>> valid;
    if (!valid_arg.empty()) valid = corpus::read_generator_samples(ctx.at(valid_arg));
    generator::DecoderModel model(mc);
    result = trainer::train(tc, model, vocab, train_set, valid ? &*valid : nullptr, io);

    const auto best = generator::load_checkpoint(out / "best.ckpt");
    const auto& eval_set = valid ? *valid : train_set;
    Diagnostics diag;
    const auto report = trainer::evaluate_generator(*best.model, best.vocab, eval_set, &manifest, tc.collate,
                                                    config.at("eval").value("max_new_tokens", 40), &diag);
    ctx.report(diag);
    report_body["split"] = valid ? valid_arg : train_arg;
    report_body["checkpoint_fingerprint"] = best.model->fingerprint();
    report_body["best_step"] = result.best_step;
    report_body["steps"] = result.steps;
    write_report(out, report_body, report);
  }

  write_json(out / "config.json", config);
  write_json(out / "run_manifest.json",
             run_manifest("train", config, inputs,
                          {"run.jsonl", "last.ckpt", "best.ckpt", "report.json", "report.csv", "config.json"}));
  ctx.out << "trained " << result.steps << " steps; best step " << result.best_step << "; outputs in "
          << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string task = "retriever";
  std::string checkpoint, split, images, index, out;
  int max_new_tokens = 40;
};

int evaluate(const Context& ctx, const EvalArgs& a) {
  const auto task = trainer::task_from_string(a.task);
  const auto manifest = load_manifest(ctx, a.images);
  json body{{"task", a.task}, {"split", a.split}, {"checkpoint", a.checkpoint}};
  json metrics_json;
  std::string csv;
  Diagnostics diag;
  if (task == trainer::Task::kRetriever) {
    const auto loaded = retriever::load_checkpoint(ctx.at(a.checkpoint));
    const auto samples = corpus::read_retriever_samples(ctx.at(a.split));
    const auto index = a.index.empty()
                           ? retriever::build_index(*loaded.model, manifest, trainer::candidate_ids(samples), &diag)
                           : retriever::CandidateIndex::load(ctx.at(a.index));
    corpus::CollateConfig collate;
    collate.retriever_max_len = loaded.model->config().text.max_len;
    const auto report = trainer::evaluate_retriever(*loaded.model, loaded.vocab, samples, index, collate);
    body["checkpoint_fingerprint"] = loaded.model->fingerprint();
    metrics_json = metrics::to_json(report);
    csv = metrics::csv_header(report) + "\n" + metrics::csv_row(report) + "\n";
  } else {
    const auto loaded = generator::load_checkpoint(ctx.at(a.checkpoint));
    const auto samples = corpus::read_generator_samples(ctx.at(a.split));
    const auto report =
        trainer::evaluate_generator(*loaded.model, loaded.vocab, samples, &manifest, {}, a.max_new_tokens, &diag);
    body["checkpoint_fingerprint"] = loaded.model->fingerprint();
    metrics_json = metrics::to_json(report);
    csv = metrics::csv_header(report) + "\n" + metrics::csv_row(report) + "\n";
  }
  ctx.report(diag);
  body["metrics"] = metrics_json;
  if (!a.out.empty()) {
    const fs::path out = ctx.at(a.out);
    write_json(out, body);
    fs::path csv_path = out;
    write_text(csv_path.replace_extension(".csv"), csv);
  }
  ctx.out << body.dump(2) << "\n";
  return kExitOk;
}

// --------------------------------------------------------------- build-index

struct IndexArgs {
  std::string checkpoint, images, split, out;
};

int build_index(const Context& ctx, const IndexArgs& a) {
  const auto loaded = retriever::load_checkpoint(ctx.at(a.checkpoint));
  const auto manifest = load_manifest(ctx, a.images);
  const auto ids =
      a.split.empty() ? manifest.ids() : trainer::candidate_ids(corpus::read_retriever_samples(ctx.at(a.split)));
  Diagnostics diag;
  const auto index = retriever::build_index(*loaded.model, manifest, ids, &diag);
  ctx.report(diag);
  const fs::path out = ctx.at(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  index.save(out);
  ctx.out << "indexed " << index.size() << " of " << ids.size() << " images (retriever " << index.fingerprint << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------- rank

struct RankArgs {
  std::string checkpoint, index, history;
  int topk = 10;
  double threshold = 0.15;
};

int rank(const Context& ctx, const RankArgs& a) {
  const auto loaded = retriever::load_checkpoint(ctx.at(a.checkpoint));
  const auto index = retriever::CandidateIndex::load(ctx.at(a.index));
  if (index.fingerprint != loaded.model->fingerprint()) {
    throw ValidationError("index was built by retriever " + index.fingerprint + ", checkpoint is " +
                          loaded.model->fingerprint());
  }
  const auto history = read_history(ctx.at(a.history));
  const auto ids = corpus::format_retriever_text(history, loaded.vocab, loaded.model->config().text.max_len);
  const auto query = retriever::embed_history(*loaded.model, ids);
  const auto ranked = retriever::rank(index, query);

  json items = json::array();
  const int k = std::min<int>(a.topk, static_cast<int>(ranked.items.size()));
  for (int i = 0; i < k; ++i) {
    items.push_back({{"rank", i + 1}, {"id", ranked.items[i].id}, {"score", ranked.items[i].score}});
  }
  const auto top = retriever::retrieve_top1(index, query, static_cast<float>(a.threshold));
  ctx.out << json{{"ranked", items}, {"threshold", a.threshold},
                  {"shared", top ? json(top->id) : json(nullptr)}}.dump(2)
          << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ generate

struct GenerateArgs {
  std::string checkpoint, history, image, images;
  std::string strategy = "nucleus";
  std::string next = "bot";
  float top_p = 0.1f;
  std::uint64_t seed = 0;
  int max_new_tokens = 40;
};

int generate(const Context& ctx, const GenerateArgs& a) {
  const auto loaded = generator::load_checkpoint(ctx.at(a.checkpoint));
  const auto& model = *loaded.model;
  const auto history = read_history(ctx.at(a.history));
  const auto prompt = corpus::format_generation_prompt(history, corpus::speaker_from_string(a.next), loaded.vocab);

  std::optional<corpus::PixelImage> image;
  if (model.multimodal()) {
    if (a.image.empty() || a.image == corpus::kDummyImage) {
      image = corpus::PixelImage::dummy(model.config().image.side);
    } else {
      image = load_manifest(ctx, a.images).load(a.image, model.config().image.side);
    }
  } else if (!a.image.empty()) {
    ctx.err << "warning: unimodal checkpoint ignores --image\n";
  }

  generator::SamplingConfig sc;
  sc.strategy = generator::strategy_from_string(a.strategy);
  sc.top_p = a.top_p;
  sc.seed = a.seed;
  sc.max_new_tokens = a.max_new_tokens;
  const auto ids = generator::generate(model, prompt, image ? &*image : nullptr, sc);
  ctx.out << loaded.vocab.decode(ids) << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------- serve

struct ServeArgs {
  std::string retriever_index, retriever_ckpt, images, data_dir = "chat_data", static_dir;
  std::vector<std::string> generators, variants;
  float threshold = 0.15f;
  float top_p = 0.1f;
  std::uint64_t seed = 0;
  std::string host = "127.0.0.1";
  int port = 8080;
};

int serve(const Context& ctx, const ServeArgs& a) {
  if (a.generators.empty()) throw ValidationError("at least one --generator is required");
  if (a.generators.size() != a.variants.size()) {
    throw ValidationError("give one --variant per --generator (" + std::to_string(a.variants.size()) + " vs " +
                          std::to_string(a.generators.size()) + ")");
  }
  std::map<chat::Variant, chat::GeneratorStack> generators;
  bool needs_retriever = false;
  for (std::size_t i = 0; i < a.generators.size(); ++i) {
    const auto variant = chat::variant_from_string(a.variants[i]);
    auto loaded = generator::load_checkpoint(ctx.at(a.generators[i]));
    generators[variant] = {std::shared_ptr<const generator::DecoderModel>(std::move(loaded.model)), loaded.vocab};
    needs_retriever = needs_retriever || chat::uses_retriever(variant);
  }

  std::optional<chat::RetrievalStack> retrieval;
  if (needs_retriever) {
    if (a.retriever_index.empty() || a.retriever_ckpt.empty()) {
      throw ValidationError("retrieval variants need --retriever <index> and --retriever-ckpt <checkpoint>");
    }
    auto loaded = retriever::load_checkpoint(ctx.at(a.retriever_ckpt));
    retrieval = chat::RetrievalStack{
        std::shared_ptr<const retriever::DualEncoder>(std::move(loaded.model)), loaded.vocab,
        std::make_shared<const retriever::CandidateIndex>(retriever::CandidateIndex::load(ctx.at(a.retriever_index)))};
  }

  chat::ServiceConfig sc;
  sc.data_dir = ctx.at(a.data_dir);
  sc.threshold = a.threshold;
  sc.sampling.top_p = a.top_p;
  sc.sampling.seed = a.seed;
  auto manifest = std::make_shared<const corpus::ImageManifest>(load_manifest(ctx, a.images));
  chat::ChatService service(sc, std::move(generators), std::move(retrieval), manifest);

  std::optional<fs::path> static_dir;
  if (!a.static_dir.empty()) static_dir = ctx.at(a.static_dir);
  chat::HttpServer server(service, static_dir);
  const int port = server.bind(a.host, a.port);
  ctx.out << "serving " << service.model_tags().size() << " model(s) on http://" << a.host << ":" << port
          << " (sessions in " << service.sessions_dir().string() << ")" << std::endl;
  server.listen();
  return kExitOk;
}

// ----------------------------------------------------------------- aggregate

struct AggregateArgs {
  std::string dir;
  std::string format = "json";
  std::string out;
};

int aggregate(const Context& ctx, const AggregateArgs& a) {
  fs::path dir = ctx.at(a.dir);
  if (fs::is_directory(dir / "sessions")) dir /= "sessions";
  const auto rows = chat::aggregate_eval(dir);
  const std::string text = a.format == "csv" ? chat::to_csv(rows) : chat::to_json(rows).dump(2) + "\n";
  if (a.out.empty()) {
    ctx.out << text;
  } else {
    write_text(ctx.at(a.out), text);
  }
  return kExitOk;
}

int selftest(const Context& ctx) {
  const auto report = selftest::run_all();
  ctx.out << report.text();
  ctx.out << (report.ok() ? "selftest passed" : "selftest FAILED") << " (" << report.checks.size() << " checks)\n";
  return report.ok() ? kExitOk : kExitFailure;
}

// -------------------------------------------------------------- option sets

using Action = std::function<int(const Context&)>;

void bind_preprocess(CLI::App* sub, PreprocessArgs& a, Action& action) {
  sub->add_option("--in", a.in, "Directory of split files (JSON arrays of dialogues)")->required();
  sub->add_option("--out", a.out, "Output directory")->required();
  sub->add_option("--images", a.images, "Image manifest (default: <in>/images.json)");
  sub->add_option("--min-freq", a.min_freq, "Minimum token count")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--max-vocab", a.max_vocab, "Vocabulary size cap, specials included")
      ->capture_default_str()
      ->check(CLI::Range(corpus::kNumSpecials, 1 << 24));
  sub->add_option("--vocab-split", a.vocab_split, "Split the vocabulary is built from")->capture_default_str();
  sub->callback([&] { action = [&a](const Context& c) { return preprocess(c, a); }; });
}

void bind_train(CLI::App* sub, TrainArgs& a, Action& action, bool with_task) {
  if (with_task) {
    sub->add_option("--task", a.task, "retriever | generator")
        ->required()
        ->check(CLI::IsMember({"retriever", "generator"}));
  }
  sub->add_option("--config", a.config, "JSON config overlaid on the defaults");
  sub->add_option("--out", a.out, "Run directory");
  sub->add_flag("--print-config", a.print_config, "Print the resolved config and exit");
  sub->callback([&] { action = [&a](const Context& c) { return train(c, a); }; });
}

void bind_build_index(CLI::App* sub, IndexArgs& a, Action& action) {
  sub->add_option("--checkpoint", a.checkpoint, "Retriever checkpoint")->required();
  sub->add_option("--images", a.images, "Image manifest")->required();
  sub->add_option("--split", a.split, "Retriever samples whose gold images form the candidates (default: all)");
  sub->add_option("--out", a.out, "Index file")->required();
  sub->callback([&] { action = [&a](const Context& c) { return build_index(c, a); }; });
}

void bind_serve(CLI::App* sub, ServeArgs& a, Action& action) {
  sub->add_option("--retriever", a.retriever_index, "Candidate index");
  sub->add_option("--retriever-ckpt", a.retriever_ckpt, "Retriever checkpoint that built the index");
  sub->add_option("--generator", a.generators, "Generator checkpoint (repeat, one per --variant)")->required();
  sub->add_option("--variant", a.variants, "text_only | retrieval_unimodal | retrieval_multimodal")
      ->required()
      ->check(CLI::IsMember({"text_only", "retrieval_unimodal", "retrieval_multimodal"}));
  sub->add_option("--threshold", a.threshold, "Minimum cosine for sharing an image")->capture_default_str();
  sub->add_option("--images", a.images, "Image manifest");
  sub->add_option("--data-dir", a.data_dir, "Session storage")->envname("MMCHAT_DATA_DIR")->capture_default_str();
  sub->add_option("--host", a.host, "Bind address")->capture_default_str();
  sub->add_option("--port", a.port, "Port (0 picks a free one)")->envname("MMCHAT_PORT")->capture_default_str();
  sub->add_option("--static", a.static_dir, "Directory served at /");
  sub->add_option("--top-p", a.top_p, "Nucleus mass")->capture_default_str()->check(CLI::Range(1e-6f, 1.0f));
  sub->add_option("--seed", a.seed, "Sampling seed")->capture_default_str();
  sub->callback([&] { action = [&a](const Context& c) { return serve(c, a); }; });
}

}  // namespace

std::string file_fingerprint(const std::string& path) { return hex64(fnv1a(read_bytes(path))); }

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-augmented dialogue: preprocessing, training, evaluation and the chat service", "mmchat"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MMCHAT_VERSION);
  std::string workdir;
  app.add_option("--workdir", workdir, "Base directory for relative paths");

  Action action;
  PreprocessArgs pre;
  TrainArgs tr, gen_tr;
  EvalArgs ev;
  IndexArgs idx, ridx;
  RankArgs rk;
  GenerateArgs ge;
  ServeArgs sv, csv;
  AggregateArgs ag;
  gen_tr.task = "generator";

  bind_preprocess(app.add_subcommand("preprocess", "Clean split files into retriever/generator samples"), pre, action);
  bind_train(app.add_subcommand("train", "Train a retriever or generator"), tr, action, true);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a sample file");
  eval->add_option("--task", ev.task, "retriever | generator")
      ->required()
      ->check(CLI::IsMember({"retriever", "generator"}));
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
  eval->add_option("--split", ev.split, "Sample file (.jsonl)")->required();
  eval->add_option("--images", ev.images, "Image manifest");
  eval->add_option("--index", ev.index, "Prebuilt candidate index (retriever)");
  eval->add_option("--out", ev.out, "Report path; a .csv row is written beside it");
  eval->add_option("--max-new-tokens", ev.max_new_tokens, "Greedy decoding limit")->capture_default_str();
  eval->callback([&] { action = [&ev](const Context& c) { return evaluate(c, ev); }; });

  bind_build_index(app.add_subcommand("build-index", "Embed candidate images"), idx, action);
  bind_serve(app.add_subcommand("serve", "Run the chat service"), sv, action);

  auto* agg = app.add_subcommand("aggregate", "Per-model means of session evaluations");
  agg->add_option("--dir", ag.dir, "Session directory (or a data dir containing sessions/)")
      ->envname("MMCHAT_DATA_DIR")
      ->required();
  agg->add_option("--format", ag.format, "json | csv")->capture_default_str()->check(CLI::IsMember({"json", "csv"}));
  agg->add_option("--out", ag.out, "Write here instead of stdout");
  agg->callback([&] { action = [&ag](const Context& c) { return aggregate(c, ag); }; });

  app.add_subcommand("selftest", "Gradient checks, metric oracles and determinism checks")->callback([&] {
    action = [](const Context& c) { return selftest(c); };
  });

  auto* ret = app.add_subcommand("retriever", "Retriever tools");
  ret->require_subcommand(1);
  bind_build_index(ret->add_subcommand("build-index", "Embed candidate images"), ridx, action);
  auto* rank_cmd = ret->add_subcommand("rank", "Rank candidates for a dialogue history");
  rank_cmd->add_option("--checkpoint", rk.checkpoint, "Retriever checkpoint")->required();
  rank_cmd->add_option("--index", rk.index, "Candidate index")->required();
  rank_cmd->add_option("--history", rk.history, "JSON array of {speaker, text}")->required();
  rank_cmd->add_option("--topk", rk.topk, "Rows to print")->capture_default_str()->check(CLI::PositiveNumber);
  rank_cmd->add_option("--threshold", rk.threshold, "Sharing threshold")->capture_default_str();
  rank_cmd->callback([&] { action = [&rk](const Context& c) { return rank(c, rk); }; });

  auto* gen = app.add_subcommand("generator", "Generator tools");
  gen->require_subcommand(1);
  bind_train(gen->add_subcommand("train", "Train a generator"), gen_tr, action, false);
  auto* gen_cmd = gen->add_subcommand("generate", "Continue a dialogue history");
  gen_cmd->add_option("--checkpoint", ge.checkpoint, "Generator checkpoint")->required();
  gen_cmd->add_option("--history", ge.history, "JSON array of {speaker, text}")->required();
  gen_cmd->add_option("--image", ge.image, "Conditioning image id (multimodal; default DUMMY)");
  gen_cmd->add_option("--images", ge.images, "Image manifest");
  gen_cmd->add_option("--strategy", ge.strategy, "greedy | nucleus")
      ->capture_default_str()
      ->check(CLI::IsMember({"greedy", "nucleus"}));
  gen_cmd->add_option("--top-p", ge.top_p, "Nucleus mass")->capture_default_str()->check(CLI::Range(1e-6f, 1.0f));
  gen_cmd->add_option("--seed", ge.seed, "Sampling seed")->capture_default_str();
  gen_cmd->add_option("--max-new-tokens", ge.max_new_tokens, "Length limit")->capture_default_str();
  gen_cmd->add_option("--next", ge.next, "Speaker of the reply")->capture_default_str()->check(
      CLI::IsMember({"user", "bot"}));
  gen_cmd->callback([&] { action = [&ge](const Context& c) { return generate(c, ge); }; });

  auto* chatd = app.add_subcommand("chatd", "Chat service");
  chatd->require_subcommand(1);
  bind_serve(chatd->add_subcommand("serve", "Run the chat service"), csv, action);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version requests exit 0; everything else is a usage error.
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    if (argc <= 1) err << "\n" << app.help();
    return kExitUsage;
  }

  const Context ctx{workdir, out, err};
  try {
    return action(ctx);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"mmchat"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace mmchat::cli

#include <doctest.h>

#include <cmath>
#include <limits>

#include "mmchat/toy.hpp"
#include "mmchat/trainer.hpp"
#include "test_util.hpp"

using namespace mmchat;
using trainer::LogRow;
using trainer::TrainConfig;

namespace {

retriever::RetrieverConfig small_retriever(int vocab_size) {
  retriever::RetrieverConfig c;
  c.image = {.side = 8, .patch = 4, .d_model = 16, .blocks = 1, .heads = 2};
  c.text = {.vocab_size = vocab_size, .max_len = 64, .d_model = 16, .blocks = 1, .heads = 2};
  c.d_joint = 16;
  c.seed = 1;
  return c;
}

generator::GeneratorConfig small_generator(int vocab_size, bool multimodal) {
  generator::GeneratorConfig c;
  c.multimodal = multimodal;
  c.vocab_size = vocab_size;
  c.max_len = 64;
  c.d_model = 16;
  c.blocks = 1;
  c.heads = 2;
  c.image = {.side = 8, .patch = 4, .d_model = 16, .blocks = 1, .heads = 2};
  c.seed = 2;
  return c;
}

TrainConfig quick(trainer::Task task, int epochs, int per_device, int accum) {
  TrainConfig c = TrainConfig::defaults(task);
  c.epochs = epochs;
  c.per_device = per_device;
  c.accumulation = accum;
  c.batch_size = per_device * accum;
  c.lr = 3e-3f;
  c.eval_interval = 2;
  c.log_window = 16;
  c.seed = 12;
  c.collate.image_side = 8;
  c.collate.generator_max_len = 64;
  return c;
}

double max_param_diff(const nn::ParameterSet& a, const nn::ParameterSet& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.items().size(); ++i) {
    const auto va = a.items()[i].var.value().values();
    const auto vb = b.items()[i].var.value().values();
    for (std::size_t k = 0; k < va.size(); ++k) worst = std::max(worst, static_cast<double>(std::abs(va[k] - vb[k])));
  }
  return worst;
}

trainer::TrainIo make_io(const corpus::ImageManifest* manifest, std::optional<std::filesystem::path> out = {}) {
  trainer::TrainIo io;
  io.manifest = manifest;
  io.out_dir = std::move(out);
  return io;
}

LogRow eval_row(std::int64_t step, double loss) {
  LogRow r;
  r.step = step;
  r.eval_loss = loss;
  return r;
}

}  // namespace

TEST_CASE("train config validation and defaults") {
  const auto r = TrainConfig::defaults(trainer::Task::kRetriever);
  CHECK(r.epochs == 10);
  CHECK(r.eval_batch == 16);
  CHECK(r.eval_interval == 100);
  CHECK(r.batch_size == r.per_device * r.accumulation);
  const auto g = TrainConfig::defaults(trainer::Task::kGenerator);
  CHECK(g.epochs == 3);
  CHECK(g.eval_batch == 4);
  CHECK(g.eval_interval == 500);
  CHECK(g.lr == doctest::Approx(5e-5f));

  TrainConfig bad = r;
  bad.accumulation = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  const auto back = trainer::train_config_from_json(trainer::to_json(g));
  CHECK(trainer::to_json(back) == trainer::to_json(g));
}

TEST_CASE("best checkpoint selection") {
  using trainer::select_best_checkpoint;
  CHECK(select_best_checkpoint({eval_row(0, 3.1), eval_row(100, 2.7), eval_row(200, 2.9)}) == 100);
  CHECK(select_best_checkpoint({eval_row(5, 1.0)}) == 5);
  CHECK(select_best_checkpoint({eval_row(0, 2.0), eval_row(10, 1.5), eval_row(20, 1.5)}) == 10);
  LogRow train_only;
  train_only.step = 3;
  train_only.train_loss = 1.0;
  CHECK(select_best_checkpoint({train_only, eval_row(4, 9.0)}) == 4);
  CHECK_THROWS_AS(select_best_checkpoint({}), ValidationError);
  CHECK_THROWS_AS(select_best_checkpoint({train_only}), ValidationError);
}

TEST_CASE("gradient accumulation follows the direct trajectory") {
  SUBCASE("retriever") {
    const auto set = toy::retrieval_pairs(16, 8);
    retriever::DualEncoder direct(small_retriever(set.vocab.size())), accumulated(small_retriever(set.vocab.size()));
    const auto io = make_io(&set.manifest);
    trainer::train(quick(trainer::Task::kRetriever, 3, 8, 1), direct, set.vocab, set.samples, nullptr, io);
    trainer::train(quick(trainer::Task::kRetriever, 3, 2, 4), accumulated, set.vocab, set.samples, nullptr, io);
    CHECK(max_param_diff(direct.parameters(), accumulated.parameters()) < 1e-5);
  }
  SUBCASE("generator") {
    const auto task = toy::color_task(4, 4, 0, 8);
    generator::DecoderModel direct(small_generator(task.vocab.size(), true));
    generator::DecoderModel accumulated(small_generator(task.vocab.size(), true));
    const auto io = make_io(&task.manifest);
    trainer::train(quick(trainer::Task::kGenerator, 3, 8, 1), direct, task.vocab, task.train, nullptr, io);
    trainer::train(quick(trainer::Task::kGenerator, 3, 2, 4), accumulated, task.vocab, task.train, nullptr, io);
    CHECK(max_param_diff(direct.parameters(), accumulated.parameters()) < 1e-5);
  }
}

TEST_CASE("zero epochs writes only the initial checkpoint") {
  test::TempDir dir;
  const auto set = toy::retrieval_pairs(4, 8);
  retriever::DualEncoder model(small_retriever(set.vocab.size()));
  const auto before = model.fingerprint();
  const auto io = make_io(&set.manifest, dir.path());
  const auto result = trainer::train(quick(trainer::Task::kRetriever, 0, 2, 1), model, set.vocab, set.samples, nullptr, io);
  CHECK(result.steps == 0);
  REQUIRE(result.log.size() == 1);
  CHECK(result.log[0].step == 0);
  CHECK(model.fingerprint() == before);
  CHECK(std::filesystem::exists(dir.path() / "last.ckpt"));
  CHECK(std::filesystem::exists(dir.path() / "best.ckpt"));
  CHECK(retriever::load_checkpoint(dir.path() / "last.ckpt").model->fingerprint() == before);
}

TEST_CASE("run log, checkpoints and seeded reproducibility") {
  const auto set = toy::retrieval_pairs(12, 8);
  auto run = [&](const std::filesystem::path& out) {
    retriever::DualEncoder model(small_retriever(set.vocab.size()));
    const auto io = make_io(&set.manifest, out);
    const auto split = std::vector(set.samples.begin(), set.samples.begin() + 8);
    const auto val = std::vector(set.samples.begin() + 8, set.samples.end());
    return trainer::train(quick(trainer::Task::kRetriever, 4, 4, 1), model, set.vocab, split, &val, io);
  };
  test::TempDir a, b;
  const auto ra = run(a.path());
  const auto rb = run(b.path());
  CHECK(ra.steps == 8);

  const auto log = trainer::read_run_log(a.path() / "run.jsonl");
  REQUIRE(log.size() == ra.log.size());
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].step > log[i - 1].step);
  for (const auto& row : log) CHECK(row.eval_loss.has_value() == (row.step % 2 == 0));
  CHECK(ra.best_step == trainer::select_best_checkpoint(log));

  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].train_loss == rb.log[i].train_loss);
    CHECK(ra.log[i].eval_loss == rb.log[i].eval_loss);
    CHECK(ra.log[i].lr == rb.log[i].lr);
  }
  CHECK(test::read_file(a.path() / "last.ckpt") == test::read_file(b.path() / "last.ckpt"));
  CHECK(test::read_file(a.path() / "best.ckpt") == test::read_file(b.path() / "best.ckpt"));
}

TEST_CASE("non-finite loss aborts with the batch ids") {
  test::TempDir dir;
  const auto set = toy::retrieval_pairs(4, 8);
  retriever::DualEncoder model(small_retriever(set.vocab.size()));
  model.parameters().find("text_proj.weight")->var.value().values()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto io = make_io(&set.manifest, dir.path());
  auto config = quick(trainer::Task::kRetriever, 1, 4, 1);
  config.eval_interval = 100;
  try {
    trainer::train(config, model, set.vocab, set.samples, nullptr, io);
    FAIL("expected TrainingAborted");
  } catch (const trainer::TrainingAborted& e) {
    CHECK(e.batch_ids().size() == 4);
  }
  const auto dump = nlohmann::json::parse(test::read_file(dir.path() / "nonfinite_batch.json"));
  CHECK(dump["batch_ids"].size() == 4);
}

TEST_CASE("evaluation reports") {
  SUBCASE("gold-only index of one gives recall@1 = 1") {
    const auto set = toy::retrieval_pairs(1, 8);
    retriever::DualEncoder model(small_retriever(set.vocab.size()));
    const auto index = retriever::build_index(model, set.manifest, trainer::candidate_ids(set.samples));
    const auto report = trainer::evaluate_retriever(model, set.vocab, set.samples, index, {.image_side = 8});
    CHECK(report.recall1 == 1.0);
    CHECK(report.mrr == 1.0);
  }
  SUBCASE("index from another model is rejected") {
    const auto set = toy::retrieval_pairs(3, 8);
    retriever::DualEncoder model(small_retriever(set.vocab.size()));
    auto other_cfg = small_retriever(set.vocab.size());
    other_cfg.seed = 99;
    retriever::DualEncoder other(other_cfg);
    const auto index = retriever::build_index(other, set.manifest, trainer::candidate_ids(set.samples));
    CHECK_THROWS_AS(trainer::evaluate_retriever(model, set.vocab, set.samples, index, {.image_side = 8}),
                    ValidationError);
  }
}

TEST_CASE("overfitted generator reproduces memorized replies") {
  const auto task = toy::color_task(3, 2, 0, 8);
  generator::DecoderModel model(small_generator(task.vocab.size(), true));
  auto config = quick(trainer::Task::kGenerator, 150, 6, 1);
  config.eval_interval = 1000;
  trainer::train(config, model, task.vocab, task.train, nullptr, make_io(&task.manifest));
  const auto report =
      trainer::evaluate_generator(model, task.vocab, task.train, &task.manifest, config.collate, 4);
  CHECK(report.bleu1 == doctest::Approx(1.0));
  CHECK(report.ppl < 1.2);
}

TEST_CASE("validation loss exposes overfitting and best checkpoint predates it") {
  // Replies are arbitrary per sample, so memorizing the training replies can
  // only hurt held-out likelihood.
  const char* words[] = {"apple", "river", "stone", "cloud", "lamp", "tiger", "piano", "bread"};
  std::vector<corpus::GeneratorSample> train_set, val;
  std::vector<std::string> texts;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, 7);
  for (int i = 0; i < 24; ++i) {
    std::string reply;
    for (int k = 0; k < 4; ++k) reply += std::string(k ? " " : "") + words[pick(rng)];
    texts.push_back(reply);
    corpus::GeneratorSample s{"s" + std::to_string(i),
                              {{corpus::Speaker::kUser, "tell me something", std::nullopt, corpus::ImageRole::kNone}},
                              {corpus::Speaker::kBot, reply, std::nullopt, corpus::ImageRole::kNone},
                              corpus::kDummyImage};
    (i < 16 ? train_set : val).push_back(s);
  }
  texts.push_back("tell me something");
  const auto vocab = corpus::Vocabulary::build(texts, 1);
  generator::DecoderModel model(small_generator(vocab.size(), false));
  auto config = quick(trainer::Task::kGenerator, 80, 4, 1);
  config.eval_interval = 10;
  const auto result = trainer::train(config, model, vocab, train_set, &val, {});

  std::vector<double> evals;
  for (const auto& row : result.log) {
    if (row.eval_loss) evals.push_back(*row.eval_loss);
  }
  const auto best = std::min_element(evals.begin(), evals.end());
  CHECK(evals.back() > *best);
  CHECK(result.best_step < result.steps);
  CHECK(*result.log.back().train_loss < result.log[1].train_loss.value());
}

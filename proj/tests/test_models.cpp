#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "mmchat/generator.hpp"
#include "mmchat/gradcheck.hpp"
#include "mmchat/retriever.hpp"
#include "mmchat/toy.hpp"
#include "mmchat/oracle.hpp"
#include "test_util.hpp"

using namespace mmchat;
using namespace mmchat::nn;

namespace {

retriever::RetrieverConfig tiny_retriever(int vocab_size, int d = 16) {
  retriever::RetrieverConfig c;
  c.image = {.side = 8, .patch = 4, .d_model = d, .blocks = 1, .heads = 2};
  c.text = {.vocab_size = vocab_size, .max_len = 64, .d_model = d, .blocks = 1, .heads = 2};
  c.d_joint = d;
  c.seed = 5;
  return c;
}

generator::GeneratorConfig tiny_generator(int vocab_size, bool multimodal, int d = 16) {
  generator::GeneratorConfig c;
  c.multimodal = multimodal;
  c.vocab_size = vocab_size;
  c.max_len = 48;
  c.d_model = d;
  c.blocks = 1;
  c.heads = 2;
  c.image = {.side = 8, .patch = 4, .d_model = d, .blocks = 1, .heads = 2};
  c.seed = 9;
  return c;
}

corpus::PixelImage swatch(int r, int g, int b, int side = 8) {
  return corpus::normalize_image(corpus::render_synthetic({{"pattern", "solid"}, {"colors", {{r, g, b}}}, {"size", side}}),
                                 side);
}

std::vector<float> row_values(const Var& v) { return {v.value().values().begin(), v.value().values().end()}; }

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

Tensor unit_rows(int rows, int cols, std::mt19937_64& rng) {
  Tensor t = test::random_tensor(rows, cols, rng);
  for (int r = 0; r < rows; ++r) {
    double n = 0;
    for (float x : t.row(r)) n += static_cast<double>(x) * x;
    for (float& x : t.row(r)) x = static_cast<float>(x / std::sqrt(n));
  }
  return t;
}

// Gradient checks need gradients well above float32 rounding noise, which the
// small default initialization does not give.
void rescramble(ParameterSet& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.4f, 0.4f);
  for (auto& p : params.items()) {
    if (p.name.find("logit_scale") != std::string::npos) continue;
    const bool gain = p.name.ends_with(".gain");
    for (float& v : p.var.value().values()) v = gain ? 1.0f + u(rng) : u(rng);
  }
}

}  // namespace

TEST_CASE("dual encoder embeddings are unit norm and deterministic") {
  retriever::DualEncoder model(tiny_retriever(20));
  const auto img = model.encode_image(swatch(200, 10, 10));
  CHECK(img.cols() == 16);
  CHECK(norm(row_values(img)) == doctest::Approx(1.0).epsilon(1e-5));
  const std::vector<int> ids{6, 9, 10, 7, 11};
  CHECK(norm(row_values(model.encode_text(ids))) == doctest::Approx(1.0).epsilon(1e-5));

  const auto d1 = row_values(model.encode_image(corpus::PixelImage::dummy(8)));
  const auto d2 = row_values(model.encode_image(corpus::PixelImage::dummy(8)));
  CHECK(d1 == d2);

  retriever::DualEncoder twin(tiny_retriever(20));
  CHECK(twin.fingerprint() == model.fingerprint());
}

TEST_CASE("text encoder ignores padding beyond the valid length") {
  retriever::DualEncoder model(tiny_retriever(20));
  const std::vector<int> ids{6, 9, 10, 7, 11};
  std::vector<int> padded = ids;
  padded.insert(padded.end(), {0, 0, 0});
  const auto a = row_values(model.encode_text(ids));
  const auto b = row_values(model.encode_text(padded, static_cast<int>(ids.size())));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}

TEST_CASE("logit scale starts at 1/0.07 and is clamped") {
  retriever::DualEncoder model(tiny_retriever(20));
  CHECK(model.logit_scale().item() == doctest::Approx(14.29f).epsilon(1e-4));
  auto* p = model.parameters().find("log_logit_scale");
  REQUIRE(p != nullptr);
  p->var.value().values()[0] = 10.0f;
  CHECK(model.logit_scale().item() == doctest::Approx(100.0f));
  p->var.value().values()[0] = -3.0f;
  CHECK(model.logit_scale().item() == doctest::Approx(1.0f));
}

TEST_CASE("contrastive loss anchors") {
  SUBCASE("identical embeddings give ln(bs)") {
    for (int bs : {2, 4, 16}) {
      Tensor e({bs, 3}, 0.0f);
      for (int r = 0; r < bs; ++r) e.row(r)[0] = 1.0f;
      const float loss = retriever::contrastive_loss(constant(e), constant(e), constant(Tensor::scalar(14.29f))).item();
      CHECK(loss == doctest::Approx(std::log(static_cast<double>(bs))).epsilon(1e-5));
    }
  }
  SUBCASE("orthogonal pairs with scale 2") {
    const Tensor e({2, 2}, std::vector<float>{1, 0, 0, 1});
    const float loss = retriever::contrastive_loss(constant(e), constant(e), constant(Tensor::scalar(2.0f))).item();
    CHECK(loss == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-5));
  }
  SUBCASE("symmetric in its two inputs") {
    std::mt19937_64 rng(3);
    const Tensor a = unit_rows(5, 4, rng), b = unit_rows(5, 4, rng);
    const auto s = constant(Tensor::scalar(7.0f));
    CHECK(retriever::contrastive_loss(constant(a), constant(b), s).item() ==
          doctest::Approx(retriever::contrastive_loss(constant(b), constant(a), s).item()).epsilon(1e-6));
  }
  SUBCASE("needs two pairs") {
    const Tensor e({1, 2}, std::vector<float>{1, 0});
    CHECK_THROWS_AS(retriever::contrastive_loss(constant(e), constant(e), constant(Tensor::scalar(1.0f))),
                    ValidationError);
  }
}

TEST_CASE("ranking matches a brute-force oracle, ties by row") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 32)(rng);
    retriever::CandidateIndex index;
    index.dim = 4;
    index.embeddings = unit_rows(n, 4, rng);
    // Duplicate some rows so equal scores occur.
    for (int r = 1; r < n; r += 3) std::ranges::copy(index.embeddings.row(r - 1), index.embeddings.row(r).begin());
    for (int r = 0; r < n; ++r) index.ids.push_back("img" + std::to_string(r));
    const Tensor q = unit_rows(1, 4, rng);
    const auto ranked = retriever::rank(index, q.values());
    REQUIRE(ranked.items.size() == static_cast<std::size_t>(n));
    std::vector<float> scores(n);
    for (const auto& item : ranked.items) scores[item.position] = item.score;
    for (int g = 0; g < n; ++g) CHECK(ranked.rank_of(index.ids[g]) == oracle::rank_of(scores, g));
    CHECK(ranked.rank_of("missing") == 0);
  }
}

TEST_CASE("top-1 gating is monotone in tau") {
  std::mt19937_64 rng(8);
  retriever::CandidateIndex index;
  index.dim = 6;
  index.embeddings = unit_rows(10, 6, rng);
  for (int r = 0; r < 10; ++r) index.ids.push_back("c" + std::to_string(r));
  int previous_hits = 1 << 30;
  for (float tau = -1.0f; tau <= 1.0f; tau += 0.05f) {
    int hits = 0;
    std::mt19937_64 qrng(99);
    for (int k = 0; k < 50; ++k) {
      const Tensor q = unit_rows(1, 6, qrng);
      const auto hit = retriever::retrieve_top1(index, q.values(), tau);
      if (hit) {
        CHECK(hit->score > tau);
        CHECK(hit->id == retriever::rank(index, q.values()).items.front().id);
      }
      hits += hit.has_value();
    }
    CHECK(hits <= previous_hits);
    previous_hits = hits;
  }
  // A score exactly at tau is not shared.
  const auto top = retriever::rank(index, index.embeddings.row(0)).items.front();
  CHECK_FALSE(retriever::retrieve_top1(index, index.embeddings.row(0), top.score).has_value());
}

TEST_CASE("candidate index and checkpoints round trip") {
  test::TempDir dir;
  const auto set = toy::retrieval_pairs(6, 8);
  retriever::DualEncoder model(tiny_retriever(set.vocab.size()));
  Diagnostics diag;
  auto ids = set.manifest.ids();
  ids.push_back("not_listed");
  const auto index = retriever::build_index(model, set.manifest, ids, &diag);
  CHECK(index.size() == 6);
  CHECK(diag.warnings() == 1);
  CHECK(index.fingerprint == model.fingerprint());

  index.save(dir.path() / "a.idx");
  const auto loaded = retriever::CandidateIndex::load(dir.path() / "a.idx");
  loaded.save(dir.path() / "b.idx");
  CHECK(test::read_file(dir.path() / "a.idx") == test::read_file(dir.path() / "b.idx"));
  CHECK(loaded.ids == index.ids);

  retriever::save_checkpoint(dir.path() / "r.ckpt", model, set.vocab);
  const auto back = retriever::load_checkpoint(dir.path() / "r.ckpt");
  CHECK(back.model->fingerprint() == model.fingerprint());
  CHECK(back.vocab.tokens() == set.vocab.tokens());
  CHECK_THROWS_AS(generator::load_checkpoint(dir.path() / "r.ckpt"), ParseError);
}

TEST_CASE("decoder is causal in both variants") {
  for (bool mm : {false, true}) {
    CAPTURE(mm);
    generator::DecoderModel model(tiny_generator(30, mm));
    const auto img = swatch(10, 200, 10);
    std::vector<int> a{2, 4, 9, 12, 15, 5, 20};
    std::vector<int> b = a;
    b[5] = 21;
    b[6] = 22;
    const Tensor la = model.forward_logits(a, &img).value();
    const Tensor lb = model.forward_logits(b, &img).value();
    for (int pos = 0; pos < 5; ++pos) {
      for (int v = 0; v < 30; ++v) CHECK(la.row(pos)[v] == lb.row(pos)[v]);
    }
    bool later_changed = false;
    for (int v = 0; v < 30; ++v) later_changed |= la.row(6)[v] != lb.row(6)[v];
    CHECK(later_changed);
  }
}

TEST_CASE("image conditioning: unimodal ignores it, multimodal does not") {
  const std::vector<int> ids{2, 4, 9, 12, 5};
  const auto red = swatch(220, 20, 20), blue = swatch(20, 20, 220);
  generator::DecoderModel uni(tiny_generator(30, false));
  CHECK(uni.forward_logits(ids, &red).value().values()[0] == uni.forward_logits(ids, &blue).value().values()[0]);
  const auto u1 = row_values(uni.forward_logits(ids, &red));
  CHECK(u1 == row_values(uni.forward_logits(ids, nullptr)));

  generator::DecoderModel mm(tiny_generator(30, true));
  CHECK(row_values(mm.forward_logits(ids, &red)) != row_values(mm.forward_logits(ids, &blue)));
  CHECK_THROWS_AS(mm.forward(ids, nullptr), ValidationError);
}

TEST_CASE("generation loss") {
  auto task = toy::color_task(4, 2, 0, 8);
  corpus::CollateConfig cc{.image_side = 8, .generator_max_len = 48};
  const auto batch = corpus::collate(std::span<const corpus::GeneratorSample>(task.train), task.vocab, &task.manifest, cc);
  const int v = task.vocab.size();

  SUBCASE("untrained loss is near ln V") {
    for (bool mm : {false, true}) {
      generator::DecoderModel model(tiny_generator(v, mm));
      const double loss = generator::generation_loss(model, batch).item();
      CHECK(loss == doctest::Approx(std::log(static_cast<double>(v))).epsilon(0.1));
    }
  }
  SUBCASE("padding and prompt tokens are not scored") {
    generator::DecoderModel model(tiny_generator(v, false));
    const float base = generator::generation_loss(model, batch).item();
    auto edited = batch;
    for (int r = 0; r < edited.size(); ++r) {
      for (std::size_t i = edited.lengths[r]; i < edited.input_ids[r].size(); ++i) edited.input_ids[r][i] = 1;
    }
    CHECK(generator::generation_loss(model, edited).item() == base);
    // Scored count equals label count minus the unshiftable first position.
    int labelled = 0;
    for (const auto& row : batch.labels) {
      for (std::size_t i = 1; i < row.size(); ++i) labelled += row[i] != kIgnoreIndex;
    }
    CHECK(generator::scored_tokens(batch, 0, batch.size()) == labelled);
  }
  SUBCASE("explicit normalizer splits the batch mean") {
    generator::DecoderModel model(tiny_generator(v, true));
    const float whole = generator::generation_loss(model, batch).item();
    const float n = static_cast<float>(generator::scored_tokens(batch, 0, batch.size()));
    const float half = generator::generation_loss(model, batch, 0, 4, n).item() +
                       generator::generation_loss(model, batch, 4, batch.size(), n).item();
    CHECK(half == doctest::Approx(whole).epsilon(1e-5));
  }
}

TEST_CASE("analytic gradients match finite differences") {
  SUBCASE("contrastive loss through both encoders") {
    const auto set = toy::retrieval_pairs(3, 8);
    auto config = tiny_retriever(set.vocab.size(), 8);
    retriever::DualEncoder model(config);
    rescramble(model.parameters(), 1);
    corpus::CollateConfig cc{.image_side = 8};
    const auto batch =
        corpus::collate(std::span<const corpus::RetrieverSample>(set.samples), set.vocab, &set.manifest, cc);
    auto loss = [&] {
      return retriever::contrastive_loss(model.encode_images(batch, 0, 3), model.encode_texts(batch, 0, 3),
                                         model.logit_scale());
    };
    const auto r = finite_diff_check(loss, model.parameters(), {}, {.max_entries = 12});
    INFO("worst parameter: " << r.worst_parameter);
    CHECK(r.max_relative_error < 1e-3);
  }
  SUBCASE("masked generation loss with cross-attention") {
    auto task = toy::color_task(2, 1, 0, 8);
    generator::DecoderModel model(tiny_generator(task.vocab.size(), true, 8));
    rescramble(model.parameters(), 2);
    corpus::CollateConfig cc{.image_side = 8, .generator_max_len = 48};
    const auto batch =
        corpus::collate(std::span<const corpus::GeneratorSample>(task.train), task.vocab, &task.manifest, cc);
    auto loss = [&] { return generator::generation_loss(model, batch); };
    const auto r = finite_diff_check(loss, model.parameters(), {}, {.max_entries = 12});
    INFO("worst parameter: " << r.worst_parameter);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("nucleus sampling") {
  const std::vector<float> probs{0.05f, 0.5f, 0.2f, 0.2f, 0.05f};
  CHECK(generator::nucleus_set(probs, 0.1f) == std::vector<int>{1});
  CHECK(generator::nucleus_set(probs, 0.5f) == std::vector<int>{1});
  CHECK(generator::nucleus_set(probs, 0.6f) == std::vector<int>{1, 2});
  CHECK(generator::nucleus_set(probs, 1.0f).size() == 5);
  CHECK_THROWS_AS(generator::nucleus_set(probs, 0.0f), ValidationError);
  CHECK_THROWS_AS(generator::nucleus_set(probs, 1.5f), ValidationError);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> logits(12);
    for (auto& l : logits) l = u(rng);
    const float top_p = std::uniform_real_distribution<float>(0.05f, 1.0f)(rng);
    double z = 0;
    const float mx = *std::max_element(logits.begin(), logits.end());
    std::vector<float> p(12);
    for (int i = 0; i < 12; ++i) z += p[i] = std::exp(logits[i] - mx);
    for (auto& x : p) x = static_cast<float>(x / z);
    const auto set = generator::nucleus_set(p, top_p);
    double mass = 0;
    for (int id : set) mass += p[id];
    CHECK(mass >= top_p - 1e-6);
    CHECK(mass - p[set.back()] < top_p);
    CHECK(set.front() == generator::argmax(logits));
    std::mt19937_64 a(trial), b(trial);
    const int s = generator::sample_nucleus(logits, top_p, a);
    CHECK(std::find(set.begin(), set.end(), s) != set.end());
    CHECK(generator::sample_nucleus(logits, top_p, b) == s);
  }
}

TEST_CASE("conditioning image selection") {
  using generator::select_conditioning_image;
  CHECK(select_conditioning_image(std::string("new"), {"a", "b"}) == "new");
  CHECK(select_conditioning_image(std::nullopt, {"a", "b"}) == "b");
  CHECK(select_conditioning_image(std::nullopt, {}) == corpus::kDummyImage);
}

TEST_CASE("generation respects limits and round-trips through a checkpoint") {
  test::TempDir dir;
  auto task = toy::color_task(3, 1, 0, 8);
  generator::DecoderModel model(tiny_generator(task.vocab.size(), true));
  const auto img = swatch(220, 30, 30);
  const auto prompt = corpus::format_generation_prompt(task.train[0].history, corpus::Speaker::kUser, task.vocab);
  const auto out = generator::generate_greedy(model, prompt, &img, 5);
  CHECK(out.size() <= 5);
  CHECK(std::find(out.begin(), out.end(), static_cast<int>(corpus::SpecialId::kEos)) == out.end());

  std::vector<int> long_prompt(100, 9);
  long_prompt.front() = 2;
  CHECK_NOTHROW(generator::generate_greedy(model, long_prompt, &img, 3));

  generator::SamplingConfig sc{.strategy = generator::Strategy::kNucleus, .top_p = 0.9f, .seed = 3, .max_new_tokens = 6};
  CHECK(generator::generate(model, prompt, &img, sc) == generator::generate(model, prompt, &img, sc));

  generator::save_checkpoint(dir.path() / "g.ckpt", model, task.vocab);
  const auto back = generator::load_checkpoint(dir.path() / "g.ckpt");
  CHECK(back.model->multimodal());
  CHECK(back.model->fingerprint() == model.fingerprint());
  CHECK(generator::generate_greedy(*back.model, prompt, &img, 5) == out);
}

#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "mmchat/autograd.hpp"
#include "mmchat/collate.hpp"
#include "mmchat/corpus.hpp"
#include "mmchat/image.hpp"
#include "test_util.hpp"

using namespace mmchat;
using namespace mmchat::corpus;

namespace {

Turn T(Speaker s, std::string text, std::optional<std::string> img = std::nullopt) {
  return Turn{s, std::move(text), std::move(img), ImageRole::kNone};
}
constexpr Speaker U = Speaker::kUser;
constexpr Speaker B = Speaker::kBot;

struct Fixture {
  ImageManifest manifest = ImageManifest::load(test::fixture_dir() / "images.json");
  Availability available = [this](const std::string& id) { return manifest.available(id); };
};

std::map<ImageRole, int> role_histogram(const Dialogue& d) {
  std::map<ImageRole, int> h;
  for (const auto& t : d.turns) ++h[t.role];
  return h;
}

}  // namespace

TEST_CASE("tokenizer lowercases and splits punctuation") {
  CHECK(tokenize("Her name is Luna, look!") == std::vector<std::string>{"her", "name", "is", "luna", ",", "look", "!"});
  CHECK(tokenize("she's adorable") == std::vector<std::string>{"she's", "adorable"});
  CHECK(tokenize("'quoted' it's") == std::vector<std::string>{"'", "quoted", "'", "it's"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("vocabulary min_freq and ordering") {
  std::vector<std::string> corpus{"a a b"};
  auto v2 = Vocabulary::build(corpus, 2);
  CHECK(v2.size() == kNumSpecials + 1);
  CHECK(v2.contains("a"));
  CHECK_FALSE(v2.contains("b"));
  auto v1 = Vocabulary::build(corpus, 1);
  CHECK(v1.size() == kNumSpecials + 2);
  CHECK(v1.id("a") == kNumSpecials);  // most frequent first

  std::vector<std::string> ties{"c b a"};
  auto vt = Vocabulary::build(ties, 1);
  CHECK(vt.token(kNumSpecials) == "a");
  CHECK(vt.token(kNumSpecials + 2) == "c");

  auto capped = Vocabulary::build(ties, 1, kNumSpecials + 1);
  CHECK(capped.size() == kNumSpecials + 1);

  auto empty = Vocabulary::build(std::vector<std::string>{}, 2);
  CHECK(empty.size() == kNumSpecials);
  CHECK(empty.id("<user>") == kUser);
  CHECK(empty.encode("zebra") == std::vector<int>{kUnk});
}

TEST_CASE("vocabulary round trip on in-vocabulary text") {
  std::vector<std::string> corpus{"i walked my dog today", "she's adorable !"};
  auto v = Vocabulary::build(corpus, 1);
  for (const auto& text : corpus) CHECK(v.decode(v.encode(text)) == text);
  auto reloaded = Vocabulary::from_json(v.to_json());
  CHECK(reloaded.tokens() == v.tokens());
  CHECK_THROWS_AS(Vocabulary::from_json({{"tokens", {"x"}}}), ParseError);
}

TEST_CASE("load_photochat on the fixture") {
  auto train = load_photochat(test::fixture_dir() / "train.json");
  CHECK(train.name == "train");
  CHECK(train.dialogues.size() == 12);
  int with_image_only = 0;
  for (const auto& d : train.dialogues) {
    with_image_only += std::any_of(d.turns.begin(), d.turns.end(),
                                   [](const Turn& t) { return t.image_ref && t.text.empty(); });
  }
  CHECK(with_image_only == 3);
  CHECK(train.dialogues[0].turns[0].speaker == U);
  CHECK(train.dialogues[0].turns[1].speaker == B);
}

TEST_CASE("load_photochat errors") {
  test::TempDir dir;
  test::write_file(dir.path() / "empty.json", "[]");
  CHECK(load_photochat(dir.path() / "empty.json").dialogues.empty());

  test::write_file(dir.path() / "bad.json", "[{\"dialogue_id\": ");
  CHECK_THROWS_AS(load_photochat(dir.path() / "bad.json"), ParseError);

  const auto records = nlohmann::json::parse(R"([
    {"dialogue_id": "x1", "photo_url": "p", "dialogue": [{"user_id": 2, "message": "hi", "share_photo": false}]},
    {"dialogue_id": "x2", "photo_url": "p", "dialogue": [{"user_id": 0, "message": "hi", "share_photo": true}]}])");
  CHECK_THROWS_AS(parse_photochat(records, "s"), CorpusError);
  Diagnostics diag;
  auto split = parse_photochat(records, "s", &diag);
  CHECK(split.dialogues.size() == 1);
  REQUIRE(diag.errors() == 1);
  CHECK(diag.items()[0].subject == "x1");
}

TEST_CASE("filter_unavailable_images") {
  Fixture fx;
  auto train = load_photochat(test::fixture_dir() / "train.json");
  std::size_t excluded = 0;
  CHECK(filter_unavailable_images(train, fx.available, &excluded).dialogues.size() == 10);
  CHECK(excluded == 2);
  CHECK(filter_unavailable_images(train, [](const std::string&) { return true; }).dialogues.size() == 12);
  CHECK(filter_unavailable_images(train, [](const std::string&) { return false; }).dialogues.empty());
}

TEST_CASE("merge_consecutive_turns") {
  Dialogue d{"m", {T(U, "hi"), T(U, "there"), T(B, "hey")}, {}};
  auto m = merge_consecutive_turns(d);
  REQUIRE(m.turns.size() == 2);
  CHECK(m.turns[0].text == "hi there");
  CHECK(m.turns[1].text == "hey");
  CHECK(merge_consecutive_turns(m) == m);

  Dialogue with_img{"m", {T(U, "look"), T(U, "", "p"), T(B, "nice")}, {}};
  auto mi = merge_consecutive_turns(with_img);
  CHECK(mi.turns[0].text == "look");
  CHECK(mi.turns[0].image_ref == "p");

  Dialogue clash{"m", {T(U, "a", "p"), T(U, "b", "q")}, {}};
  CHECK_THROWS_AS(merge_consecutive_turns(clash), CorpusError);

  auto train = load_photochat(test::fixture_dir() / "train.json");
  const auto& t03 = train.dialogues[2];
  REQUIRE(t03.id == "t03");
  CHECK(t03.turns.size() == 14);
  CHECK(merge_consecutive_turns(t03).turns.size() == 12);
}

TEST_CASE("reassign_image_only_turns") {
  Dialogue d{"r", {T(U, "look"), T(B, "", "p"), T(U, "what"), T(B, "my cat")}, {}};
  auto r = reassign_image_only_turns(d);
  REQUIRE(r.turns.size() == 3);
  CHECK(r.turns[2].text == "my cat");
  CHECK(r.turns[2].image_ref == "p");

  Dialogue none{"r", {T(U, "a"), T(B, "b", "p")}, {}};
  CHECK(reassign_image_only_turns(none) == none);

  Dialogue tail{"r", {T(U, "a"), T(B, "b"), T(U, "", "p")}, {}};
  Diagnostics diag;
  auto rt = reassign_image_only_turns(tail, &diag);
  REQUIRE(rt.turns.size() == 2);
  CHECK(rt.turns[1].image_ref == "p");
  CHECK(diag.warnings() == 1);

  // t02: the image-only turn disappears and its image moves to the next user turn.
  auto train = load_photochat(test::fixture_dir() / "train.json");
  auto t02 = merge_consecutive_turns(train.dialogues[1]);
  REQUIRE(t02.id == "t02");
  auto t02r = reassign_image_only_turns(t02);
  CHECK(t02r.turns.size() == t02.turns.size() - 1);
  CHECK(t02r.turns[5].text == "it was near the lake");
  CHECK(t02r.turns[5].image_ref == "lake_trail");
}

TEST_CASE("propagate_images") {
  std::vector<Turn> turns;
  for (int i = 0; i < 12; ++i) turns.push_back(T(i % 2 ? B : U, "t" + std::to_string(i), i == 4 ? std::optional<std::string>("p") : std::nullopt));
  auto p = propagate_images({"p", turns, {}});
  for (int i = 0; i < 12; ++i) {
    CHECK(p.turns[i].role == (i < 4 ? ImageRole::kDummy : i == 4 ? ImageRole::kSharedHere : ImageRole::kCarried));
    if (i >= 4) CHECK(p.turns[i].image_ref == "p");
  }
  turns[4].image_ref.reset();
  turns[11].image_ref = "p";
  auto last = propagate_images({"p", turns, {}});
  CHECK(role_histogram(last)[ImageRole::kCarried] == 0);

  turns[0].image_ref = "q";
  CHECK_THROWS_AS(propagate_images({"p", turns, {}}), CorpusError);
  for (auto& t : turns) t.image_ref.reset();
  CHECK_THROWS_AS(propagate_images({"p", turns, {}}), CorpusError);
}

TEST_CASE("fixture preprocessing matches the authored ground truth") {
  Fixture fx;
  Diagnostics diag;
  auto train = preprocess(load_photochat(test::fixture_dir() / "train.json"), fx.available, diag);
  CHECK(diag.errors() == 0);

  // Values computed by tests/data/photochat/oracle.py.
  const std::map<std::string, std::pair<int, int>> expected = {
      {"t01", {6, 3}}, {"t02", {6, 4}}, {"t03", {12, 6}}, {"t04", {7, 3}}, {"t05", {5, 4}},
      {"t06", {5, 0}}, {"t08", {7, 4}}, {"t09", {6, 2}}, {"t10", {8, 4}}, {"t12", {6, 2}}};
  REQUIRE(train.dialogues.size() == expected.size());
  for (const auto& d : train.dialogues) {
    CAPTURE(d.id);
    const auto [n, share] = expected.at(d.id);
    CHECK(static_cast<int>(d.turns.size()) == n);
    auto h = role_histogram(d);
    CHECK(h[ImageRole::kDummy] == share);
    CHECK(h[ImageRole::kSharedHere] == 1);
    CHECK(h[ImageRole::kCarried] == n - share - 1);
    CHECK(d.turns[share].role == ImageRole::kSharedHere);
    for (std::size_t i = 1; i < d.turns.size(); ++i) CHECK(d.turns[i].speaker != d.turns[i - 1].speaker);
    for (const auto& t : d.turns) CHECK_FALSE(t.text.empty());
  }

  auto rs = expand_retriever_samples(train, &diag);
  CHECK(rs.size() == 10);
  auto gs = expand_generator_samples(train);
  CHECK(gs.size() == 58);
  CHECK(std::count_if(gs.begin(), gs.end(), [](const auto& s) { return s.conditioning_image != kDummyImage; }) == 35);

  auto vocab = Vocabulary::build(split_texts(train), 2, 512);
  CHECK(vocab.size() == 71);
  CHECK(Vocabulary::build(split_texts(train), 1, 512).size() == 137);

  Diagnostics test_diag;
  auto test = preprocess(load_photochat(test::fixture_dir() / "test.json"), fx.available, test_diag);
  CHECK(expand_retriever_samples(test).size() == 4);
  CHECK(expand_generator_samples(test).size() == 13);
}

TEST_CASE("retriever sample for a share at the first turn") {
  Fixture fx;
  Diagnostics diag;
  auto train = preprocess(load_photochat(test::fixture_dir() / "train.json"), fx.available, diag);
  auto rs = expand_retriever_samples(train, &diag);
  auto it = std::find_if(rs.begin(), rs.end(), [](const auto& s) { return s.dialogue_id == "t06"; });
  REQUIRE(it != rs.end());
  CHECK(it->history.size() == 1);
  CHECK(it->history[0].text == "look at my new car");
  CHECK(it->gold_image == "red_car");
}

TEST_CASE("generator samples: n-1 per dialogue, conditioning follows the response turn") {
  Dialogue d = propagate_images({"g", {T(U, "a"), T(B, "b"), T(U, "c", "p"), T(B, "d")}, {}});
  auto gs = expand_generator_samples({"x", {d}});
  REQUIRE(gs.size() == 3);
  CHECK(gs[0].conditioning_image == kDummyImage);
  CHECK(gs[1].conditioning_image == "p");
  CHECK(gs[2].conditioning_image == "p");
  CHECK(gs[2].history.size() == 3);

  Diagnostics diag;
  Dialogue single = propagate_images({"s", {T(U, "a", "p")}, {}});
  CHECK(expand_generator_samples({"x", {single}}, &diag).empty());
  CHECK(diag.warnings() == 1);
}

namespace {

Dialogue random_dialogue(std::mt19937_64& rng, int idx) {
  Dialogue d{"r" + std::to_string(idx), {}, "img" + std::to_string(idx)};
  const int n = 1 + static_cast<int>(rng() % 14);
  const int share = static_cast<int>(rng() % n);
  static const char* words[] = {"hi", "dog", "cat", "look", "nice", "wow"};
  for (int i = 0; i < n; ++i) {
    Turn t{rng() % 2 ? U : B, "", std::nullopt, ImageRole::kNone};
    const int len = i == share && rng() % 3 == 0 ? 0 : 1 + static_cast<int>(rng() % 3);
    for (int w = 0; w < len; ++w) t.text += std::string(w ? " " : "") + words[rng() % 6];
    if (i == share) t.image_ref = d.source_image;
    d.turns.push_back(t);
  }
  return d;
}

}  // namespace

TEST_CASE("property: preprocessing is idempotent and the count identities hold") {
  std::mt19937_64 rng(2024);
  auto all = [](const std::string&) { return true; };
  for (int trial = 0; trial < 50; ++trial) {
    DatasetSplit split{"p", {}};
    for (int i = 0; i < 8; ++i) split.dialogues.push_back(random_dialogue(rng, i));
    Diagnostics diag;
    auto once = preprocess(split, all, diag);
    Diagnostics diag2;
    auto twice = preprocess(once, all, diag2);
    REQUIRE(once.dialogues.size() == twice.dialogues.size());
    for (std::size_t i = 0; i < once.dialogues.size(); ++i) CHECK(once.dialogues[i] == twice.dialogues[i]);

    std::size_t expected_gen = 0;
    for (const auto& d : once.dialogues) {
      expected_gen += d.turns.size() - 1;
      auto h = role_histogram(d);
      CHECK(h[ImageRole::kDummy] + 1 + h[ImageRole::kCarried] == static_cast<int>(d.turns.size()));
    }
    CHECK(expand_generator_samples(once).size() == expected_gen);
    CHECK(expand_retriever_samples(once).size() == once.dialogues.size());
  }
}

TEST_CASE("format_generator_input follows the labelled layout") {
  std::vector<std::string> corpus{"i walked my dog today", "she's adorable"};
  auto v = Vocabulary::build(corpus, 1);
  GeneratorSample s{"x", {T(U, "I walked my dog today")}, T(B, "she's adorable"), kDummyImage};
  auto enc = format_generator_input(s, v, 256);
  REQUIRE(enc);
  const std::vector<int> ids = {kBos, kUser, v.id("i"), v.id("walked"), v.id("my"), v.id("dog"), v.id("today"),
                                kBot, v.id("she's"), v.id("adorable"), kEos};
  CHECK(enc->input_ids == ids);
  const int ig = nn::kIgnoreIndex;
  CHECK(enc->labels == std::vector<int>{ig, ig, ig, ig, ig, ig, ig, ig, v.id("she's"), v.id("adorable"), kEos});

  GeneratorSample empty_hist{"x", {}, T(B, "i"), kDummyImage};
  auto e = format_generator_input(empty_hist, v, 256);
  CHECK(e->labels == std::vector<int>{ig, ig, v.id("i"), kEos});

  auto cut = format_generator_input(s, v, 9);
  CHECK(cut->input_ids.size() == 9);
  CHECK(cut->labels.back() == v.id("she's"));
  Diagnostics diag;
  CHECK_FALSE(format_generator_input(s, v, 8, &diag));
  CHECK_FALSE(format_generator_input(GeneratorSample{"x", {}, T(B, "  "), kDummyImage}, v, 256, &diag));
  CHECK(diag.warnings() == 2);
}

TEST_CASE("generator history keeps the most recent twelve turns") {
  Vocabulary v = Vocabulary::build(std::vector<std::string>{"w0 w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 x"}, 1);
  GeneratorSample s{"x", {}, T(B, "x"), kDummyImage};
  for (int i = 0; i < 14; ++i) s.history.push_back(T(i % 2 ? B : U, "w" + std::to_string(i)));
  auto enc = format_generator_input(s, v, 256);
  CHECK(enc->input_ids.size() == 1 + 12 * 2 + 1 + 2);
  CHECK(enc->input_ids[2] == v.id("w2"));
}

TEST_CASE("property: unmasked labels equal the inputs") {
  Fixture fx;
  Diagnostics diag;
  auto train = preprocess(load_photochat(test::fixture_dir() / "train.json"), fx.available, diag);
  auto v = Vocabulary::build(split_texts(train), 2, 512);
  for (int max_len : {8, 16, 256}) {
    for (const auto& s : expand_generator_samples(train)) {
      auto enc = format_generator_input(s, v, max_len);
      if (!enc) continue;
      CHECK(static_cast<int>(enc->input_ids.size()) <= max_len);
      for (std::size_t j = 0; j < enc->labels.size(); ++j) {
        if (enc->labels[j] != nn::kIgnoreIndex) CHECK(enc->labels[j] == enc->input_ids[j]);
      }
    }
  }
}

TEST_CASE("format_retriever_text") {
  auto v = Vocabulary::build(std::vector<std::string>{"a b c"}, 1);
  CHECK(format_retriever_text({T(U, "a b"), T(B, "c")}, v) == std::vector<int>{kCls, v.id("a"), v.id("b"), kSep, v.id("c")});
  Diagnostics diag;
  CHECK(format_retriever_text({}, v, 512, &diag) == std::vector<int>{kCls});
  CHECK(diag.warnings() == 1);
  std::string lng;
  for (int i = 0; i < 600; ++i) lng += "a ";
  CHECK(format_retriever_text({T(U, lng)}, v).size() == 512);
}

TEST_CASE("collate pads to the batch maximum and loads images") {
  Fixture fx;
  auto v = Vocabulary::build(std::vector<std::string>{"a b c d e f g h"}, 1);
  std::vector<RetrieverSample> rs = {{"x", {T(U, "a b c d")}, "red_car"}, {"y", {T(U, "a b c d e f g h")}, "bike"}};
  CollateConfig cfg;
  auto b = collate(std::span<const RetrieverSample>(rs), v, &fx.manifest, cfg);
  CHECK(b.size() == 2);
  CHECK(b.seq_len() == 9);
  CHECK(b.lengths == std::vector<int>{5, 9});
  CHECK(b.input_ids[0][8] == kPad);
  REQUIRE(b.images.size() == 2);
  CHECK(b.images[0].side == 32);

  auto single = collate(std::span<const RetrieverSample>(rs.data(), 1), v, &fx.manifest, cfg);
  CHECK(single.seq_len() == 5);

  std::vector<RetrieverSample> bad = {{"z", {T(U, "a")}, "pizza"}};
  CHECK_THROWS_AS(collate(std::span<const RetrieverSample>(bad), v, &fx.manifest, cfg), ImageLoadError);

  std::vector<GeneratorSample> gs = {{"x", {T(U, "a")}, T(B, "b c"), kDummyImage}, {"y", {}, T(B, "d"), "red_car"}};
  auto gb = collate(std::span<const GeneratorSample>(gs), v, &fx.manifest, cfg);
  CHECK(gb.seq_len() == 7);
  CHECK(gb.labels[1][6] == nn::kIgnoreIndex);
  CHECK(gb.images[0].is_zero());
  CHECK_FALSE(gb.images[1].is_zero());
}

TEST_CASE("sample JSONL round trip") {
  Fixture fx;
  Diagnostics diag;
  auto train = preprocess(load_photochat(test::fixture_dir() / "train.json"), fx.available, diag);
  auto gs = expand_generator_samples(train);
  test::TempDir dir;
  write_jsonl(dir.path() / "g.jsonl", to_rows(gs));
  auto back = read_generator_samples(dir.path() / "g.jsonl");
  REQUIRE(back.size() == gs.size());
  CHECK(back[7].response == gs[7].response);
  CHECK(back[7].history == gs[7].history);
  CHECK(back[7].conditioning_image == gs[7].conditioning_image);
}

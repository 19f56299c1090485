#include "mmchat/toy.hpp"

#include <array>

#include "mmchat/error.hpp"

namespace mmchat::toy {
namespace {

struct NamedColor {
  const char* name;
  std::array<int, 3> rgb;
};

constexpr NamedColor kColors[] = {
    {"red", {220, 30, 30}},    {"green", {30, 180, 60}},  {"blue", {40, 70, 220}},   {"yellow", {235, 220, 40}},
    {"purple", {140, 50, 170}}, {"orange", {245, 140, 20}}, {"white", {245, 245, 245}}, {"black", {15, 15, 15}},
};
constexpr const char* kPatterns[] = {"checker", "hstripes", "vstripes", "diagonal"};
constexpr const char* kPatternWords[] = {"checker", "stripes", "columns", "diagonals"};
constexpr int kGrays[] = {64, 112, 160, 208};
constexpr const char* kOpeners[] = {"hello", "hi", "hey there", "good morning", "guess what", "look"};

corpus::Turn turn(corpus::Speaker s, std::string text) { return {s, std::move(text), std::nullopt, corpus::ImageRole::kNone}; }

}  // namespace

RetrievalSet retrieval_pairs(int n, int image_size) {
  if (n < 1 || n > 32) throw ValidationError("retrieval_pairs: n must be in [1, 32]");
  RetrievalSet set;
  std::vector<std::string> texts;
  for (int i = 0; i < n; ++i) {
    const auto& fg = kColors[i % 8];
    const int p = i / 8;
    const std::string id = "toy_" + std::string(fg.name) + "_" + kPatterns[p];
    corpus::ImageSource src;
    src.kind = corpus::ImageSource::Kind::kSynthetic;
    src.spec = {{"pattern", kPatterns[p]},
                {"colors", {fg.rgb, std::array<int, 3>{kGrays[p], kGrays[p], kGrays[p]}}},
                {"cell", std::max(1, image_size / 8)},
                {"size", image_size}};
    set.manifest.add(id, src);
    const std::string text = std::string("show me the ") + fg.name + " " + kPatternWords[p];
    texts.push_back(text);
    set.samples.push_back({"pair" + std::to_string(i), {turn(corpus::Speaker::kUser, text)}, id});
  }
  set.vocab = corpus::Vocabulary::build(texts, 1);
  return set;
}

ColorTask color_task(int colors, int train_per_color, int test_per_color, int image_size) {
  if (colors < 2 || colors > 8) throw ValidationError("color_task: colors must be in [2, 8]");
  ColorTask task;
  std::vector<std::string> texts;
  for (int c = 0; c < colors; ++c) {
    const auto& col = kColors[c];
    task.colors.push_back(col.name);
    const std::string id = std::string("swatch_") + col.name;
    corpus::ImageSource src;
    src.kind = corpus::ImageSource::Kind::kSynthetic;
    src.spec = {{"pattern", "solid"}, {"colors", {col.rgb}}, {"size", image_size}};
    task.manifest.add(id, src);
    for (int k = 0; k < train_per_color + test_per_color; ++k) {
      const std::string opener = kOpeners[(k + c) % 6];
      corpus::GeneratorSample s{"color" + std::to_string(c) + "_" + std::to_string(k),
                                {turn(corpus::Speaker::kUser, opener), turn(corpus::Speaker::kBot, "what color is it ?")},
                                turn(corpus::Speaker::kUser, col.name),
                                id};
      texts.push_back(opener);
      texts.push_back("what color is it ?");
      texts.push_back(col.name);
      (k < train_per_color ? task.train : task.test).push_back(std::move(s));
    }
  }
  task.vocab = corpus::Vocabulary::build(texts, 1);
  return task;
}

}  // namespace mmchat::toy

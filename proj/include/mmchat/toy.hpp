#pragma once

#include <string>
#include <vector>

#include "mmchat/corpus.hpp"
#include "mmchat/image.hpp"
#include "mmchat/vocab.hpp"

// Small synthetic datasets with known structure, used by the acceptance
// suite, selftest and the Python smoke tests.
namespace mmchat::toy {

struct RetrievalSet {
  corpus::ImageManifest manifest;
  std::vector<corpus::RetrieverSample> samples;
  corpus::Vocabulary vocab;
};

// n pairs (n <= 32): image i is a distinct pattern/color combination, text i
// names it ("show me the red checker").
RetrievalSet retrieval_pairs(int n, int image_size = 32);

struct ColorTask {
  corpus::ImageManifest manifest;
  std::vector<corpus::GeneratorSample> train;
  std::vector<corpus::GeneratorSample> test;
  corpus::Vocabulary vocab;
  std::vector<std::string> colors;
};

// Every sample asks "what color is it ?" and the reply is the color word of
// its solid-color image, so only the image determines the target.
// train_per_color / test_per_color samples per color; the per-sample opener
// varies so samples are not byte-identical.
ColorTask color_task(int colors = 6, int train_per_color = 6, int test_per_color = 2, int image_size = 16);

}  // namespace mmchat::toy

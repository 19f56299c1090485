#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmchat/corpus.hpp"
#include "mmchat/image.hpp"

namespace mmchat::corpus {

struct CollateConfig {
  int image_side = 32;
  int generator_max_len = 256;
  int retriever_max_len = 512;
  int history_window = kHistoryWindow;
  bool load_images = true;  // false for text-only models
};

// Rows are right-padded with <pad> to the longest row in the batch.
struct RetrieverBatch {
  std::vector<std::vector<int>> input_ids;
  std::vector<int> lengths;  // unpadded length per row; attention covers [0, length)
  std::vector<PixelImage> images;
  std::vector<std::string> image_ids;
  std::vector<std::string> dialogue_ids;

  int size() const { return static_cast<int>(input_ids.size()); }
  int seq_len() const { return input_ids.empty() ? 0 : static_cast<int>(input_ids.front().size()); }
};

struct GeneratorBatch {
  std::vector<std::vector<int>> input_ids;
  std::vector<std::vector<int>> labels;  // kIgnoreIndex over prompt and padding
  std::vector<int> lengths;
  std::vector<PixelImage> images;
  std::vector<std::string> image_ids;
  std::vector<std::string> dialogue_ids;

  int size() const { return static_cast<int>(input_ids.size()); }
  int seq_len() const { return input_ids.empty() ? 0 : static_cast<int>(input_ids.front().size()); }
};

// Images are decoded here, never during preprocessing. `manifest` may be null
// when config.load_images is false. Image-load failures propagate.
RetrieverBatch collate(std::span<const RetrieverSample> samples, const Vocabulary& vocab,
                       const ImageManifest* manifest, const CollateConfig& config, Diagnostics* diag = nullptr);
// Samples that format_generator_input rejects are left out of the batch.
GeneratorBatch collate(std::span<const GeneratorSample> samples, const Vocabulary& vocab,
                       const ImageManifest* manifest, const CollateConfig& config, Diagnostics* diag = nullptr);

}  // namespace mmchat::corpus

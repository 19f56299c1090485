#include "mmchat/collate.hpp"

#include <algorithm>

#include "mmchat/autograd.hpp"

namespace mmchat::corpus {
namespace {

void pad_rows(std::vector<std::vector<int>>& rows, int value, std::size_t width) {
  for (auto& r : rows) r.resize(width, value);
}

PixelImage fetch(const ImageManifest* manifest, const std::string& id, int side) {
  if (id == kDummyImage) return PixelImage::dummy(side);
  if (!manifest) throw ImageLoadError(id, "no image manifest configured");
  return manifest->load(id, side);
}

}  // namespace

RetrieverBatch collate(std::span<const RetrieverSample> samples, const Vocabulary& vocab,
                       const ImageManifest* manifest, const CollateConfig& config, Diagnostics* diag) {
  RetrieverBatch batch;
  std::size_t width = 0;
  for (const auto& s : samples) {
    auto ids = format_retriever_text(s.history, vocab, config.retriever_max_len, diag, config.history_window);
    width = std::max(width, ids.size());
    batch.lengths.push_back(static_cast<int>(ids.size()));
    batch.input_ids.push_back(std::move(ids));
    batch.image_ids.push_back(s.gold_image);
    batch.dialogue_ids.push_back(s.dialogue_id);
    if (config.load_images) batch.images.push_back(fetch(manifest, s.gold_image, config.image_side));
  }
  pad_rows(batch.input_ids, kPad, width);
  return batch;
}

GeneratorBatch collate(std::span<const GeneratorSample> samples, const Vocabulary& vocab,
                       const ImageManifest* manifest, const CollateConfig& config, Diagnostics* diag) {
  GeneratorBatch batch;
  std::size_t width = 0;
  for (const auto& s : samples) {
    auto enc = format_generator_input(s, vocab, config.generator_max_len, diag, config.history_window);
    if (!enc) continue;
    width = std::max(width, enc->input_ids.size());
    batch.lengths.push_back(static_cast<int>(enc->input_ids.size()));
    batch.input_ids.push_back(std::move(enc->input_ids));
    batch.labels.push_back(std::move(enc->labels));
    batch.image_ids.push_back(s.conditioning_image);
    batch.dialogue_ids.push_back(s.dialogue_id);
    if (config.load_images) batch.images.push_back(fetch(manifest, s.conditioning_image, config.image_side));
  }
  pad_rows(batch.input_ids, kPad, width);
  pad_rows(batch.labels, nn::kIgnoreIndex, width);
  return batch;
}

}  // namespace mmchat::corpus

#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/image.hpp"
#include "mmchat/layers.hpp"

namespace mmchat::nn {

struct ImageEncoderConfig {
  int side = 32;
  int patch = 4;
  int d_model = 64;
  int blocks = 2;
  int heads = 4;

  int patches() const { return (side / patch) * (side / patch); }
};

struct TextEncoderConfig {
  int vocab_size = 0;
  int max_len = 512;
  int d_model = 64;
  int blocks = 2;
  int heads = 4;
};

// [side*side*3] HWC pixels -> [num_patches, patch*patch*3], patches row-major.
Tensor patchify(const corpus::PixelImage& image, int patch);

// Patch embeddings, a prepended learned pooling vector, learned positions,
// pre-norm blocks and a final layer norm. Row 0 of the output is the pooled
// representation; rows 1.. are the patch representations.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& config, Initializer& init);
  // Throws DimensionError when the image side is not the configured side or
  // is not divisible by the patch size.
  Var operator()(const corpus::PixelImage& image) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;
  const ImageEncoderConfig& config() const { return config_; }

 private:
  ImageEncoderConfig config_;
  Linear patch_embed_;
  Var pool_;       // [1, d]
  Var positions_;  // [patches + 1, d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
};

// Token and position embeddings, bidirectional blocks with key padding, final
// layer norm. ids[0] is expected to be the pooling token.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const TextEncoderConfig& config, Initializer& init);
  // Keys at positions >= valid are masked out. valid defaults to ids.size().
  Var operator()(std::span<const int> ids, int valid = -1) const;
  void register_parameters(ParameterSet& set, const std::string& prefix) const;
  const TextEncoderConfig& config() const { return config_; }

 private:
  TextEncoderConfig config_;
  Var tokens_;     // [V, d]
  Var positions_;  // [max_len, d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
};

nlohmann::json to_json(const ImageEncoderConfig& c);
nlohmann::json to_json(const TextEncoderConfig& c);
ImageEncoderConfig image_encoder_config_from_json(const nlohmann::json& j);
TextEncoderConfig text_encoder_config_from_json(const nlohmann::json& j);

}  // namespace mmchat::nn

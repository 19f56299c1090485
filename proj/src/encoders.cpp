#include "mmchat/encoders.hpp"

#include "mmchat/error.hpp"

namespace mmchat::nn {

Tensor patchify(const corpus::PixelImage& image, int patch) {
  if (patch <= 0 || image.side % patch != 0) {
    throw DimensionError("patchify: side " + std::to_string(image.side) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const int grid = image.side / patch;
  const int width = patch * patch * 3;
  Tensor out({grid * grid, width});
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      float* dst = out.row(gy * grid + gx).data();
      for (int y = 0; y < patch; ++y) {
        const float* src = image.pixels.data() + (static_cast<std::size_t>(gy * patch + y) * image.side + gx * patch) * 3;
        std::copy_n(src, patch * 3, dst + y * patch * 3);
      }
    }
  }
  return out;
}

ImageEncoder::ImageEncoder(const ImageEncoderConfig& config, Initializer& init) : config_(config) {
  if (config.patch <= 0 || config.side % config.patch != 0) {
    throw DimensionError("image encoder: side " + std::to_string(config.side) + " not divisible by patch " +
                         std::to_string(config.patch));
  }
  patch_embed_ = Linear(config.patch * config.patch * 3, config.d_model, init);
  pool_ = parameter(init.truncated_normal(1, config.d_model));
  positions_ = parameter(init.truncated_normal(config.patches() + 1, config.d_model));
  for (int i = 0; i < config.blocks; ++i) {
    blocks_.emplace_back(BlockConfig{config.d_model, config.heads, 4, false}, init);
  }
  final_ln_ = LayerNorm(config.d_model);
}

Var ImageEncoder::operator()(const corpus::PixelImage& image) const {
  if (image.side != config_.side) {
    throw DimensionError("image encoder: expected side " + std::to_string(config_.side) + ", got " +
                         std::to_string(image.side));
  }
  Var patches = patch_embed_(constant(patchify(image, config_.patch)));
  const Var parts[] = {pool_, patches};
  Var x = add(concat_rows(parts), positions_);
  for (const auto& block : blocks_) x = block(x, nullptr);
  return final_ln_(x);
}

void ImageEncoder::register_parameters(ParameterSet& set, const std::string& prefix) const {
  patch_embed_.register_parameters(set, prefix + ".patch_embed");
  set.add(prefix + ".pool", pool_, false);
  set.add(prefix + ".positions", positions_, false);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_parameters(set, prefix + ".block" + std::to_string(i));
  final_ln_.register_parameters(set, prefix + ".ln_final");
}

TextEncoder::TextEncoder(const TextEncoderConfig& config, Initializer& init) : config_(config) {
  if (config.vocab_size <= 0) throw ValidationError("text encoder: vocab_size must be positive");
  tokens_ = parameter(init.truncated_normal(config.vocab_size, config.d_model));
  positions_ = parameter(init.truncated_normal(config.max_len, config.d_model));
  for (int i = 0; i < config.blocks; ++i) {
    blocks_.emplace_back(BlockConfig{config.d_model, config.heads, 4, false}, init);
  }
  final_ln_ = LayerNorm(config.d_model);
}

Var TextEncoder::operator()(std::span<const int> ids, int valid) const {
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw DimensionError("text encoder: empty input");
  if (n > config_.max_len) {
    throw DimensionError("text encoder: length " + std::to_string(n) + " exceeds " + std::to_string(config_.max_len));
  }
  if (valid < 0) valid = n;
  Var x = add(embedding(tokens_, ids), slice_rows(positions_, 0, n));
  const AttentionMask mask = AttentionMask::key_padding(n, n, valid);
  const AttentionMask* m = valid < n ? &mask : nullptr;
  for (const auto& block : blocks_) x = block(x, m);
  return final_ln_(x);
}

void TextEncoder::register_parameters(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".tokens", tokens_);
  set.add(prefix + ".positions", positions_, false);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_parameters(set, prefix + ".block" + std::to_string(i));
  final_ln_.register_parameters(set, prefix + ".ln_final");
}

nlohmann::json to_json(const ImageEncoderConfig& c) {
  return {{"side", c.side}, {"patch", c.patch}, {"d_model", c.d_model}, {"blocks", c.blocks}, {"heads", c.heads}};
}

nlohmann::json to_json(const TextEncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"d_model", c.d_model},
          {"blocks", c.blocks}, {"heads", c.heads}};
}

ImageEncoderConfig image_encoder_config_from_json(const nlohmann::json& j) {
  ImageEncoderConfig c;
  c.side = j.value("side", c.side);
  c.patch = j.value("patch", c.patch);
  c.d_model = j.value("d_model", c.d_model);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  return c;
}

TextEncoderConfig text_encoder_config_from_json(const nlohmann::json& j) {
  TextEncoderConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.d_model = j.value("d_model", c.d_model);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  return c;
}

}  // namespace mmchat::nn

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmchat/checkpoint.hpp"
#include "mmchat/collate.hpp"
#include "mmchat/encoders.hpp"
#include "mmchat/sampling.hpp"
#include "mmchat/vocab.hpp"

namespace mmchat::generator {

struct GeneratorConfig {
  bool multimodal = false;
  int vocab_size = 0;
  int max_len = 256;
  int d_model = 64;
  int blocks = 2;
  int heads = 4;
  nn::ImageEncoderConfig image;  // used when multimodal; image.d_model must equal d_model
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

// Decoder-only transformer with a tied output projection. The multimodal
// variant adds cross-attention in every block over the full output sequence
// of its own image encoder.
class DecoderModel {
 public:
  explicit DecoderModel(const GeneratorConfig& config);

  bool multimodal() const { return config_.multimodal; }
  const GeneratorConfig& config() const { return config_; }

  // Encoder output used as cross-attention memory; empty Var for unimodal.
  nn::Var image_memory(const corpus::PixelImage* image) const;
  // [L, V] next-token logits. Multimodal models require `memory`; unimodal
  // ones ignore it.
  nn::Var forward(std::span<const int> ids, const nn::Var* memory) const;
  nn::Var forward_logits(std::span<const int> ids, const corpus::PixelImage* image) const;

  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  std::string fingerprint() const { return nn::fingerprint(params_); }

 private:
  GeneratorConfig config_;
  nn::Var tokens_;     // [V, d], tied with the output projection
  nn::Var positions_;  // [max_len, d]
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
  nn::ImageEncoder image_encoder_;
  nn::ParameterSet params_;
};

void save_checkpoint(const std::filesystem::path& path, const DecoderModel& model, const corpus::Vocabulary& vocab,
                     const nlohmann::json& extra = nlohmann::json::object());
struct LoadedGenerator {
  std::unique_ptr<DecoderModel> model;
  corpus::Vocabulary vocab;
};
LoadedGenerator load_checkpoint(const std::filesystem::path& path);

// Summed next-token NLL over rows [begin, end) of a batch, divided by
// `normalizer` (the count of scored tokens when absent). Labels are aligned
// with inputs; the one-position shift happens here.
nn::Var generation_loss(const DecoderModel& model, const corpus::GeneratorBatch& batch, int begin, int end,
                        std::optional<float> normalizer = {});
nn::Var generation_loss(const DecoderModel& model, const corpus::GeneratorBatch& batch);

// Number of labels that will be scored after the shift.
int scored_tokens(const corpus::GeneratorBatch& batch, int begin, int end);

// Per-token NLLs of the scored positions of one row, without a trace.
std::vector<double> token_losses(const DecoderModel& model, const corpus::GeneratorBatch& batch, int row);

// Chooses the image for the next reply: the image retrieved this turn, else
// the newest image already shared, else DUMMY.
std::string select_conditioning_image(const std::optional<std::string>& retrieved_now,
                                      const std::vector<std::string>& shared_queue);

// Continues `prompt` (ending in a speaker tag) until <eos> or max_new_tokens.
// The returned ids exclude <eos>. A prompt longer than the model's positions
// keeps <bos> and its most recent tokens.
std::vector<int> generate_greedy(const DecoderModel& model, std::span<const int> prompt,
                                 const corpus::PixelImage* image, int max_new_tokens = 40);
std::vector<int> generate_nucleus(const DecoderModel& model, std::span<const int> prompt,
                                  const corpus::PixelImage* image, const SamplingConfig& config);
std::vector<int> generate(const DecoderModel& model, std::span<const int> prompt, const corpus::PixelImage* image,
                          const SamplingConfig& config);

}  // namespace mmchat::generator

#include "mmchat/generator.hpp"

#include <random>

#include "mmchat/error.hpp"
#include "mmchat/image.hpp"

namespace mmchat::generator {

using nn::Var;

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"kind", "generator"},     {"multimodal", c.multimodal}, {"vocab_size", c.vocab_size},
          {"max_len", c.max_len},     {"d_model", c.d_model},       {"blocks", c.blocks},
          {"heads", c.heads},         {"image", nn::to_json(c.image)}, {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.multimodal = j.value("multimodal", c.multimodal);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_len = j.value("max_len", c.max_len);
  c.d_model = j.value("d_model", c.d_model);
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  if (j.contains("image")) c.image = nn::image_encoder_config_from_json(j["image"]);
  c.seed = j.value("seed", c.seed);
  return c;
}

DecoderModel::DecoderModel(const GeneratorConfig& config) : config_(config) {
  if (config.vocab_size <= 0) throw ValidationError("generator: vocab_size must be positive");
  if (config.multimodal && config.image.d_model != config.d_model) {
    throw DimensionError("generator: image encoder width " + std::to_string(config.image.d_model) +
                         " differs from decoder width " + std::to_string(config.d_model));
  }
  nn::Initializer init(config.seed);
  tokens_ = nn::parameter(init.truncated_normal(config.vocab_size, config.d_model));
  positions_ = nn::parameter(init.truncated_normal(config.max_len, config.d_model));
  for (int i = 0; i < config.blocks; ++i) {
    blocks_.emplace_back(nn::BlockConfig{config.d_model, config.heads, 4, config.multimodal}, init);
  }
  final_ln_ = nn::LayerNorm(config.d_model);

  params_.add("decoder.tokens", tokens_);
  params_.add("decoder.positions", positions_, false);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_parameters(params_, "decoder.block" + std::to_string(i));
  final_ln_.register_parameters(params_, "decoder.ln_final");
  if (config.multimodal) {
    image_encoder_ = nn::ImageEncoder(config.image, init);
    image_encoder_.register_parameters(params_, "image_encoder");
  }
}

Var DecoderModel::image_memory(const corpus::PixelImage* image) const {
  if (!config_.multimodal) return {};
  if (image) return image_encoder_(*image);
  return image_encoder_(corpus::PixelImage::dummy(config_.image.side));
}

Var DecoderModel::forward(std::span<const int> ids, const Var* memory) const {
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw DimensionError("generator: empty input");
  if (n > config_.max_len) {
    throw DimensionError("generator: length " + std::to_string(n) + " exceeds " + std::to_string(config_.max_len));
  }
  if (config_.multimodal && (!memory || !*memory)) throw ValidationError("generator: multimodal forward needs an image");
  Var x = nn::add(nn::embedding(tokens_, ids), nn::slice_rows(positions_, 0, n));
  const nn::AttentionMask causal = nn::AttentionMask::causal(n);
  for (const auto& block : blocks_) x = block(x, &causal, config_.multimodal ? memory : nullptr);
  return nn::matmul_nt(final_ln_(x), tokens_);
}

Var DecoderModel::forward_logits(std::span<const int> ids, const corpus::PixelImage* image) const {
  Var memory = image_memory(image);
  return forward(ids, &memory);
}

void save_checkpoint(const std::filesystem::path& path, const DecoderModel& model, const corpus::Vocabulary& vocab,
                     const nlohmann::json& extra) {
  nn::Container c = nn::snapshot(model.parameters(), to_json(model.config()));
  c.extra = extra.is_object() ? extra : nlohmann::json::object();
  c.extra["vocab"] = vocab.tokens();
  nn::write_container(path, c);
}

LoadedGenerator load_checkpoint(const std::filesystem::path& path) {
  nn::Container c = nn::read_container(path);
  if (c.config.value("kind", "") != "generator") throw ParseError(path.string() + ": not a generator checkpoint");
  LoadedGenerator out{std::make_unique<DecoderModel>(generator_config_from_json(c.config)),
                      corpus::Vocabulary::from_json({{"tokens", c.extra.at("vocab")}})};
  nn::restore(out.model->parameters(), c);
  return out;
}

namespace {

// Inputs ids[0..len-1) predict labels[1..len).
std::vector<int> shifted_targets(const corpus::GeneratorBatch& batch, int row) {
  const int len = batch.lengths[row];
  return {batch.labels[row].begin() + 1, batch.labels[row].begin() + len};
}

int count_scored(const std::vector<int>& targets) {
  int n = 0;
  for (int t : targets) n += t != nn::kIgnoreIndex;
  return n;
}

Var row_memory(const DecoderModel& model, const corpus::GeneratorBatch& batch, int row) {
  if (!model.multimodal()) return {};
  return model.image_memory(batch.images.empty() ? nullptr : &batch.images.at(row));
}

}  // namespace

int scored_tokens(const corpus::GeneratorBatch& batch, int begin, int end) {
  int n = 0;
  for (int r = begin; r < end; ++r) n += count_scored(shifted_targets(batch, r));
  return n;
}

Var generation_loss(const DecoderModel& model, const corpus::GeneratorBatch& batch, int begin, int end,
                    std::optional<float> normalizer) {
  const float norm = normalizer.value_or(static_cast<float>(scored_tokens(batch, begin, end)));
  if (norm <= 0.0f) throw ValidationError("generation_loss: every label in the batch is masked");
  Var total;
  for (int r = begin; r < end; ++r) {
    auto targets = shifted_targets(batch, r);
    if (count_scored(targets) == 0) continue;
    std::span<const int> ids(batch.input_ids[r].data(), batch.lengths[r] - 1);
    Var memory = row_memory(model, batch, r);
    Var loss = nn::cross_entropy(model.forward(ids, &memory), targets, norm);
    total = total ? nn::add(total, loss) : loss;
  }
  if (!total) throw ValidationError("generation_loss: every label in the batch is masked");
  return total;
}

Var generation_loss(const DecoderModel& model, const corpus::GeneratorBatch& batch) {
  return generation_loss(model, batch, 0, batch.size());
}

std::vector<double> token_losses(const DecoderModel& model, const corpus::GeneratorBatch& batch, int row) {
  nn::NoGradGuard guard;
  auto targets = shifted_targets(batch, row);
  std::span<const int> ids(batch.input_ids[row].data(), batch.lengths[row] - 1);
  Var memory = row_memory(model, batch, row);
  auto nll = nn::token_nll(model.forward(ids, &memory).value(), targets);
  std::vector<double> out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != nn::kIgnoreIndex) out.push_back(nll[i]);
  }
  return out;
}

std::string select_conditioning_image(const std::optional<std::string>& retrieved_now,
                                      const std::vector<std::string>& shared_queue) {
  if (retrieved_now) return *retrieved_now;
  if (!shared_queue.empty()) return shared_queue.back();
  return corpus::kDummyImage;
}

namespace {

template <typename Pick>
std::vector<int> decode_loop(const DecoderModel& model, std::span<const int> prompt, const corpus::PixelImage* image,
                             int max_new_tokens, Pick pick) {
  nn::NoGradGuard guard;
  const int max_len = model.config().max_len;
  std::vector<int> seq(prompt.begin(), prompt.end());
  if (seq.empty()) throw ValidationError("generate: empty prompt");
  if (static_cast<int>(seq.size()) >= max_len) {
    std::vector<int> kept{seq.front()};
    kept.insert(kept.end(), seq.end() - (max_len - 2), seq.end());
    seq = std::move(kept);
  }
  Var memory = model.image_memory(image);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_new_tokens && static_cast<int>(seq.size()) < max_len) {
    Var logits = model.forward(seq, &memory);
    const int id = pick(logits.value().row(logits.rows() - 1));
    if (id == corpus::kEos) break;
    out.push_back(id);
    seq.push_back(id);
  }
  return out;
}

}  // namespace

std::vector<int> generate_greedy(const DecoderModel& model, std::span<const int> prompt,
                                 const corpus::PixelImage* image, int max_new_tokens) {
  return decode_loop(model, prompt, image, max_new_tokens, [](std::span<const float> row) { return argmax(row); });
}

std::vector<int> generate_nucleus(const DecoderModel& model, std::span<const int> prompt,
                                  const corpus::PixelImage* image, const SamplingConfig& config) {
  std::mt19937_64 rng(config.seed);
  return decode_loop(model, prompt, image, config.max_new_tokens,
                     [&](std::span<const float> row) { return sample_nucleus(row, config.top_p, rng); });
}

std::vector<int> generate(const DecoderModel& model, std::span<const int> prompt, const corpus::PixelImage* image,
                          const SamplingConfig& config) {
  if (config.strategy == Strategy::kGreedy) return generate_greedy(model, prompt, image, config.max_new_tokens);
  return generate_nucleus(model, prompt, image, config);
}

}  // namespace mmchat::generator

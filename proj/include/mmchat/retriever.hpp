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
#include "mmchat/error.hpp"
#include "mmchat/vocab.hpp"

namespace mmchat::retriever {

struct RetrieverConfig {
  nn::ImageEncoderConfig image;
  nn::TextEncoderConfig text;
  int d_joint = 64;
  float init_logit_scale = 14.29f;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const RetrieverConfig& c);
RetrieverConfig retriever_config_from_json(const nlohmann::json& j);

class DualEncoder {
 public:
  explicit DualEncoder(const RetrieverConfig& config);

  // Unit-norm [1, d_joint] embeddings.
  nn::Var encode_image(const corpus::PixelImage& image) const;
  nn::Var encode_text(std::span<const int> ids, int valid = -1) const;
  // Stacked [n, d_joint] embeddings for a collated batch.
  nn::Var encode_images(const corpus::RetrieverBatch& batch, int begin, int end) const;
  nn::Var encode_texts(const corpus::RetrieverBatch& batch, int begin, int end) const;

  // exp of the learned log-scale, clamped to [1, 100]; [1,1].
  nn::Var logit_scale() const;

  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  const RetrieverConfig& config() const { return config_; }
  std::string fingerprint() const { return nn::fingerprint(params_); }

 private:
  RetrieverConfig config_;
  nn::ImageEncoder image_encoder_;
  nn::TextEncoder text_encoder_;
  nn::Linear image_proj_, text_proj_;
  nn::Var log_scale_;
  nn::ParameterSet params_;
};

// Checkpoint = container with the model config, parameters and the vocabulary.
void save_checkpoint(const std::filesystem::path& path, const DualEncoder& model, const corpus::Vocabulary& vocab,
                     const nlohmann::json& extra = nlohmann::json::object());
struct LoadedRetriever {
  std::unique_ptr<DualEncoder> model;
  corpus::Vocabulary vocab;
};
LoadedRetriever load_checkpoint(const std::filesystem::path& path);

// Symmetric InfoNCE over the scaled cosine matrix: mean of image->text and
// text->image cross-entropies with diagonal targets. Throws ValidationError
// for fewer than two rows.
nn::Var contrastive_loss(const nn::Var& image_embs, const nn::Var& text_embs, const nn::Var& logit_scale);

struct CandidateIndex {
  std::vector<std::string> ids;
  nn::Tensor embeddings;  // [n, d_joint], unit rows
  std::string fingerprint;
  int dim = 0;

  std::size_t size() const { return ids.size(); }
  void save(const std::filesystem::path& path) const;
  static CandidateIndex load(const std::filesystem::path& path);
};

// One embedding per listed image; failing ids are excluded with a warning.
CandidateIndex build_index(const DualEncoder& model, const corpus::ImageManifest& manifest,
                           const std::vector<std::string>& ids, Diagnostics* diag = nullptr);

struct RankedItem {
  std::string id;
  int position = 0;  // index row
  float score = 0.0f;
};

struct RankedList {
  std::vector<RankedItem> items;
  // 1-based rank of `gold`, or 0 when absent.
  int rank_of(const std::string& gold) const;
};

// Cosine against every row; score descending, ties by ascending row.
RankedList rank(const CandidateIndex& index, std::span<const float> query);

struct Retrieval {
  std::string id;
  float score = 0.0f;
};

// Top-1 when its raw cosine is strictly above tau.
std::optional<Retrieval> retrieve_top1(const CandidateIndex& index, std::span<const float> query, float tau,
                                       Diagnostics* diag = nullptr);

// Encodes formatted history ids without building a trace.
std::vector<float> embed_history(const DualEncoder& model, std::span<const int> ids);

}  // namespace mmchat::retriever

#include "mmchat/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmchat::retriever {

using nn::Var;

nlohmann::json to_json(const RetrieverConfig& c) {
  return {{"kind", "retriever"},
          {"image", nn::to_json(c.image)},
          {"text", nn::to_json(c.text)},
          {"d_joint", c.d_joint},
          {"init_logit_scale", c.init_logit_scale},
          {"seed", c.seed}};
}

RetrieverConfig retriever_config_from_json(const nlohmann::json& j) {
  RetrieverConfig c;
  if (j.contains("image")) c.image = nn::image_encoder_config_from_json(j["image"]);
  if (j.contains("text")) c.text = nn::text_encoder_config_from_json(j["text"]);
  c.d_joint = j.value("d_joint", c.d_joint);
  c.init_logit_scale = j.value("init_logit_scale", c.init_logit_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

DualEncoder::DualEncoder(const RetrieverConfig& config) : config_(config) {
  nn::Initializer init(config.seed);
  image_encoder_ = nn::ImageEncoder(config.image, init);
  text_encoder_ = nn::TextEncoder(config.text, init);
  image_proj_ = nn::Linear(config.image.d_model, config.d_joint, init);
  text_proj_ = nn::Linear(config.text.d_model, config.d_joint, init);
  log_scale_ = nn::parameter(nn::Tensor({1, 1}, std::log(config.init_logit_scale)));

  image_encoder_.register_parameters(params_, "image_encoder");
  text_encoder_.register_parameters(params_, "text_encoder");
  image_proj_.register_parameters(params_, "image_proj");
  text_proj_.register_parameters(params_, "text_proj");
  params_.add("log_logit_scale", log_scale_, false);
}

Var DualEncoder::encode_image(const corpus::PixelImage& image) const {
  Var pooled = nn::slice_rows(image_encoder_(image), 0, 1);
  return nn::l2_normalize_rows(image_proj_(pooled));
}

Var DualEncoder::encode_text(std::span<const int> ids, int valid) const {
  Var pooled = nn::slice_rows(text_encoder_(ids, valid), 0, 1);
  return nn::l2_normalize_rows(text_proj_(pooled));
}

Var DualEncoder::encode_images(const corpus::RetrieverBatch& batch, int begin, int end) const {
  std::vector<Var> rows;
  for (int i = begin; i < end; ++i) rows.push_back(encode_image(batch.images.at(i)));
  return nn::concat_rows(rows);
}

Var DualEncoder::encode_texts(const corpus::RetrieverBatch& batch, int begin, int end) const {
  std::vector<Var> rows;
  for (int i = begin; i < end; ++i) {
    // Padding is masked, so only the unpadded prefix is encoded.
    std::span<const int> ids(batch.input_ids[i].data(), batch.lengths[i]);
    rows.push_back(encode_text(ids));
  }
  return nn::concat_rows(rows);
}

Var DualEncoder::logit_scale() const { return nn::exp_clamped(log_scale_, 1.0f, 100.0f); }

void save_checkpoint(const std::filesystem::path& path, const DualEncoder& model, const corpus::Vocabulary& vocab,
                     const nlohmann::json& extra) {
  nn::Container c = nn::snapshot(model.parameters(), to_json(model.config()));
  c.extra = extra.is_object() ? extra : nlohmann::json::object();
  c.extra["vocab"] = vocab.tokens();
  nn::write_container(path, c);
}

LoadedRetriever load_checkpoint(const std::filesystem::path& path) {
  nn::Container c = nn::read_container(path);
  if (c.config.value("kind", "") != "retriever") throw ParseError(path.string() + ": not a retriever checkpoint");
  LoadedRetriever out{std::make_unique<DualEncoder>(retriever_config_from_json(c.config)),
                      corpus::Vocabulary::from_json({{"tokens", c.extra.at("vocab")}})};
  nn::restore(out.model->parameters(), c);
  return out;
}

Var contrastive_loss(const Var& image_embs, const Var& text_embs, const Var& logit_scale) {
  const int bs = image_embs.rows();
  if (bs < 2) throw ValidationError("contrastive_loss: need at least two pairs for in-batch negatives");
  if (text_embs.rows() != bs) {
    throw DimensionError("contrastive_loss: " + std::to_string(bs) + " images vs " + std::to_string(text_embs.rows()) +
                         " texts");
  }
  Var logits = nn::mul_scalar(nn::matmul_nt(image_embs, text_embs), logit_scale);
  std::vector<int> diag(bs);
  std::iota(diag.begin(), diag.end(), 0);
  Var i2t = nn::cross_entropy(logits, diag);
  Var t2i = nn::cross_entropy(nn::transpose(logits), diag);
  return nn::scale(nn::add(i2t, t2i), 0.5f);
}

void CandidateIndex::save(const std::filesystem::path& path) const {
  nn::Container c;
  c.config = {{"kind", "candidate_index"}, {"dim", dim}};
  c.extra = {{"ids", ids}, {"fingerprint", fingerprint}};
  c.tensors.emplace_back("embeddings", embeddings);
  nn::write_container(path, c);
}

CandidateIndex CandidateIndex::load(const std::filesystem::path& path) {
  nn::Container c = nn::read_container(path);
  if (c.config.value("kind", "") != "candidate_index") throw ParseError(path.string() + ": not a candidate index");
  CandidateIndex idx;
  idx.ids = c.extra.at("ids").get<std::vector<std::string>>();
  idx.fingerprint = c.extra.at("fingerprint").get<std::string>();
  idx.dim = c.config.at("dim").get<int>();
  const nn::Tensor* emb = c.find("embeddings");
  if (!emb) throw ParseError(path.string() + ": missing embeddings");
  idx.embeddings = *emb;
  if (!idx.ids.empty() && (idx.embeddings.rows() != static_cast<int>(idx.ids.size()) || idx.embeddings.cols() != idx.dim)) {
    throw ParseError(path.string() + ": embedding table does not match the id list");
  }
  return idx;
}

CandidateIndex build_index(const DualEncoder& model, const corpus::ImageManifest& manifest,
                           const std::vector<std::string>& ids, Diagnostics* diag) {
  nn::NoGradGuard guard;
  CandidateIndex idx;
  idx.dim = model.config().d_joint;
  idx.fingerprint = model.fingerprint();
  std::vector<float> rows;
  for (const auto& id : ids) {
    try {
      Var e = model.encode_image(manifest.load(id, model.config().image.side));
      rows.insert(rows.end(), e.value().values().begin(), e.value().values().end());
      idx.ids.push_back(id);
    } catch (const ImageLoadError& e) {
      if (diag) diag->warn(id, std::string("excluded from index: ") + e.what());
    }
  }
  idx.embeddings = nn::Tensor({static_cast<int>(idx.ids.size()), idx.dim}, std::move(rows));
  return idx;
}

int RankedList::rank_of(const std::string& gold) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].id == gold) return static_cast<int>(i) + 1;
  }
  return 0;
}

RankedList rank(const CandidateIndex& index, std::span<const float> query) {
  if (static_cast<int>(query.size()) != index.dim) {
    throw DimensionError("rank: query of dimension " + std::to_string(query.size()) + " against index of dimension " +
                         std::to_string(index.dim));
  }
  RankedList out;
  out.items.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const float* row = index.embeddings.data() + i * index.dim;
    float s = 0.0f;
    for (int j = 0; j < index.dim; ++j) s += row[j] * query[j];
    out.items.push_back({index.ids[i], static_cast<int>(i), s});
  }
  std::stable_sort(out.items.begin(), out.items.end(), [](const RankedItem& a, const RankedItem& b) { return a.score > b.score; });
  return out;
}

std::optional<Retrieval> retrieve_top1(const CandidateIndex& index, std::span<const float> query, float tau,
                                       Diagnostics* diag) {
  if (index.size() == 0) {
    if (diag) diag->warn("index", "empty candidate index");
    return std::nullopt;
  }
  RankedList ranked = rank(index, query);
  const RankedItem& top = ranked.items.front();
  if (top.score > tau) return Retrieval{top.id, top.score};
  return std::nullopt;
}

std::vector<float> embed_history(const DualEncoder& model, std::span<const int> ids) {
  nn::NoGradGuard guard;
  Var e = model.encode_text(ids);
  return {e.value().values().begin(), e.value().values().end()};
}

}  // namespace mmchat::retriever

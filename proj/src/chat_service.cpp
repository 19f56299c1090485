#include "mmchat/chat_service.hpp"

#include <chrono>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "mmchat/error.hpp"

namespace mmchat::chat {
namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

}  // namespace

Variant variant_from_string(const std::string& tag) {
  if (tag == "text_only") return Variant::kTextOnly;
  if (tag == "retrieval_unimodal") return Variant::kRetrievalUnimodal;
  if (tag == "retrieval_multimodal") return Variant::kRetrievalMultimodal;
  throw ValidationError("unknown model tag '" + tag + "' (text_only|retrieval_unimodal|retrieval_multimodal)");
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::kTextOnly: return "text_only";
    case Variant::kRetrievalUnimodal: return "retrieval_unimodal";
    case Variant::kRetrievalMultimodal: return "retrieval_multimodal";
  }
  return "?";
}

bool uses_retriever(Variant v) { return v != Variant::kTextOnly; }

ChatService::ChatService(ServiceConfig config, std::map<Variant, GeneratorStack> generators,
                         std::optional<RetrievalStack> retrieval, std::shared_ptr<const corpus::ImageManifest> manifest)
    : config_(std::move(config)),
      generators_(std::move(generators)),
      retrieval_(std::move(retrieval)),
      manifest_(std::move(manifest)),
      id_rng_(config_.id_seed ? *config_.id_seed : std::random_device{}()) {
  if (generators_.empty()) throw ValidationError("chat service needs at least one model variant");
  if (!manifest_) manifest_ = std::make_shared<corpus::ImageManifest>();
  for (const auto& [variant, stack] : generators_) {
    if (!stack.model) throw ValidationError(std::string("no generator for ") + to_string(variant));
    const bool want_mm = variant == Variant::kRetrievalMultimodal;
    if (stack.model->multimodal() != want_mm) {
      throw ValidationError(std::string(to_string(variant)) + " needs a " + (want_mm ? "multimodal" : "unimodal") +
                            " generator");
    }
    if (uses_retriever(variant) && !retrieval_) {
      throw ValidationError(std::string(to_string(variant)) + " needs a retriever and candidate index");
    }
  }
  if (retrieval_) {
    if (!retrieval_->model || !retrieval_->index) throw ValidationError("retrieval stack is incomplete");
    if (retrieval_->index->fingerprint != retrieval_->model->fingerprint()) {
      throw ValidationError("candidate index was built by a different retriever checkpoint");
    }
  }
  for (auto& s : load_sessions(sessions_dir())) {
    auto entry = std::make_shared<Entry>();
    entry->state = std::move(s);
    sessions_.emplace(entry->state.session_id, std::move(entry));
  }
}

std::vector<std::string> ChatService::model_tags() const {
  std::vector<std::string> tags;
  for (const auto& [variant, stack] : generators_) tags.emplace_back(to_string(variant));
  return tags;
}

std::string ChatService::now() const { return config_.clock ? config_.clock() : utc_now(); }

std::string ChatService::new_id() {
  std::lock_guard lock(id_mutex_);
  std::shared_lock sessions(sessions_mutex_);
  for (;;) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << id_rng_();
    if (!sessions_.count(os.str()) && !std::filesystem::exists(session_path(sessions_dir(), os.str()))) return os.str();
  }
}

std::shared_ptr<ChatService::Entry> ChatService::find(const std::string& session_id) const {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  return it->second;
}

std::string ChatService::create_session(const std::string& model_tag) {
  const Variant v = variant_from_string(model_tag);
  if (!generators_.count(v)) throw ValidationError("model tag '" + model_tag + "' is not loaded");
  auto entry = std::make_shared<Entry>();
  entry->state.session_id = new_id();
  entry->state.model_tag = model_tag;
  entry->state.created_at = now();
  save_session(sessions_dir(), entry->state);
  std::unique_lock lock(sessions_mutex_);
  const std::string id = entry->state.session_id;
  sessions_.emplace(id, std::move(entry));
  return id;
}

MessageResult ChatService::handle_message(const std::string& session_id, const std::string& text) {
  auto entry = find(session_id);
  std::unique_lock busy(entry->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw StateError("session " + session_id + " is busy with another message");
  if (entry->state.closed()) throw StateError("session " + session_id + " is closed");
  if (blank(text)) throw ValidationError("message text is empty");

  const Variant variant = variant_from_string(entry->state.model_tag);
  const GeneratorStack& gen = generators_.at(variant);
  SessionState next = entry->state;
  next.turns.push_back({corpus::Speaker::kUser, text, std::nullopt, std::nullopt, std::nullopt});

  std::optional<retriever::Retrieval> hit;
  if (uses_retriever(variant)) {
    const auto& r = *retrieval_;
    const auto ids = corpus::format_retriever_text(next.history(), r.vocab, r.model->config().text.max_len);
    const auto query = retriever::embed_history(*r.model, ids);
    hit = retriever::retrieve_top1(*r.index, query, config_.threshold);
  }

  MessageResult result;
  result.conditioning_image =
      generator::select_conditioning_image(hit ? std::optional(hit->id) : std::nullopt, next.image_queue);
  if (config_.before_generate) config_.before_generate(next);

  const auto prompt = corpus::format_generation_prompt(next.history(), corpus::Speaker::kBot, gen.vocab);
  std::optional<corpus::PixelImage> image;
  if (gen.model->multimodal()) {
    const int side = gen.model->config().image.side;
    image = result.conditioning_image == corpus::kDummyImage ? corpus::PixelImage::dummy(side)
                                                              : manifest_->load(result.conditioning_image, side);
  }
  generator::SamplingConfig sampling = config_.sampling;
  sampling.seed ^= fnv1a(session_id) + next.turns.size();
  const auto out = generator::generate(*gen.model, prompt, image ? &*image : nullptr, sampling);

  result.response = gen.vocab.decode(out);
  if (hit) {
    result.image_id = hit->id;
    result.score = hit->score;
    next.image_queue.push_back(hit->id);
  }
  next.turns.push_back({corpus::Speaker::kBot, result.response, result.image_id, result.score, std::nullopt});
  save_session(sessions_dir(), next);
  entry->state = std::move(next);
  return result;
}

void ChatService::record_turn_eval(const std::string& session_id, std::size_t turn, const TurnEval& eval) {
  auto entry = find(session_id);
  std::lock_guard busy(entry->busy);
  if (entry->state.closed()) throw StateError("session " + session_id + " is closed");
  validate(eval);
  if (turn >= entry->state.turns.size()) throw NotFoundError("session has no turn " + std::to_string(turn));
  if (entry->state.turns[turn].speaker != corpus::Speaker::kBot) {
    throw ValidationError("turn " + std::to_string(turn) + " is not a bot turn");
  }
  if (eval.image_groundedness && !entry->state.image_shared_by(turn)) {
    throw ValidationError("image_groundedness given before any image was shared");
  }
  SessionState next = entry->state;
  next.turns[turn].eval = eval;
  save_session(sessions_dir(), next);
  entry->state = std::move(next);
}

SessionState ChatService::close_session(const std::string& session_id, const SessionEval& eval) {
  auto entry = find(session_id);
  std::lock_guard busy(entry->busy);
  if (entry->state.closed()) throw StateError("session " + session_id + " is already closed");
  validate(eval);
  SessionState next = entry->state;
  next.session_eval = eval;
  next.closed_at = now();
  save_session(sessions_dir(), next);
  entry->state = next;
  return next;
}

SessionState ChatService::session(const std::string& session_id) const {
  auto entry = find(session_id);
  std::lock_guard busy(entry->busy);
  return entry->state;
}

std::vector<SummaryRow> ChatService::summary() const {
  std::vector<SessionState> all;
  {
    std::shared_lock lock(sessions_mutex_);
    for (const auto& [id, entry] : sessions_) {
      std::lock_guard busy(entry->busy);
      all.push_back(entry->state);
    }
  }
  return aggregate_eval(all);
}

std::vector<std::uint8_t> ChatService::image_png(const std::string& image_id) const {
  if (!manifest_->contains(image_id)) throw NotFoundError("unknown image " + image_id);
  return corpus::encode_png(corpus::load_raw(manifest_->source(image_id), image_id));
}

}  // namespace mmchat::chat

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include "mmchat/generator.hpp"
#include "mmchat/retriever.hpp"
#include "mmchat/session.hpp"

namespace mmchat::chat {

// The three deployable systems: a text-only generator without retrieval, a
// text-only generator that also shares retrieved images, and an
// image-conditioned generator with retrieval.
enum class Variant { kTextOnly, kRetrievalUnimodal, kRetrievalMultimodal };
Variant variant_from_string(const std::string& tag);
const char* to_string(Variant v);
bool uses_retriever(Variant v);

struct GeneratorStack {
  std::shared_ptr<const generator::DecoderModel> model;
  corpus::Vocabulary vocab;
};

struct RetrievalStack {
  std::shared_ptr<const retriever::DualEncoder> model;
  corpus::Vocabulary vocab;
  std::shared_ptr<const retriever::CandidateIndex> index;
};

struct ServiceConfig {
  std::filesystem::path data_dir;  // session files live in <data_dir>/sessions
  float threshold = 0.15f;
  generator::SamplingConfig sampling;  // nucleus, top_p 0.1
  // Seeds session ids; when absent ids come from std::random_device.
  std::optional<std::uint64_t> id_seed;
  // ISO-8601 timestamps; defaults to the system clock in UTC.
  std::function<std::string()> clock;
  // Called with the pending state right before decoding. Exceptions it throws
  // are treated as generation failures.
  std::function<void(const SessionState&)> before_generate;
};

struct MessageResult {
  std::string response;
  std::optional<std::string> image_id;
  std::optional<float> score;
  // Image the generator was conditioned on (DUMMY when none). Not part of the
  // HTTP response.
  std::string conditioning_image;
};

class ChatService {
 public:
  // `retrieval` is required when any variant uses the retriever. Throws
  // ValidationError on a variant/model mismatch or an index built by a
  // different retriever. Existing session files are loaded.
  ChatService(ServiceConfig config, std::map<Variant, GeneratorStack> generators,
              std::optional<RetrievalStack> retrieval, std::shared_ptr<const corpus::ImageManifest> manifest);

  std::vector<std::string> model_tags() const;

  // Throws ValidationError for an unknown or unloaded tag.
  std::string create_session(const std::string& model_tag);
  // Throws NotFoundError (unknown id), StateError (closed, or another
  // message for this session in flight), ValidationError (empty text). On
  // any failure the session is left as it was.
  MessageResult handle_message(const std::string& session_id, const std::string& text);
  // `turn` indexes SessionState::turns and must name a bot turn. Upserts.
  void record_turn_eval(const std::string& session_id, std::size_t turn, const TurnEval& eval);
  // Records the session evaluation and freezes the session.
  SessionState close_session(const std::string& session_id, const SessionEval& eval);

  SessionState session(const std::string& session_id) const;
  std::vector<SummaryRow> summary() const;
  // PNG bytes of a manifest image. Throws NotFoundError for unknown ids.
  std::vector<std::uint8_t> image_png(const std::string& image_id) const;

  std::filesystem::path sessions_dir() const { return config_.data_dir / "sessions"; }

 private:
  struct Entry {
    std::mutex busy;
    SessionState state;
  };
  std::shared_ptr<Entry> find(const std::string& session_id) const;
  std::string new_id();
  std::string now() const;

  ServiceConfig config_;
  std::map<Variant, GeneratorStack> generators_;
  std::optional<RetrievalStack> retrieval_;
  std::shared_ptr<const corpus::ImageManifest> manifest_;

  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::mutex id_mutex_;
  std::mt19937_64 id_rng_;
};

}  // namespace mmchat::chat

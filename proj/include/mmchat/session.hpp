#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/corpus.hpp"

namespace mmchat::chat {

// Likert scores, each in 1..5. image_groundedness is absent until an image
// has been shared in the session.
struct TurnEval {
  int fluency = 0;
  int coherence = 0;
  std::optional<int> image_groundedness;
};

struct SessionEval {
  int engagingness = 0;
  int humanness = 0;
};

struct SessionTurn {
  corpus::Speaker speaker = corpus::Speaker::kUser;
  std::string text;
  std::optional<std::string> image_id;  // image shown with this bot turn
  std::optional<float> score;           // its retrieval score
  std::optional<TurnEval> eval;
};

struct SessionState {
  std::string session_id;
  std::string model_tag;
  std::vector<SessionTurn> turns;
  std::vector<std::string> image_queue;  // shared images, oldest first
  std::optional<SessionEval> session_eval;
  std::string created_at;
  std::optional<std::string> closed_at;

  bool closed() const { return closed_at.has_value(); }
  // Dialogue history in corpus form (texts and speakers only).
  std::vector<corpus::Turn> history() const;
  // True when an image was shown at or before `turn`.
  bool image_shared_by(std::size_t turn) const;
};

// Throws ValidationError unless every score is an integer in 1..5.
void validate(const TurnEval& e);
void validate(const SessionEval& e);

nlohmann::json to_json(const TurnEval& e);
nlohmann::json to_json(const SessionEval& e);
nlohmann::json to_json(const SessionState& s);
TurnEval turn_eval_from_json(const nlohmann::json& j);
SessionEval session_eval_from_json(const nlohmann::json& j);
SessionState session_from_json(const nlohmann::json& j);

// <dir>/<session_id>.json, written to a temporary file and renamed.
std::filesystem::path session_path(const std::filesystem::path& dir, const std::string& session_id);
void save_session(const std::filesystem::path& dir, const SessionState& s);
SessionState load_session(const std::filesystem::path& path);
// Every *.json session file in `dir`, sorted by session id.
std::vector<SessionState> load_sessions(const std::filesystem::path& dir);

struct SummaryRow {
  std::string model_tag;
  int sessions = 0;
  int evaluated_turns = 0;
  int closed_sessions = 0;
  // Means over the recorded scores; absent when nothing was recorded.
  std::optional<double> fluency, coherence, image_groundedness, engagingness, humanness;
};

// Per-model means over turn and session evaluations, rows sorted by tag.
std::vector<SummaryRow> aggregate_eval(const std::vector<SessionState>& sessions);
// Throws NotFoundError when the directory holds no session files.
std::vector<SummaryRow> aggregate_eval(const std::filesystem::path& dir);
nlohmann::json to_json(const std::vector<SummaryRow>& rows);
std::string to_csv(const std::vector<SummaryRow>& rows);

}  // namespace mmchat::chat

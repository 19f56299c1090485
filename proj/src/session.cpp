#include "mmchat/session.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "mmchat/error.hpp"

namespace mmchat::chat {
namespace {

void check_score(const char* name, int v) {
  if (v < 1 || v > 5) throw ValidationError(std::string(name) + " must be an integer in 1..5, got " + std::to_string(v));
}

int score_from_json(const nlohmann::json& j, const char* name) {
  const auto& v = j.at(name);
  if (!v.is_number_integer()) throw ValidationError(std::string(name) + " must be an integer in 1..5");
  return v.get<int>();
}

struct Mean {
  double sum = 0.0;
  int n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> value() const { return n ? std::optional(sum / n) : std::nullopt; }
};

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << *v;
  return os.str();
}

}  // namespace

std::vector<corpus::Turn> SessionState::history() const {
  std::vector<corpus::Turn> out;
  out.reserve(turns.size());
  for (const auto& t : turns) out.push_back({t.speaker, t.text, std::nullopt, corpus::ImageRole::kNone});
  return out;
}

bool SessionState::image_shared_by(std::size_t turn) const {
  for (std::size_t i = 0; i <= turn && i < turns.size(); ++i) {
    if (turns[i].image_id) return true;
  }
  return false;
}

void validate(const TurnEval& e) {
  check_score("fluency", e.fluency);
  check_score("coherence", e.coherence);
  if (e.image_groundedness) check_score("image_groundedness", *e.image_groundedness);
}

void validate(const SessionEval& e) {
  check_score("engagingness", e.engagingness);
  check_score("humanness", e.humanness);
}

nlohmann::json to_json(const TurnEval& e) {
  nlohmann::json j{{"fluency", e.fluency}, {"coherence", e.coherence}};
  if (e.image_groundedness) j["image_groundedness"] = *e.image_groundedness;
  return j;
}

nlohmann::json to_json(const SessionEval& e) { return {{"engagingness", e.engagingness}, {"humanness", e.humanness}}; }

nlohmann::json to_json(const SessionState& s) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : s.turns) {
    nlohmann::json jt{{"speaker", corpus::to_string(t.speaker)}, {"text", t.text}};
    if (t.image_id) jt["image_id"] = *t.image_id;
    if (t.score) jt["score"] = *t.score;
    if (t.eval) jt["eval"] = to_json(*t.eval);
    turns.push_back(std::move(jt));
  }
  nlohmann::json j{{"session_id", s.session_id},
                   {"model_tag", s.model_tag},
                   {"turns", std::move(turns)},
                   {"image_queue", s.image_queue},
                   {"created_at", s.created_at},
                   {"closed_at", s.closed_at ? nlohmann::json(*s.closed_at) : nlohmann::json(nullptr)}};
  if (s.session_eval) j["session_eval"] = to_json(*s.session_eval);
  return j;
}

TurnEval turn_eval_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("turn evaluation must be an object");
  TurnEval e;
  e.fluency = score_from_json(j, "fluency");
  e.coherence = score_from_json(j, "coherence");
  if (j.contains("image_groundedness") && !j["image_groundedness"].is_null()) {
    e.image_groundedness = score_from_json(j, "image_groundedness");
  }
  return e;
}

SessionEval session_eval_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("session evaluation must be an object");
  return {score_from_json(j, "engagingness"), score_from_json(j, "humanness")};
}

SessionState session_from_json(const nlohmann::json& j) {
  SessionState s;
  s.session_id = j.at("session_id").get<std::string>();
  s.model_tag = j.at("model_tag").get<std::string>();
  s.created_at = j.value("created_at", "");
  if (j.contains("closed_at") && !j["closed_at"].is_null()) s.closed_at = j["closed_at"].get<std::string>();
  for (const auto& jt : j.at("turns")) {
    SessionTurn t;
    t.speaker = corpus::speaker_from_string(jt.at("speaker").get<std::string>());
    t.text = jt.at("text").get<std::string>();
    if (jt.contains("image_id")) t.image_id = jt["image_id"].get<std::string>();
    if (jt.contains("score")) t.score = jt["score"].get<float>();
    if (jt.contains("eval")) t.eval = turn_eval_from_json(jt["eval"]);
    s.turns.push_back(std::move(t));
  }
  if (j.contains("image_queue")) {
    s.image_queue = j["image_queue"].get<std::vector<std::string>>();
  } else {
    for (const auto& t : s.turns) {
      if (t.image_id) s.image_queue.push_back(*t.image_id);
    }
  }
  if (j.contains("session_eval")) s.session_eval = session_eval_from_json(j["session_eval"]);
  return s;
}

std::filesystem::path session_path(const std::filesystem::path& dir, const std::string& session_id) {
  return dir / (session_id + ".json");
}

void save_session(const std::filesystem::path& dir, const SessionState& s) {
  std::filesystem::create_directories(dir);
  const auto path = session_path(dir, s.session_id);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << to_json(s).dump(2) << '\n';
    out.flush();
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

SessionState load_session(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  try {
    return session_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<SessionState> load_sessions(const std::filesystem::path& dir) {
  std::vector<SessionState> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") out.push_back(load_session(entry.path()));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.session_id < b.session_id; });
  return out;
}

std::vector<SummaryRow> aggregate_eval(const std::vector<SessionState>& sessions) {
  struct Acc {
    SummaryRow row;
    Mean fluency, coherence, grounded, engaging, human;
  };
  std::map<std::string, Acc> by_tag;
  for (const auto& s : sessions) {
    auto& acc = by_tag[s.model_tag];
    acc.row.model_tag = s.model_tag;
    ++acc.row.sessions;
    for (const auto& t : s.turns) {
      if (!t.eval) continue;
      ++acc.row.evaluated_turns;
      acc.fluency.add(t.eval->fluency);
      acc.coherence.add(t.eval->coherence);
      if (t.eval->image_groundedness) acc.grounded.add(*t.eval->image_groundedness);
    }
    if (s.closed()) ++acc.row.closed_sessions;
    if (s.session_eval) {
      acc.engaging.add(s.session_eval->engagingness);
      acc.human.add(s.session_eval->humanness);
    }
  }
  std::vector<SummaryRow> rows;
  for (auto& [tag, acc] : by_tag) {
    acc.row.fluency = acc.fluency.value();
    acc.row.coherence = acc.coherence.value();
    acc.row.image_groundedness = acc.grounded.value();
    acc.row.engagingness = acc.engaging.value();
    acc.row.humanness = acc.human.value();
    rows.push_back(acc.row);
  }
  return rows;
}

std::vector<SummaryRow> aggregate_eval(const std::filesystem::path& dir) {
  const auto sessions = load_sessions(dir);
  if (sessions.empty()) throw NotFoundError("no session files in " + dir.string());
  return aggregate_eval(sessions);
}

nlohmann::json to_json(const std::vector<SummaryRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& r : rows) {
    out.push_back({{"model_tag", r.model_tag},
                   {"sessions", r.sessions},
                   {"closed_sessions", r.closed_sessions},
                   {"evaluated_turns", r.evaluated_turns},
                   {"fluency", opt(r.fluency)},
                   {"coherence", opt(r.coherence)},
                   {"image_groundedness", opt(r.image_groundedness)},
                   {"engagingness", opt(r.engagingness)},
                   {"humanness", opt(r.humanness)}});
  }
  return out;
}

std::string to_csv(const std::vector<SummaryRow>& rows) {
  std::string out =
      "model_tag,sessions,closed_sessions,evaluated_turns,fluency,coherence,image_groundedness,engagingness,humanness\n";
  for (const auto& r : rows) {
    out += r.model_tag + "," + std::to_string(r.sessions) + "," + std::to_string(r.closed_sessions) + "," +
           std::to_string(r.evaluated_turns) + "," + fmt(r.fluency) + "," + fmt(r.coherence) + "," +
           fmt(r.image_groundedness) + "," + fmt(r.engagingness) + "," + fmt(r.humanness) + "\n";
  }
  return out;
}

}  // namespace mmchat::chat

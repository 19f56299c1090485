#include "mmchat/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "mmchat/autograd.hpp"
#include "mmchat/image.hpp"

namespace mmchat::corpus {
namespace {

void warn(Diagnostics* diag, const std::string& subject, const std::string& message) {
  if (diag) diag->warn(subject, message);
}

std::vector<int> tag_and_tokens(const Turn& t, const Vocabulary& vocab) {
  std::vector<int> ids{t.speaker == Speaker::kUser ? kUser : kBot};
  auto body = vocab.encode(t.text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

auto window_begin(const std::vector<Turn>& history, int window) {
  const auto n = static_cast<long>(history.size());
  return history.begin() + std::max(0L, n - window);
}

}  // namespace

const char* to_string(Speaker s) { return s == Speaker::kUser ? "user" : "bot"; }

const char* to_string(ImageRole r) {
  switch (r) {
    case ImageRole::kNone: return "none";
    case ImageRole::kSharedHere: return "shared_here";
    case ImageRole::kCarried: return "carried";
    case ImageRole::kDummy: return "dummy";
  }
  return "none";
}

Speaker speaker_from_string(const std::string& s) {
  if (s == "user") return Speaker::kUser;
  if (s == "bot") return Speaker::kBot;
  throw ParseError("unknown speaker '" + s + "'");
}

ImageRole role_from_string(const std::string& s) {
  if (s == "none") return ImageRole::kNone;
  if (s == "shared_here") return ImageRole::kSharedHere;
  if (s == "carried") return ImageRole::kCarried;
  if (s == "dummy") return ImageRole::kDummy;
  throw ParseError("unknown image role '" + s + "'");
}

DatasetSplit parse_photochat(const nlohmann::json& records, const std::string& name, Diagnostics* diag) {
  if (!records.is_array()) throw ParseError(name + ": expected a JSON array of dialogues");
  DatasetSplit split{name, {}};
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    Dialogue d;
    d.id = rec.contains("dialogue_id") ? rec["dialogue_id"].get<std::string>() : name + "#" + std::to_string(i);
    try {
      if (rec.contains("photo_url") && rec["photo_url"].is_string()) d.source_image = rec["photo_url"].get<std::string>();
      for (const auto& m : rec.at("dialogue")) {
        Turn t;
        const int uid = m.at("user_id").get<int>();
        if (uid != 0 && uid != 1) throw CorpusError(d.id, "unknown speaker id " + std::to_string(uid));
        t.speaker = uid == 0 ? Speaker::kUser : Speaker::kBot;
        t.text = m.value("message", "");
        if (m.value("share_photo", false)) {
          if (!d.source_image) throw CorpusError(d.id, "share_photo without photo_url");
          t.image_ref = d.source_image;
        }
        d.turns.push_back(std::move(t));
      }
    } catch (const CorpusError& e) {
      if (!diag) throw;
      diag->error(d.id, e.what());
      continue;
    } catch (const nlohmann::json::exception& e) {
      const CorpusError err(d.id, std::string("malformed record: ") + e.what());
      if (!diag) throw err;
      diag->error(d.id, err.what());
      continue;
    }
    split.dialogues.push_back(std::move(d));
  }
  return split;
}

DatasetSplit load_photochat(const std::filesystem::path& path, Diagnostics* diag) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + " at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return parse_photochat(j, path.stem().string(), diag);
}

DatasetSplit filter_unavailable_images(const DatasetSplit& split, const Availability& available, std::size_t* excluded) {
  DatasetSplit out{split.name, {}};
  std::size_t dropped = 0;
  for (const auto& d : split.dialogues) {
    bool ok = !d.source_image || available(*d.source_image);
    for (const auto& t : d.turns) ok = ok && (!t.image_ref || available(*t.image_ref));
    if (ok) {
      out.dialogues.push_back(d);
    } else {
      ++dropped;
    }
  }
  if (excluded) *excluded = dropped;
  return out;
}

Dialogue merge_consecutive_turns(const Dialogue& d) {
  Dialogue out{d.id, {}, d.source_image};
  for (const auto& t : d.turns) {
    if (!out.turns.empty() && out.turns.back().speaker == t.speaker) {
      Turn& last = out.turns.back();
      if (!t.text.empty()) last.text = last.text.empty() ? t.text : last.text + " " + t.text;
      if (t.image_ref) {
        if (last.image_ref && *last.image_ref != *t.image_ref) {
          throw CorpusError(d.id, "two different images in one merged turn");
        }
        last.image_ref = t.image_ref;
        if (t.role != ImageRole::kNone) last.role = t.role;
      }
    } else {
      out.turns.push_back(t);
    }
  }
  return out;
}

Dialogue reassign_image_only_turns(const Dialogue& d, Diagnostics* diag) {
  Dialogue out{d.id, {}, d.source_image};
  std::vector<std::pair<Speaker, std::string>> pending;  // images waiting for a same-speaker turn
  for (const auto& t : d.turns) {
    if (t.text.empty()) {
      if (t.image_ref) {
        pending.emplace_back(t.speaker, *t.image_ref);
      } else {
        warn(diag, d.id, "dropped turn with neither text nor image");
      }
      continue;
    }
    Turn kept = t;
    auto it = std::find_if(pending.begin(), pending.end(), [&](const auto& p) { return p.first == t.speaker; });
    if (it != pending.end()) {
      if (kept.image_ref && *kept.image_ref != it->second) {
        throw CorpusError(d.id, "reassigned image collides with a different image");
      }
      kept.image_ref = it->second;
      pending.erase(it);
    }
    out.turns.push_back(std::move(kept));
  }
  if (out.turns.empty()) throw CorpusError(d.id, "no turns with text");
  for (const auto& [speaker, ref] : pending) {
    Turn& last = out.turns.back();
    if (last.image_ref && *last.image_ref != ref) throw CorpusError(d.id, "reassigned image collides with a different image");
    last.image_ref = ref;
    warn(diag, d.id, "image-only turn has no later same-speaker turn; attached to the final turn");
  }
  return out;
}

Dialogue propagate_images(const Dialogue& d) {
  const bool already = std::any_of(d.turns.begin(), d.turns.end(), [](const Turn& t) { return t.role != ImageRole::kNone; });
  std::vector<std::size_t> shared;
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    const auto& t = d.turns[i];
    if (already ? t.role == ImageRole::kSharedHere : t.image_ref.has_value()) shared.push_back(i);
  }
  if (shared.size() != 1) {
    throw CorpusError(d.id, "expected exactly one shared image, found " + std::to_string(shared.size()));
  }
  Dialogue out = d;
  const std::size_t at = shared.front();
  const std::string ref = *d.turns[at].image_ref;
  for (std::size_t i = 0; i < out.turns.size(); ++i) {
    Turn& t = out.turns[i];
    if (i < at) {
      t.role = ImageRole::kDummy;
      t.image_ref.reset();
    } else {
      t.role = i == at ? ImageRole::kSharedHere : ImageRole::kCarried;
      t.image_ref = ref;
    }
  }
  return out;
}

DatasetSplit preprocess(const DatasetSplit& split, const Availability& available, Diagnostics& diag) {
  std::size_t excluded = 0;
  DatasetSplit kept = filter_unavailable_images(split, available, &excluded);
  if (excluded > 0) diag.warn(split.name, std::to_string(excluded) + " dialogue(s) excluded for unavailable images");
  DatasetSplit out{split.name, {}};
  for (const auto& d : kept.dialogues) {
    try {
      // Removing an image-only turn can leave two same-speaker turns adjacent,
      // hence the second merge.
      Dialogue m = merge_consecutive_turns(d);
      m = reassign_image_only_turns(m, &diag);
      m = merge_consecutive_turns(m);
      out.dialogues.push_back(propagate_images(m));
    } catch (const CorpusError& e) {
      diag.error(d.id, e.what());
    }
  }
  return out;
}

std::vector<RetrieverSample> expand_retriever_samples(const DatasetSplit& split, Diagnostics* diag) {
  std::vector<RetrieverSample> out;
  for (const auto& d : split.dialogues) {
    auto it = std::find_if(d.turns.begin(), d.turns.end(), [](const Turn& t) { return t.role == ImageRole::kSharedHere; });
    if (it == d.turns.end()) {
      warn(diag, d.id, "no shared image; not preprocessed?");
      continue;
    }
    RetrieverSample s{d.id, {d.turns.begin(), it}, *it->image_ref};
    if (s.history.empty()) {
      s.history.push_back(d.turns.front());
      warn(diag, d.id, "image shared at the first turn; using that turn as history");
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<GeneratorSample> expand_generator_samples(const DatasetSplit& split, Diagnostics* diag) {
  std::vector<GeneratorSample> out;
  for (const auto& d : split.dialogues) {
    if (d.turns.size() < 2) {
      warn(diag, d.id, "single-turn dialogue yields no generator samples");
      continue;
    }
    for (std::size_t k = 1; k < d.turns.size(); ++k) {
      const Turn& response = d.turns[k];
      const bool has_image = response.role == ImageRole::kSharedHere || response.role == ImageRole::kCarried;
      out.push_back({d.id, {d.turns.begin(), d.turns.begin() + static_cast<long>(k)}, response,
                     has_image ? *response.image_ref : std::string(kDummyImage)});
    }
  }
  return out;
}

std::optional<EncodedGenerator> format_generator_input(const GeneratorSample& sample, const Vocabulary& vocab,
                                                       int max_len, Diagnostics* diag, int window) {
  auto response = vocab.encode(sample.response.text);
  if (response.empty()) {
    warn(diag, sample.dialogue_id, "empty response after tokenization; sample skipped");
    return std::nullopt;
  }
  EncodedGenerator enc;
  enc.input_ids = format_generation_prompt(sample.history, sample.response.speaker, vocab, window);
  enc.labels.assign(enc.input_ids.size(), nn::kIgnoreIndex);
  response.push_back(kEos);
  enc.input_ids.insert(enc.input_ids.end(), response.begin(), response.end());
  enc.labels.insert(enc.labels.end(), response.begin(), response.end());
  if (static_cast<int>(enc.input_ids.size()) > max_len) {
    enc.input_ids.resize(max_len);
    enc.labels.resize(max_len);
    if (std::all_of(enc.labels.begin(), enc.labels.end(), [](int l) { return l == nn::kIgnoreIndex; })) {
      warn(diag, sample.dialogue_id, "truncation removed every target token; sample skipped");
      return std::nullopt;
    }
  }
  return enc;
}

std::vector<int> format_generation_prompt(const std::vector<Turn>& history, Speaker next, const Vocabulary& vocab,
                                          int window) {
  std::vector<int> ids{kBos};
  for (auto it = window_begin(history, window); it != history.end(); ++it) {
    auto part = tag_and_tokens(*it, vocab);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  ids.push_back(next == Speaker::kUser ? kUser : kBot);
  return ids;
}

std::vector<int> format_retriever_text(const std::vector<Turn>& history, const Vocabulary& vocab, int max_len,
                                       Diagnostics* diag, int window) {
  std::vector<int> ids{kCls};
  if (history.empty()) warn(diag, "", "empty retriever history");
  bool first = true;
  for (auto it = window_begin(history, window); it != history.end(); ++it) {
    if (!first) ids.push_back(kSep);
    first = false;
    auto body = vocab.encode(it->text);
    ids.insert(ids.end(), body.begin(), body.end());
  }
  if (static_cast<int>(ids.size()) > max_len) ids.resize(max_len);
  return ids;
}

std::vector<std::string> split_texts(const DatasetSplit& split) {
  std::vector<std::string> texts;
  for (const auto& d : split.dialogues) {
    for (const auto& t : d.turns) texts.push_back(t.text);
  }
  return texts;
}

nlohmann::json to_json(const Turn& t) {
  nlohmann::json j = {{"speaker", to_string(t.speaker)}, {"text", t.text}, {"image_role", to_string(t.role)}};
  if (t.image_ref) j["image_id"] = *t.image_ref;
  return j;
}

Turn turn_from_json(const nlohmann::json& j) {
  Turn t;
  t.speaker = speaker_from_string(j.at("speaker").get<std::string>());
  t.text = j.at("text").get<std::string>();
  t.role = role_from_string(j.value("image_role", "none"));
  if (j.contains("image_id")) t.image_ref = j["image_id"].get<std::string>();
  return t;
}

namespace {

nlohmann::json turns_json(const std::vector<Turn>& turns) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : turns) arr.push_back(to_json(t));
  return arr;
}

std::vector<Turn> turns_from_json(const nlohmann::json& j) {
  std::vector<Turn> turns;
  for (const auto& t : j) turns.push_back(turn_from_json(t));
  return turns;
}

}  // namespace

nlohmann::json to_json(const RetrieverSample& s) {
  return {{"dialogue_id", s.dialogue_id}, {"history", turns_json(s.history)}, {"gold_image", s.gold_image}};
}

nlohmann::json to_json(const GeneratorSample& s) {
  return {{"dialogue_id", s.dialogue_id},
          {"history", turns_json(s.history)},
          {"response", to_json(s.response)},
          {"conditioning_image", s.conditioning_image}};
}

RetrieverSample retriever_sample_from_json(const nlohmann::json& j) {
  return {j.at("dialogue_id").get<std::string>(), turns_from_json(j.at("history")), j.at("gold_image").get<std::string>()};
}

GeneratorSample generator_sample_from_json(const nlohmann::json& j) {
  return {j.at("dialogue_id").get<std::string>(), turns_from_json(j.at("history")), turn_from_json(j.at("response")),
          j.at("conditioning_image").get<std::string>()};
}

nlohmann::json to_json(const Dialogue& d) {
  nlohmann::json j = {{"id", d.id}, {"turns", turns_json(d.turns)}};
  if (d.source_image) j["source_image"] = *d.source_image;
  return j;
}

Dialogue dialogue_from_json(const nlohmann::json& j) {
  Dialogue d{j.at("id").get<std::string>(), turns_from_json(j.at("turns")), std::nullopt};
  if (j.contains("source_image")) d.source_image = j["source_image"].get<std::string>();
  return d;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    for (const auto& row : rows) out << row.dump() << '\n';
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<RetrieverSample> read_retriever_samples(const std::filesystem::path& path) {
  std::vector<RetrieverSample> out;
  for (const auto& row : read_jsonl(path)) out.push_back(retriever_sample_from_json(row));
  return out;
}

std::vector<GeneratorSample> read_generator_samples(const std::filesystem::path& path) {
  std::vector<GeneratorSample> out;
  for (const auto& row : read_jsonl(path)) out.push_back(generator_sample_from_json(row));
  return out;
}

}  // namespace mmchat::corpus

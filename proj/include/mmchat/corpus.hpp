#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/error.hpp"
#include "mmchat/vocab.hpp"

namespace mmchat::corpus {

enum class Speaker { kUser, kBot };
enum class ImageRole { kNone, kSharedHere, kCarried, kDummy };

struct Turn {
  Speaker speaker = Speaker::kUser;
  std::string text;
  std::optional<std::string> image_ref;
  ImageRole role = ImageRole::kNone;

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;
  std::optional<std::string> source_image;

  bool operator==(const Dialogue&) const = default;
};

struct DatasetSplit {
  std::string name;
  std::vector<Dialogue> dialogues;
};

struct RetrieverSample {
  std::string dialogue_id;
  std::vector<Turn> history;
  std::string gold_image;
};

struct GeneratorSample {
  std::string dialogue_id;
  std::vector<Turn> history;
  Turn response;
  std::string conditioning_image;  // image id or kDummyImage
};

inline constexpr int kHistoryWindow = 12;

const char* to_string(Speaker s);
const char* to_string(ImageRole r);
Speaker speaker_from_string(const std::string& s);
ImageRole role_from_string(const std::string& s);

// Reads one split file: a JSON array of
//   {dialogue_id, photo_url, dialogue: [{user_id: 0|1, message, share_photo}]}.
// user_id 0 maps to user and 1 to bot. The split name is the file stem. A
// record with an unknown speaker id is skipped and reported through `diag`
// when given, otherwise it raises CorpusError.
DatasetSplit load_photochat(const std::filesystem::path& path, Diagnostics* diag = nullptr);
DatasetSplit parse_photochat(const nlohmann::json& records, const std::string& name, Diagnostics* diag = nullptr);

using Availability = std::function<bool(const std::string&)>;

// Drops dialogues referencing an unavailable image.
DatasetSplit filter_unavailable_images(const DatasetSplit& split, const Availability& available,
                                       std::size_t* excluded = nullptr);

// Same-speaker runs become one turn; non-empty texts joined by single spaces.
// Throws CorpusError when a run carries two different images.
Dialogue merge_consecutive_turns(const Dialogue& d);

// Deletes turns with an image and no text, moving the image to the next turn
// of the same speaker (or to the final remaining turn, with a warning). Turns
// with neither text nor image are dropped with a warning.
Dialogue reassign_image_only_turns(const Dialogue& d, Diagnostics* diag = nullptr);

// Marks the single image-bearing turn shared_here, later turns carried (same
// image) and earlier turns dummy. Throws CorpusError unless exactly one turn
// shares an image.
Dialogue propagate_images(const Dialogue& d);

// filter -> merge -> reassign -> merge -> propagate. Dialogues that fail a
// step are dropped and recorded as errors.
DatasetSplit preprocess(const DatasetSplit& split, const Availability& available, Diagnostics& diag);

std::vector<RetrieverSample> expand_retriever_samples(const DatasetSplit& split, Diagnostics* diag = nullptr);
std::vector<GeneratorSample> expand_generator_samples(const DatasetSplit& split, Diagnostics* diag = nullptr);

struct EncodedGenerator {
  std::vector<int> input_ids;
  std::vector<int> labels;  // kIgnoreIndex over the prompt
};

// <bos> (tag tokens)* tag(response) response <eos>, over the last `window`
// history turns, truncated from the right at max_len. Returns nullopt (with a
// warning) when the response has no tokens or truncation leaves no target.
std::optional<EncodedGenerator> format_generator_input(const GeneratorSample& sample, const Vocabulary& vocab,
                                                       int max_len, Diagnostics* diag = nullptr,
                                                       int window = kHistoryWindow);

// Prompt for generation: <bos> (tag tokens)* <tag of next speaker>.
std::vector<int> format_generation_prompt(const std::vector<Turn>& history, Speaker next, const Vocabulary& vocab,
                                          int window = kHistoryWindow);

// <cls> u1 <sep> u2 ... over the last `window` turns, truncated at max_len.
std::vector<int> format_retriever_text(const std::vector<Turn>& history, const Vocabulary& vocab, int max_len = 512,
                                       Diagnostics* diag = nullptr, int window = kHistoryWindow);

// Every turn text of a split, for vocabulary building.
std::vector<std::string> split_texts(const DatasetSplit& split);

nlohmann::json to_json(const Turn& t);
Turn turn_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RetrieverSample& s);
nlohmann::json to_json(const GeneratorSample& s);
RetrieverSample retriever_sample_from_json(const nlohmann::json& j);
GeneratorSample generator_sample_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Dialogue& d);
Dialogue dialogue_from_json(const nlohmann::json& j);

// JSON lines, one sample per line, in input order.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

template <typename Sample>
std::vector<nlohmann::json> to_rows(const std::vector<Sample>& samples) {
  std::vector<nlohmann::json> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(to_json(s));
  return rows;
}

std::vector<RetrieverSample> read_retriever_samples(const std::filesystem::path& path);
std::vector<GeneratorSample> read_generator_samples(const std::filesystem::path& path);

}  // namespace mmchat::corpus

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmchat/collate.hpp"
#include "mmchat/generator.hpp"
#include "mmchat/metrics.hpp"
#include "mmchat/retriever.hpp"

namespace mmchat::trainer {

enum class Task { kRetriever, kGenerator };
Task task_from_string(const std::string& s);
const char* to_string(Task t);

struct TrainConfig {
  Task task = Task::kRetriever;
  int epochs = 10;
  int batch_size = 16;  // effective batch
  int per_device = 4;
  int accumulation = 4;
  int eval_batch = 16;
  float lr = 5e-5f;
  int warmup_steps = 0;
  float weight_decay = 0.01f;
  int eval_interval = 100;  // optimizer steps
  int log_window = 100;     // samples averaged into train_loss
  std::uint64_t seed = 0;
  corpus::CollateConfig collate;

  // Defaults for each task: retriever 10 epochs / eval batch 16 / eval every
  // 100 steps; generator 3 epochs / eval batch 4 / eval every 500 steps.
  static TrainConfig defaults(Task task);
  // Throws ValidationError unless batch_size == per_device * accumulation etc.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LogRow {
  std::int64_t step = 0;
  std::optional<double> train_loss;
  std::optional<double> eval_loss;
  double lr = 0.0;
  std::int64_t wall_ms = 0;
};
nlohmann::json to_json(const LogRow& r);
LogRow log_row_from_json(const nlohmann::json& j);
std::vector<LogRow> read_run_log(const std::filesystem::path& path);

struct TrainResult {
  std::vector<LogRow> log;
  std::int64_t steps = 0;
  std::int64_t best_step = 0;
  double last_train_loss = 0.0;  // loss of the final optimizer step's batch
};

// Raised when a loss turns non-finite; the offending batch ids are listed in
// the message and, with an output directory, in nonfinite_batch.json.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::vector<std::string> batch_ids)
      : Error(what), batch_ids_(std::move(batch_ids)) {}
  const std::vector<std::string>& batch_ids() const { return batch_ids_; }

 private:
  std::vector<std::string> batch_ids_;
};

struct TrainIo {
  // When set: run.jsonl, last.ckpt and best.ckpt are written here.
  std::optional<std::filesystem::path> out_dir;
  const corpus::ImageManifest* manifest = nullptr;
  // Called after every optimizer step with (step, batch loss).
  std::function<void(std::int64_t, double)> on_step;
};

TrainResult train(const TrainConfig& config, retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                  const std::vector<corpus::RetrieverSample>& train_set,
                  const std::vector<corpus::RetrieverSample>* validation, const TrainIo& io);
TrainResult train(const TrainConfig& config, generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                  const std::vector<corpus::GeneratorSample>& train_set,
                  const std::vector<corpus::GeneratorSample>* validation, const TrainIo& io);

// One optimizer step's gradients for a retriever batch. With accum > 1 the
// batch is re-encoded in micro-batches against cached full-batch embeddings,
// so every micro-batch still sees all bs-1 in-batch negatives and the result
// matches the direct computation. Returns the batch loss.
double retriever_gradients(retriever::DualEncoder& model, const corpus::RetrieverBatch& batch, int accum);
// Same for the generator: micro-batch losses share the effective batch's token
// count as normalizer.
double generator_gradients(generator::DecoderModel& model, const corpus::GeneratorBatch& batch, int accum);

// Mean contrastive loss over validation batches (batches with < 2 rows skipped).
double retriever_eval_loss(const retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                           const std::vector<corpus::RetrieverSample>& samples, const corpus::ImageManifest* manifest,
                           const corpus::CollateConfig& collate, int eval_batch);
// Token-weighted mean NLL.
double generator_eval_loss(const generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                           const std::vector<corpus::GeneratorSample>& samples, const corpus::ImageManifest* manifest,
                           const corpus::CollateConfig& collate, int eval_batch);

// Ranks every sample's history against `index` (built over the split's
// candidates). Throws ValidationError on a fingerprint mismatch.
metrics::RetrievalReport evaluate_retriever(const retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                                            const std::vector<corpus::RetrieverSample>& samples,
                                            const retriever::CandidateIndex& index,
                                            const corpus::CollateConfig& collate, std::vector<int>* ranks = nullptr);
// Teacher-forced PPL plus greedy decoding for BLEU and Distinct.
metrics::GenerationReport evaluate_generator(const generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                                             const std::vector<corpus::GeneratorSample>& samples,
                                             const corpus::ImageManifest* manifest,
                                             const corpus::CollateConfig& collate, int max_new_tokens = 40,
                                             Diagnostics* diag = nullptr);

// Step of the minimum eval_loss; ties resolve to the earliest step. Throws
// ValidationError when no row has an eval_loss.
std::int64_t select_best_checkpoint(const std::vector<LogRow>& log);

// Unique gold images of a retriever sample set, in first-seen order.
std::vector<std::string> candidate_ids(const std::vector<corpus::RetrieverSample>& samples);

}  // namespace mmchat::trainer

#include "mmchat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <random>

#include "mmchat/optim.hpp"

namespace mmchat::trainer {

using nn::Var;

Task task_from_string(const std::string& s) {
  if (s == "retriever") return Task::kRetriever;
  if (s == "generator") return Task::kGenerator;
  throw ValidationError("unknown task '" + s + "' (retriever|generator)");
}

const char* to_string(Task t) { return t == Task::kRetriever ? "retriever" : "generator"; }

TrainConfig TrainConfig::defaults(Task task) {
  TrainConfig c;
  c.task = task;
  if (task == Task::kGenerator) {
    c.epochs = 3;
    c.eval_batch = 4;
    c.eval_interval = 500;
    c.log_window = 500;
  }
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (per_device < 1 || accumulation < 1) throw ValidationError("per_device and accumulation must be >= 1");
  if (batch_size != per_device * accumulation) {
    throw ValidationError("batch_size " + std::to_string(batch_size) + " != per_device " + std::to_string(per_device) +
                          " x accumulation " + std::to_string(accumulation));
  }
  if (eval_batch < 1 || eval_interval < 1 || log_window < 1) throw ValidationError("eval/log settings must be >= 1");
  if (!(lr > 0.0f)) throw ValidationError("lr must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"task", to_string(c.task)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"per_device", c.per_device},
          {"accumulation", c.accumulation},
          {"eval_batch", c.eval_batch},
          {"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"eval_interval", c.eval_interval},
          {"log_window", c.log_window},
          {"seed", c.seed},
          {"collate",
           {{"image_side", c.collate.image_side},
            {"generator_max_len", c.collate.generator_max_len},
            {"retriever_max_len", c.collate.retriever_max_len},
            {"history_window", c.collate.history_window}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c = TrainConfig::defaults(task_from_string(j.value("task", "retriever")));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.per_device = j.value("per_device", c.per_device);
  c.accumulation = j.value("accumulation", c.accumulation);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.lr = j.value("lr", c.lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.log_window = j.value("log_window", c.log_window);
  c.seed = j.value("seed", c.seed);
  if (j.contains("collate")) {
    const auto& k = j["collate"];
    c.collate.image_side = k.value("image_side", c.collate.image_side);
    c.collate.generator_max_len = k.value("generator_max_len", c.collate.generator_max_len);
    c.collate.retriever_max_len = k.value("retriever_max_len", c.collate.retriever_max_len);
    c.collate.history_window = k.value("history_window", c.collate.history_window);
  }
  return c;
}

nlohmann::json to_json(const LogRow& r) {
  nlohmann::json j = {{"step", r.step}, {"lr", r.lr}, {"wall_ms", r.wall_ms}};
  j["train_loss"] = r.train_loss ? nlohmann::json(*r.train_loss) : nlohmann::json(nullptr);
  j["eval_loss"] = r.eval_loss ? nlohmann::json(*r.eval_loss) : nlohmann::json(nullptr);
  return j;
}

LogRow log_row_from_json(const nlohmann::json& j) {
  LogRow r;
  r.step = j.at("step").get<std::int64_t>();
  r.lr = j.value("lr", 0.0);
  r.wall_ms = j.value("wall_ms", std::int64_t{0});
  if (j.contains("train_loss") && !j["train_loss"].is_null()) r.train_loss = j["train_loss"].get<double>();
  if (j.contains("eval_loss") && !j["eval_loss"].is_null()) r.eval_loss = j["eval_loss"].get<double>();
  return r;
}

std::vector<LogRow> read_run_log(const std::filesystem::path& path) {
  std::vector<LogRow> rows;
  for (const auto& j : corpus::read_jsonl(path)) rows.push_back(log_row_from_json(j));
  return rows;
}

std::int64_t select_best_checkpoint(const std::vector<LogRow>& log) {
  const LogRow* best = nullptr;
  for (const auto& r : log) {
    if (!r.eval_loss) continue;
    if (!best || *r.eval_loss < *best->eval_loss) best = &r;
  }
  if (!best) throw ValidationError("select_best_checkpoint: no evaluation rows in the log");
  return best->step;
}

std::vector<std::string> candidate_ids(const std::vector<corpus::RetrieverSample>& samples) {
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    if (std::find(ids.begin(), ids.end(), s.gold_image) == ids.end()) ids.push_back(s.gold_image);
  }
  return ids;
}

double retriever_gradients(retriever::DualEncoder& model, const corpus::RetrieverBatch& batch, int accum) {
  const int bs = batch.size();
  if (accum <= 1) {
    Var loss = retriever::contrastive_loss(model.encode_images(batch, 0, bs), model.encode_texts(batch, 0, bs),
                                           model.logit_scale());
    nn::backward(loss);
    return loss.item();
  }
  nn::Tensor image_embs, text_embs;
  {
    nn::NoGradGuard guard;
    image_embs = model.encode_images(batch, 0, bs).value();
    text_embs = model.encode_texts(batch, 0, bs).value();
  }
  Var ie = nn::parameter(image_embs);
  Var te = nn::parameter(text_embs);
  Var loss = retriever::contrastive_loss(ie, te, model.logit_scale());
  nn::backward(loss);
  const int micro = (bs + accum - 1) / accum;
  for (int begin = 0; begin < bs; begin += micro) {
    const int end = std::min(bs, begin + micro);
    const auto rows = [&](const nn::Tensor& g) {
      const int d = g.cols();
      return nn::Tensor({end - begin, d}, std::vector<float>(g.data() + begin * d, g.data() + end * d));
    };
    nn::backward(model.encode_images(batch, begin, end), rows(ie.grad()));
    nn::backward(model.encode_texts(batch, begin, end), rows(te.grad()));
  }
  return loss.item();
}

double generator_gradients(generator::DecoderModel& model, const corpus::GeneratorBatch& batch, int accum) {
  const int bs = batch.size();
  const float norm = static_cast<float>(generator::scored_tokens(batch, 0, bs));
  if (norm <= 0.0f) throw ValidationError("generator batch has no scored tokens");
  const int micro = (bs + std::max(accum, 1) - 1) / std::max(accum, 1);
  double total = 0.0;
  for (int begin = 0; begin < bs; begin += micro) {
    const int end = std::min(bs, begin + micro);
    if (generator::scored_tokens(batch, begin, end) == 0) continue;
    Var loss = generator::generation_loss(model, batch, begin, end, norm);
    nn::backward(loss);
    total += loss.item();
  }
  return total;
}

double retriever_eval_loss(const retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                           const std::vector<corpus::RetrieverSample>& samples, const corpus::ImageManifest* manifest,
                           const corpus::CollateConfig& collate, int eval_batch) {
  nn::NoGradGuard guard;
  double sum = 0.0;
  int batches = 0;
  for (std::size_t b = 0; b < samples.size(); b += eval_batch) {
    const std::size_t e = std::min(samples.size(), b + eval_batch);
    if (e - b < 2) continue;
    auto batch = corpus::collate(std::span(samples.data() + b, e - b), vocab, manifest, collate);
    sum += retriever::contrastive_loss(model.encode_images(batch, 0, batch.size()),
                                       model.encode_texts(batch, 0, batch.size()), model.logit_scale())
               .item();
    ++batches;
  }
  if (batches == 0) throw ValidationError("validation set needs at least two retriever samples");
  return sum / batches;
}

double generator_eval_loss(const generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                           const std::vector<corpus::GeneratorSample>& samples, const corpus::ImageManifest* manifest,
                           const corpus::CollateConfig& collate, int eval_batch) {
  corpus::CollateConfig cfg = collate;
  cfg.load_images = model.multimodal();
  double sum = 0.0;
  long count = 0;
  for (std::size_t b = 0; b < samples.size(); b += eval_batch) {
    const std::size_t e = std::min(samples.size(), b + eval_batch);
    auto batch = corpus::collate(std::span(samples.data() + b, e - b), vocab, manifest, cfg);
    for (int r = 0; r < batch.size(); ++r) {
      for (double v : generator::token_losses(model, batch, r)) {
        sum += v;
        ++count;
      }
    }
  }
  if (count == 0) throw ValidationError("validation set has no scored tokens");
  return sum / static_cast<double>(count);
}

namespace {

using Clock = std::chrono::steady_clock;

// Shared epoch/step/eval/checkpoint loop. `grads` computes gradients for one
// batch of sample indices and returns its loss; `evaluate` returns the
// validation loss (or nullopt); `save` writes a checkpoint.
template <typename Grads, typename Evaluate, typename Save, typename Ids>
TrainResult run_loop(const TrainConfig& config, nn::ParameterSet& params, std::size_t n_samples, int min_batch,
                     const TrainIo& io, Grads grads, Evaluate evaluate, Save save, Ids batch_ids) {
  config.validate();
  const auto start = Clock::now();
  nn::AdamW opt(params, {config.lr, 0.9f, 0.999f, 1e-8f, config.weight_decay});

  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  std::int64_t per_epoch = 0;
  for (std::size_t b = 0; b < n_samples; b += config.batch_size) {
    per_epoch += static_cast<std::int64_t>(std::min(n_samples, b + config.batch_size) - b) >= min_batch;
  }
  if (per_epoch == 0 && config.epochs > 0) throw ValidationError("training set too small for one batch");
  const nn::LinearSchedule schedule{config.lr, std::max<std::int64_t>(1, per_epoch * config.epochs), config.warmup_steps};

  TrainResult result;
  std::ofstream log_file;
  if (io.out_dir) {
    std::filesystem::create_directories(*io.out_dir);
    log_file.open(*io.out_dir / "run.jsonl", std::ios::trunc);
  }
  std::optional<double> best_eval;
  std::deque<double> window;
  std::size_t since_log = 0;

  const auto emit = [&](std::int64_t step, bool eval_point) {
    LogRow row;
    row.step = step;
    row.lr = schedule.lr(step);
    if (!window.empty()) row.train_loss = std::accumulate(window.begin(), window.end(), 0.0) / window.size();
    if (eval_point) {
      row.eval_loss = evaluate();
      // Without a validation set the latest checkpoint counts as best.
      const bool improved = !row.eval_loss || !best_eval || *row.eval_loss < *best_eval;
      if (io.out_dir) {
        save(*io.out_dir / "last.ckpt", step);
        if (improved) {
          std::filesystem::copy_file(*io.out_dir / "last.ckpt", *io.out_dir / "best.ckpt",
                                     std::filesystem::copy_options::overwrite_existing);
        }
      }
      if (improved) {
        result.best_step = step;
        if (row.eval_loss) best_eval = row.eval_loss;
      }
    }
    row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count();
    if (log_file.is_open()) log_file << to_json(row).dump() << '\n' << std::flush;
    result.log.push_back(row);
    since_log = 0;
  };

  emit(0, true);
  std::mt19937_64 rng(config.seed);
  std::int64_t step = 0;
  const std::int64_t total = per_epoch * config.epochs;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < n_samples; b += config.batch_size) {
      const std::size_t e = std::min(n_samples, b + config.batch_size);
      if (static_cast<int>(e - b) < min_batch) continue;
      std::vector<std::size_t> idx(order.begin() + b, order.begin() + e);
      params.zero_grad();
      double loss = 0.0;
      try {
        loss = grads(idx);
      } catch (const NonFiniteError&) {
        loss = std::nan("");
      }
      if (!std::isfinite(loss)) {
        auto ids = batch_ids(idx);
        std::string list;
        for (const auto& id : ids) list += (list.empty() ? "" : ", ") + id;
        if (io.out_dir) {
          std::ofstream dump(*io.out_dir / "nonfinite_batch.json");
          dump << nlohmann::json({{"step", step + 1}, {"batch_ids", ids}}).dump(1) << '\n';
        }
        throw TrainingAborted("non-finite loss at step " + std::to_string(step + 1) + "; batch: " + list, ids);
      }
      opt.step(schedule.lr(step));
      ++step;
      result.last_train_loss = loss;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        window.push_back(loss);
        if (static_cast<int>(window.size()) > config.log_window) window.pop_front();
      }
      since_log += idx.size();
      if (io.on_step) io.on_step(step, loss);
      const bool eval_point = step % config.eval_interval == 0 || step == total;
      if (eval_point || static_cast<int>(since_log) >= config.log_window) emit(step, eval_point);
    }
  }
  result.steps = step;
  return result;
}

template <typename Sample>
std::vector<Sample> pick(const std::vector<Sample>& all, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                  const std::vector<corpus::RetrieverSample>& train_set,
                  const std::vector<corpus::RetrieverSample>* validation, const TrainIo& io) {
  corpus::CollateConfig collate = config.collate;
  collate.image_side = model.config().image.side;
  collate.load_images = true;
  auto grads = [&](const std::vector<std::size_t>& idx) {
    auto samples = pick(train_set, idx);
    auto batch = corpus::collate(std::span<const corpus::RetrieverSample>(samples), vocab, io.manifest, collate);
    return retriever_gradients(model, batch, config.accumulation);
  };
  auto evaluate = [&]() -> std::optional<double> {
    if (!validation || validation->size() < 2) return std::nullopt;
    return retriever_eval_loss(model, vocab, *validation, io.manifest, collate, config.eval_batch);
  };
  auto save = [&](const std::filesystem::path& p, std::int64_t step) {
    retriever::save_checkpoint(p, model, vocab, {{"step", step}, {"train_config", to_json(config)}});
  };
  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(train_set[i].dialogue_id);
    return out;
  };
  return run_loop(config, model.parameters(), train_set.size(), 2, io, grads, evaluate, save, ids);
}

TrainResult train(const TrainConfig& config, generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                  const std::vector<corpus::GeneratorSample>& train_set,
                  const std::vector<corpus::GeneratorSample>* validation, const TrainIo& io) {
  corpus::CollateConfig collate = config.collate;
  collate.load_images = model.multimodal();
  if (model.multimodal()) collate.image_side = model.config().image.side;
  collate.generator_max_len = std::min(collate.generator_max_len, model.config().max_len);

  // Samples the formatter rejects (empty response, fully truncated target) never enter a batch.
  std::vector<corpus::GeneratorSample> usable;
  for (const auto& s : train_set) {
    if (corpus::format_generator_input(s, vocab, collate.generator_max_len, nullptr, collate.history_window)) {
      usable.push_back(s);
    }
  }
  auto grads = [&](const std::vector<std::size_t>& idx) {
    auto samples = pick(usable, idx);
    auto batch = corpus::collate(std::span<const corpus::GeneratorSample>(samples), vocab, io.manifest, collate);
    return generator_gradients(model, batch, config.accumulation);
  };
  auto evaluate = [&]() -> std::optional<double> {
    if (!validation || validation->empty()) return std::nullopt;
    return generator_eval_loss(model, vocab, *validation, io.manifest, collate, config.eval_batch);
  };
  auto save = [&](const std::filesystem::path& p, std::int64_t step) {
    generator::save_checkpoint(p, model, vocab, {{"step", step}, {"train_config", to_json(config)}});
  };
  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(usable[i].dialogue_id);
    return out;
  };
  return run_loop(config, model.parameters(), usable.size(), 1, io, grads, evaluate, save, ids);
}

metrics::RetrievalReport evaluate_retriever(const retriever::DualEncoder& model, const corpus::Vocabulary& vocab,
                                            const std::vector<corpus::RetrieverSample>& samples,
                                            const retriever::CandidateIndex& index,
                                            const corpus::CollateConfig& collate, std::vector<int>* ranks) {
  if (index.fingerprint != model.fingerprint()) {
    throw ValidationError("index fingerprint " + index.fingerprint + " does not match checkpoint " + model.fingerprint());
  }
  std::vector<int> gold;
  for (const auto& s : samples) {
    auto ids = corpus::format_retriever_text(s.history, vocab, collate.retriever_max_len, nullptr, collate.history_window);
    const int r = retriever::rank(index, retriever::embed_history(model, ids)).rank_of(s.gold_image);
    if (r == 0) throw ValidationError("gold image " + s.gold_image + " is not in the candidate index");
    gold.push_back(r);
  }
  if (ranks) *ranks = gold;
  return metrics::retrieval_report(gold, static_cast<int>(index.size()));
}

metrics::GenerationReport evaluate_generator(const generator::DecoderModel& model, const corpus::Vocabulary& vocab,
                                             const std::vector<corpus::GeneratorSample>& samples,
                                             const corpus::ImageManifest* manifest,
                                             const corpus::CollateConfig& collate, int max_new_tokens,
                                             Diagnostics* diag) {
  corpus::CollateConfig cfg = collate;
  cfg.load_images = model.multimodal();
  if (model.multimodal()) cfg.image_side = model.config().image.side;
  cfg.generator_max_len = std::min(cfg.generator_max_len, model.config().max_len);
  std::vector<double> nll;
  std::vector<metrics::GenerationCase> cases;
  for (const auto& s : samples) {
    auto batch = corpus::collate(std::span(&s, 1), vocab, manifest, cfg, diag);
    if (batch.size() == 0) continue;
    auto losses = generator::token_losses(model, batch, 0);
    nll.insert(nll.end(), losses.begin(), losses.end());
    auto prompt = corpus::format_generation_prompt(s.history, s.response.speaker, vocab, cfg.history_window);
    const corpus::PixelImage* image = model.multimodal() ? &batch.images.front() : nullptr;
    auto out = generator::generate_greedy(model, prompt, image, max_new_tokens);
    metrics::GenerationCase c;
    for (int id : out) c.candidate.push_back(vocab.token(id));
    c.reference = corpus::tokenize(s.response.text);
    cases.push_back(std::move(c));
  }
  return metrics::generation_report(cases, nll, diag);
}

}  // namespace mmchat::trainer

#include "mmchat/selftest.hpp"

#include <cstdio>
#include <random>
#include <sstream>

#include "mmchat/generator.hpp"
#include "mmchat/gradcheck.hpp"
#include "mmchat/metrics.hpp"
#include "mmchat/oracle.hpp"
#include "mmchat/retriever.hpp"
#include "mmchat/toy.hpp"
#include "mmchat/trainer.hpp"

namespace mmchat::selftest {
namespace {

using namespace mmchat::nn;

constexpr double kGradTolerance = 1e-3;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

Tensor uniform(int rows, int cols, std::mt19937_64& rng, float scale = 1.0f) {
  std::uniform_real_distribution<float> u(-scale, scale);
  Tensor t({rows, cols});
  for (float& v : t.values()) v = u(rng);
  return t;
}

// Pushes parameters away from the small default initialization so gradients
// sit well above float32 rounding noise.
void rescramble(ParameterSet& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.4f, 0.4f);
  for (auto& p : params.items()) {
    if (p.name.find("logit_scale") != std::string::npos) continue;
    const bool gain = p.name.size() > 5 && p.name.ends_with(".gain");
    for (float& v : p.var.value().values()) v = gain ? 1.0f + u(rng) : u(rng);
  }
}

Check grad_check(const std::string& name, const std::function<Var()>& loss, ParameterSet& params, float eps = 2e-2f) {
  const auto r = finite_diff_check(loss, params, {}, {.eps = eps, .max_entries = 16});
  return {"gradcheck." + name, r.max_relative_error < kGradTolerance,
          "max_rel_err=" + sci(r.max_relative_error) + " worst=" + r.worst_parameter};
}

Check metric_check(const std::string& name, int failures, int total) {
  return {"metrics." + name, failures == 0, std::to_string(total - failures) + "/" + std::to_string(total) + " agree"};
}

corpus::Dialogue random_dialogue(std::mt19937_64& rng, int idx) {
  static const char* words[] = {"hi", "dog", "cat", "look", "nice", "wow"};
  corpus::Dialogue d{"r" + std::to_string(idx), {}, "img" + std::to_string(idx)};
  const int n = 1 + static_cast<int>(rng() % 14);
  const int share = static_cast<int>(rng() % n);
  for (int i = 0; i < n; ++i) {
    corpus::Turn t{rng() % 2 ? corpus::Speaker::kUser : corpus::Speaker::kBot, "", std::nullopt,
                   corpus::ImageRole::kNone};
    const int len = i == share && rng() % 3 == 0 ? 0 : 1 + static_cast<int>(rng() % 3);
    for (int w = 0; w < len; ++w) t.text += std::string(w ? " " : "") + words[rng() % 6];
    if (i == share) t.image_ref = d.source_image;
    d.turns.push_back(t);
  }
  return d;
}

}  // namespace

bool Report::ok() const {
  for (const auto& c : checks) {
    if (!c.passed) return false;
  }
  return !checks.empty();
}

std::string Report::text() const {
  std::string out;
  for (const auto& c : checks) out += std::string(c.passed ? "PASS " : "FAIL ") + c.name + ": " + c.detail + "\n";
  return out;
}

std::vector<Check> gradient_checks() {
  std::vector<Check> out;
  std::mt19937_64 rng(11);
  const Tensor x = uniform(5, 8, rng);
  const Tensor w = uniform(5, 8, rng);

  {
    ParameterSet ps;
    Initializer init(1, 0.3f);
    Linear lin(8, 8, init);
    lin.register_parameters(ps, "linear");
    // The loss is linear in the parameters, so a wide step is exact.
    out.push_back(grad_check("linear", [&] { return weighted_sum(lin(constant(x)), w); }, ps, 0.5f));
  }
  {
    ParameterSet ps;
    Initializer init(2, 0.3f);
    Linear lin(8, 8, init);
    LayerNorm ln(8);
    lin.register_parameters(ps, "linear");
    ln.register_parameters(ps, "layer_norm");
    rescramble(ps, 2);
    out.push_back(grad_check("layer_norm", [&] { return weighted_sum(gelu(ln(lin(constant(x)))), w); }, ps));
  }
  {
    ParameterSet ps;
    Initializer init(3, 0.3f);
    FeedForward ff(8, 16, init);
    ff.register_parameters(ps, "feed_forward");
    out.push_back(grad_check("feed_forward", [&] { return weighted_sum(ff(constant(x)), w); }, ps));
  }
  {
    ParameterSet ps;
    Initializer init(4, 0.5f);
    Var table = parameter(init.truncated_normal(10, 8));
    ps.add("embedding", table);
    const std::vector<int> ids{1, 4, 4, 9, 0};
    const std::vector<int> targets{2, 7, 1, 0, 5};
    out.push_back(grad_check("embedding_cross_entropy",
                             [&] { return cross_entropy(matmul_nt(embedding(table, ids), table), targets); }, ps));
  }
  {
    ParameterSet ps;
    Initializer init(5, 0.3f);
    MultiHeadAttention attn(8, 2, init);
    attn.register_parameters(ps, "self_attention");
    const auto mask = AttentionMask::causal(5);
    out.push_back(grad_check("self_attention_causal",
                             [&] {
                               Var in = constant(x);
                               return weighted_sum(attn(in, in, &mask), w);
                             },
                             ps));
  }
  {
    ParameterSet ps;
    Initializer init(6, 0.3f);
    MultiHeadAttention attn(8, 2, init);
    Linear mem_proj(8, 8, init);
    attn.register_parameters(ps, "cross_attention");
    mem_proj.register_parameters(ps, "memory");
    const Tensor mem = uniform(3, 8, rng);
    out.push_back(grad_check("cross_attention",
                             [&] { return weighted_sum(attn(constant(x), mem_proj(constant(mem)), nullptr), w); }, ps));
  }
  {
    ParameterSet ps;
    Initializer init(7, 0.3f);
    TransformerBlock block({.d_model = 8, .heads = 2, .ff_mult = 2, .cross_attention = true}, init);
    block.register_parameters(ps, "block");
    rescramble(ps, 7);
    const Tensor mem = uniform(4, 8, rng);
    const auto mask = AttentionMask::causal(5);
    out.push_back(grad_check("transformer_block",
                             [&] {
                               Var m = constant(mem);
                               return weighted_sum(block(constant(x), &mask, &m), w);
                             },
                             ps));
  }
  {
    const auto set = toy::retrieval_pairs(3, 8);
    retriever::RetrieverConfig rc;
    rc.image = {.side = 8, .patch = 4, .d_model = 8, .blocks = 1, .heads = 2};
    rc.text = {.vocab_size = set.vocab.size(), .max_len = 32, .d_model = 8, .blocks = 1, .heads = 2};
    rc.d_joint = 8;
    rc.seed = 1;
    retriever::DualEncoder model(rc);
    rescramble(model.parameters(), 1);
    const auto batch = corpus::collate(std::span<const corpus::RetrieverSample>(set.samples), set.vocab,
                                       &set.manifest, {.image_side = 8});
    out.push_back(grad_check("contrastive_loss",
                             [&] {
                               return retriever::contrastive_loss(model.encode_images(batch, 0, 3),
                                                                  model.encode_texts(batch, 0, 3), model.logit_scale());
                             },
                             model.parameters()));
  }
  for (bool mm : {false, true}) {
    const auto task = toy::color_task(2, 1, 0, 8);
    generator::GeneratorConfig gc;
    gc.multimodal = mm;
    gc.vocab_size = task.vocab.size();
    gc.max_len = 32;
    gc.d_model = 8;
    gc.blocks = 1;
    gc.heads = 2;
    gc.image = {.side = 8, .patch = 4, .d_model = 8, .blocks = 1, .heads = 2};
    gc.seed = 2;
    generator::DecoderModel model(gc);
    rescramble(model.parameters(), 2);
    const auto batch = corpus::collate(std::span<const corpus::GeneratorSample>(task.train), task.vocab,
                                       &task.manifest, {.image_side = 8, .generator_max_len = 32});
    out.push_back(grad_check(mm ? "generation_loss_multimodal" : "generation_loss_unimodal",
                             [&] { return generator::generation_loss(model, batch); }, model.parameters()));
  }
  return out;
}

std::vector<Check> metric_checks(int cases, unsigned seed) {
  std::vector<Check> out;
  std::mt19937_64 rng(seed);
  int bleu_bad = 0, distinct_bad = 0, rank_bad = 0, ppl_bad = 0;
  for (int trial = 0; trial < cases; ++trial) {
    const auto cand = oracle::random_words(rng, 9);
    const auto ref = oracle::random_words(rng, 9);
    for (int n : {1, 2}) {
      bleu_bad += std::abs(metrics::bleu(cand, ref, n) - oracle::bleu(cand, ref, n)) > 1e-9;
      distinct_bad += metrics::distinct(cand, n) != oracle::distinct(cand, n);
    }

    std::uniform_int_distribution<int> size(1, 24), level(0, 6);
    const int n = size(rng);
    retriever::CandidateIndex index;
    index.dim = 1;
    index.embeddings = Tensor({n, 1});
    std::vector<float> scores(n);
    for (int i = 0; i < n; ++i) {
      scores[i] = static_cast<float>(level(rng)) / 6.0f;
      index.embeddings.values()[i] = scores[i];
      index.ids.push_back("c" + std::to_string(i));
    }
    const int gold = std::uniform_int_distribution<int>(0, n - 1)(rng);
    const float query = 1.0f;
    const int r = retriever::rank(index, std::span(&query, 1)).rank_of(index.ids[gold]);
    const int expected = oracle::rank_of(scores, gold);
    rank_bad += r != expected;
    for (int k : {1, 5, 10}) rank_bad += metrics::recall_at_k(r, k) != (expected <= k ? 1 : 0);
    rank_bad += std::abs(metrics::reciprocal_rank(r) - 1.0 / expected) > 1e-9;

    std::uniform_real_distribution<double> nll_dist(0.0, 6.0);
    std::vector<double> nll(size(rng));
    for (auto& v : nll) v = nll_dist(rng);
    const double ppl = oracle::perplexity(nll);
    ppl_bad += std::abs(metrics::perplexity(nll) - ppl) > 1e-9 * ppl;
  }
  out.push_back(metric_check("bleu", bleu_bad, 2 * cases));
  out.push_back(metric_check("distinct", distinct_bad, 2 * cases));
  out.push_back(metric_check("recall_mrr", rank_bad, 5 * cases));
  out.push_back(metric_check("perplexity", ppl_bad, cases));

  const std::vector<std::string> abab{"a", "b", "a", "b"};
  const std::vector<std::string> ref{"i", "love", "my", "dog"}, other{"what", "a", "view"};
  const bool anchors = metrics::reciprocal_rank(4) == 0.25 && metrics::distinct(abab, 1) == 0.5 &&
                       metrics::bleu(other, ref, 1) == 0.0 && metrics::bleu(ref, ref, 2) == 1.0;
  out.push_back({"metrics.anchors", anchors, "MRR(4)=0.25 distinct1(a b a b)=0.5 zero-overlap BLEU-1=0"});
  return out;
}

std::vector<Check> preprocessing_checks(int trials, unsigned seed) {
  std::mt19937_64 rng(seed);
  const auto all = [](const std::string&) { return true; };
  int idempotence_bad = 0, identity_bad = 0, invariant_bad = 0;
  for (int trial = 0; trial < trials; ++trial) {
    corpus::DatasetSplit split{"random", {}};
    for (int i = 0; i < 8; ++i) split.dialogues.push_back(random_dialogue(rng, i));
    Diagnostics d1, d2;
    const auto once = corpus::preprocess(split, all, d1);
    const auto twice = corpus::preprocess(once, all, d2);
    idempotence_bad += !(once.dialogues == twice.dialogues);
    std::size_t expected = 0;
    for (const auto& d : once.dialogues) {
      expected += d.turns.size() - 1;
      int shared = 0;
      bool seen = false;
      for (std::size_t i = 0; i < d.turns.size(); ++i) {
        const auto& t = d.turns[i];
        invariant_bad += t.text.empty();
        invariant_bad += i > 0 && t.speaker == d.turns[i - 1].speaker;
        if (t.role == corpus::ImageRole::kSharedHere) {
          ++shared;
          seen = true;
        } else {
          invariant_bad += t.role != (seen ? corpus::ImageRole::kCarried : corpus::ImageRole::kDummy);
        }
      }
      invariant_bad += shared != 1;
    }
    identity_bad += corpus::expand_generator_samples(once).size() != expected;
    identity_bad += corpus::expand_retriever_samples(once).size() != once.dialogues.size();
  }
  const std::string of = "/" + std::to_string(trials) + " splits";
  return {{"preprocess.idempotent", idempotence_bad == 0, std::to_string(trials - idempotence_bad) + of},
          {"preprocess.sample_identity", identity_bad == 0, "generator = sum(n-1), retriever = dialogues"},
          {"preprocess.role_invariants", invariant_bad == 0, std::to_string(invariant_bad) + " violations"}};
}

std::vector<Check> determinism_checks() {
  const auto set = toy::retrieval_pairs(8, 8);
  auto run = [&] {
    retriever::RetrieverConfig rc;
    rc.image = {.side = 8, .patch = 4, .d_model = 16, .blocks = 1, .heads = 2};
    rc.text = {.vocab_size = set.vocab.size(), .max_len = 32, .d_model = 16, .blocks = 1, .heads = 2};
    rc.d_joint = 16;
    rc.seed = 3;
    retriever::DualEncoder model(rc);
    auto tc = trainer::TrainConfig::defaults(trainer::Task::kRetriever);
    tc.epochs = 3;
    tc.per_device = 2;
    tc.accumulation = 2;
    tc.batch_size = 4;
    tc.lr = 3e-3f;
    tc.seed = 5;
    tc.collate.image_side = 8;
    trainer::TrainIo io;
    io.manifest = &set.manifest;
    const auto result = trainer::train(tc, model, set.vocab, set.samples, nullptr, io);
    return std::make_pair(model.fingerprint(), result.last_train_loss);
  };
  const auto a = run();
  const auto b = run();
  return {{"determinism.seeded_training", a == b, "fingerprint " + a.first}};
}

Report run_all() {
  Report r;
  for (auto&& group : {gradient_checks(), metric_checks(), preprocessing_checks(), determinism_checks()}) {
    r.checks.insert(r.checks.end(), group.begin(), group.end());
  }
  return r;
}

}  // namespace mmchat::selftest

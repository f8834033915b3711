// SPDX-License-Identifier: Apache-2.0
//
// Mixture sampling, masking policies, the joint objective
// L = L_mtl + lambda * L_mlm and the two-stage regimen.
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/errors.hpp"
#include "prefixmtl/model.hpp"
#include "prefixmtl/numerics/adam.hpp"
#include "prefixmtl/numerics/ops.hpp"
#include "prefixmtl/random.hpp"
#include "prefixmtl/tokenizer.hpp"

namespace prefixmtl {

// --- configuration -----------------------------------------------------------

/// How the prefix position is treated by MLM masking.
///   default: prefix masked like any other token (p = mask_ratio)
///   must:    prefix always masked, others at mask_ratio
///   no:      prefix never masked, others at mask_ratio
///   only:    prefix always masked, nothing else
enum class PrefixPolicy { kDefault, kMust, kNo, kOnly };

inline std::string to_string(PrefixPolicy p) {
  switch (p) {
    case PrefixPolicy::kDefault: return "default";
    case PrefixPolicy::kMust: return "must";
    case PrefixPolicy::kNo: return "no";
    case PrefixPolicy::kOnly: return "only";
  }
  return "default";
}

inline PrefixPolicy parse_prefix_policy(std::string_view s) {
  if (s == "default") return PrefixPolicy::kDefault;
  if (s == "must") return PrefixPolicy::kMust;
  if (s == "no") return PrefixPolicy::kNo;
  if (s == "only") return PrefixPolicy::kOnly;
  throw Error(ErrorCode::kInvalidArgument, "unknown prefix policy '" + std::string(s) + "'");
}

/// Which option sequences feed the MLM term.
enum class MlmScope { kGold, kAll };

struct TrainConfig {
  double lambda = 0.1;
  double mask_ratio = 0.25;
  PrefixPolicy prefix_policy = PrefixPolicy::kDefault;
  MlmScope mlm_scope = MlmScope::kGold;
  std::size_t cap = 2000;
  double lr = 5e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 6;
  double warmup = 0.1;
  std::size_t finetune_epochs = 6;
  double finetune_lr = 5e-4;
  std::uint64_t seed = 0;
  bool with_prefix = true;
  bool detach_mlm = false;  // MLM value is computed and logged but sends no gradient
  EncoderConfig encoder{};

  void validate() const {
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw Error(ErrorCode::kInvalidArgument, "lambda must be >= 0");
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw Error(ErrorCode::kInvalidArgument, "mask_ratio must be in (0,1)");
    if (cap < 1) throw Error(ErrorCode::kInvalidArgument, "cap must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
    if (!(lr > 0) || !(finetune_lr > 0)) throw Error(ErrorCode::kInvalidArgument, "learning rates must be positive");
    if (!(warmup >= 0 && warmup < 1)) throw Error(ErrorCode::kInvalidArgument, "warmup must be in [0,1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"mask_ratio", c.mask_ratio},
          {"prefix_policy", to_string(c.prefix_policy)},
          {"mlm_scope", c.mlm_scope == MlmScope::kGold ? "gold" : "all"},
          {"cap", c.cap},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"warmup", c.warmup},
          {"finetune_epochs", c.finetune_epochs},
          {"finetune_lr", c.finetune_lr},
          {"seed", c.seed},
          {"with_prefix", c.with_prefix},
          {"detach_mlm", c.detach_mlm},
          {"encoder", to_json(c.encoder)}};
}

/// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.lambda = j.value("lambda", c.lambda);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  if (j.contains("prefix_policy")) c.prefix_policy = parse_prefix_policy(j["prefix_policy"].get<std::string>());
  if (j.contains("mlm_scope")) {
    const auto s = j["mlm_scope"].get<std::string>();
    if (s != "gold" && s != "all") throw Error(ErrorCode::kInvalidArgument, "mlm_scope must be gold or all");
    c.mlm_scope = s == "gold" ? MlmScope::kGold : MlmScope::kAll;
  }
  c.cap = j.value("cap", c.cap);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup = j.value("warmup", c.warmup);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.seed = j.value("seed", c.seed);
  c.with_prefix = j.value("with_prefix", c.with_prefix);
  c.detach_mlm = j.value("detach_mlm", c.detach_mlm);
  if (j.contains("encoder")) {
    auto merged = to_json(c.encoder);
    merged.update(j["encoder"]);
    c.encoder = encoder_config_from_json(merged);
  }
  return c;
}

// --- encoded data --------------------------------------------------------------

struct EncodedExample {
  std::vector<std::vector<TokenId>> options;  // one id sequence per option, unpadded
  std::size_t label = 0;
};

struct EncodedTask {
  std::string name;
  std::string family;
  TokenId prefix_id = 0;
  std::size_t k = 0;
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> dev;
};

struct EncodedCorpus {
  std::vector<EncodedTask> tasks;
  TokenId pad = 0;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].name == name) return i;
    throw Error(ErrorCode::kUnknownTask, std::string(name));
  }
};

inline EncodedCorpus encode_corpus(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_len,
                                   bool with_prefix = true) {
  EncodedCorpus out;
  out.pad = vocab.specials().pad;
  auto encode_split = [&](const TaskDataset& task, const std::vector<Example>& split) {
    std::vector<EncodedExample> enc;
    enc.reserve(split.size());
    for (const auto& ex : split) {
      EncodedExample e;
      e.label = ex.label;
      for (const auto& s : assemble_sequences(ex, task, with_prefix)) e.options.push_back(tokenize_ids(s, vocab, max_len));
      enc.push_back(std::move(e));
    }
    return enc;
  };
  for (const auto& task : corpus.tasks) {
    EncodedTask t;
    t.name = task.name;
    t.family = task.family;
    t.prefix_id = vocab.prefix_id(task.name);
    t.k = task.k;
    t.train = encode_split(task, task.examples);
    t.dev = encode_split(task, task.dev);
    out.tasks.push_back(std::move(t));
  }
  return out;
}

// --- mixture sampling ------------------------------------------------------------

struct ExampleRef {
  std::size_t task = 0;
  std::size_t index = 0;
  friend bool operator==(const ExampleRef&, const ExampleRef&) = default;
};

/// One epoch's stream: each task contributes min(size, cap) examples drawn
/// uniformly without replacement; the union is shuffled.
inline std::vector<ExampleRef> sample_mixture(const std::vector<std::size_t>& task_sizes,
                                              const std::vector<std::size_t>& task_ids, std::size_t cap, Rng& rng) {
  if (cap < 1) throw Error(ErrorCode::kInvalidArgument, "cap must be >= 1");
  std::vector<ExampleRef> stream;
  for (std::size_t t : task_ids) {
    const std::size_t n = task_sizes.at(t);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t take = std::min(n, cap);
    // partial Fisher-Yates: the first `take` slots are a uniform subset
    for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    for (std::size_t i = 0; i < take; ++i) stream.push_back({t, idx[i]});
  }
  if (stream.empty()) throw Error(ErrorCode::kEmptyCorpus, "mixture has no training examples");
  rng.shuffle(std::span(stream));
  return stream;
}

inline std::vector<ExampleRef> sample_mixture(const EncodedCorpus& data, const std::vector<std::size_t>& task_ids,
                                              std::size_t cap, Rng& rng) {
  std::vector<std::size_t> sizes;
  for (const auto& t : data.tasks) sizes.push_back(t.train.size());
  return sample_mixture(sizes, task_ids, cap, rng);
}

// --- masking ---------------------------------------------------------------------

enum class Replacement : std::uint8_t { kMaskSymbol, kRandom, kUnchanged };

struct MaskedBatch {
  std::vector<std::vector<TokenId>> original;
  std::vector<std::vector<TokenId>> masked;
  std::vector<std::vector<std::size_t>> positions;
  std::vector<std::vector<Replacement>> actions;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (const auto& p : positions) n += p.size();
    return n;
  }
};

/// Selects positions for MLM under `policy` and applies the 80/10/10 rule.
/// [CLS], [SEP], [PAD] and the other specials are never selected; the prefix
/// is recognised at position 1.
inline MaskedBatch apply_masking(const std::vector<std::vector<TokenId>>& seqs, const Vocabulary& vocab,
                                 PrefixPolicy policy, double mask_ratio, Rng& rng) {
  const double prefix_p = policy == PrefixPolicy::kDefault ? mask_ratio : policy == PrefixPolicy::kNo ? 0.0 : 1.0;
  const double other_p = policy == PrefixPolicy::kOnly ? 0.0 : mask_ratio;
  const TokenId mask_id = vocab.specials().mask;

  MaskedBatch b;
  b.original = seqs;
  b.masked = seqs;
  b.positions.resize(seqs.size());
  b.actions.resize(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (std::size_t i = 0; i < seqs[s].size(); ++i) {
      const TokenId id = seqs[s][i];
      if (vocab.is_special(id)) continue;
      const bool is_prefix = i == 1 && vocab.is_prefix(id);
      const double p = is_prefix ? prefix_p : other_p;
      if (p <= 0 || !(p >= 1 || rng.bernoulli(p))) continue;
      const double u = rng.uniform();
      Replacement r = u < 0.8 ? Replacement::kMaskSymbol : u < 0.9 ? Replacement::kRandom : Replacement::kUnchanged;
      if (r == Replacement::kMaskSymbol) b.masked[s][i] = mask_id;
      if (r == Replacement::kRandom) {
        // uniform over non-special ids by rejection
        TokenId repl;
        do repl = static_cast<TokenId>(rng.uniform_index(vocab.size()));
        while (vocab.is_special(repl));
        b.masked[s][i] = repl;
      }
      b.positions[s].push_back(i);
      b.actions[s].push_back(r);
    }
  }
  return b;
}

// --- losses ------------------------------------------------------------------------

/// Softmax cross-entropy over groups of k consecutive scores.
template <typename Real>
Tensor<Real> option_loss(Tape<Real>& tape, const Tensor<Real>& scores, std::span<const TokenId> labels, std::size_t k) {
  if (k == 0 || scores.size() != labels.size() * k) {
    throw Error(ErrorCode::kShapeMismatch, "option_loss: " + shape_string(scores.shape()) + " scores for " +
                                               std::to_string(labels.size()) + " labels of k=" + std::to_string(k));
  }
  return ops::cross_entropy(tape, ops::reshape(tape, scores, Shape{labels.size(), k}), labels);
}

/// Mean over examples of -log softmax(g(c, q.r_j))[gold].
template <typename Real>
Tensor<Real> mtl_loss(Tape<Real>& tape, const EncoderModel<Real>& model, const std::vector<const EncodedExample*>& batch,
                      TokenId pad, const ForwardOptions& opt = {}) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty batch");
  const std::size_t k = batch.front()->options.size();
  std::vector<std::vector<TokenId>> seqs;
  std::vector<TokenId> labels;
  for (const auto* ex : batch) {
    if (ex->options.size() != k) throw Error(ErrorCode::kMixedOptionCount, "batch mixes option counts");
    seqs.insert(seqs.end(), ex->options.begin(), ex->options.end());
    labels.push_back(static_cast<TokenId>(ex->label));
  }
  const auto tb = TokenBatch::pack(seqs, pad);
  return option_loss(tape, model.scores(tape, model.encode(tape, tb, opt), tb), labels, k);
}

template <typename Real>
struct MlmLoss {
  Tensor<Real> loss;
  bool skipped = false;
  std::size_t positions = 0;
};

/// Mean of -log p(original token | masked input) over every masked position.
/// With nothing masked the loss is 0 and `skipped` is set.
template <typename Real>
MlmLoss<Real> mlm_loss(Tape<Real>& tape, const EncoderModel<Real>& model, const MaskedBatch& batch, TokenId pad,
                       const ForwardOptions& opt = {}) {
  MlmLoss<Real> out;
  out.positions = batch.masked_count();
  if (out.positions == 0) {
    out.loss = Tensor<Real>::scalar(0);
    out.skipped = true;
    return out;
  }
  const auto tb = TokenBatch::pack(batch.masked, pad);
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t s = 0; s < batch.positions.size(); ++s) {
    for (std::size_t p : batch.positions[s]) {
      rows.push_back(s * tb.len + p);
      targets.push_back(batch.original[s][p]);
    }
  }
  auto hidden = ops::select_rows(tape, model.encode(tape, tb, opt), rows);
  out.loss = ops::cross_entropy(tape, model.mlm_logits(tape, hidden), targets);
  return out;
}

// --- optimisation -------------------------------------------------------------------

/// Linear warm-up over the first `warmup` fraction of steps, then linear decay.
inline double lr_at(std::size_t step, std::size_t total_steps, double base, double warmup) {
  if (total_steps == 0) return base;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup * static_cast<double>(total_steps)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  const std::size_t rest = total_steps - warm;
  return base * static_cast<double>(total_steps - step) / static_cast<double>(rest == 0 ? 1 : rest);
}

struct StepResult {
  double total = 0;
  double mtl = 0;
  double mlm = 0;           // unweighted
  double weighted_mlm = 0;  // lambda * mlm
  bool mlm_skipped = true;
  std::size_t masked_positions = 0;
};

/// Sequences the MLM term reads for a batch of examples.
inline std::vector<std::vector<TokenId>> mlm_sequences(const std::vector<const EncodedExample*>& batch, MlmScope scope) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto* ex : batch) {
    if (scope == MlmScope::kGold) {
      seqs.push_back(ex->options.at(ex->label));
    } else {
      seqs.insert(seqs.end(), ex->options.begin(), ex->options.end());
    }
  }
  return seqs;
}

template <typename Real>
struct JointLoss {
  Tensor<Real> total;
  StepResult parts;
};

/// L_mtl + lambda * L_mlm on one batch. The MLM term is skipped entirely when
/// lambda is 0. Both terms read the same examples; masks and dropout depend
/// only on (cfg.seed, key).
template <typename Real>
JointLoss<Real> joint_loss(Tape<Real>& tape, const EncoderModel<Real>& model, const std::vector<const EncodedExample*>& batch,
                           const Vocabulary& vocab, const TrainConfig& cfg, std::uint64_t key) {
  StepResult r;
  const ForwardOptions mtl_opt{true, cfg.seed, key, 0};
  auto total = mtl_loss(tape, model, batch, vocab.specials().pad, mtl_opt);
  r.mtl = static_cast<double>(total.item());
  if (cfg.lambda > 0) {
    Rng mask_rng = derive_rng(cfg.seed, {0x6d61736b, key});
    const auto masked = apply_masking(mlm_sequences(batch, cfg.mlm_scope), vocab, cfg.prefix_policy, cfg.mask_ratio, mask_rng);
    const ForwardOptions mlm_opt{true, cfg.seed, key, 1};
    Tape<Real> detached(false);
    auto mlm = mlm_loss(cfg.detach_mlm ? detached : tape, model, masked, vocab.specials().pad, mlm_opt);
    r.mlm_skipped = mlm.skipped;
    r.masked_positions = mlm.positions;
    if (!mlm.skipped) {
      r.mlm = static_cast<double>(mlm.loss.item());
      total = ops::add(tape, total, ops::scale(tape, mlm.loss, static_cast<Real>(cfg.lambda)));
    }
  }
  r.total = static_cast<double>(total.item());
  r.weighted_mlm = r.total - r.mtl;
  return {total, r};
}

/// One backward pass and Adam update on joint_loss.
template <typename Real>
StepResult joint_step(EncoderModel<Real>& model, AdamState<Real>& state, const std::vector<const EncodedExample*>& batch,
                      const Vocabulary& vocab, const TrainConfig& cfg, std::uint64_t step, double lr,
                      std::uint64_t stream_key = 0) {
  Tape<Real> tape;
  auto [total, r] = joint_loss(tape, model, batch, vocab, cfg, derive_seed(stream_key, {step}));
  if (!std::isfinite(r.total)) {
    tape.clear();
    throw Error(ErrorCode::kNonFinite, "non-finite loss at step " + std::to_string(step) + " (mtl=" +
                                           std::to_string(r.mtl) + ", mlm=" + std::to_string(r.mlm) +
                                           ", lr=" + std::to_string(lr) + ")");
  }
  tape.backward(total);
  auto params = model.parameters();
  AdamConfig adam;
  adam.lr = lr;
  adam_step<Real>(params, state, adam);
  model.zero_grad();
  return r;
}

// --- evaluation ----------------------------------------------------------------------

template <typename Real>
double accuracy(const EncoderModel<Real>& model, const std::vector<EncodedExample>& examples, TokenId pad,
                std::size_t chunk = 32) {
  if (examples.empty()) return 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const std::size_t end = std::min(examples.size(), start + chunk);
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::size_t> offsets;
    for (std::size_t i = start; i < end; ++i) {
      offsets.push_back(seqs.size());
      seqs.insert(seqs.end(), examples[i].options.begin(), examples[i].options.end());
    }
    offsets.push_back(seqs.size());
    Tape<Real> tape(false);
    const auto tb = TokenBatch::pack(seqs, pad);
    const auto s = model.scores(tape, model.encode(tape, tb), tb);
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t a = offsets[i - start], b = offsets[i - start + 1];
      std::vector<Real> sc(s.data().begin() + static_cast<std::ptrdiff_t>(a), s.data().begin() + static_cast<std::ptrdiff_t>(b));
      correct += EncoderModel<Real>::argmax_first(sc) == examples[i].label;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// --- training loops ------------------------------------------------------------------

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct StageOptions {
  std::string name = "mtl";   // keys rng streams and checkpoint files
  std::vector<std::size_t> tasks;  // mixture members
  std::vector<std::size_t> eval_tasks;
  std::size_t epochs = 1;
  double lr = 5e-4;
  std::filesystem::path checkpoint_dir;  // empty: no per-epoch checkpoints
  bool resume = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double loss = 0;
  double mtl = 0;
  double mlm = 0;
  std::map<std::string, double> dev_accuracy;
};

inline nlohmann::json to_json(const EpochMetrics& e, const std::string& stage) {
  return {{"type", "epoch"}, {"stage", stage}, {"epoch", e.epoch}, {"steps", e.steps}, {"loss", e.loss},
          {"mtl", e.mtl},    {"mlm", e.mlm},     {"dev_accuracy", e.dev_accuracy}};
}

struct StageResult {
  std::vector<EpochMetrics> epochs;
  std::size_t resumed_from = 0;  // epochs restored from a checkpoint
};

inline std::uint64_t stage_key(const std::string& name) { return hash_bytes(name); }

/// Trains `model` on a task mixture for several epochs. Each epoch draws a
/// fresh capped stream; all randomness is keyed on (seed, stage, epoch, step)
/// so a run resumed from an epoch checkpoint continues bit-identically.
template <typename Real>
StageResult train_stage(EncoderModel<Real>& model, const EncodedCorpus& data, const Vocabulary& vocab,
                        const TrainConfig& cfg, const StageOptions& stage, const MetricsSink& sink = {}) {
  cfg.validate();
  if (stage.tasks.empty()) throw Error(ErrorCode::kEmptyCorpus, "stage '" + stage.name + "' has no tasks");
  const std::size_t k = data.tasks.at(stage.tasks.front()).k;
  for (std::size_t t : stage.tasks) {
    if (data.tasks.at(t).k != k) {
      throw Error(ErrorCode::kMixedOptionCount, "tasks '" + data.tasks[stage.tasks.front()].name + "' and '" +
                                                    data.tasks[t].name + "' use different option counts");
    }
  }
  std::vector<std::size_t> sizes;
  for (const auto& t : data.tasks) sizes.push_back(t.train.size());
  std::size_t per_epoch = 0;
  for (std::size_t t : stage.tasks) per_epoch += std::min(sizes[t], cfg.cap);
  const std::size_t steps_per_epoch = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * stage.epochs;
  const std::uint64_t skey = stage_key(stage.name);

  auto params = model.parameters();
  AdamState<Real> state = AdamState<Real>::for_params(params);
  StageResult result;
  const auto ckpt = stage.checkpoint_dir.empty() ? std::filesystem::path{} : stage.checkpoint_dir / (stage.name + ".ckpt");
  if (stage.resume && !ckpt.empty() && std::filesystem::exists(ckpt)) {
    auto loaded = load_checkpoint<Real>(ckpt, vocab.hash());
    model.copy_from(loaded.model);
    if (loaded.optimizer) state = std::move(*loaded.optimizer);
    result.resumed_from = loaded.header.extra.value("epochs_done", std::size_t{0});
    for (const auto& e : loaded.header.extra.value("history", nlohmann::json::array())) {
      EpochMetrics m;
      m.epoch = e.at("epoch");
      m.steps = e.at("steps");
      m.loss = e.at("loss");
      m.mtl = e.at("mtl");
      m.mlm = e.at("mlm");
      m.dev_accuracy = e.at("dev_accuracy").template get<std::map<std::string, double>>();
      result.epochs.push_back(m);
    }
  }

  for (std::size_t epoch = result.resumed_from; epoch < stage.epochs; ++epoch) {
    Rng rng = derive_rng(cfg.seed, {0x6d6978, skey, epoch});
    const auto stream = sample_mixture(sizes, stage.tasks, cfg.cap, rng);
    EpochMetrics em;
    em.epoch = epoch + 1;
    for (std::size_t start = 0; start < stream.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(stream.size(), start + cfg.batch_size);
      std::vector<const EncodedExample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data.tasks[stream[i].task].train[stream[i].index]);
      const std::size_t step = epoch * steps_per_epoch + em.steps;
      const double lr = lr_at(step, total_steps, stage.lr, cfg.warmup);
      const auto r = joint_step(model, state, batch, vocab, cfg, step, lr, skey);
      em.loss += r.total;
      em.mtl += r.mtl;
      em.mlm += r.mlm;
      ++em.steps;
      if (sink) {
        sink({{"type", "step"}, {"stage", stage.name}, {"epoch", em.epoch}, {"step", step + 1}, {"lr", lr},
              {"loss", r.total}, {"mtl", r.mtl}, {"mlm", r.mlm}, {"mlm_weighted", r.weighted_mlm},
              {"mlm_skipped", r.mlm_skipped}});
      }
    }
    em.loss /= static_cast<double>(em.steps);
    em.mtl /= static_cast<double>(em.steps);
    em.mlm /= static_cast<double>(em.steps);
    for (std::size_t t : stage.eval_tasks) em.dev_accuracy[data.tasks[t].name] = accuracy(model, data.tasks[t].dev, data.pad);
    result.epochs.push_back(em);
    if (!ckpt.empty()) {
      nlohmann::json history = nlohmann::json::array();
      for (const auto& e : result.epochs) history.push_back(to_json(e, stage.name));
      save_checkpoint(ckpt, model, vocab.hash(), &state,
                      {{"stage", stage.name}, {"epochs_done", epoch + 1}, {"history", history}, {"train", to_json(cfg)}});
    }
    if (sink) sink(to_json(em, stage.name));
  }
  return result;
}

struct TwoStageResult {
  std::optional<double> stage1_accuracy;  // unset when stage 1 was skipped
  double stage2_accuracy = 0;
  StageResult stage1;
  StageResult stage2;
};

/// Multi-task pre-training on `mixture` (skipped when empty), then training on
/// `target` alone from the stage-1 weights. Accuracies are on target dev.
template <typename Real>
TwoStageResult pretrain_then_finetune(EncoderModel<Real>& model, const EncodedCorpus& data, const Vocabulary& vocab,
                                      const std::vector<std::size_t>& mixture, std::size_t target, const TrainConfig& cfg,
                                      const MetricsSink& sink = {}, const std::filesystem::path& checkpoint_dir = {},
                                      bool resume = false) {
  TwoStageResult out;
  const auto& target_task = data.tasks.at(target);
  if (!mixture.empty()) {
    StageOptions s1{"mtl", mixture, {target}, cfg.epochs, cfg.lr, checkpoint_dir, resume};
    out.stage1 = train_stage(model, data, vocab, cfg, s1, sink);
    out.stage1_accuracy = accuracy(model, target_task.dev, data.pad);
  }
  StageOptions s2{"finetune", {target}, {target}, cfg.finetune_epochs, cfg.finetune_lr, checkpoint_dir, resume};
  out.stage2 = train_stage(model, data, vocab, cfg, s2, sink);
  out.stage2_accuracy = accuracy(model, target_task.dev, data.pad);
  return out;
}

}  // namespace prefixmtl

// SPDX-License-Identifier: Apache-2.0
//
// Prefix probing: an MLM-only model trained on option-free sequences, whose
// prefix embedding rows are correlated pairwise to score task relationships.
// Also the two baseline measures (length difference, vocabulary overlap).
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/errors.hpp"
#include "prefixmtl/model.hpp"
#include "prefixmtl/tokenizer.hpp"
#include "prefixmtl/training.hpp"

namespace prefixmtl {

inline constexpr std::string_view kRelationshipFormat = "prefixmtl.relationship/1";
inline constexpr std::string_view kMeasureFormat = "prefixmtl.measure/1";

// --- probe training ------------------------------------------------------------------

/// Option-free token sequences of every task's training split, in task order.
inline std::vector<std::vector<std::vector<TokenId>>> probe_sequences(const Corpus& corpus, const Vocabulary& vocab,
                                                                      std::size_t max_len) {
  std::vector<std::vector<std::vector<TokenId>>> out;
  for (const auto& task : corpus.tasks) {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& ex : task.examples) seqs.push_back(tokenize_ids(assemble_probe_sequence(ex, task.prefix), vocab, max_len));
    out.push_back(std::move(seqs));
  }
  return out;
}

struct ProbeResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// Continues training `model` with the MLM objective alone on option-free
/// sequences. Uses cfg's cap, batch size, epochs, lr, warm-up, mask ratio and
/// prefix policy; lambda and the scoring head are unused.
template <typename Real>
ProbeResult train_probe(EncoderModel<Real>& model, const Corpus& corpus, const Vocabulary& vocab, const TrainConfig& cfg,
                        const MetricsSink& sink = {}) {
  cfg.validate();
  const auto seqs = probe_sequences(corpus, vocab, model.config().max_len);
  std::vector<std::size_t> sizes, tasks;
  for (std::size_t t = 0; t < seqs.size(); ++t) {
    sizes.push_back(seqs[t].size());
    tasks.push_back(t);
  }
  std::size_t per_epoch = 0;
  for (std::size_t n : sizes) per_epoch += std::min(n, cfg.cap);
  if (per_epoch == 0) throw Error(ErrorCode::kEmptyCorpus, "no training examples to probe");
  const std::size_t steps_per_epoch = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  auto params = model.parameters();
  auto state = AdamState<Real>::for_params(params);
  ProbeResult out;
  const TokenId pad = vocab.specials().pad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = derive_rng(cfg.seed, {0x70726f6265, epoch});
    const auto stream = sample_mixture(sizes, tasks, cfg.cap, rng);
    double loss_sum = 0;
    std::size_t counted = 0;
    for (std::size_t start = 0; start < stream.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(stream.size(), start + cfg.batch_size);
      std::vector<std::vector<TokenId>> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(seqs[stream[i].task][stream[i].index]);
      const std::size_t step = out.steps++;
      Rng mask_rng = derive_rng(cfg.seed, {0x70726d6b, step});
      const auto masked = apply_masking(batch, vocab, cfg.prefix_policy, cfg.mask_ratio, mask_rng);
      Tape<Real> tape;
      auto mlm = mlm_loss(tape, model, masked, pad, ForwardOptions{true, cfg.seed, derive_seed(0x70726f6265, {step}), 1});
      if (mlm.skipped) continue;
      const double loss = static_cast<double>(mlm.loss.item());
      if (!std::isfinite(loss)) throw Error(ErrorCode::kNonFinite, "non-finite probe loss at step " + std::to_string(step));
      tape.backward(mlm.loss);
      AdamConfig adam;
      adam.lr = lr_at(step, total_steps, cfg.lr, cfg.warmup);
      adam_step<Real>(params, state, adam);
      model.zero_grad();
      loss_sum += loss;
      ++counted;
      if (sink) sink({{"type", "step"}, {"stage", "probe"}, {"epoch", epoch + 1}, {"step", step + 1}, {"mlm", loss}});
    }
    out.epoch_loss.push_back(counted == 0 ? 0.0 : loss_sum / static_cast<double>(counted));
    if (sink) sink({{"type", "epoch"}, {"stage", "probe"}, {"epoch", epoch + 1}, {"mlm", out.epoch_loss.back()}});
  }
  return out;
}

/// Fresh model under the usual initialisation, trained by train_probe.
template <typename Real>
EncoderModel<Real> train_probe_model(const Corpus& corpus, const Vocabulary& vocab, const TrainConfig& cfg,
                                     ProbeResult* result = nullptr, const MetricsSink& sink = {}) {
  EncoderConfig enc = cfg.encoder;
  enc.vocab_size = vocab.size();
  EncoderModel<Real> model(enc, cfg.seed);
  auto r = train_probe(model, corpus, vocab, cfg, sink);
  if (result) *result = std::move(r);
  return model;
}

// --- correlation ---------------------------------------------------------------------

/// Pearson correlation, two-pass. Zero variance in either input is an error.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShapeMismatch, "pearson needs equal lengths");
  if (a.size() < 2) throw Error(ErrorCode::kInvalidArgument, "pearson needs at least two values");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) throw Error(ErrorCode::kConstantVector, "pearson of a constant vector");
  return std::clamp(sab / (std::sqrt(saa) * std::sqrt(sbb)), -1.0, 1.0);
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(std::span<const double>(a), std::span<const double>(b));
}

enum class Normalization { kGlobal, kPerRow };

inline std::string to_string(Normalization n) { return n == Normalization::kGlobal ? "global" : "per-row"; }

inline Normalization parse_normalization(std::string_view s) {
  if (s == "global") return Normalization::kGlobal;
  if (s == "per-row") return Normalization::kPerRow;
  throw Error(ErrorCode::kInvalidArgument, "unknown normalization '" + std::string(s) + "'");
}

using Matrix = std::vector<std::vector<double>>;

/// raw is symmetric with a unit diagonal. normalized maps the off-diagonal
/// minimum to 0 and maximum to 1; its diagonal is 1. Under kPerRow the
/// extremes are taken per row, so normalized may be asymmetric.
struct RelationshipMatrix {
  std::vector<std::string> tasks;
  Matrix raw;
  Matrix normalized;
  Normalization mode = Normalization::kGlobal;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i] == name) return i;
    throw Error(ErrorCode::kUnknownTask, std::string(name));
  }
  double score(std::string_view a, std::string_view b) const { return normalized[index_of(a)][index_of(b)]; }
};

/// Off-diagonal min-max rescaling. A set with no spread maps to 0.5.
inline Matrix normalize_off_diagonal(const Matrix& raw, Normalization mode) {
  const std::size_t n = raw.size();
  Matrix out(n, std::vector<double>(n, 1.0));
  auto rescale = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.5; };
  if (mode == Normalization::kGlobal) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) {
          lo = std::min(lo, raw[i][j]);
          hi = std::max(hi, raw[i][j]);
        }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) out[i][j] = rescale(raw[i][j], lo, hi);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) {
          lo = std::min(lo, raw[i][j]);
          hi = std::max(hi, raw[i][j]);
        }
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) out[i][j] = rescale(raw[i][j], lo, hi);
    }
  }
  return out;
}

/// Correlates the given rows pairwise. Each pair is computed once and mirrored.
inline RelationshipMatrix relationship_from_rows(std::vector<std::string> tasks, const Matrix& rows,
                                                 Normalization mode = Normalization::kGlobal) {
  if (tasks.size() != rows.size()) throw Error(ErrorCode::kShapeMismatch, "one embedding row per task");
  RelationshipMatrix m;
  m.tasks = std::move(tasks);
  m.mode = mode;
  const std::size_t n = rows.size();
  m.raw.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.raw[i][j] = m.raw[j][i] = pearson(rows[i], rows[j]);
  m.normalized = normalize_off_diagonal(m.raw, mode);
  return m;
}

/// Prefix embedding rows of `tasks`, read from the model's embedding table.
template <typename Real>
Matrix prefix_embeddings(const EncoderModel<Real>& model, const Vocabulary& vocab, const std::vector<std::string>& tasks) {
  const auto& table = model.embedding_table();
  const std::size_t h = table.shape()[1];
  Matrix rows;
  for (const auto& t : tasks) {
    const auto id = static_cast<std::size_t>(vocab.prefix_id(t));
    if (id >= table.shape()[0]) throw Error(ErrorCode::kMissingPrefix, "prefix of '" + t + "' lies outside the embedding table");
    std::vector<double> row(h);
    for (std::size_t c = 0; c < h; ++c) row[c] = static_cast<double>(table.at(id, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <typename Real>
RelationshipMatrix relationship_matrix(const EncoderModel<Real>& model, const Vocabulary& vocab,
                                       const std::vector<std::string>& tasks, Normalization mode = Normalization::kGlobal) {
  return relationship_from_rows(tasks, prefix_embeddings(model, vocab, tasks), mode);
}

/// The `top_k` tasks scoring highest against `target` (itself excluded);
/// equal scores fall back to task-name order.
inline std::vector<std::string> rank_complementary(const RelationshipMatrix& m, std::string_view target, std::size_t top_k) {
  const std::size_t t = m.index_of(target);
  if (top_k >= m.tasks.size()) {
    throw Error(ErrorCode::kInvalidArgument, "top_k must be smaller than the task count (" + std::to_string(m.tasks.size()) + ")");
  }
  std::vector<std::size_t> others;
  for (std::size_t j = 0; j < m.tasks.size(); ++j)
    if (j != t) others.push_back(j);
  std::sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
    if (m.normalized[t][a] != m.normalized[t][b]) return m.normalized[t][a] > m.normalized[t][b];
    return m.tasks[a] < m.tasks[b];
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < top_k; ++i) out.push_back(m.tasks[others[i]]);
  return out;
}

// --- baseline measures -------------------------------------------------------------

/// Content tokens of context, question and gold option; specials and prefixes
/// never appear in these texts.
inline std::size_t example_length(const Example& ex) {
  return content_tokens(ex.context).size() + content_tokens(ex.question).size() +
         content_tokens(ex.options.at(ex.label)).size();
}

inline double mean_length(const TaskDataset& task) {
  if (task.examples.empty()) throw Error(ErrorCode::kEmptyTask, "task '" + task.name + "' has no training examples");
  double sum = 0;
  for (const auto& ex : task.examples) sum += static_cast<double>(example_length(ex));
  return sum / static_cast<double>(task.examples.size());
}

/// Negated absolute difference of mean example length; 0 is the best score.
inline double baseline_length(const TaskDataset& source, const TaskDataset& target) {
  return -std::abs(mean_length(source) - mean_length(target));
}

inline std::set<std::string> task_vocabulary(const TaskDataset& task) {
  if (task.examples.empty()) throw Error(ErrorCode::kEmptyTask, "task '" + task.name + "' has no training examples");
  std::set<std::string> v;
  for (const auto& ex : task.examples) {
    for (auto& w : content_tokens(ex.context)) v.insert(std::move(w));
    for (auto& w : content_tokens(ex.question)) v.insert(std::move(w));
    for (const auto& o : ex.options)
      for (auto& w : content_tokens(o)) v.insert(std::move(w));
  }
  return v;
}

inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) throw Error(ErrorCode::kEmptyTask, "both vocabularies are empty");
  std::size_t inter = 0;
  for (const auto& w : a) inter += b.count(w);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

inline double baseline_vocab(const TaskDataset& source, const TaskDataset& target) {
  return jaccard(task_vocabulary(source), task_vocabulary(target));
}

/// Any per-pair score over named tasks; row = target, column = source.
struct TaskMeasure {
  std::string name;
  std::vector<std::string> tasks;
  Matrix values;

  double at(std::string_view target, std::string_view source) const {
    auto idx = [&](std::string_view s) {
      for (std::size_t i = 0; i < tasks.size(); ++i)
        if (tasks[i] == s) return i;
      throw Error(ErrorCode::kUnknownTask, std::string(s));
    };
    return values[idx(target)][idx(source)];
  }
};

inline TaskMeasure probing_measure(const RelationshipMatrix& m) { return {"probing", m.tasks, m.normalized}; }

enum class BaselineKind { kLength, kVocab };

inline TaskMeasure baseline_measure(const Corpus& corpus, BaselineKind kind) {
  TaskMeasure out;
  out.name = kind == BaselineKind::kLength ? "length" : "vocab";
  const std::size_t n = corpus.tasks.size();
  std::vector<double> lengths;
  std::vector<std::set<std::string>> vocabs;
  for (const auto& t : corpus.tasks) {
    out.tasks.push_back(t.name);
    if (kind == BaselineKind::kLength) lengths.push_back(mean_length(t));
    else vocabs.push_back(task_vocabulary(t));
  }
  out.values.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.values[i][j] = kind == BaselineKind::kLength ? -std::abs(lengths[i] - lengths[j]) : jaccard(vocabs[i], vocabs[j]);
  return out;
}

// --- export ----------------------------------------------------------------------------

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) { return nlohmann::json(v).dump(); }

}  // namespace detail

/// Header row and column carry task names.
inline std::string matrix_csv(const std::vector<std::string>& tasks, const Matrix& m) {
  std::string out = "task";
  for (const auto& t : tasks) out += "," + detail::csv_field(t);
  out += "\n";
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out += detail::csv_field(tasks[i]);
    for (double v : m[i]) out += "," + detail::format_double(v);
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const RelationshipMatrix& m) {
  return {{"format", kRelationshipFormat}, {"normalization", to_string(m.mode)}, {"tasks", m.tasks},
          {"raw", m.raw},                  {"normalized", m.normalized}};
}

inline RelationshipMatrix relationship_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kRelationshipFormat) {
    throw Error(ErrorCode::kUnsupportedVersion, "relationship matrix format '" + j.value("format", std::string{}) + "'");
  }
  RelationshipMatrix m;
  m.tasks = j.at("tasks").get<std::vector<std::string>>();
  m.raw = j.at("raw").get<Matrix>();
  m.normalized = j.at("normalized").get<Matrix>();
  m.mode = parse_normalization(j.at("normalization").get<std::string>());
  const std::size_t n = m.tasks.size();
  auto square = [n](const Matrix& x) {
    return x.size() == n && std::all_of(x.begin(), x.end(), [n](const auto& r) { return r.size() == n; });
  };
  if (!square(m.raw) || !square(m.normalized)) throw Error(ErrorCode::kParseError, "relationship matrix is not square");
  return m;
}

inline nlohmann::json to_json(const TaskMeasure& m) {
  return {{"format", kMeasureFormat}, {"name", m.name}, {"tasks", m.tasks}, {"values", m.values}};
}

inline TaskMeasure measure_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kMeasureFormat) {
    throw Error(ErrorCode::kUnsupportedVersion, "measure format '" + j.value("format", std::string{}) + "'");
  }
  return {j.at("name").get<std::string>(), j.at("tasks").get<std::vector<std::string>>(), j.at("values").get<Matrix>()};
}

/// One line per task: its top-ranked partners with normalized scores.
inline std::string ranked_table(const RelationshipMatrix& m, std::size_t top_k) {
  std::size_t width = 4;
  for (const auto& t : m.tasks) width = std::max(width, t.size());
  top_k = std::min(top_k, m.tasks.empty() ? 0 : m.tasks.size() - 1);
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "task" << "  top-" << top_k << "\n";
  for (const auto& t : m.tasks) {
    os << std::left << std::setw(static_cast<int>(width)) << t << " ";
    for (const auto& r : rank_complementary(m, t, top_k)) os << " " << r << "(" << std::fixed << std::setprecision(3) << m.score(t, r) << ")";
    os << "\n";
  }
  return os.str();
}

/// Binary greyscale PGM; each cell is a `cell`-pixel square, white = 1.
inline std::string heatmap_pgm(const Matrix& m, std::size_t cell = 16) {
  const std::size_t n = m.size(), side = n * cell;
  std::string out = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  out.reserve(out.size() + side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double v = std::clamp(m[y / cell][x / cell], 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, path.string() + ": " + e.what());
  }
}

}  // namespace prefixmtl

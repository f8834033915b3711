// SPDX-License-Identifier: Apache-2.0
//
// Validation harness: dual-task transfer grid, correlation of relationship
// measures with transfer accuracy, and complementary-mixture experiments.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/errors.hpp"
#include "prefixmtl/probing.hpp"
#include "prefixmtl/training.hpp"

namespace prefixmtl {

inline constexpr std::string_view kCellFormat = "prefixmtl.cell/1";
inline constexpr std::string_view kGridFormat = "prefixmtl.grid/1";
inline constexpr std::string_view kCorrelationFormat = "prefixmtl.correlation/1";
inline constexpr std::string_view kMixtureFormat = "prefixmtl.mixture/1";

/// Depends only on the run seed and the pair, never on grid order.
inline std::uint64_t cell_seed(std::uint64_t seed, std::string_view source, std::string_view target) {
  return derive_seed(seed, {hash_bytes(source), hash_bytes(target)});
}

struct CellResult {
  std::string source;
  std::string target;
  std::uint64_t seed = 0;
  std::optional<double> accuracy;  // unset when training failed
  std::string error;
};

/// Trains a fresh model on source + target (cap applied per task) for
/// cfg.epochs and returns target dev accuracy. source == target doubles the data.
template <typename Real>
CellResult dual_task_cell(const EncodedCorpus& data, const Vocabulary& vocab, std::string_view source,
                          std::string_view target, const TrainConfig& cfg) {
  CellResult r{std::string(source), std::string(target), cell_seed(cfg.seed, source, target), std::nullopt, {}};
  const std::size_t s = data.index_of(source), t = data.index_of(target);
  TrainConfig c = cfg;
  c.seed = r.seed;
  c.encoder.vocab_size = vocab.size();
  EncoderModel<Real> model(c.encoder, c.seed);
  train_stage(model, data, vocab, c, StageOptions{"dual", {s, t}, {}, c.epochs, c.lr});
  r.accuracy = accuracy(model, data.tasks[t].dev, data.pad);
  return r;
}

inline nlohmann::json to_json(const CellResult& c, std::uint64_t config_hash) {
  nlohmann::json j{{"format", kCellFormat}, {"source", c.source}, {"target", c.target}, {"seed", c.seed},
                   {"config_hash", config_hash}};
  if (c.accuracy) j["accuracy"] = *c.accuracy;
  else j["error"] = c.error;
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kCellFormat) throw Error(ErrorCode::kUnsupportedVersion, "cell format");
  CellResult c{j.at("source"), j.at("target"), j.at("seed"), std::nullopt, j.value("error", std::string{})};
  if (j.contains("accuracy")) c.accuracy = j.at("accuracy").get<double>();
  return c;
}

/// accuracy[target][source]; unset entries are failed cells.
struct TransferGrid {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::vector<std::optional<double>>> accuracy;
  std::vector<std::vector<std::string>> errors;
  std::size_t computed = 0;  // cells trained in this call
  std::size_t reused = 0;    // cells read back from disk
};

struct GridOptions {
  std::filesystem::path dir;  // empty: nothing persisted
  bool resume = false;
  std::function<void(const CellResult&, bool reused)> on_cell;  // may throw to abort; finished cells stay on disk
};

inline std::uint64_t grid_config_hash(const TrainConfig& cfg) { return hash_bytes(to_json(cfg).dump()); }

inline std::filesystem::path cell_path(const std::filesystem::path& dir, std::string_view source, std::string_view target) {
  std::ostringstream name;
  name << "cell-" << std::hex << std::setw(16) << std::setfill('0')
       << derive_seed(0, {hash_bytes(target), hash_bytes(source)}) << ".json";
  return dir / "cells" / name.str();
}

inline std::string grid_csv(const TransferGrid& g) {
  std::string out = "target";
  for (const auto& s : g.sources) out += "," + detail::csv_field(s);
  out += "\n";
  for (std::size_t i = 0; i < g.targets.size(); ++i) {
    out += detail::csv_field(g.targets[i]);
    for (const auto& a : g.accuracy[i]) out += "," + (a ? detail::format_double(*a) : std::string("NA"));
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const TransferGrid& g) {
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& row : g.accuracy) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& a : row) r.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
    acc.push_back(r);
  }
  return {{"format", kGridFormat}, {"sources", g.sources}, {"targets", g.targets}, {"accuracy", acc}, {"errors", g.errors}};
}

inline TransferGrid grid_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kGridFormat) throw Error(ErrorCode::kUnsupportedVersion, "grid format");
  TransferGrid g;
  g.sources = j.at("sources").get<std::vector<std::string>>();
  g.targets = j.at("targets").get<std::vector<std::string>>();
  for (const auto& row : j.at("accuracy")) {
    std::vector<std::optional<double>> r;
    for (const auto& a : row) r.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
    if (r.size() != g.sources.size()) throw Error(ErrorCode::kParseError, "grid row width");
    g.accuracy.push_back(std::move(r));
  }
  if (g.accuracy.size() != g.targets.size()) throw Error(ErrorCode::kParseError, "grid row count");
  g.errors = j.at("errors").get<std::vector<std::vector<std::string>>>();
  return g;
}

/// Every (target, source) cell in row-major order. With resume, cells already
/// on disk under the same training config are read back instead of trained.
/// Training errors are recorded in the cell and the grid continues.
template <typename Real>
TransferGrid run_grid(const EncodedCorpus& data, const Vocabulary& vocab, const std::vector<std::string>& sources,
                      const std::vector<std::string>& targets, const TrainConfig& cfg, const GridOptions& opt = {}) {
  if (sources.empty() || targets.empty()) throw Error(ErrorCode::kInvalidArgument, "grid needs sources and targets");
  for (const auto& s : sources) data.index_of(s);
  for (const auto& t : targets) data.index_of(t);
  const std::uint64_t chash = grid_config_hash(cfg);
  TransferGrid g;
  g.sources = sources;
  g.targets = targets;
  g.accuracy.assign(targets.size(), std::vector<std::optional<double>>(sources.size()));
  g.errors.assign(targets.size(), std::vector<std::string>(sources.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = 0; j < sources.size(); ++j) {
      const auto path = opt.dir.empty() ? std::filesystem::path{} : cell_path(opt.dir, sources[j], targets[i]);
      std::optional<CellResult> cell;
      bool reused = false;
      if (opt.resume && !path.empty() && std::filesystem::exists(path)) {
        const auto j_cell = read_json_file(path);
        if (j_cell.value("config_hash", std::uint64_t{0}) == chash) {
          cell = cell_from_json(j_cell);
          reused = true;
        }
      }
      if (!cell) {
        try {
          cell = dual_task_cell<Real>(data, vocab, sources[j], targets[i], cfg);
        } catch (const Error& e) {
          cell = CellResult{sources[j], targets[i], cell_seed(cfg.seed, sources[j], targets[i]), std::nullopt, e.what()};
        }
        if (!path.empty()) write_text(path, to_json(*cell, chash).dump(2) + "\n");
      }
      ++(reused ? g.reused : g.computed);
      g.accuracy[i][j] = cell->accuracy;
      g.errors[i][j] = cell->error;
      if (opt.on_cell) opt.on_cell(*cell, reused);
    }
  }
  if (!opt.dir.empty()) {
    write_text(opt.dir / "grid.csv", grid_csv(g));
    write_text(opt.dir / "grid.json", to_json(g).dump(2) + "\n");
  }
  return g;
}

// --- measure correlation -------------------------------------------------------------

struct MeasureCorrelation {
  std::string measure;
  std::vector<std::string> targets;
  std::vector<std::optional<double>> per_target;  // unset: undefined (constant input or failed cells)
  std::optional<double> mean;                     // over defined targets only
};

/// Per target, Pearson between the measure's scores for each source and the
/// transfer accuracies over the same sources.
inline std::vector<MeasureCorrelation> correlate_measures(const TransferGrid& g, const std::vector<TaskMeasure>& measures) {
  std::vector<MeasureCorrelation> out;
  for (const auto& m : measures) {
    MeasureCorrelation mc{m.name, g.targets, {}, std::nullopt};
    double sum = 0;
    std::size_t defined = 0;
    for (std::size_t i = 0; i < g.targets.size(); ++i) {
      std::vector<double> x, y;
      bool complete = true;
      for (std::size_t j = 0; j < g.sources.size(); ++j) {
        if (!g.accuracy[i][j]) {
          complete = false;
          break;
        }
        x.push_back(m.at(g.targets[i], g.sources[j]));
        y.push_back(*g.accuracy[i][j]);
      }
      std::optional<double> r;
      if (complete) {
        try {
          r = pearson(x, y);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kConstantVector && e.code() != ErrorCode::kInvalidArgument) throw;
        }
      }
      if (r) {
        sum += *r;
        ++defined;
      }
      mc.per_target.push_back(r);
    }
    if (defined > 0) mc.mean = sum / static_cast<double>(defined);
    out.push_back(std::move(mc));
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<MeasureCorrelation>& cs) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cs) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t i = 0; i < c.targets.size(); ++i)
      per[c.targets[i]] = c.per_target[i] ? nlohmann::json(*c.per_target[i]) : nlohmann::json(nullptr);
    rows.push_back({{"measure", c.measure}, {"per_target", per}, {"mean", c.mean ? nlohmann::json(*c.mean) : nlohmann::json(nullptr)}});
  }
  return {{"format", kCorrelationFormat}, {"measures", rows}};
}

inline std::vector<MeasureCorrelation> correlations_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kCorrelationFormat) throw Error(ErrorCode::kUnsupportedVersion, "correlation format");
  std::vector<MeasureCorrelation> out;
  for (const auto& row : j.at("measures")) {
    MeasureCorrelation c;
    c.measure = row.at("measure");
    for (const auto& [name, v] : row.at("per_target").items()) {
      c.targets.push_back(name);
      c.per_target.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
    if (!row.at("mean").is_null()) c.mean = row.at("mean").get<double>();
    out.push_back(std::move(c));
  }
  return out;
}

/// Measures as rows, targets as columns, mean last; "-" marks undefined.
inline std::string correlation_table(const std::vector<MeasureCorrelation>& cs) {
  if (cs.empty()) return "";
  std::size_t label = 7;
  for (const auto& c : cs) label = std::max(label, c.measure.size());
  std::size_t col = 6;
  for (const auto& t : cs.front().targets) col = std::max(col, t.size());
  auto cell = [](std::optional<double> v) {
    if (!v) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << *v;
    return os.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label)) << "Measure";
  for (const auto& t : cs.front().targets) os << "  " << std::right << std::setw(static_cast<int>(col)) << t;
  os << "  " << std::setw(static_cast<int>(col)) << "Avg." << "\n";
  for (const auto& c : cs) {
    os << std::left << std::setw(static_cast<int>(label)) << c.measure;
    for (const auto& v : c.per_target) os << "  " << std::right << std::setw(static_cast<int>(col)) << cell(v);
    os << "  " << std::right << std::setw(static_cast<int>(col)) << cell(c.mean) << "\n";
  }
  return os.str();
}

// --- complementary mixtures ------------------------------------------------------------

enum class MixtureStrategy { kSingle, kFullset, kTop5, kFamily, kSubset };

inline std::string to_string(MixtureStrategy s) {
  switch (s) {
    case MixtureStrategy::kSingle: return "single";
    case MixtureStrategy::kFullset: return "fullset";
    case MixtureStrategy::kTop5: return "top5";
    case MixtureStrategy::kFamily: return "family";
    case MixtureStrategy::kSubset: return "subset";
  }
  return "single";
}

inline MixtureStrategy parse_strategy(std::string_view s) {
  if (s == "single") return MixtureStrategy::kSingle;
  if (s == "fullset") return MixtureStrategy::kFullset;
  if (s == "top5") return MixtureStrategy::kTop5;
  if (s == "family") return MixtureStrategy::kFamily;
  if (s == "subset") return MixtureStrategy::kSubset;
  throw Error(ErrorCode::kUnknownStrategy, "unknown strategy '" + std::string(s) + "'");
}

struct MixtureSpec {
  MixtureStrategy strategy = MixtureStrategy::kSingle;
  const RelationshipMatrix* matrix = nullptr;  // required by top5
  std::size_t top_k = 5;
  std::vector<std::string> subset;             // used by subset; the target is added if absent
};

/// Task names in the stage-1 mixture, target first, each exactly once.
inline std::vector<std::string> mixture_members(const Corpus& corpus, std::string_view target, const MixtureSpec& spec) {
  const auto& t = corpus.task(target);
  std::vector<std::string> out{t.name};
  auto add = [&](const std::string& name) {
    corpus.task(name);
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  };
  switch (spec.strategy) {
    case MixtureStrategy::kSingle: break;
    case MixtureStrategy::kFullset:
      for (const auto& task : corpus.tasks) add(task.name);
      break;
    case MixtureStrategy::kTop5: {
      if (!spec.matrix) throw Error(ErrorCode::kInvalidArgument, "top5 needs a relationship matrix");
      const std::size_t k = std::min(spec.top_k, spec.matrix->tasks.size() - 1);
      for (const auto& name : rank_complementary(*spec.matrix, target, k)) add(name);
      break;
    }
    case MixtureStrategy::kFamily:
      for (const auto& task : corpus.tasks)
        if (task.family == t.family) add(task.name);
      break;
    case MixtureStrategy::kSubset:
      for (const auto& name : spec.subset) add(name);
      break;
  }
  return out;
}

struct MixtureResult {
  MixtureStrategy strategy = MixtureStrategy::kSingle;
  std::string target;
  std::vector<std::string> mixture;
  std::optional<double> stage1_accuracy;
  double accuracy = 0;  // target dev after fine-tuning
};

inline nlohmann::json to_json(const MixtureResult& r) {
  return {{"format", kMixtureFormat},
          {"strategy", to_string(r.strategy)},
          {"target", r.target},
          {"mixture", r.mixture},
          {"stage1_accuracy", r.stage1_accuracy ? nlohmann::json(*r.stage1_accuracy) : nlohmann::json(nullptr)},
          {"accuracy", r.accuracy}};
}

/// Multi-task training on the strategy's mixture, then fine-tuning on the
/// target alone. The model seed is cfg.seed whatever the strategy.
template <typename Real>
MixtureResult mixture_experiment(const Corpus& corpus, const EncodedCorpus& data, const Vocabulary& vocab,
                                 std::string_view target, const MixtureSpec& spec, const TrainConfig& cfg,
                                 const MetricsSink& sink = {}) {
  MixtureResult r;
  r.strategy = spec.strategy;
  r.target = std::string(target);
  r.mixture = mixture_members(corpus, target, spec);
  std::vector<std::size_t> ids;
  for (const auto& name : r.mixture) ids.push_back(data.index_of(name));
  TrainConfig c = cfg;
  c.encoder.vocab_size = vocab.size();
  EncoderModel<Real> model(c.encoder, c.seed);
  const auto two = pretrain_then_finetune(model, data, vocab, ids, data.index_of(target), c, sink);
  r.stage1_accuracy = two.stage1_accuracy;
  r.accuracy = two.stage2_accuracy;
  return r;
}

}  // namespace prefixmtl

// SPDX-License-Identifier: Apache-2.0
//
// prefixmtl: convert, synth, train, probe, select, transfer, report.
//
// Every command resolves one RunConfig (defaults, then --config, then flags),
// writes it to <out>/<run-id>/run.json and puts all artifacts beside it. The
// default run id hashes the resolved config, so rerunning a command lands in
// the same directory and --resume picks up its checkpoints.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/probing.hpp"
#include "prefixmtl/synthetic.hpp"
#include "prefixmtl/training.hpp"
#include "prefixmtl/transfer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prefixmtl;

namespace {

constexpr std::string_view kRunFormat = "prefixmtl.run/1";
constexpr std::string_view kResultFormat = "prefixmtl.result/1";
constexpr std::string_view kSelectFormat = "prefixmtl.select/1";
constexpr int kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

/// Failures that are the caller's fault; they exit with the usage code.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json default_run_config(const std::string& command) {
  json train = to_json(TrainConfig{});
  train.erase("seed");  // the run seed is the only seed
  return {{"format", kRunFormat},
          {"command", command},
          {"manifest", ""},
          {"k", 0},
          {"seed", 0},
          {"train", train},
          {"target", ""},
          {"top_k", 5},
          {"strategy", "top5"},
          {"subset", json::array()},
          {"sources", json::array()},
          {"targets", json::array()},
          {"matrix", ""},
          {"normalization", "global"},
          {"warm_start", ""},
          {"kind", "twin"},
          {"run_mixture", false}};
}

// Operational switches that never enter the persisted config.
struct Session {
  std::string config_file;
  std::string out;
  std::string run_id;
  std::string report_dir;
  std::size_t stop_after = 0;  // epochs to run in this invocation; 0 = all
  bool resume = false;
  bool dry_run = false;
  bool print_json = false;
  bool verbose = false;
};

struct Binding {
  CLI::Option* option;
  std::function<void(json&)> apply;
};

class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& help) : name_(name), sub_(app.add_subcommand(name, help)) {
    sub_->add_option("--config", session.config_file, "RunConfig JSON to start from (flags override it)");
    sub_->add_option("--out", session.out, "output root (default: $PREFIXMTL_OUT, else ./runs)");
    sub_->add_option("--run-id", session.run_id, "run subdirectory (default: <command>-<config hash>)");
    sub_->add_flag("--dry-run", session.dry_run, "print the resolved config and exit");
    sub_->add_flag("--json", session.print_json, "print the result as JSON instead of text");
    sub_->add_flag("-v,--verbose", session.verbose, "log progress to stderr");
  }

  template <typename T>
  CLI::Option* bind(const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    auto* opt = sub_->add_option(flag, *value, help);
    bindings_.push_back({opt, [value, pointer](json& j) { j[json::json_pointer(pointer)] = *value; }});
    return opt;
  }

  CLI::Option* bind_flag(const std::string& flag, const std::string& pointer, bool value, const std::string& help) {
    auto* opt = sub_->add_flag(flag, help);
    bindings_.push_back({opt, [value, pointer](json& j) { j[json::json_pointer(pointer)] = value; }});
    return opt;
  }

  void corpus_options(bool manifest_required) {
    bind<std::string>("--manifest", "/manifest", "corpus manifest (raw or converted)");
    manifest_required_ = manifest_required;
    bind<std::size_t>("--k", "/k", "options per example (default: the manifest's k)");
    bind<std::uint64_t>("--seed", "/seed", "seed for every random choice");
  }

  void train_options() {
    bind<double>("--lambda", "/train/lambda", "weight of the MLM term (0 disables it)");
    bind<double>("--mask-ratio", "/train/mask_ratio", "MLM masking ratio");
    bind<std::string>("--prefix-policy", "/train/prefix_policy", "prefix masking policy")
        ->check(CLI::IsMember({"default", "must", "no", "only"}));
    bind<std::string>("--mlm-scope", "/train/mlm_scope", "MLM on the gold sequence or all options")
        ->check(CLI::IsMember({"gold", "all"}));
    bind<std::size_t>("--cap", "/train/cap", "per-task cap on training examples per epoch");
    bind<double>("--lr", "/train/lr", "stage-1 learning rate");
    bind<std::size_t>("--epochs", "/train/epochs", "stage-1 epochs");
    bind<double>("--finetune-lr", "/train/finetune_lr", "stage-2 learning rate");
    bind<std::size_t>("--finetune-epochs", "/train/finetune_epochs", "stage-2 epochs");
    bind<std::size_t>("--batch-size", "/train/batch_size", "examples per step");
    bind<double>("--warmup", "/train/warmup", "warm-up fraction of steps");
    bind_flag("--no-prefix", "/train/with_prefix", false, "strip task prefixes from every sequence");
    bind<std::size_t>("--layers", "/train/encoder/layers", "encoder layers");
    bind<std::size_t>("--hidden", "/train/encoder/hidden", "hidden width");
    bind<std::size_t>("--heads", "/train/encoder/heads", "attention heads");
    bind<std::size_t>("--ffn", "/train/encoder/ffn", "feed-forward width");
    bind<std::size_t>("--max-len", "/train/encoder/max_len", "maximum sequence length");
    bind<double>("--dropout", "/train/encoder/dropout", "dropout rate");
  }

  /// defaults < --config file < explicit flags
  json resolve() const {
    json j = default_run_config(name_);
    if (!session.config_file.empty()) {
      json file = read_json_file(session.config_file);
      if (file.value("format", std::string{}) != kRunFormat) {
        throw Error(ErrorCode::kUnsupportedVersion, session.config_file + ": unsupported run config format");
      }
      if (file.value("command", name_) != name_) {
        throw UsageError("config was written by '" + file.value("command", std::string{}) + "', not '" + name_ + "'");
      }
      j.merge_patch(file);
    }
    for (const auto& b : bindings_)
      if (b.option->count() > 0) b.apply(j);
    if (manifest_required_ && j.at("manifest").get<std::string>().empty()) throw UsageError("--manifest is required");
    return j;
  }

  CLI::App* app() const { return sub_; }
  const std::string& name() const { return name_; }
  Session session;

 private:
  std::string name_;
  CLI::App* sub_;
  std::vector<Binding> bindings_;
  bool manifest_required_ = false;
};

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

fs::path output_root(const Session& s) {
  if (!s.out.empty()) return s.out;
  if (const char* env = std::getenv("PREFIXMTL_OUT"); env && *env) return env;
  return "runs";
}

fs::path run_dir(const Session& s, const json& cfg) {
  const std::string id = s.run_id.empty() ? cfg.at("command").get<std::string>() + "-" + hex(hash_bytes(cfg.dump())) : s.run_id;
  return output_root(s) / id;
}

TrainConfig train_config(const json& cfg) {
  TrainConfig t = train_config_from_json(cfg.at("train"));
  t.seed = cfg.at("seed").get<std::uint64_t>();
  return t;
}

Corpus load_corpus(const json& cfg) {
  std::optional<std::size_t> manifest_k;
  const auto raw = load_manifest(cfg.at("manifest").get<std::string>(), &manifest_k);
  std::size_t k = cfg.at("k").get<std::size_t>();
  if (k == 0) k = manifest_k.value_or(4);
  return build_corpus(raw, k, cfg.at("seed").get<std::uint64_t>());
}

std::vector<std::string> task_names(const Corpus& c) {
  std::vector<std::string> out;
  for (const auto& t : c.tasks) out.push_back(t.name);
  return out;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Thrown from the metrics sink once --stop-after epochs have finished; the
/// epoch checkpoint is already on disk at that point.
struct StopRequested {};

class Log {
 public:
  Log(const fs::path& path, bool append, bool verbose, std::size_t stop_after = 0)
      : out_(path, append ? std::ios::app : std::ios::trunc), verbose_(verbose), stop_after_(stop_after) {
    if (!out_) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  }
  void operator()(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
    const bool epoch = j.value("type", "") == "epoch";
    if (verbose_ && (epoch || j.value("type", "") == "cell")) std::cerr << j.dump() << '\n';
    if (epoch && stop_after_ > 0 && ++epochs_ == stop_after_) throw StopRequested{};
  }

 private:
  std::ofstream out_;
  bool verbose_;
  std::size_t stop_after_;
  std::size_t epochs_ = 0;
};

struct Outcome {
  json result;
  std::string text;
};

// --- commands ------------------------------------------------------------------------

Outcome cmd_convert(const json& cfg, const fs::path& dir) {
  const Corpus corpus = load_corpus(cfg);
  write_corpus(corpus, dir / "corpus");
  json stats = read_json_file(dir / "corpus" / "stats.json");
  std::ostringstream os;
  os << "converted " << corpus.tasks.size() << " tasks (k=" << corpus.k << ") into " << (dir / "corpus").string() << "\n";
  const auto total = stats.at("total");
  for (const char* key : {"examples", "unchanged", "rule1_discard", "rule2_pad", "rule3_gold_list", "rule4_empty_gold"})
    os << "  " << std::left << std::setw(18) << key << total.value(key, 0) << "\n";
  return {{{"format", kResultFormat}, {"command", "convert"}, {"corpus", (dir / "corpus").string()}, {"stats", stats}}, os.str()};
}

Outcome cmd_synth(const json& cfg, const fs::path& dir) {
  const auto kind = cfg.at("kind").get<std::string>();
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  Corpus c;
  if (kind == "twin") c = synth::twin_mixture(seed).corpus;
  else if (kind == "family") c = synth::family_corpus(seed);
  else if (kind == "planted") c = synth::planted_transfer(seed).corpus;
  else if (kind == "disambiguation") c = synth::disambiguation_corpus(seed, 240, 100, 120);
  else throw UsageError("unknown synthetic corpus '" + kind + "'");
  write_corpus(c, dir / "corpus");
  const auto manifest = (dir / "corpus" / "manifest.json").string();
  return {{{"format", kResultFormat}, {"command", "synth"}, {"kind", kind}, {"manifest", manifest}, {"tasks", task_names(c)}},
          "wrote " + kind + " corpus (" + std::to_string(c.tasks.size()) + " tasks): " + manifest + "\n"};
}

Outcome cmd_train(const json& cfg, const fs::path& dir, const Session& s) {
  const Corpus corpus = load_corpus(cfg);
  TrainConfig tc = train_config(cfg);
  const Vocabulary vocab = build_vocab(corpus);
  tc.encoder.vocab_size = vocab.size();
  const auto data = encode_corpus(corpus, vocab, tc.encoder.max_len, tc.with_prefix);
  vocab.save(dir / "vocab.txt");
  Log log(dir / "metrics.jsonl", s.resume, s.verbose, s.stop_after);
  EncoderModel<float> model(tc.encoder, tc.seed);
  const auto target = cfg.at("target").get<std::string>();
  std::vector<std::size_t> all(corpus.tasks.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  json result{{"format", kResultFormat}, {"command", "train"}};
  std::ostringstream os;
  try {
  if (target.empty()) {
    const auto r = train_stage(model, data, vocab, tc, StageOptions{"mtl", all, all, tc.epochs, tc.lr, dir / "ckpt", s.resume},
                               std::ref(log));
    result["resumed_from_epoch"] = r.resumed_from;
    result["dev_accuracy"] = r.epochs.empty() ? json::object() : json(r.epochs.back().dev_accuracy);
    os << "multi-task training, " << r.epochs.size() << " epochs";
    if (r.resumed_from > 0) os << " (resumed after epoch " << r.resumed_from << ")";
    os << "\n";
    for (const auto& [name, acc] : r.epochs.back().dev_accuracy) os << "  " << std::left << std::setw(24) << name << std::fixed << std::setprecision(4) << acc << "\n";
  } else {
    std::vector<std::size_t> mixture;
    const auto subset = cfg.at("subset").get<std::vector<std::string>>();
    if (subset.empty()) mixture = all;
    else
      for (const auto& n : subset) mixture.push_back(data.index_of(n));
    const auto r = pretrain_then_finetune(model, data, vocab, mixture, data.index_of(target), tc, std::ref(log), dir / "ckpt", s.resume);
    result["target"] = target;
    result["stage1_accuracy"] = r.stage1_accuracy ? json(*r.stage1_accuracy) : json(nullptr);
    result["accuracy"] = r.stage2_accuracy;
    os << "target " << target << ": dev accuracy " << std::fixed << std::setprecision(4) << r.stage2_accuracy << "\n";
  }
  } catch (const StopRequested&) {
    result["complete"] = false;
    write_json(dir / "result.json", result);
    return {result, "stopped after " + std::to_string(s.stop_after) + " epoch(s); rerun with --resume to continue\n"};
  }
  result["complete"] = true;
  save_checkpoint(dir / "model.ckpt", model, vocab.hash(), static_cast<const AdamState<float>*>(nullptr), {{"train", to_json(tc)}});
  result["checkpoint"] = (dir / "model.ckpt").string();
  write_json(dir / "result.json", result);
  return {result, os.str()};
}

Outcome cmd_probe(const json& cfg, const fs::path& dir, const Session& s) {
  const Corpus corpus = load_corpus(cfg);
  TrainConfig tc = train_config(cfg);
  const Vocabulary vocab = build_vocab(corpus);
  tc.encoder.vocab_size = vocab.size();
  vocab.save(dir / "vocab.txt");
  Log log(dir / "metrics.jsonl", false, s.verbose);
  EncoderModel<float> model;
  ProbeResult pr;
  if (const auto warm = cfg.at("warm_start").get<std::string>(); !warm.empty()) {
    model = std::move(load_checkpoint<float>(warm, vocab.hash()).model);
    pr = train_probe(model, corpus, vocab, tc, std::ref(log));
  } else {
    model = train_probe_model<float>(corpus, vocab, tc, &pr, std::ref(log));
  }
  save_checkpoint(dir / "probe.ckpt", model, vocab.hash());
  const auto norm = parse_normalization(cfg.at("normalization").get<std::string>());
  const auto m = relationship_matrix(model, vocab, task_names(corpus), norm);
  write_json(dir / "matrix.json", to_json(m));
  write_text(dir / "matrix.csv", matrix_csv(m.tasks, m.normalized));
  write_text(dir / "matrix_raw.csv", matrix_csv(m.tasks, m.raw));
  write_json(dir / "measure_length.json", to_json(baseline_measure(corpus, BaselineKind::kLength)));
  write_json(dir / "measure_vocab.json", to_json(baseline_measure(corpus, BaselineKind::kVocab)));
  const std::size_t top = std::min<std::size_t>(cfg.at("top_k").get<std::size_t>(), m.tasks.size() - 1);
  json result{{"format", kResultFormat}, {"command", "probe"}, {"matrix", (dir / "matrix.json").string()},
              {"epoch_loss", pr.epoch_loss}};
  write_json(dir / "result.json", result);
  return {result, ranked_table(m, top)};
}

fs::path matrix_path(const std::string& p) {
  if (p.empty()) throw UsageError("--matrix is required");
  fs::path path(p);
  return fs::is_directory(path) ? path / "matrix.json" : path;
}

Outcome cmd_select(const json& cfg, const fs::path& dir, const Session& s) {
  const auto target = cfg.at("target").get<std::string>();
  if (target.empty()) throw UsageError("--target is required");
  const auto strategy = parse_strategy(cfg.at("strategy").get<std::string>());
  std::optional<RelationshipMatrix> m;
  if (strategy == MixtureStrategy::kTop5 || !cfg.at("matrix").get<std::string>().empty()) {
    m = relationship_from_json(read_json_file(matrix_path(cfg.at("matrix"))));
  }
  const std::size_t top_k = cfg.at("top_k").get<std::size_t>();
  json result{{"format", kSelectFormat}, {"command", "select"}, {"target", target}, {"strategy", to_string(strategy)}, {"top_k", top_k}};
  std::ostringstream os;
  if (m) {
    json ranked = json::array();
    const auto names = rank_complementary(*m, target, std::min(top_k, m->tasks.size() - 1));
    os << "top-" << names.size() << " complementary tasks for " << target << ":\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
      ranked.push_back({{"task", names[i]}, {"score", m->score(target, names[i])}});
      os << "  " << i + 1 << ". " << std::left << std::setw(24) << names[i] << std::fixed << std::setprecision(4)
         << m->score(target, names[i]) << "\n";
    }
    result["ranked"] = ranked;
  }
  const bool needs_corpus = cfg.at("run_mixture").get<bool>() || strategy != MixtureStrategy::kTop5;
  if (needs_corpus) {
    if (cfg.at("manifest").get<std::string>().empty()) throw UsageError("--manifest is required for strategy " + to_string(strategy));
    const Corpus corpus = load_corpus(cfg);
    MixtureSpec spec{strategy, m ? &*m : nullptr, top_k, cfg.at("subset").get<std::vector<std::string>>()};
    const auto members = mixture_members(corpus, target, spec);
    result["mixture"] = members;
    os << "mixture (" << to_string(strategy) << "):";
    for (const auto& n : members) os << " " << n;
    os << "\n";
    if (cfg.at("run_mixture").get<bool>()) {
      TrainConfig tc = train_config(cfg);
      const Vocabulary vocab = build_vocab(corpus);
      const auto data = encode_corpus(corpus, vocab, tc.encoder.max_len, tc.with_prefix);
      Log log(dir / "metrics.jsonl", false, s.verbose);
      const auto r = mixture_experiment<float>(corpus, data, vocab, target, spec, tc, std::ref(log));
      write_json(dir / "mixture.json", to_json(r));
      result["accuracy"] = r.accuracy;
      os << "target dev accuracy " << std::fixed << std::setprecision(4) << r.accuracy << "\n";
    }
  }
  write_json(dir / "select.json", result);
  return {result, os.str()};
}

Outcome cmd_transfer(const json& cfg, const fs::path& dir, const Session& s) {
  const Corpus corpus = load_corpus(cfg);
  TrainConfig tc = train_config(cfg);
  const Vocabulary vocab = build_vocab(corpus);
  const auto data = encode_corpus(corpus, vocab, tc.encoder.max_len, tc.with_prefix);
  auto targets = cfg.at("targets").get<std::vector<std::string>>();
  auto sources = cfg.at("sources").get<std::vector<std::string>>();
  if (targets.empty()) throw UsageError("--targets is required");
  if (sources.empty())
    for (const auto& n : task_names(corpus))
      if (std::find(targets.begin(), targets.end(), n) == targets.end()) sources.push_back(n);
  Log log(dir / "metrics.jsonl", s.resume, s.verbose);
  GridOptions opt{dir / "grid", s.resume, [&](const CellResult& c, bool reused) {
                    log({{"type", "cell"}, {"source", c.source}, {"target", c.target}, {"reused", reused},
                         {"accuracy", c.accuracy ? json(*c.accuracy) : json(nullptr)}, {"error", c.error}});
                  }};
  const auto g = run_grid<float>(data, vocab, sources, targets, tc, opt);
  std::vector<TaskMeasure> measures;
  if (const auto mp = cfg.at("matrix").get<std::string>(); !mp.empty())
    measures.push_back(probing_measure(relationship_from_json(read_json_file(matrix_path(mp)))));
  measures.push_back(baseline_measure(corpus, BaselineKind::kLength));
  measures.push_back(baseline_measure(corpus, BaselineKind::kVocab));
  const auto cs = correlate_measures(g, measures);
  write_json(dir / "correlation.json", to_json(cs));
  const auto table = correlation_table(cs);
  write_text(dir / "correlation.txt", table);
  json result{{"format", kResultFormat}, {"command", "transfer"}, {"computed", g.computed}, {"reused", g.reused},
              {"grid", (dir / "grid" / "grid.json").string()}, {"correlation", to_json(cs)}};
  write_json(dir / "result.json", result);
  std::ostringstream os;
  os << "grid " << targets.size() << "x" << sources.size() << ": " << g.computed << " cells trained, " << g.reused << " reused\n"
     << grid_csv(g) << "\n"
     << table;
  return {result, os.str()};
}

/// Renders persisted artifacts of one run directory; never trains.
Outcome cmd_report(const Session& s) {
  const fs::path dir = s.report_dir;
  if (dir.empty()) throw UsageError("report needs a run directory");
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kIo, "no such run directory: " + dir.string());
  json result{{"format", kResultFormat}, {"command", "report"}, {"run", dir.string()}, {"rendered", json::array()}};
  std::ostringstream os;
  const auto out = dir / "report";
  if (fs::exists(dir / "matrix.json")) {
    const auto m = relationship_from_json(read_json_file(dir / "matrix.json"));
    write_text(out / "heatmap.pgm", heatmap_pgm(m.normalized));
    const auto table = ranked_table(m, std::min<std::size_t>(5, m.tasks.size() - 1));
    write_text(out / "ranked.txt", table);
    os << "relationship ranking (" << to_string(m.mode) << " min-max)\n" << table << "heatmap: " << (out / "heatmap.pgm").string() << "\n\n";
    result["rendered"].push_back("matrix");
  }
  if (fs::exists(dir / "correlation.json")) {
    const auto table = correlation_table(correlations_from_json(read_json_file(dir / "correlation.json")));
    write_text(out / "correlation.txt", table);
    os << "correlation with transfer accuracy\n" << table << "\n";
    result["rendered"].push_back("correlation");
  }
  if (fs::exists(dir / "grid" / "grid.json")) {
    write_text(out / "grid.csv", grid_csv(grid_from_json(read_json_file(dir / "grid" / "grid.json"))));
    result["rendered"].push_back("grid");
  }
  if (fs::exists(dir / "select.json")) {
    const auto sel = read_json_file(dir / "select.json");
    if (sel.value("format", std::string{}) != kSelectFormat) throw Error(ErrorCode::kUnsupportedVersion, "select format");
    os << "selection for " << sel.at("target").get<std::string>() << " (" << sel.at("strategy").get<std::string>() << ")\n";
    for (const auto& r : sel.value("ranked", json::array()))
      os << "  " << std::left << std::setw(24) << r.at("task").get<std::string>() << std::fixed << std::setprecision(4) << r.at("score").get<double>() << "\n";
    if (sel.contains("accuracy")) os << "  target dev accuracy " << sel.at("accuracy").get<double>() << "\n";
    result["rendered"].push_back("select");
  }
  if (fs::exists(dir / "result.json") && result["rendered"].empty()) {
    const auto r = read_json_file(dir / "result.json");
    if (r.value("format", std::string{}) != kResultFormat) throw Error(ErrorCode::kUnsupportedVersion, "result format");
    os << r.dump(2) << "\n";
    result["rendered"].push_back("result");
  }
  if (result["rendered"].empty()) throw Error(ErrorCode::kIo, "nothing to report in " + dir.string() + " (no matrix, correlation, grid, selection or result files)");
  write_json(out / "report.json", result);
  return {result, os.str()};
}

int fail(int code, const std::string& kind, const std::string& message, json extra = json::object()) {
  json j{{"error", kind}, {"message", message}, {"exit_code", code}};
  j.update(extra);
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-prefix multi-task training, prefix probing and transfer analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help) -> Command& {
    commands.push_back(std::make_unique<Command>(app, name, help));
    return *commands.back();
  };

  auto& convert = add("convert", "normalize raw datasets to k options and attach prefixes");
  convert.corpus_options(true);

  auto& synth_cmd = add("synth", "write a planted synthetic corpus");
  synth_cmd.bind<std::uint64_t>("--seed", "/seed", "corpus seed");
  synth_cmd.bind<std::string>("--kind", "/kind", "which corpus")->check(CLI::IsMember({"twin", "family", "planted", "disambiguation"}));

  auto& train = add("train", "multi-task training, optionally followed by fine-tuning on --target");
  train.corpus_options(true);
  train.train_options();
  train.bind<std::string>("--target", "/target", "fine-tune on this task after multi-task training");
  train.bind<std::vector<std::string>>("--subset", "/subset", "stage-1 mixture (default: every task)")->delimiter(',');
  train.app()->add_flag("--resume", train.session.resume, "continue from the run's epoch checkpoints");
  train.app()->add_option("--stop-after", train.session.stop_after, "stop after this many epochs in this invocation");

  auto& probe = add("probe", "MLM-only probe training and the prefix relationship matrix");
  probe.corpus_options(true);
  probe.train_options();
  probe.bind<std::string>("--normalization", "/normalization", "min-max over all pairs or per row")
      ->check(CLI::IsMember({"global", "per-row"}));
  probe.bind<std::string>("--warm-start", "/warm_start", "start from this checkpoint instead of a fresh model");
  probe.bind<std::size_t>("--top-k", "/top_k", "partners listed per task");

  auto& select = add("select", "rank complementary tasks and build a mixture");
  select.corpus_options(false);
  select.train_options();
  select.bind<std::string>("--matrix", "/matrix", "matrix.json or a probe run directory");
  select.bind<std::string>("--target", "/target", "target task");
  select.bind<std::size_t>("--top-k", "/top_k", "number of complementary tasks");
  select.bind<std::string>("--strategy", "/strategy", "mixture strategy")
      ->check(CLI::IsMember({"single", "fullset", "top5", "family", "subset"}));
  select.bind<std::vector<std::string>>("--subset", "/subset", "tasks for the subset strategy")->delimiter(',');
  select.bind_flag("--train", "/run_mixture", true, "train the mixture and report target dev accuracy");

  auto& transfer = add("transfer", "dual-task transfer grid and measure correlations");
  transfer.corpus_options(true);
  transfer.train_options();
  transfer.bind<std::vector<std::string>>("--targets", "/targets", "target tasks")->delimiter(',');
  transfer.bind<std::vector<std::string>>("--sources", "/sources", "source tasks (default: all non-targets)")->delimiter(',');
  transfer.bind<std::string>("--matrix", "/matrix", "probe matrix to correlate (matrix.json or run directory)");
  transfer.app()->add_flag("--resume", transfer.session.resume, "reuse finished cells");

  auto* report = app.add_subcommand("report", "render tables and a heatmap from a finished run directory");
  Session report_session;
  report->add_option("run", report_session.report_dir, "run directory")->required();
  report->add_flag("--json", report_session.print_json, "print the result as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fail(kExitUsage, "UsageError", e.what());
  }

  try {
    if (report->parsed()) {
      const auto o = cmd_report(report_session);
      std::cout << (report_session.print_json ? o.result.dump(2) + "\n" : o.text);
      return 0;
    }
    for (auto& c : commands) {
      if (!c->app()->parsed()) continue;
      const json cfg = c->resolve();
      if (c->name() != "synth" && c->name() != "convert") train_config(cfg).validate();
      const fs::path dir = run_dir(c->session, cfg);
      if (c->session.dry_run) {
        std::cout << json{{"run_dir", dir.string()}, {"config", cfg}}.dump(2) << "\n";
        return 0;
      }
      fs::create_directories(dir);
      write_json(dir / "run.json", cfg);
      Outcome o;
      if (c->name() == "convert") o = cmd_convert(cfg, dir);
      else if (c->name() == "synth") o = cmd_synth(cfg, dir);
      else if (c->name() == "train") o = cmd_train(cfg, dir, c->session);
      else if (c->name() == "probe") o = cmd_probe(cfg, dir, c->session);
      else if (c->name() == "select") o = cmd_select(cfg, dir, c->session);
      else if (c->name() == "transfer") o = cmd_transfer(cfg, dir, c->session);
      o.result["run_dir"] = dir.string();
      if (c->session.print_json) std::cout << o.result.dump(2) << "\n";
      else std::cout << "run: " << dir.string() << "\n" << o.text;
      return 0;
    }
    return fail(kExitUsage, "UsageError", "no command");
  } catch (const UsageError& e) {
    return fail(kExitUsage, "UsageError", e.what());
  } catch (const ParseError& e) {
    return fail(kExitData, "ParseError", e.what(), {{"file", e.file()}, {"line", e.line()}});
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kInvalidArgument) return fail(kExitUsage, "InvalidArgument", e.what());
    return fail(is_numeric(e.code()) ? kExitNumeric : kExitData, std::string(to_string(e.code())), e.what());
  } catch (const json::exception& e) {
    return fail(kExitData, "ParseError", e.what());
  } catch (const std::exception& e) {
    return fail(kExitData, "Error", e.what());
  }
}

// SPDX-License-Identifier: Apache-2.0
//
// Dataset unification: every example is reshaped into exactly k options with
// one gold label, then tagged with its task prefix.
//
// Raw and normalized records are JSON lines:
//   {"context": str, "question": str|null, "options": [str], "gold": int|[str],
//    "allow_empty_gold": bool}
// A normalized record always has k options and an integer gold.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <variant>
#include <vector>

#include "prefixmtl/errors.hpp"
#include "prefixmtl/random.hpp"

namespace prefixmtl {

inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kPlaceholderOption = "N/A";
inline constexpr std::string_view kDefaultTruthOption = "there is no violation";
inline constexpr std::string_view kManifestFormat = "prefixmtl.manifest/1";
inline constexpr std::string_view kStatsFormat = "prefixmtl.convert-stats/1";

using GoldList = std::vector<std::string>;

struct RawExample {
  std::string context;
  std::optional<std::string> question;
  std::vector<std::string> options;
  std::variant<std::size_t, GoldList> gold = std::size_t{0};
  bool allows_empty_gold = false;
};

struct Example {
  std::string context;
  std::string question;
  std::vector<std::string> options;
  std::size_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Candidate items gathered from every gold list of a dataset.
struct HeldOutPool {
  std::vector<std::string> items;

  static HeldOutPool from(const std::vector<RawExample>& examples) {
    HeldOutPool pool;
    for (const auto& ex : examples) {
      if (const auto* list = std::get_if<GoldList>(&ex.gold)) pool.items.insert(pool.items.end(), list->begin(), list->end());
    }
    return pool;
  }

  /// Distinct items in lexicographic order.
  std::vector<std::string> distinct() const {
    std::set<std::string> s(items.begin(), items.end());
    return {s.begin(), s.end()};
  }
};

/// Counts of the unification rules fired while normalizing a dataset.
struct RuleStats {
  std::size_t examples = 0;
  std::size_t unchanged = 0;
  std::size_t rule_discard = 0;    // too many options
  std::size_t rule_pad = 0;        // too few options
  std::size_t rule_gold_list = 0;  // gold given as a list
  std::size_t rule_empty_gold = 0; // empty gold list with a templated truth
  std::size_t discarded_options = 0;
  std::size_t padded_options = 0;

  RuleStats& operator+=(const RuleStats& o) {
    examples += o.examples;
    unchanged += o.unchanged;
    rule_discard += o.rule_discard;
    rule_pad += o.rule_pad;
    rule_gold_list += o.rule_gold_list;
    rule_empty_gold += o.rule_empty_gold;
    discarded_options += o.discarded_options;
    padded_options += o.padded_options;
    return *this;
  }
  friend bool operator==(const RuleStats&, const RuleStats&) = default;
};

inline nlohmann::json to_json(const RuleStats& s) {
  return {{"examples", s.examples},         {"unchanged", s.unchanged},
          {"rule1_discard", s.rule_discard}, {"rule2_pad", s.rule_pad},
          {"rule3_gold_list", s.rule_gold_list}, {"rule4_empty_gold", s.rule_empty_gold},
          {"discarded_options", s.discarded_options}, {"padded_options", s.padded_options}};
}

namespace detail {

/// Draws `count` distinct items from `candidates` without replacement.
inline std::vector<std::string> sample_without_replacement(std::vector<std::string> candidates, std::size_t count,
                                                           Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.uniform_index(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  return candidates;
}

/// Places the gold option among the others at a uniformly random position.
inline Example shuffled_example(const RawExample& raw, std::string gold, std::vector<std::string> others, Rng& rng) {
  Example ex;
  ex.context = raw.context;
  ex.question = raw.question.value_or("");
  ex.options.reserve(others.size() + 1);
  ex.options.push_back(std::move(gold));
  for (auto& o : others) ex.options.push_back(std::move(o));
  std::vector<std::size_t> order(ex.options.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));
  std::vector<std::string> shuffled(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    shuffled[i] = std::move(ex.options[order[i]]);
    if (order[i] == 0) ex.label = i;
  }
  ex.options = std::move(shuffled);
  return ex;
}

inline std::vector<std::string> negatives_from_pool(const HeldOutPool& pool, const std::set<std::string>& excluded,
                                                    std::size_t count, Rng& rng) {
  std::vector<std::string> candidates;
  for (auto& item : pool.distinct())
    if (!excluded.contains(item)) candidates.push_back(std::move(item));
  if (candidates.size() < count) {
    throw Error(ErrorCode::kPoolExhausted, "need " + std::to_string(count) + " negatives, pool offers " +
                                               std::to_string(candidates.size()));
  }
  return sample_without_replacement(std::move(candidates), count, rng);
}

}  // namespace detail

/// Reshapes one raw example into exactly k options.
///
///  - more than k options: the gold is kept and wrong options are discarded
///    uniformly at random until k remain;
///  - fewer than k options: "N/A" placeholders are appended;
///  - gold list: one gold item is drawn from the list and k-1 negatives are
///    drawn from the pool, excluding every item of the list;
///  - empty gold list (when allowed): `truth_template` becomes the gold and
///    negatives are drawn as above.
///
/// The gold choice for a list draws from `gold_rng` when given, so it can be
/// made independent of the run seed; everything else draws from `rng`.
inline Example normalize_example(const RawExample& raw, std::size_t k, const HeldOutPool& pool, Rng& rng,
                                 std::string_view truth_template = kDefaultTruthOption, RuleStats* stats = nullptr,
                                 Rng* gold_rng = nullptr) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "option count k must be at least 2");
  RuleStats local;
  RuleStats& st = stats ? *stats : local;
  ++st.examples;

  if (const auto* index = std::get_if<std::size_t>(&raw.gold)) {
    const std::size_t gold = *index;
    if (gold >= raw.options.size()) {
      throw Error(ErrorCode::kInvalidGold, "gold index " + std::to_string(gold) + " with " +
                                               std::to_string(raw.options.size()) + " options");
    }
    const std::size_t n = raw.options.size();
    if (n == k) {
      ++st.unchanged;
      return Example{raw.context, raw.question.value_or(""), raw.options, gold};
    }
    if (n < k) {
      ++st.rule_pad;
      st.padded_options += k - n;
      Example ex{raw.context, raw.question.value_or(""), raw.options, gold};
      ex.options.resize(k, std::string(kPlaceholderOption));
      return ex;
    }
    ++st.rule_discard;
    st.discarded_options += n - k;
    std::vector<std::string> wrong;
    wrong.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i)
      if (i != gold) wrong.push_back(raw.options[i]);
    auto survivors = detail::sample_without_replacement(std::move(wrong), k - 1, rng);
    return detail::shuffled_example(raw, raw.options[gold], std::move(survivors), rng);
  }

  const auto& list = std::get<GoldList>(raw.gold);
  if (list.empty()) {
    if (!raw.allows_empty_gold) throw Error(ErrorCode::kInvalidGold, "empty gold list not allowed for this example");
    ++st.rule_empty_gold;
    std::string truth(truth_template);
    auto negatives = detail::negatives_from_pool(pool, {truth}, k - 1, rng);
    return detail::shuffled_example(raw, std::move(truth), std::move(negatives), rng);
  }

  ++st.rule_gold_list;
  std::set<std::string> golds(list.begin(), list.end());
  std::vector<std::string> distinct_golds(golds.begin(), golds.end());
  Rng& pick = gold_rng ? *gold_rng : rng;
  std::string chosen = distinct_golds[pick.uniform_index(distinct_golds.size())];
  auto negatives = detail::negatives_from_pool(pool, golds, k - 1, rng);
  return detail::shuffled_example(raw, std::move(chosen), std::move(negatives), rng);
}

// --- tasks ---------------------------------------------------------------

/// A task before normalization, as read from a manifest or produced in memory.
struct RawTask {
  std::string name;
  std::string prefix;
  std::string family;
  std::optional<std::size_t> k;
  std::string truth_template = std::string(kDefaultTruthOption);
  std::vector<RawExample> train;
  std::vector<RawExample> dev;
  std::string train_path;  // provenance only
  std::string dev_path;
  nlohmann::json expected;  // optional checks carried by a manifest
};

struct TaskDataset {
  std::string name;
  std::string prefix;
  std::string family;
  std::size_t k = 4;
  std::vector<Example> examples;  // training split
  std::vector<Example> dev;
  RuleStats stats;
};

struct Corpus {
  std::size_t k = 4;
  std::uint64_t seed = 0;
  std::vector<TaskDataset> tasks;

  const TaskDataset& task(std::string_view name) const {
    for (const auto& t : tasks)
      if (t.name == name) return t;
    throw Error(ErrorCode::kUnknownTask, std::string(name));
  }
  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].name == name) return i;
    return std::nullopt;
  }
  std::size_t total_examples() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.examples.size();
    return n;
  }
  RuleStats stats() const {
    RuleStats s;
    for (const auto& t : tasks) s += t.stats;
    return s;
  }
};

inline bool is_valid_prefix(std::string_view prefix) {
  if (prefix.size() < 3 || prefix.front() != '[' || prefix.back() != ']') return false;
  for (char c : prefix.substr(1, prefix.size() - 2))
    if (c == '[' || c == ']' || static_cast<unsigned char>(c) <= ' ') return false;
  return true;
}

inline std::string prefix_for(std::string_view task_name) { return "[" + std::string(task_name) + "]"; }

/// Normalizes every raw example. Each example draws from its own stream keyed
/// on (seed, task, split, index), so results do not depend on processing
/// order. The gold pick for list-valued golds is keyed on (task, split, index)
/// only and is therefore stable across seeds.
inline Corpus build_corpus(const std::vector<RawTask>& raw_tasks, std::size_t k, std::uint64_t seed) {
  if (raw_tasks.empty()) throw Error(ErrorCode::kEmptyCorpus, "no tasks");
  std::unordered_set<std::string> prefixes, names;
  Corpus corpus;
  corpus.k = k;
  corpus.seed = seed;
  for (const auto& raw : raw_tasks) {
    if (!is_valid_prefix(raw.prefix)) {
      throw Error(ErrorCode::kInvalidArgument, "task '" + raw.name + "' has malformed prefix '" + raw.prefix + "'");
    }
    if (!prefixes.insert(raw.prefix).second) throw Error(ErrorCode::kDuplicatePrefix, raw.prefix);
    if (!names.insert(raw.name).second) throw Error(ErrorCode::kDuplicatePrefix, "task name " + raw.name);

    TaskDataset task;
    task.name = raw.name;
    task.prefix = raw.prefix;
    task.family = raw.family;
    task.k = raw.k.value_or(k);

    std::vector<RawExample> all(raw.train);
    all.insert(all.end(), raw.dev.begin(), raw.dev.end());
    const HeldOutPool pool = HeldOutPool::from(all);
    const std::uint64_t task_key = hash_bytes(raw.name);

    auto normalize_split = [&](const std::vector<RawExample>& split, std::uint64_t split_key,
                               std::vector<Example>& out) {
      out.reserve(split.size());
      for (std::size_t i = 0; i < split.size(); ++i) {
        Rng rng = derive_rng(seed, {task_key, split_key, i});
        Rng gold_rng = derive_rng(0x676f6c64, {task_key, split_key, i});
        try {
          out.push_back(normalize_example(split[i], task.k, pool, rng, raw.truth_template, &task.stats, &gold_rng));
        } catch (const Error& e) {
          const std::string& file = split_key == 0 ? raw.train_path : raw.dev_path;
          throw Error(e.code(), "task '" + raw.name + "' " + (file.empty() ? "" : file + " ") + "example " +
                                    std::to_string(i + 1) + ": " + e.what());
        }
      }
    };
    normalize_split(raw.train, 0, task.examples);
    normalize_split(raw.dev, 1, task.dev);
    corpus.tasks.push_back(std::move(task));
  }
  return corpus;
}

// --- sequence assembly ----------------------------------------------------

namespace detail {
inline void append_part(std::string& out, std::string_view part) {
  // collapse surrounding whitespace so empty slots never leave double spaces
  const auto b = part.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return;
  const auto e = part.find_last_not_of(" \t\r\n");
  if (!out.empty()) out.push_back(' ');
  out.append(part.substr(b, e - b + 1));
}
}  // namespace detail

/// "[CLS] <prefix> <context> [SEP] <question> <option> [SEP]" for one option.
/// With `with_prefix` false the prefix slot is left out.
inline std::string assemble_sequence(const Example& ex, std::size_t option, std::string_view prefix,
                                     bool with_prefix = true) {
  std::string s;
  detail::append_part(s, kClsToken);
  if (with_prefix) detail::append_part(s, prefix);
  detail::append_part(s, ex.context);
  detail::append_part(s, kSepToken);
  detail::append_part(s, ex.question);
  detail::append_part(s, ex.options.at(option));
  detail::append_part(s, kSepToken);
  return s;
}

inline std::vector<std::string> assemble_sequences(const Example& ex, const TaskDataset& task, bool with_prefix = true) {
  std::vector<std::string> out;
  out.reserve(ex.options.size());
  for (std::size_t j = 0; j < ex.options.size(); ++j) out.push_back(assemble_sequence(ex, j, task.prefix, with_prefix));
  return out;
}

/// Option-free form used for probing: "[CLS] <prefix> <context> [SEP] <question> [SEP]".
inline std::string assemble_probe_sequence(const Example& ex, std::string_view prefix) {
  std::string s;
  detail::append_part(s, kClsToken);
  detail::append_part(s, prefix);
  detail::append_part(s, ex.context);
  detail::append_part(s, kSepToken);
  detail::append_part(s, ex.question);
  detail::append_part(s, kSepToken);
  return s;
}

// --- record IO ------------------------------------------------------------

inline RawExample parse_raw_record(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error("record is not a JSON object");
  RawExample ex;
  if (!j.contains("context") || !j["context"].is_string()) throw std::runtime_error("missing string field 'context'");
  ex.context = j["context"].get<std::string>();
  if (j.contains("question") && !j["question"].is_null()) {
    if (!j["question"].is_string()) throw std::runtime_error("'question' must be a string or null");
    ex.question = j["question"].get<std::string>();
  }
  if (j.contains("options")) {
    if (!j["options"].is_array()) throw std::runtime_error("'options' must be an array");
    for (const auto& o : j["options"]) {
      if (!o.is_string()) throw std::runtime_error("options must be strings");
      ex.options.push_back(o.get<std::string>());
    }
  }
  if (!j.contains("gold")) throw std::runtime_error("missing field 'gold'");
  const auto& g = j["gold"];
  if (g.is_number_integer()) {
    if (g.get<std::int64_t>() < 0) throw std::runtime_error("negative gold index");
    ex.gold = g.get<std::size_t>();
  } else if (g.is_array()) {
    GoldList list;
    for (const auto& item : g) {
      if (!item.is_string()) throw std::runtime_error("gold list items must be strings");
      list.push_back(item.get<std::string>());
    }
    for (const auto& item : list) {
      if (std::find(ex.options.begin(), ex.options.end(), item) == ex.options.end()) {
        throw std::runtime_error("gold item '" + item + "' is not among the options");
      }
    }
    ex.gold = std::move(list);
  } else {
    throw std::runtime_error("'gold' must be an integer or a list of strings");
  }
  if (j.contains("allow_empty_gold")) ex.allows_empty_gold = j["allow_empty_gold"].get<bool>();
  return ex;
}

inline std::vector<RawExample> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<RawExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_raw_record(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const Example& ex) {
  return {{"context", ex.context}, {"question", ex.question}, {"options", ex.options}, {"gold", ex.label}};
}

inline void write_records(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

/// Manifest:
///   {"format": "prefixmtl.manifest/1", "k": 4,
///    "tasks": [{"name", "prefix", "family", "train", "dev"?, "k"?, "truth_template"?, "expected"?}]}
/// Record paths are relative to the manifest's directory.
inline std::vector<RawTask> load_manifest(const std::filesystem::path& path, std::optional<std::size_t>* k_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  const std::string format = m.value("format", "");
  if (format != kManifestFormat) {
    throw Error(ErrorCode::kUnsupportedVersion, path.string() + ": unsupported manifest format '" + format + "'");
  }
  if (k_out && m.contains("k")) *k_out = m["k"].get<std::size_t>();
  const auto dir = path.parent_path();
  std::vector<RawTask> tasks;
  for (const auto& t : m.at("tasks")) {
    RawTask task;
    try {
      task.name = t.at("name").get<std::string>();
      task.prefix = t.value("prefix", prefix_for(task.name));
      task.family = t.value("family", std::string{});
      if (t.contains("k")) task.k = t["k"].get<std::size_t>();
      task.truth_template = t.value("truth_template", std::string(kDefaultTruthOption));
      task.train_path = (dir / t.at(t.contains("train") ? "train" : "path").get<std::string>()).string();
      if (t.contains("dev")) task.dev_path = (dir / t["dev"].get<std::string>()).string();
      if (t.contains("expected")) task.expected = t["expected"];
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), 1, e.what());
    }
    task.train = read_records(task.train_path);
    if (!task.dev_path.empty()) task.dev = read_records(task.dev_path);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// Writes one record file per split, a manifest pointing at them and a stats
/// report. Output bytes depend only on the corpus.
inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", kManifestFormat}, {"k", corpus.k}, {"tasks", nlohmann::json::array()}};
  nlohmann::json stats{{"format", kStatsFormat}, {"k", corpus.k}, {"seed", corpus.seed}, {"tasks", nlohmann::json::object()}};
  for (const auto& task : corpus.tasks) {
    const std::string train = task.name + ".train.jsonl";
    write_records(dir / train, task.examples);
    nlohmann::json entry{{"name", task.name}, {"prefix", task.prefix}, {"family", task.family}, {"k", task.k}, {"train", train}};
    if (!task.dev.empty()) {
      const std::string dev = task.name + ".dev.jsonl";
      write_records(dir / dev, task.dev);
      entry["dev"] = dev;
    }
    manifest["tasks"].push_back(entry);
    auto s = to_json(task.stats);
    s["train_examples"] = task.examples.size();
    s["dev_examples"] = task.dev.size();
    stats["tasks"][task.name] = s;
  }
  stats["total"] = to_json(corpus.stats());
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream(dir / "stats.json") << stats.dump(2) << '\n';
}

}  // namespace prefixmtl

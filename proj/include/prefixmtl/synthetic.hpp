// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multiple-choice tasks with planted structure.
//
// A topic owns three disjoint word pools: keys, answers and fillers. An
// example's context is one key followed by fillers; its options are answers
// of the same topic and the gold answer is mapping(key). Tasks sharing a
// topic and a mapping are mutually helpful; the same topic under a different
// mapping conflicts; different topics share nothing.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/random.hpp"

namespace prefixmtl::synth {

struct Topic {
  std::string name;
  std::size_t keys = 8;
  std::size_t fillers = 16;

  std::string key(std::size_t i) const { return name + "key" + std::to_string(i); }
  std::string answer(std::size_t i) const { return name + "ans" + std::to_string(i); }
  std::string filler(std::size_t i) const { return name + "f" + std::to_string(i); }
};

enum class LabelRule {
  kMapping,  // gold = mapping(key)
  kRandom,   // gold unrelated to the context: no learnable signal
};

struct TaskSpec {
  std::string name;
  std::string family;
  std::size_t topic = 0;
  std::uint64_t mapping = 0;  // tasks with equal (topic, mapping) agree on every key
  std::size_t train = 100;
  std::size_t dev = 50;
  std::size_t context_fillers = 4;
  std::size_t k = 4;
  LabelRule rule = LabelRule::kMapping;
  /// Copy another task's examples (by index in the spec list) with the label
  /// moved to the other option; requires k = 2. Only the first `train`
  /// training examples are copied when `train` is smaller; dev is copied whole.
  std::optional<std::size_t> opposite_of;
};

/// mapping(key) for one (topic, mapping) pair: a seeded permutation.
inline std::vector<std::size_t> answer_permutation(const Topic& topic, std::uint64_t mapping) {
  std::vector<std::size_t> perm(topic.keys);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng = derive_rng(mapping, {hash_bytes(topic.name), 0x6d6170});
  rng.shuffle(std::span(perm));
  return perm;
}

inline Example make_example(const Topic& topic, const std::vector<std::size_t>& perm, const TaskSpec& spec, Rng& rng) {
  if (spec.k > topic.keys) throw Error(ErrorCode::kInvalidArgument, "k exceeds the topic's answer count");
  const std::size_t key = rng.uniform_index(topic.keys);
  Example ex;
  ex.context = topic.key(key);
  for (std::size_t i = 0; i < spec.context_fillers; ++i) ex.context += " " + topic.filler(rng.uniform_index(topic.fillers));
  const std::size_t gold =
      spec.rule == LabelRule::kMapping ? perm[key] : rng.uniform_index(topic.keys);
  std::vector<std::size_t> others;
  for (std::size_t a = 0; a < topic.keys; ++a)
    if (a != gold) others.push_back(a);
  rng.shuffle(std::span(others));
  std::vector<std::size_t> chosen{gold};
  chosen.insert(chosen.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(spec.k - 1));
  rng.shuffle(std::span(chosen));
  for (std::size_t j = 0; j < chosen.size(); ++j) {
    ex.options.push_back(topic.answer(chosen[j]));
    if (chosen[j] == gold) ex.label = j;
  }
  return ex;
}

/// Builds a normalized corpus; each task's splits draw from streams keyed on
/// (seed, task name, split).
inline Corpus make_corpus(const std::vector<Topic>& topics, const std::vector<TaskSpec>& specs, std::uint64_t seed) {
  Corpus c;
  c.seed = seed;
  c.k = specs.empty() ? 4 : specs.front().k;
  for (const auto& spec : specs) {
    TaskDataset t;
    t.name = spec.name;
    t.prefix = prefix_for(spec.name);
    t.family = spec.family;
    t.k = spec.k;
    if (spec.opposite_of) {
      const auto& src = c.tasks.at(*spec.opposite_of);
      if (spec.k != 2 || src.k != 2) throw Error(ErrorCode::kInvalidArgument, "opposite labels need k = 2");
      for (std::size_t i = 0; i < std::min(spec.train, src.examples.size()); ++i) {
        Example ex = src.examples[i];
        ex.label = 1 - ex.label;
        t.examples.push_back(std::move(ex));
      }
      for (auto ex : src.dev) {
        ex.label = 1 - ex.label;
        t.dev.push_back(std::move(ex));
      }
    } else {
      const auto& topic = topics.at(spec.topic);
      const auto perm = answer_permutation(topic, spec.mapping);
      Rng train_rng = derive_rng(seed, {hash_bytes(spec.name), 0});
      Rng dev_rng = derive_rng(seed, {hash_bytes(spec.name), 1});
      for (std::size_t i = 0; i < spec.train; ++i) t.examples.push_back(make_example(topic, perm, spec, train_rng));
      for (std::size_t i = 0; i < spec.dev; ++i) t.dev.push_back(make_example(topic, perm, spec, dev_rng));
    }
    t.stats.examples = t.examples.size() + t.dev.size();
    t.stats.unchanged = t.stats.examples;
    c.tasks.push_back(std::move(t));
  }
  return c;
}

inline std::vector<Topic> topics(std::size_t n, std::size_t keys = 8, std::size_t fillers = 16) {
  std::vector<Topic> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(Topic{"t" + std::string(1, static_cast<char>('a' + i)), keys, fillers});
  return out;
}

// --- planted benchmarks ----------------------------------------------------------

/// Two tasks with identical inputs and opposite gold labels (k = 2). Every
/// "oppose" input is also an "agree" input; the "oppose" training split
/// reuses the first `oppose_train` of them, dev splits are fully paired.
inline Corpus disambiguation_corpus(std::uint64_t seed, std::size_t train = 240, std::size_t dev = 100,
                                    std::optional<std::size_t> oppose_train = std::nullopt) {
  auto t = topics(1, 6, 8);
  TaskSpec a{.name = "agree", .family = "pair", .topic = 0, .mapping = 1, .train = train, .dev = dev,
             .context_fillers = 2, .k = 2};
  TaskSpec b{.name = "oppose", .family = "pair", .train = oppose_train.value_or(train), .k = 2, .opposite_of = 0};
  return make_corpus(t, {a, b}, seed);
}

/// Six tasks in two families; each family draws from its own topic.
inline Corpus family_corpus(std::uint64_t seed, std::size_t train = 150) {
  auto t = topics(2, 8, 16);
  std::vector<TaskSpec> specs;
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t i = 0; i < 3; ++i) {
      specs.push_back(TaskSpec{.name = std::string(f == 0 ? "alpha" : "beta") + std::to_string(i + 1),
                               .family = f == 0 ? "alpha" : "beta",
                               .topic = f,
                               .mapping = 10 * f + i,
                               .train = train,
                               .dev = 20,
                               .context_fillers = 3 + i});
    }
  }
  return make_corpus(t, specs, seed);
}

struct PlantedTransfer {
  Corpus corpus;
  std::vector<std::string> targets;
  std::vector<std::string> sources;
};

/// Three low-resource targets (one per topic) and six sources (two per
/// topic, sharing the target's mapping). Context lengths are planted so that
/// a target's helpful sources are the ones furthest from it in length.
inline PlantedTransfer planted_transfer(std::uint64_t seed, std::size_t target_train = 24, std::size_t source_train = 160,
                                        std::size_t dev = 80) {
  auto t = topics(3, 8, 16);
  const std::size_t target_len[3] = {1, 11, 6};
  const std::size_t source_len[3][2] = {{11, 12}, {1, 2}, {15, 16}};
  PlantedTransfer out;
  std::vector<TaskSpec> specs;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = "target_" + t[i].name;
    specs.push_back(TaskSpec{.name = name, .family = t[i].name, .topic = i, .mapping = 100 + i, .train = target_train,
                             .dev = dev, .context_fillers = target_len[i]});
    out.targets.push_back(name);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const std::string name = "source_" + t[i].name + std::to_string(j + 1);
      specs.push_back(TaskSpec{.name = name, .family = t[i].name, .topic = i, .mapping = 100 + i,
                               .train = source_train, .dev = 20, .context_fillers = source_len[i][j]});
      out.sources.push_back(name);
    }
  }
  out.corpus = make_corpus(t, specs, seed);
  return out;
}

struct TwinMixture {
  Corpus corpus;
  std::string target;
  std::string twin;
};

/// A low-resource target, its high-resource twin (same topic, mapping and
/// context length) and six unrelated tasks on other topics and lengths.
inline TwinMixture twin_mixture(std::uint64_t seed, std::size_t target_train = 24, std::size_t twin_train = 200,
                                std::size_t other_train = 120, std::size_t dev = 80) {
  auto t = topics(4, 8, 16);
  TwinMixture out{{}, "target", "twin"};
  std::vector<TaskSpec> specs{
      TaskSpec{.name = "target", .family = t[0].name, .topic = 0, .mapping = 7, .train = target_train, .dev = dev,
               .context_fillers = 2},
      TaskSpec{.name = "twin", .family = t[0].name, .topic = 0, .mapping = 7, .train = twin_train, .dev = 20,
               .context_fillers = 2}};
  for (std::size_t i = 1; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      specs.push_back(TaskSpec{.name = "other_" + t[i].name + std::to_string(j + 1), .family = t[i].name, .topic = i,
                               .mapping = 50 + 10 * i + j, .train = other_train, .dev = 20,
                               .context_fillers = 3 + j});
    }
  }
  out.corpus = make_corpus(t, specs, seed);
  return out;
}

}  // namespace prefixmtl::synth

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "prefixmtl/probing.hpp"
#include "prefixmtl/synthetic.hpp"

using namespace prefixmtl;

namespace {

TrainConfig probe_config(std::size_t vocab, std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.epochs = 30;
  c.lr = 3e-3;
  c.encoder = EncoderConfig{.layers = 2, .hidden = 32, .heads = 2, .ffn = 64, .max_len = 16, .vocab_size = vocab, .dropout = 0};
  return c;
}

std::vector<std::string> names(const Corpus& c) {
  std::vector<std::string> out;
  for (const auto& t : c.tasks) out.push_back(t.name);
  return out;
}

// Exact Pearson for integer vectors: every sum is an exact __int128, only the
// final square root and division are rounded.
long double exact_pearson(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  const __int128 n = static_cast<__int128>(a.size());
  __int128 sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    sab += static_cast<__int128>(a[i]) * b[i];
    saa += static_cast<__int128>(a[i]) * a[i];
    sbb += static_cast<__int128>(b[i]) * b[i];
  }
  const __int128 cov = n * sab - sa * sb, va = n * saa - sa * sa, vb = n * sbb - sb * sb;
  return static_cast<long double>(cov) / std::sqrt(static_cast<long double>(va) * static_cast<long double>(vb));
}

TaskDataset task_with(std::string name, std::vector<Example> examples) {
  TaskDataset t;
  t.name = name;
  t.prefix = prefix_for(name);
  t.k = 2;
  t.examples = std::move(examples);
  return t;
}

std::string words(std::size_t n, const std::string& stem = "w") {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + stem + std::to_string(i);
  return s;
}

}  // namespace

TEST(Pearson, KnownValues) {
  const std::vector<double> v{0.3, -1.2, 4.0, 2.5};
  EXPECT_DOUBLE_EQ(pearson(v, v), 1.0);
  EXPECT_DOUBLE_EQ(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}), -1.0);
  // cov 3, norms sqrt(2) and sqrt(42/9): r = 9 / sqrt(84)
  EXPECT_NEAR(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}), 9.0 / std::sqrt(84.0), 1e-15);
  EXPECT_NEAR(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4}), 0.981980506, 1e-9);
}

TEST(Pearson, ConstantInputIsAnErrorNotNan) {
  try {
    pearson(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConstantVector);
  }
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), Error);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST(Pearson, MatchesExactIntegerOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(63);
    std::vector<std::int64_t> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<std::int64_t>(rng.uniform_index(2000001)) - 1000000;
      b[i] = static_cast<std::int64_t>(rng.uniform_index(2000001)) - 1000000;
    }
    if (std::all_of(a.begin(), a.end(), [&](auto x) { return x == a[0]; })) continue;
    if (std::all_of(b.begin(), b.end(), [&](auto x) { return x == b[0]; })) continue;
    std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
    // dyadic scaling is exact in binary floating point and leaves r unchanged
    for (auto& x : da) x /= 1024.0;
    EXPECT_NEAR(pearson(da, db), static_cast<double>(exact_pearson(a, b)), 1e-10) << "trial " << trial;
  }
}

TEST(Pearson, PerVectorAffineMapsKeepOrFlipTheValue) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.uniform_index(30);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    const double alpha = 0.01 + 10 * rng.uniform(), beta = 5 * rng.normal();
    std::vector<double> pos(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = alpha * a[i] + beta;
      neg[i] = -alpha * a[i] + beta;
    }
    const double r = pearson(a, b);
    EXPECT_NEAR(pearson(pos, b), r, 1e-9);
    EXPECT_NEAR(pearson(neg, b), -r, 1e-9);
    EXPECT_DOUBLE_EQ(pearson(a, b), pearson(b, a));
  }
}

TEST(Relationship, MinMaxOverOffDiagonal) {
  Matrix raw{{1, -1, 0}, {-1, 1, 1}, {0, 1, 1}};
  auto n = normalize_off_diagonal(raw, Normalization::kGlobal);
  EXPECT_DOUBLE_EQ(n[0][1], 0.0);
  EXPECT_DOUBLE_EQ(n[0][2], 0.5);
  EXPECT_DOUBLE_EQ(n[1][2], 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(n[i][i], 1.0);
}

TEST(Relationship, SymmetricWithUnitDiagonalOnRandomRows) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(8), h = 2 + rng.uniform_index(40);
    Matrix rows(n, std::vector<double>(h));
    std::vector<std::string> tasks;
    for (std::size_t i = 0; i < n; ++i) {
      tasks.push_back("t" + std::to_string(i));
      for (auto& x : rows[i]) x = rng.normal();
    }
    auto m = relationship_from_rows(tasks, rows);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(m.raw[i][i], 1.0);
      EXPECT_EQ(m.normalized[i][i], 1.0);
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_EQ(m.raw[i][j], m.raw[j][i]);
        EXPECT_EQ(m.normalized[i][j], m.normalized[j][i]);
        EXPECT_GE(m.normalized[i][j], 0.0);
        EXPECT_LE(m.normalized[i][j], 1.0);
      }
    }
  }
}

TEST(Relationship, PerRowModeSpansEachRow) {
  Rng rng(12);
  Matrix rows(5, std::vector<double>(16));
  for (auto& r : rows)
    for (auto& x : r) x = rng.normal();
  auto m = relationship_from_rows({"a", "b", "c", "d", "e"}, rows, Normalization::kPerRow);
  for (std::size_t i = 0; i < 5; ++i) {
    double lo = 2, hi = -1;
    for (std::size_t j = 0; j < 5; ++j)
      if (i != j) {
        lo = std::min(lo, m.normalized[i][j]);
        hi = std::max(hi, m.normalized[i][j]);
      }
    EXPECT_DOUBLE_EQ(lo, 0.0);
    EXPECT_DOUBLE_EQ(hi, 1.0);
  }
}

TEST(Relationship, TwoTasksHaveNoSpreadAndMapToHalf) {
  auto m = relationship_from_rows({"a", "b"}, {{1, 2, 3}, {2, 1, 5}});
  EXPECT_DOUBLE_EQ(m.normalized[0][1], 0.5);
}

TEST(Relationship, MissingPrefixIsReported) {
  auto corpus = synth::family_corpus(1, 4);
  auto vocab = build_vocab(corpus);
  EncoderModel<float> model(probe_config(vocab.size(), 1).encoder, 1);
  try {
    relationship_matrix(model, vocab, {"alpha1", "nonexistent"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingPrefix);
  }
}

TEST(Ranking, AllOthersSortedWithNameTieBreak) {
  RelationshipMatrix m;
  m.tasks = {"t", "d", "b", "c", "a"};
  m.normalized = {{1, 0.2, 0.9, 0.9, 0.2}, {0.2, 1, 0, 0, 0}, {0.9, 0, 1, 0, 0}, {0.9, 0, 0, 1, 0}, {0.2, 0, 0, 0, 1}};
  m.raw = m.normalized;
  EXPECT_EQ(rank_complementary(m, "t", 4), (std::vector<std::string>{"b", "c", "a", "d"}));
  EXPECT_EQ(rank_complementary(m, "t", 1), (std::vector<std::string>{"b"}));
  EXPECT_EQ(rank_complementary(m, "t", 4), rank_complementary(m, "t", 4));
  try {
    rank_complementary(m, "zzz", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownTask);
  }
  EXPECT_THROW(rank_complementary(m, "t", 5), Error);
}

TEST(Baselines, LengthIsNegatedMeanDifference) {
  // content lengths 10,10 vs 14,15: means 10.0 and 14.5
  auto a = task_with("a", {Example{words(8), "", {"x y", "z"}, 0}, Example{words(9), "", {"x", "z"}, 0}});
  auto b = task_with("b", {Example{words(12), "q", {"x", "z"}, 0}, Example{words(13), "", {"x y", "z"}, 0}});
  EXPECT_DOUBLE_EQ(mean_length(a), 10.0);
  EXPECT_DOUBLE_EQ(mean_length(b), 14.5);
  EXPECT_DOUBLE_EQ(baseline_length(a, b), -4.5);
  EXPECT_DOUBLE_EQ(baseline_length(b, a), -4.5);
  EXPECT_DOUBLE_EQ(baseline_length(a, a), 0.0);
}

TEST(Baselines, VocabOverlapIsJaccard) {
  auto abc = task_with("s", {Example{"a b", "", {"c", "a"}, 0}});
  auto bcd = task_with("t", {Example{"b", "c", {"d", "b"}, 0}});
  auto xyz = task_with("u", {Example{"x", "y", {"z", "x"}, 0}});
  EXPECT_DOUBLE_EQ(baseline_vocab(abc, bcd), 0.5);
  EXPECT_DOUBLE_EQ(baseline_vocab(abc, abc), 1.0);
  EXPECT_DOUBLE_EQ(baseline_vocab(abc, xyz), 0.0);
  EXPECT_DOUBLE_EQ(baseline_vocab(bcd, abc), baseline_vocab(abc, bcd));
}

TEST(Baselines, EmptyTaskIsRejected) {
  auto a = task_with("a", {Example{"a", "", {"b", "c"}, 0}});
  auto empty = task_with("e", {});
  for (auto f : {baseline_length, baseline_vocab}) {
    try {
      f(a, empty);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kEmptyTask);
    }
  }
}

TEST(Baselines, MeasureMatricesAgreeWithPairFunctions) {
  auto corpus = synth::family_corpus(3, 20);
  auto len = baseline_measure(corpus, BaselineKind::kLength);
  auto voc = baseline_measure(corpus, BaselineKind::kVocab);
  for (const auto& s : corpus.tasks)
    for (const auto& t : corpus.tasks) {
      EXPECT_DOUBLE_EQ(len.at(t.name, s.name), baseline_length(s, t));
      EXPECT_DOUBLE_EQ(voc.at(t.name, s.name), baseline_vocab(s, t));
      EXPECT_LE(len.at(t.name, s.name), 0.0);
    }
}

TEST(ProbeTraining, SequencesCarryNoOptionText) {
  auto corpus = synth::family_corpus(2, 30);
  auto vocab = build_vocab(corpus);
  const auto seqs = probe_sequences(corpus, vocab, 16);
  std::set<TokenId> option_ids;
  for (const auto& t : corpus.tasks)
    for (const auto& ex : t.examples)
      for (const auto& o : ex.options)
        for (const auto& w : content_tokens(o)) option_ids.insert(vocab.id(w));
  ASSERT_FALSE(option_ids.empty());
  for (std::size_t t = 0; t < seqs.size(); ++t) {
    ASSERT_EQ(seqs[t].size(), corpus.tasks[t].examples.size());
    for (const auto& s : seqs[t]) {
      EXPECT_EQ(s[0], vocab.specials().cls);
      EXPECT_EQ(s[1], vocab.prefix_id(corpus.tasks[t].name));
      for (TokenId id : s) EXPECT_EQ(option_ids.count(id), 0u);
    }
  }
}

TEST(ProbeTraining, LossFallsAndEveryPrefixRowIsLive) {
  auto corpus = synth::family_corpus(4);
  auto vocab = build_vocab(corpus);
  auto cfg = probe_config(vocab.size(), 4);
  EncoderModel<float> init(cfg.encoder, cfg.seed);
  ProbeResult pr;
  auto model = train_probe_model<float>(corpus, vocab, cfg, &pr);
  ASSERT_EQ(pr.epoch_loss.size(), cfg.epochs);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    head += pr.epoch_loss[i];
    tail += pr.epoch_loss[pr.epoch_loss.size() - 1 - i];
  }
  EXPECT_LT(tail, head * 0.75);
  const auto before = prefix_embeddings(init, vocab, names(corpus));
  const auto after = prefix_embeddings(model, vocab, names(corpus));
  for (std::size_t t = 0; t < after.size(); ++t) {
    EXPECT_NE(after[t], before[t]) << corpus.tasks[t].name;
    for (std::size_t u = t + 1; u < after.size(); ++u) EXPECT_NE(after[t], after[u]);
  }
}

TEST(ProbeTraining, DuplicatedTaskRanksFirstForItsTwin) {
  auto corpus = synth::family_corpus(5);
  TaskDataset copy = corpus.tasks[0];
  copy.name = "alpha1_copy";
  copy.prefix = prefix_for(copy.name);
  corpus.tasks.push_back(copy);
  auto vocab = build_vocab(corpus);
  auto model = train_probe_model<float>(corpus, vocab, probe_config(vocab.size(), 5));
  auto m = relationship_matrix(model, vocab, names(corpus));
  EXPECT_EQ(rank_complementary(m, "alpha1", 1).front(), "alpha1_copy");
  EXPECT_EQ(rank_complementary(m, "alpha1_copy", 1).front(), "alpha1");
  // alpha and beta draw from disjoint word pools
  EXPECT_EQ(baseline_vocab(corpus.task("alpha1"), corpus.task("beta1")), 0.0);
  EXPECT_LT(m.score("alpha1", "beta1"), m.score("alpha1", "alpha1_copy"));
}

TEST(ProbeTraining, FamiliesScoreHigherWithinThanAcross) {
  auto corpus = synth::family_corpus(6);
  auto vocab = build_vocab(corpus);
  auto model = train_probe_model<float>(corpus, vocab, probe_config(vocab.size(), 6));
  auto m = relationship_matrix(model, vocab, names(corpus));
  double within = 0, across = 0;
  std::size_t nw = 0, na = 0;
  for (std::size_t i = 0; i < corpus.tasks.size(); ++i)
    for (std::size_t j = 0; j < corpus.tasks.size(); ++j) {
      if (i == j) continue;
      if (corpus.tasks[i].family == corpus.tasks[j].family) {
        within += m.normalized[i][j];
        ++nw;
      } else {
        across += m.normalized[i][j];
        ++na;
      }
    }
  EXPECT_GT(within / static_cast<double>(nw), across / static_cast<double>(na));
}

TEST(ProbeTraining, SameSeedGivesBitwiseIdenticalMatrix) {
  auto corpus = synth::family_corpus(7, 40);
  auto vocab = build_vocab(corpus);
  auto cfg = probe_config(vocab.size(), 7);
  cfg.epochs = 3;
  auto a = relationship_matrix(train_probe_model<float>(corpus, vocab, cfg), vocab, names(corpus));
  auto b = relationship_matrix(train_probe_model<float>(corpus, vocab, cfg), vocab, names(corpus));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Export, CsvJsonTableAndHeatmap) {
  auto m = relationship_from_rows({"a", "b,c", "d"}, {{1, 2, 3, 4}, {2, 1, 4, 3}, {1, 3, 2, 5}});
  const auto csv = matrix_csv(m.tasks, m.normalized);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,a,\"b,c\",d");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  auto back = relationship_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(back.tasks, m.tasks);
  EXPECT_EQ(back.raw, m.raw);
  EXPECT_EQ(back.normalized, m.normalized);
  auto j = to_json(m);
  j["format"] = "prefixmtl.relationship/99";
  try {
    relationship_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnsupportedVersion);
  }

  const auto table = ranked_table(m, 2);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);

  const auto pgm = heatmap_pgm(m.normalized, 4);
  const std::string header = "P5\n12 12\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  EXPECT_EQ(pgm.size(), header.size() + 144);
  EXPECT_EQ(static_cast<unsigned char>(pgm[header.size()]), 255);  // diagonal cell
}

// SPDX-License-Identifier: Apache-2.0
//
// Whitespace/punctuation tokenizer with atomic special and task-prefix tokens.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "prefixmtl/corpus.hpp"
#include "prefixmtl/errors.hpp"
#include "prefixmtl/random.hpp"

namespace prefixmtl {

using TokenId = std::int32_t;

inline constexpr std::string_view kVocabFormat = "prefixmtl-vocab/1";

struct SpecialIds {
  TokenId pad = 0;
  TokenId unk = 1;
  TokenId cls = 2;
  TokenId sep = 3;
  TokenId mask = 4;
};

/// Lowercased words (runs of letters, digits and non-ASCII bytes) and single
/// punctuation characters.
inline std::vector<std::string> split_content(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c >= 0x80) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  enum class Kind : std::uint8_t { kSpecial, kPrefix, kOrdinary };

  Vocabulary() {
    for (auto t : {kPadToken, kUnkToken, kClsToken, kSepToken, kMaskToken}) add(std::string(t), Kind::kSpecial);
  }

  /// Specials first, then task prefixes in corpus order, then content tokens
  /// seen at least `min_count` times ordered by count (descending) and text.
  static Vocabulary build(const Corpus& corpus, std::size_t min_count = 1) {
    if (corpus.total_examples() == 0) throw Error(ErrorCode::kEmptyCorpus, "cannot build a vocabulary from no examples");
    Vocabulary v;
    for (const auto& task : corpus.tasks) v.add_prefix(task.name, task.prefix);
    std::map<std::string, std::size_t> counts;
    auto count_text = [&](std::string_view text) {
      for (auto& t : split_content(text)) ++counts[t];
    };
    for (const auto& task : corpus.tasks) {
      for (const auto& ex : task.examples) {
        count_text(ex.context);
        count_text(ex.question);
        for (const auto& o : ex.options) count_text(o);
      }
    }
    std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [tok, n] : ordered) {
      if (n < min_count) continue;
      if (!v.contains(tok)) v.add(tok, Kind::kOrdinary);
    }
    return v;
  }

  TokenId add_prefix(const std::string& task, const std::string& prefix) {
    if (auto it = token_to_id_.find(prefix); it != token_to_id_.end()) {
      if (kinds_[static_cast<std::size_t>(it->second)] != Kind::kPrefix) {
        throw Error(ErrorCode::kDuplicatePrefix, prefix + " collides with an existing token");
      }
      prefix_ids_[task] = it->second;
      return it->second;
    }
    const TokenId id = add(prefix, Kind::kPrefix);
    prefix_ids_[task] = id;
    return id;
  }

  std::size_t size() const { return id_to_token_.size(); }
  const SpecialIds& specials() const { return specials_; }
  bool contains(std::string_view token) const { return token_to_id_.contains(std::string(token)); }

  /// Id of `token`, or [UNK].
  TokenId id(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? specials_.unk : it->second;
  }
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  Kind kind(TokenId id) const { return kinds_.at(static_cast<std::size_t>(id)); }
  bool is_special(TokenId id) const { return kind(id) == Kind::kSpecial; }
  bool is_prefix(TokenId id) const { return kind(id) == Kind::kPrefix; }

  /// Tokens that encode() keeps whole: specials and prefixes.
  bool is_atomic(std::string_view chunk) const {
    auto it = token_to_id_.find(std::string(chunk));
    return it != token_to_id_.end() && kinds_[static_cast<std::size_t>(it->second)] != Kind::kOrdinary;
  }

  TokenId prefix_id(std::string_view task) const {
    auto it = prefix_ids_.find(std::string(task));
    if (it == prefix_ids_.end()) throw Error(ErrorCode::kMissingPrefix, "no prefix token for task '" + std::string(task) + "'");
    return it->second;
  }
  const std::map<std::string, TokenId>& prefix_ids() const { return prefix_ids_; }

  /// Ids a random replacement may draw from: everything but the specials.
  std::vector<TokenId> replaceable_ids() const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < kinds_.size(); ++i)
      if (kinds_[i] != Kind::kSpecial) out.push_back(static_cast<TokenId>(i));
    return out;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "# " << kVocabFormat << '\n';
    for (std::size_t i = 0; i < id_to_token_.size(); ++i)
      if (kinds_[i] == Kind::kSpecial) os << "# special " << id_to_token_[i] << ' ' << i << '\n';
    for (const auto& [task, id] : prefix_ids_) os << "# prefix " << task << ' ' << token(id) << ' ' << id << '\n';
    os << "# end-header\n";
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
    return os.str();
  }

  std::uint64_t hash() const { return hash_bytes(serialize()); }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
    out << serialize();
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line) || line != "# " + std::string(kVocabFormat)) {
      throw Error(ErrorCode::kUnsupportedVersion, path.string() + ": not a " + std::string(kVocabFormat) + " file");
    }
    std::map<TokenId, Kind> flagged;
    std::map<std::string, TokenId> prefixes;
    while (std::getline(in, line)) {
      ++line_no;
      if (line == "# end-header") break;
      std::istringstream ls(line);
      std::string hash_mark, what;
      ls >> hash_mark >> what;
      if (what == "special") {
        std::string tok;
        TokenId id;
        ls >> tok >> id;
        flagged[id] = Kind::kSpecial;
      } else if (what == "prefix") {
        std::string task, tok;
        TokenId id;
        ls >> task >> tok >> id;
        flagged[id] = Kind::kPrefix;
        prefixes[task] = id;
      } else {
        throw ParseError(path.string(), line_no, "unknown header line");
      }
    }
    Vocabulary v;
    v.token_to_id_.clear();
    v.id_to_token_.clear();
    v.kinds_.clear();
    while (std::getline(in, line)) {
      ++line_no;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ParseError(path.string(), line_no, "expected token<TAB>id");
      const std::string tok = line.substr(0, tab);
      const auto id = static_cast<TokenId>(std::stol(line.substr(tab + 1)));
      if (static_cast<std::size_t>(id) != v.id_to_token_.size() || v.token_to_id_.contains(tok)) {
        throw ParseError(path.string(), line_no, "ids must be dense and tokens unique");
      }
      auto it = flagged.find(id);
      v.add(tok, it == flagged.end() ? Kind::kOrdinary : it->second);
    }
    v.prefix_ids_ = std::move(prefixes);
    v.specials_ = {v.id(kPadToken), v.id(kUnkToken), v.id(kClsToken), v.id(kSepToken), v.id(kMaskToken)};
    return v;
  }

 private:
  TokenId add(std::string token, Kind kind) {
    const auto id = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(std::move(token));
    kinds_.push_back(kind);
    return id;
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<Kind> kinds_;
  std::map<std::string, TokenId> prefix_ids_;
  SpecialIds specials_;
};

inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count = 1) {
  return Vocabulary::build(corpus, min_count);
}

struct EncodedSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t length() const {
    return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), std::uint8_t{1}));
  }
};

/// Token ids of an assembled sequence without padding, at most max_len long.
/// Over-long input loses context tokens first (from the end of the context),
/// then question/option tokens; the closing [SEP] is always kept.
inline std::vector<TokenId> tokenize_ids(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw Error(ErrorCode::kInvalidArgument, "max_len must be at least 3");
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    if (end == pos) break;
    const auto chunk = text.substr(pos, end - pos);
    if (vocab.is_atomic(chunk)) {
      ids.push_back(vocab.id(chunk));
    } else {
      for (const auto& t : split_content(chunk)) ids.push_back(vocab.id(t));
    }
    pos = end;
  }
  if (ids.size() <= max_len) return ids;

  const auto& sp = vocab.specials();
  std::size_t lead = (!ids.empty() && ids[0] == sp.cls) ? 1 : 0;
  if (lead < ids.size() && vocab.is_prefix(ids[lead])) ++lead;
  const auto first_sep = std::find(ids.begin() + static_cast<std::ptrdiff_t>(lead), ids.end(), sp.sep);
  const std::size_t ctx_end = static_cast<std::size_t>(first_sep - ids.begin());
  std::size_t excess = ids.size() - max_len;

  const std::size_t ctx_drop = std::min(excess, ctx_end - lead);
  ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(ctx_end - ctx_drop), ids.begin() + static_cast<std::ptrdiff_t>(ctx_end));
  excess -= ctx_drop;
  if (excess > 0) {
    const bool closed = ids.back() == sp.sep;
    const std::size_t tail_keep = closed ? 1 : 0;
    // drop from just before the closing [SEP], never past the first [SEP]
    const std::size_t body_begin = std::min(ids.size(), ctx_end - ctx_drop + 1);
    const std::size_t body_end = ids.size() - tail_keep;
    const std::size_t body_drop = std::min(excess, body_end > body_begin ? body_end - body_begin : 0);
    ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(body_end - body_drop), ids.begin() + static_cast<std::ptrdiff_t>(body_end));
    excess -= body_drop;
  }
  if (excess > 0) {
    ids.resize(max_len - 1);
    ids.push_back(sp.sep);
  }
  return ids;
}

inline EncodedSequence pad_sequence(std::vector<TokenId> ids, std::size_t max_len, TokenId pad) {
  EncodedSequence s;
  s.attention_mask.assign(max_len, 0);
  std::fill_n(s.attention_mask.begin(), ids.size(), std::uint8_t{1});
  ids.resize(max_len, pad);
  s.ids = std::move(ids);
  return s;
}

inline EncodedSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  return pad_sequence(tokenize_ids(text, vocab, max_len), max_len, vocab.specials().pad);
}

inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == vocab.specials().pad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

/// Content tokens (no specials or prefixes) of a piece of text.
inline std::vector<std::string> content_tokens(std::string_view text) { return split_content(text); }

}  // namespace prefixmtl

// SPDX-License-Identifier: Apache-2.0
//
// Pre-LN transformer encoder with a shared token/prefix embedding table, a
// tied MLM head and a linear option-scoring head on the [CLS] state.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "prefixmtl/errors.hpp"
#include "prefixmtl/numerics/adam.hpp"
#include "prefixmtl/numerics/ops.hpp"
#include "prefixmtl/numerics/tensor.hpp"
#include "prefixmtl/random.hpp"
#include "prefixmtl/tokenizer.hpp"

namespace prefixmtl {

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  double dropout = 0.1;
  double init_std = 0.1;

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ffn == 0 || max_len < 3 || vocab_size == 0) {
      throw Error(ErrorCode::kInvalidArgument, "encoder dimensions must be positive (max_len >= 3)");
    }
    if (hidden % heads != 0) throw Error(ErrorCode::kInvalidArgument, "hidden must be divisible by heads");
    if (!(dropout >= 0 && dropout < 1)) throw Error(ErrorCode::kInvalidArgument, "dropout must be in [0,1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"layers", c.layers}, {"hidden", c.hidden},         {"heads", c.heads},     {"ffn", c.ffn},
          {"max_len", c.max_len}, {"vocab_size", c.vocab_size}, {"dropout", c.dropout}, {"init_std", c.init_std}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

/// Sequences packed row-major as [batch, len]; len is the longest sequence.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  std::size_t rows() const { return batch * len; }

  /// Pads unpadded id sequences to the longest one.
  static TokenBatch pack(const std::vector<std::vector<TokenId>>& seqs, TokenId pad) {
    TokenBatch b;
    b.batch = seqs.size();
    for (const auto& s : seqs) b.len = std::max(b.len, s.size());
    b.ids.assign(b.rows(), pad);
    b.mask.assign(b.rows(), 0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.len));
      std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.len), seqs[i].size(), std::uint8_t{1});
    }
    return b;
  }

  static TokenBatch single(std::span<const TokenId> ids, std::span<const std::uint8_t> mask) {
    if (ids.size() != mask.size()) throw Error(ErrorCode::kShapeMismatch, "ids and mask lengths differ");
    return TokenBatch{1, ids.size(), {ids.begin(), ids.end()}, {mask.begin(), mask.end()}};
  }
};

/// Dropout is active only when `train` is set; every dropout site draws from
/// its own stream keyed on (seed, step, pass, layer, site).
struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t pass = 0;
};

template <typename Real>
struct EncoderLayer {
  Tensor<Real> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename Real>
class EncoderModel {
 public:
  EncoderModel() = default;

  EncoderModel(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t H = cfg.hidden, F = cfg.ffn;
    std::uint64_t index = 0;
    auto normal = [&](Shape shape) {
      Tensor<Real> t(std::move(shape), Real(0), true);
      Rng rng = derive_rng(seed, {0x696e6974, index++});
      for (auto& x : t.values()) x = static_cast<Real>(rng.normal() * cfg_.init_std);
      return t;
    };
    auto constant = [&](Shape shape, Real v) {
      ++index;
      return Tensor<Real>(std::move(shape), v, true);
    };
    tok_emb_ = normal({cfg.vocab_size, H});
    pos_emb_ = normal({cfg.max_len, H});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      EncoderLayer<Real> L;
      L.ln1_g = constant({H}, 1);
      L.ln1_b = constant({H}, 0);
      L.wq = normal({H, H});
      L.bq = constant({H}, 0);
      L.wk = normal({H, H});
      L.bk = constant({H}, 0);
      L.wv = normal({H, H});
      L.bv = constant({H}, 0);
      L.wo = normal({H, H});
      L.bo = constant({H}, 0);
      L.ln2_g = constant({H}, 1);
      L.ln2_b = constant({H}, 0);
      L.w1 = normal({H, F});
      L.b1 = constant({F}, 0);
      L.w2 = normal({F, H});
      L.b2 = constant({H}, 0);
      layers_.push_back(std::move(L));
    }
    lnf_g_ = constant({H}, 1);
    lnf_b_ = constant({H}, 0);
    mlm_bias_ = constant({cfg.vocab_size}, 0);
    score_w_ = normal({H, 1});
    score_b_ = constant({1}, 0);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Parameter handles in declaration order (shared storage, cheap to copy).
  std::vector<Tensor<Real>> parameters() const {
    std::vector<Tensor<Real>> p{tok_emb_, pos_emb_};
    for (const auto& L : layers_) {
      for (const auto* t : {&L.ln1_g, &L.ln1_b, &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo, &L.ln2_g,
                            &L.ln2_b, &L.w1, &L.b1, &L.w2, &L.b2})
        p.push_back(*t);
    }
    for (const auto* t : {&lnf_g_, &lnf_b_, &mlm_bias_, &score_w_, &score_b_}) p.push_back(*t);
    return p;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> n{"tok_emb", "pos_emb"};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      for (const char* s : {"ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
                            "b1", "w2", "b2"})
        n.push_back("layer" + std::to_string(l) + "." + s);
    }
    for (const char* s : {"lnf_g", "lnf_b", "mlm_bias", "score_w", "score_b"}) n.emplace_back(s);
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }

  const Tensor<Real>& embedding_table() const { return tok_emb_; }
  Tensor<Real>& embedding_table() { return tok_emb_; }

  /// Hidden states [batch*len, hidden]; masked-out keys get no attention.
  Tensor<Real> encode(Tape<Real>& tape, const TokenBatch& b, const ForwardOptions& opt = {}) const {
    if (b.len > cfg_.max_len) {
      throw Error(ErrorCode::kLengthExceeded,
                  "sequence length " + std::to_string(b.len) + " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    if (b.ids.size() != b.rows() || b.mask.size() != b.rows()) {
      throw Error(ErrorCode::kShapeMismatch, "token batch buffers do not match batch*len");
    }
    for (TokenId id : b.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw Error(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " outside vocabulary");
      }
    }
    std::vector<TokenId> positions(b.rows());
    for (std::size_t i = 0; i < b.rows(); ++i) positions[i] = static_cast<TokenId>(i % b.len);
    const Real eps = Real(1e-5);
    auto drop = [&](const Tensor<Real>& x, std::uint64_t layer, std::uint64_t site) {
      if (!opt.train || cfg_.dropout == 0) return x;
      Rng rng = derive_rng(opt.seed, {opt.step, opt.pass, layer, site});
      return ops::dropout(tape, x, cfg_.dropout, rng);
    };

    auto x = ops::add(tape, ops::embedding_lookup(tape, tok_emb_, b.ids), ops::embedding_lookup(tape, pos_emb_, positions));
    x = drop(x, 0, 0);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      auto h = ops::layer_norm(tape, x, L.ln1_g, L.ln1_b, 1, eps);
      auto q = ops::add(tape, ops::matmul(tape, h, L.wq), L.bq);
      auto k = ops::add(tape, ops::matmul(tape, h, L.wk), L.bk);
      auto v = ops::add(tape, ops::matmul(tape, h, L.wv), L.bv);
      auto a = ops::attention(tape, q, k, v, b.mask, b.batch, b.len, cfg_.heads);
      a = ops::add(tape, ops::matmul(tape, a, L.wo), L.bo);
      x = ops::add(tape, x, drop(a, l + 1, 1));
      h = ops::layer_norm(tape, x, L.ln2_g, L.ln2_b, 1, eps);
      auto f = ops::gelu(tape, ops::add(tape, ops::matmul(tape, h, L.w1), L.b1));
      f = ops::add(tape, ops::matmul(tape, f, L.w2), L.b2);
      x = ops::add(tape, x, drop(f, l + 1, 2));
    }
    return ops::layer_norm(tape, x, lnf_g_, lnf_b_, 1, eps);
  }

  /// One score per sequence from its [CLS] (first) state: [batch].
  Tensor<Real> scores(Tape<Real>& tape, const Tensor<Real>& hidden, const TokenBatch& b) const {
    std::vector<std::size_t> cls(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) cls[i] = i * b.len;
    auto s = ops::add(tape, ops::matmul(tape, ops::select_rows(tape, hidden, cls), score_w_), score_b_);
    return ops::reshape(tape, s, Shape{b.batch});
  }

  /// Vocabulary logits for the given hidden rows through the tied embedding.
  Tensor<Real> mlm_logits(Tape<Real>& tape, const Tensor<Real>& hidden) const {
    return ops::add(tape, ops::matmul(tape, hidden, tok_emb_, true), mlm_bias_);
  }

  // --- single-sequence conveniences (no gradient) --------------------------

  Tensor<Real> encode(std::span<const TokenId> ids, std::span<const std::uint8_t> mask) const {
    Tape<Real> tape(false);
    return encode(tape, TokenBatch::single(ids, mask));
  }

  Real score_option(std::span<const TokenId> ids, std::span<const std::uint8_t> mask) const {
    Tape<Real> tape(false);
    const auto b = TokenBatch::single(ids, mask);
    return scores(tape, encode(tape, b), b)[0];
  }

  Tensor<Real> mlm_logits(std::span<const TokenId> ids, std::span<const std::uint8_t> mask) const {
    Tape<Real> tape(false);
    return mlm_logits(tape, encode(tape, TokenBatch::single(ids, mask)));
  }

  /// Scores for every option sequence of one example, in one batch.
  std::vector<Real> option_scores(const std::vector<std::vector<TokenId>>& seqs, TokenId pad) const {
    Tape<Real> tape(false);
    const auto b = TokenBatch::pack(seqs, pad);
    const auto s = scores(tape, encode(tape, b), b);
    return {s.data().begin(), s.data().end()};
  }

  std::size_t predict(const std::vector<std::vector<TokenId>>& seqs, TokenId pad) const {
    return argmax_first(option_scores(seqs, pad));
  }

  /// Index of the largest score; ties go to the lowest index.
  template <typename T>
  static std::size_t argmax_first(const std::vector<T>& s) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] > s[best]) best = i;
    return best;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.drop_grad();
  }

  /// Copies parameter values from another model with the same config.
  template <typename Other>
  void copy_from(const EncoderModel<Other>& other) {
    if (!(other.config() == cfg_)) throw Error(ErrorCode::kStateMismatch, "encoder configs differ");
    auto dst = parameters();
    auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i)
      for (std::size_t j = 0; j < dst[i].size(); ++j) dst[i][j] = static_cast<Real>(src[i][j]);
  }

 private:
  EncoderConfig cfg_;
  Tensor<Real> tok_emb_, pos_emb_;
  std::vector<EncoderLayer<Real>> layers_;
  Tensor<Real> lnf_g_, lnf_b_, mlm_bias_, score_w_, score_b_;
};

// --- checkpoints -------------------------------------------------------------
//
// Layout (little-endian):
//   "PMTLCKPT" | u32 version | u64 header bytes | header JSON
//   | per parameter: u64 count, count * real bytes
//   | if header.optimizer: u64 step, then m and v buffers in parameter order
// The header carries the encoder config, vocab hash, real width and
// parameter names; it is the only part that is not raw numbers.

inline constexpr char kCheckpointMagic[8] = {'P', 'M', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  EncoderConfig config;
  std::uint64_t vocab_hash = 0;
  std::size_t real_bytes = 0;
  bool has_optimizer = false;
  nlohmann::json extra;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error(ErrorCode::kIo, "truncated checkpoint: " + what);
  return v;
}

template <typename Real>
void write_values(std::ostream& out, std::span<const Real> values) {
  write_pod<std::uint64_t>(out, values.size());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(Real)));
}

template <typename Real, typename Stored>
void read_values_as(std::istream& in, std::span<Real> dst) {
  const auto n = read_pod<std::uint64_t>(in, "count");
  if (n != dst.size()) throw Error(ErrorCode::kStateMismatch, "checkpoint blob size does not match the model");
  std::vector<Stored> buf(n);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(Stored)))) {
    throw Error(ErrorCode::kIo, "truncated checkpoint blob");
  }
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<Real>(buf[i]);
}

template <typename Real>
void read_values(std::istream& in, std::span<Real> dst, std::size_t stored_bytes) {
  if (stored_bytes == sizeof(float)) {
    read_values_as<Real, float>(in, dst);
  } else if (stored_bytes == sizeof(double)) {
    read_values_as<Real, double>(in, dst);
  } else {
    throw Error(ErrorCode::kUnsupportedVersion, "checkpoint real width " + std::to_string(stored_bytes));
  }
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const EncoderModel<Real>& model, std::uint64_t vocab_hash,
                     const AdamState<Real>* optimizer = nullptr, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header{{"config", to_json(model.config())},
                        {"vocab_hash", vocab_hash},
                        {"real_bytes", sizeof(Real)},
                        {"optimizer", optimizer != nullptr},
                        {"parameters", model.parameter_names()},
                        {"extra", extra}};
  const std::string text = header.dump();
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_pod(out, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.parameters()) detail::write_values<Real>(out, p.data());
    if (optimizer) {
      detail::write_pod<std::uint64_t>(out, optimizer->step);
      for (const auto& m : optimizer->m) detail::write_values<Real>(out, m);
      for (const auto& v : optimizer->v) detail::write_values<Real>(out, v);
    }
    if (!out) throw Error(ErrorCode::kIo, "failed writing " + tmp);
  }
  // rename keeps a previous checkpoint intact if writing is interrupted
  std::filesystem::rename(tmp, path);
}

inline CheckpointHeader read_checkpoint_header(std::istream& in, const std::string& name) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error(ErrorCode::kUnsupportedVersion, name + " is not a checkpoint");
  }
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kUnsupportedVersion, name + ": checkpoint version " + std::to_string(version));
  }
  const auto n = detail::read_pod<std::uint64_t>(in, "header size");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw Error(ErrorCode::kIo, "truncated checkpoint header");
  const auto j = nlohmann::json::parse(text);
  CheckpointHeader h;
  h.config = encoder_config_from_json(j.at("config"));
  h.vocab_hash = j.at("vocab_hash").get<std::uint64_t>();
  h.real_bytes = j.at("real_bytes").get<std::size_t>();
  h.has_optimizer = j.at("optimizer").get<bool>();
  h.extra = j.value("extra", nlohmann::json::object());
  return h;
}

template <typename Real>
struct LoadedCheckpoint {
  EncoderModel<Real> model;
  CheckpointHeader header;
  std::optional<AdamState<Real>> optimizer;
};

/// Loads a checkpoint into a model of precision Real (values are converted
/// if the file was written at the other width).
template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::filesystem::path& path,
                                       std::optional<std::uint64_t> expected_vocab_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  auto header = read_checkpoint_header(in, path.string());
  if (expected_vocab_hash && *expected_vocab_hash != header.vocab_hash) {
    throw Error(ErrorCode::kStateMismatch, path.string() + " was trained with a different vocabulary");
  }
  LoadedCheckpoint<Real> out{EncoderModel<Real>(header.config, 0), header, std::nullopt};
  for (auto& p : out.model.parameters()) detail::read_values<Real>(in, p.data(), header.real_bytes);
  if (header.has_optimizer) {
    auto params = out.model.parameters();
    AdamState<Real> st = AdamState<Real>::for_params(params);
    st.step = detail::read_pod<std::uint64_t>(in, "optimizer step");
    for (auto& m : st.m) detail::read_values<Real>(in, std::span<Real>(m), header.real_bytes);
    for (auto& v : st.v) detail::read_values<Real>(in, std::span<Real>(v), header.real_bytes);
    out.optimizer = std::move(st);
  }
  return out;
}

}  // namespace prefixmtl

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy pre-norm transformer in causal (decoder) or bidirectional (encoder)
// mode, with untied input/output word embeddings, feature extraction, a
// causal-LM pre-training loop and a versioned checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ilab/autodiff.hpp"
#include "ilab/errors.hpp"
#include "ilab/optim.hpp"
#include "ilab/parallel.hpp"
#include "ilab/rng.hpp"
#include "ilab/stream.hpp"
#include "ilab/tensor.hpp"

namespace ilab {

enum class AttentionMode { Causal, Bidirectional };
enum class FeatureMode { LastToken, FirstToken };

struct BackboneConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 200;
  std::size_t max_seq_len = 16;
  AttentionMode attention_mode = AttentionMode::Causal;
  FeatureMode feature_mode = FeatureMode::LastToken;
  std::uint64_t init_seed = 0;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void validate(const BackboneConfig& c) {
  if (!c.n_layers || !c.d_model || !c.n_heads || !c.d_ff || !c.vocab_size || !c.max_seq_len)
    throw ConfigError("backbone: all sizes must be positive");
  if (c.d_model % c.n_heads != 0)
    throw ConfigError("backbone: d_model " + std::to_string(c.d_model) + " is not divisible by n_heads " +
                      std::to_string(c.n_heads));
  if (c.max_seq_len < 2) throw ConfigError("backbone: max_seq_len must be at least 2");
  if (c.vocab_size <= kFirstWordToken) throw ConfigError("backbone: vocabulary has no room for word tokens");
}

/// Closed-form parameter count. Per layer: two layer norms (4d), attention
/// projections with biases (4d^2 + 4d), feed-forward (2 d d_ff + d_ff + d).
inline std::size_t parameter_count(const BackboneConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d + 4 * d * d + 4 * d + 2 * d * f + f + d;
  return 2 * c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
}

/// Right-padded token matrix. Positions at or beyond lengths[b] are padding
/// and are never attended to.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t len = 0;
  std::vector<std::size_t> ids;      // rows * len
  std::vector<std::size_t> lengths;  // per row, >= 1

  /// Pads to the longest sequence. Trailing pad tokens in the input are
  /// treated as padding.
  static TokenBatch from_sequences(const std::vector<const std::vector<std::size_t>*>& seqs) {
    TokenBatch b;
    b.rows = seqs.size();
    for (const auto* s : seqs) {
      std::size_t n = s->size();
      while (n > 0 && (*s)[n - 1] == kPadToken) --n;
      if (n == 0) throw InputError("empty token sequence");
      b.lengths.push_back(n);
      b.len = std::max(b.len, n);
    }
    b.ids.assign(b.rows * b.len, kPadToken);
    for (std::size_t r = 0; r < b.rows; ++r)
      std::copy_n(seqs[r]->begin(), b.lengths[r], b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.len));
    return b;
  }

  static TokenBatch from_sequences(const std::vector<std::vector<std::size_t>>& seqs) {
    std::vector<const std::vector<std::size_t>*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    return from_sequences(ptrs);
  }
};

class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(BackboneConfig config) : config_(config) { validate(config_); }

  const BackboneConfig& config() const { return config_; }
  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  const Tensor& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("backbone has no parameter '" + name + "'");
    return it->second;
  }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  std::uint64_t weight_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : params_) h = hash_tensor(t, h);
    return h;
  }

  void bind(ad::Bindings& b) const {
    for (const auto& [name, t] : params_) b.bind(name, t);
  }

  /// Marks every backbone parameter trainable or frozen in a graph.
  void set_trainable(ad::Graph& g, bool trainable) const {
    for (const auto& [name, t] : params_) g.set_trainable(name, trainable);
  }

  friend bool operator==(const Backbone& a, const Backbone& b) {
    return a.config_ == b.config_ && a.params_ == b.params_;
  }

 private:
  BackboneConfig config_;
  std::map<std::string, Tensor> params_;
  bool frozen_ = false;
};

namespace names {
inline std::string layer(std::size_t l, const char* what) { return "backbone.l" + std::to_string(l) + "." + what; }
inline const std::string tok_emb = "backbone.tok_emb";
inline const std::string out_emb = "backbone.out_emb";
inline const std::string pos_emb = "backbone.pos_emb";
inline const std::string lnf_gain = "backbone.lnf.gain";
inline const std::string lnf_bias = "backbone.lnf.bias";
}  // namespace names

/// Normal initialization: input and positional embeddings N(0, 0.01) so that
/// attention output dominates the residual stream, output embeddings and
/// projections N(0, 1/fan_in),
/// zero biases, unit layer-norm gains.
inline Backbone init_backbone(const BackboneConfig& config) {
  Backbone bb(config);
  Rng rng(derive_seed(config.init_seed, "backbone-init"));
  const std::size_t d = config.d_model, f = config.d_ff;
  auto normal = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = std * rng.normal();
    return t;
  };
  auto& p = bb.params();
  p[names::tok_emb] = normal({config.vocab_size, d}, 0.1);
  p[names::out_emb] = normal({config.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  p[names::pos_emb] = normal({config.max_seq_len, d}, 0.1);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    p[names::layer(l, "ln1.gain")] = Tensor(Shape{d}, 1.0);
    p[names::layer(l, "ln1.bias")] = Tensor(Shape{d}, 0.0);
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) p[names::layer(l, w)] = normal({d, d}, sd);
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) p[names::layer(l, b)] = Tensor(Shape{d}, 0.0);
    p[names::layer(l, "ln2.gain")] = Tensor(Shape{d}, 1.0);
    p[names::layer(l, "ln2.bias")] = Tensor(Shape{d}, 0.0);
    p[names::layer(l, "ff.w1")] = normal({d, f}, sd);
    p[names::layer(l, "ff.b1")] = Tensor(Shape{f}, 0.0);
    p[names::layer(l, "ff.w2")] = normal({f, d}, sf);
    p[names::layer(l, "ff.b2")] = Tensor(Shape{d}, 0.0);
  }
  p[names::lnf_gain] = Tensor(Shape{d}, 1.0);
  p[names::lnf_bias] = Tensor(Shape{d}, 0.0);
  return bb;
}

inline void check_batch(const BackboneConfig& c, const TokenBatch& batch) {
  if (batch.rows == 0) throw InputError("empty batch");
  if (batch.len > c.max_seq_len)
    throw InputError("sequence length " + std::to_string(batch.len) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  for (std::size_t r = 0; r < batch.rows; ++r) {
    if (batch.lengths[r] == 0 || batch.lengths[r] > batch.len) throw InputError("invalid sequence length");
    for (std::size_t p = 0; p < batch.lengths[r]; ++p)
      if (batch.ids[r * batch.len + p] >= c.vocab_size)
        throw InputError("token id " + std::to_string(batch.ids[r * batch.len + p]) + " outside vocabulary of " +
                         std::to_string(c.vocab_size));
  }
}

/// Builds the backbone up to the final layer norm; returns a
/// (rows * len) x d_model node of hidden states.
inline ad::Var build_hidden(ad::Graph& g, const BackboneConfig& c, const TokenBatch& batch) {
  check_batch(c, batch);
  const std::size_t B = batch.rows, L = batch.len, d = c.d_model, H = c.n_heads, dh = d / H;

  // pad positions still need a valid row; their content never reaches a
  // non-pad position
  std::vector<std::size_t> ids(batch.ids);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t p = batch.lengths[r]; p < L; ++p) ids[r * L + p] = kPadToken;
  std::vector<std::size_t> positions(B * L);
  for (std::size_t i = 0; i < B * L; ++i) positions[i] = i % L;

  ad::Var x = g.add(g.embedding(g.parameter(names::tok_emb), ids), g.embedding(g.parameter(names::pos_emb), positions));

  std::vector<std::vector<std::uint8_t>> masks(B, std::vector<std::uint8_t>(L * L, 0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < batch.lengths[b]; ++j)
        masks[b][i * L + j] = (c.attention_mode == AttentionMode::Bidirectional || j <= i) ? 1 : 0;

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto P = [&](const char* what) { return g.parameter(names::layer(l, what)); };
    ad::Var h = g.layer_norm(x, P("ln1.gain"), P("ln1.bias"));
    ad::Var q = g.add_row(g.matmul(h, P("attn.wq")), P("attn.bq"));
    ad::Var k = g.add_row(g.matmul(h, P("attn.wk")), P("attn.bk"));
    ad::Var v = g.add_row(g.matmul(h, P("attn.wv")), P("attn.bv"));
    std::vector<ad::Var> seq_out;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<ad::Var> head_out;
      for (std::size_t hh = 0; hh < H; ++hh) {
        ad::Var qs = g.slice(q, b * L, L, hh * dh, dh);
        ad::Var ks = g.slice(k, b * L, L, hh * dh, dh);
        ad::Var vs = g.slice(v, b * L, L, hh * dh, dh);
        ad::Var att = g.masked_softmax(g.scale(g.matmul_nt(qs, ks), inv_sqrt_dh), masks[b]);
        head_out.push_back(g.matmul(att, vs));
      }
      seq_out.push_back(H == 1 ? head_out[0] : g.concat_cols(head_out));
    }
    ad::Var o = B == 1 ? seq_out[0] : g.concat_rows(seq_out);
    x = g.add(x, g.add_row(g.matmul(o, P("attn.wo")), P("attn.bo")));

    ad::Var h2 = g.layer_norm(x, P("ln2.gain"), P("ln2.bias"));
    ad::Var ff = g.gelu(g.add_row(g.matmul(h2, P("ff.w1")), P("ff.b1")));
    x = g.add(x, g.add_row(g.matmul(ff, P("ff.w2")), P("ff.b2")));
  }
  return g.layer_norm(x, g.parameter(names::lnf_gain), g.parameter(names::lnf_bias));
}

/// Row index of each sequence's feature position inside the hidden matrix.
inline std::vector<std::size_t> feature_rows(const BackboneConfig& c, const TokenBatch& batch) {
  std::vector<std::size_t> rows(batch.rows);
  for (std::size_t b = 0; b < batch.rows; ++b)
    rows[b] = b * batch.len + (c.feature_mode == FeatureMode::LastToken ? batch.lengths[b] - 1 : 0);
  return rows;
}

/// batch x d_model feature node.
inline ad::Var build_features(ad::Graph& g, const BackboneConfig& c, const TokenBatch& batch) {
  return g.gather_rows(build_hidden(g, c, batch), feature_rows(c, batch));
}

inline Tensor extract_features(const Backbone& bb, const TokenBatch& batch) {
  ad::Graph g;
  ad::Var f = build_features(g, bb.config(), batch);
  ad::Bindings b;
  bb.bind(b);
  g.forward(b);
  return g.value(f);
}

/// Features for many examples, computed in fixed-size chunks (optionally in
/// parallel). Row i belongs to examples[i].
inline Tensor extract_features(const Backbone& bb, const std::vector<const LabeledExample*>& examples,
                               std::size_t chunk = 64) {
  if (examples.empty()) throw InputError("no examples to extract features from");
  const std::size_t d = bb.config().d_model;
  Tensor out(Shape{examples.size(), d});
  const std::size_t n_chunks = (examples.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](std::size_t ci) {
    const std::size_t lo = ci * chunk, hi = std::min(examples.size(), lo + chunk);
    std::vector<const std::vector<std::size_t>*> seqs;
    for (std::size_t i = lo; i < hi; ++i) seqs.push_back(&examples[i]->tokens);
    const Tensor f = extract_features(bb, TokenBatch::from_sequences(seqs));
    std::copy_n(f.data(), f.size(), out.data() + lo * d);
  });
  return out;
}

/// Hidden states times output word embeddings; shape rows x len x vocab.
inline Tensor lm_logits(const Backbone& bb, const TokenBatch& batch) {
  if (bb.config().attention_mode != AttentionMode::Causal)
    throw ContractError("lm_logits requires a causal backbone");
  ad::Graph g;
  ad::Var logits = g.matmul_nt(build_hidden(g, bb.config(), batch), g.parameter(names::out_emb));
  ad::Bindings b;
  bb.bind(b);
  g.forward(b);
  return Tensor(Shape{batch.rows, batch.len, bb.config().vocab_size}, g.value(logits).values());
}

/// Mean next-token cross-entropy node over all non-pad positions that have a
/// successor.
inline ad::Var build_clm_loss(ad::Graph& g, const BackboneConfig& c, const TokenBatch& batch) {
  std::vector<std::size_t> rows, targets;
  for (std::size_t b = 0; b < batch.rows; ++b)
    for (std::size_t p = 0; p + 1 < batch.lengths[b]; ++p) {
      rows.push_back(b * batch.len + p);
      targets.push_back(batch.ids[b * batch.len + p + 1]);
    }
  if (rows.empty()) throw InputError("causal LM loss needs sequences of length >= 2");
  ad::Var h = g.gather_rows(build_hidden(g, c, batch), rows);
  return g.cross_entropy(g.matmul_nt(h, g.parameter(names::out_emb)), targets);
}

// ---- pre-training ----------------------------------------------------------

struct Checkpoint {
  std::uint64_t step = 0;
  Backbone backbone;
};

struct PretrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

/// Sequences from a seeded first-order Markov source over word tokens. Each
/// token has `branching` successors with random weights.
inline std::vector<std::vector<std::size_t>> markov_corpus(std::size_t vocab_size, std::size_t n_sequences,
                                                           std::size_t words_per_sequence, std::size_t branching,
                                                           std::uint64_t seed) {
  if (vocab_size <= kFirstWordToken || branching == 0 || words_per_sequence == 0)
    throw ConfigError("markov corpus: invalid sizes");
  Rng rng(derive_seed(seed, "markov-corpus"));
  const std::size_t n_words = vocab_size - kFirstWordToken;
  std::vector<std::vector<std::size_t>> succ(n_words);
  std::vector<std::vector<double>> cum(n_words);
  for (std::size_t w = 0; w < n_words; ++w) {
    double acc = 0.0;
    for (std::size_t k = 0; k < branching; ++k) {
      succ[w].push_back(rng.index(n_words));
      cum[w].push_back(acc += 0.1 + rng.uniform());
    }
  }
  std::vector<std::vector<std::size_t>> corpus;
  for (std::size_t s = 0; s < n_sequences; ++s) {
    std::vector<std::size_t> seq{kClsToken};
    std::size_t w = rng.index(n_words);
    for (std::size_t i = 0; i < words_per_sequence; ++i) {
      seq.push_back(kFirstWordToken + w);
      w = succ[w][rng.categorical(cum[w])];
    }
    seq.push_back(kEosToken);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

struct PretrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> losses;  // loss of each step's batch, before its update
};

/// Causal-LM training with AdamW. A checkpoint is taken after exactly s
/// updates for every s in the schedule (s = 0 is the initialization).
inline PretrainResult pretrain_clm(Backbone& bb, const std::vector<std::vector<std::size_t>>& corpus,
                                   std::size_t total_steps, const std::vector<std::size_t>& schedule,
                                   const PretrainConfig& opt) {
  if (bb.config().attention_mode != AttentionMode::Causal)
    throw ConfigError("pretrain_clm requires a causal backbone");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] > total_steps)
      throw ConfigError("checkpoint step " + std::to_string(schedule[i]) + " is beyond total_steps " +
                        std::to_string(total_steps));
    if (i > 0 && schedule[i] <= schedule[i - 1]) throw ConfigError("checkpoint schedule must be strictly increasing");
  }
  if (corpus.empty() && total_steps > 0) throw ConfigError("pretrain_clm: empty corpus");
  if (opt.batch_size == 0) throw ConfigError("pretrain_clm: batch_size must be positive");

  PretrainResult result;
  std::size_t next = 0;
  auto snapshot = [&](std::size_t step) {
    while (next < schedule.size() && schedule[next] == step) {
      result.checkpoints.push_back({step, bb});
      ++next;
    }
  };
  snapshot(0);
  Rng rng(derive_seed(opt.seed, "pretrain-batches"));
  AdamW adam;
  for (std::size_t step = 1; step <= total_steps; ++step) {
    std::vector<const std::vector<std::size_t>*> seqs;
    for (std::size_t i = 0; i < opt.batch_size; ++i) seqs.push_back(&corpus[rng.index(corpus.size())]);
    const TokenBatch batch = TokenBatch::from_sequences(seqs);
    ad::Graph g;
    ad::Var loss = build_clm_loss(g, bb.config(), batch);
    ad::Bindings b;
    bb.bind(b);
    g.forward(b);
    result.losses.push_back(g.value(loss)[0]);
    const ad::Gradients grads = g.backward(loss);
    if (!bb.frozen())
      for (auto& [name, t] : bb.params())
        if (auto it = grads.find(name); it != grads.end()) adam.step(name, t, it->second, opt.learning_rate, opt.weight_decay);
    snapshot(step);
  }
  return result;
}

// ---- checkpoint files ------------------------------------------------------
//
// Little-endian binary, version 1:
//   "ILABCKPT" | u32 version | u64 step
//   u64 n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len
//   u8 attention_mode (0 causal, 1 bidirectional) | u8 feature_mode (0 last, 1 first)
//   u64 init_seed | u32 array count
//   per array: u32 name length | name | u32 rank | u64 dims[rank] | f64 values

inline constexpr char kCheckpointMagic[8] = {'I', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {
template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated checkpoint");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path + "'");
  const BackboneConfig& c = ck.backbone.config();
  os.write(kCheckpointMagic, 8);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, ck.step);
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len})
    detail::put<std::uint64_t>(os, v);
  detail::put<std::uint8_t>(os, c.attention_mode == AttentionMode::Causal ? 0 : 1);
  detail::put<std::uint8_t>(os, c.feature_mode == FeatureMode::LastToken ? 0 : 1);
  detail::put<std::uint64_t>(os, c.init_seed);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.backbone.params().size()));
  for (const auto& [name, t] : ck.backbone.params()) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) detail::put<std::uint64_t>(os, dim);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.step = detail::get<std::uint64_t>(is);
  BackboneConfig c;
  c.n_layers = detail::get<std::uint64_t>(is);
  c.d_model = detail::get<std::uint64_t>(is);
  c.n_heads = detail::get<std::uint64_t>(is);
  c.d_ff = detail::get<std::uint64_t>(is);
  c.vocab_size = detail::get<std::uint64_t>(is);
  c.max_seq_len = detail::get<std::uint64_t>(is);
  c.attention_mode = detail::get<std::uint8_t>(is) == 0 ? AttentionMode::Causal : AttentionMode::Bidirectional;
  c.feature_mode = detail::get<std::uint8_t>(is) == 0 ? FeatureMode::LastToken : FeatureMode::FirstToken;
  c.init_seed = detail::get<std::uint64_t>(is);
  Backbone bb(c);
  const auto n = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(detail::get<std::uint32_t>(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("truncated checkpoint");
    Shape shape(detail::get<std::uint32_t>(is));
    for (auto& dim : shape) dim = detail::get<std::uint64_t>(is);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw IoError("truncated checkpoint");
    bb.params().emplace(std::move(name), std::move(t));
  }
  if (bb.num_parameters() != parameter_count(c)) throw IoError("checkpoint parameter count does not match its config");
  ck.backbone = std::move(bb);
  return ck;
}

}  // namespace ilab

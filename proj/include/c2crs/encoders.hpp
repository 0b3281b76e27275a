#pragma once

// Context encoders: a Transformer over the flattened conversation, an R-GCN
// over the knowledge graph and a sentence-level review encoder, each with a
// self-attentive pooling head producing one vector per view.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "c2crs/autograd.hpp"
#include "c2crs/corpus.hpp"
#include "c2crs/parameters.hpp"

namespace c2crs {

struct ModelConfig {
  int d_conv = 300;  // conversation, review and decoder width
  int d_rec = 128;   // knowledge-graph and recommender width
  int d_cl = 128;    // shared space for contrastive comparisons
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int n_heads = 2;
  int ffn_width = 300;
  int n_rgcn_layers = 1;
  double rgcn_norm = 1.0;  // Z
  double temperature = 0.07;
  double coarse_weight = 0.2;      // lambda
  double weight_threshold = 100.0;  // beta
  double weight_floor = 0.1;       // gamma
  int max_context_len = 256;
  int max_response_len = 30;
  int max_review_sentences = 8;
  int max_sentence_len = 32;
  bool use_conversation_view = true;
  bool use_kg_view = true;
  bool use_review_view = true;
  bool literal_infonce = false;
  bool symmetric = false;
  bool exclude_same_conversation = true;

  void validate() const {
    if (d_conv <= 0 || d_rec <= 0 || d_cl <= 0 || ffn_width <= 0) throw Error("model widths must be positive");
    if (n_heads <= 0 || d_conv % n_heads != 0) throw Error("d_conv must be divisible by n_heads");
    if (n_enc_layers < 1 || n_dec_layers < 1 || n_rgcn_layers < 1) throw Error("layer counts must be >= 1");
    if (!(rgcn_norm > 0)) throw Error("rgcn_norm must be positive");
    if (!(temperature > 0)) throw Error("temperature must be positive");
    if (coarse_weight < 0) throw Error("coarse_weight must be non-negative");
    if (!(weight_floor > 0 && weight_floor <= 1)) throw Error("weight_floor must lie in (0, 1]");
    if (weight_threshold < 1) throw Error("weight_threshold must be >= 1");
    if (max_context_len < 1 || max_response_len < 1 || max_review_sentences < 1 || max_sentence_len < 1)
      throw Error("length limits must be positive");
  }
};

/// Sizes a model needs from the corpus it is trained on.
struct CorpusShape {
  int vocab_size = 0;
  int n_entities = 0;
  int n_relations = 0;
  int n_items = 0;
  bool operator==(const CorpusShape&) const = default;
};

namespace nn {

template <typename T>
using Var = ad::Var<T>;
template <typename T>
using Tape = ad::Tape<T>;

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true) {
    weight = ps.glorot(name + ".weight", out, in, rng);
    // A nonzero bias keeps projections of all-zero inputs (dead ReLU nodes)
    // away from the origin, where cosine similarity is undefined.
    if (with_bias) bias = ps.uniform(name + ".bias", out, 1, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> y = ad::matmul(t.param(*weight), x);
    return bias ? ad::add_bias(y, t.param(*bias)) : y;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int d) {
    gain = ps.ones(name + ".gain", d, 1);
    bias = ps.zeros(name + ".bias", d, 1);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return ad::layer_norm_cols(x, t.param(*gain), t.param(*bias)); }
};

template <typename T>
struct FeedForward {
  Linear<T> in, out;

  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, const std::string& name, int d, int hidden, Rng& rng)
      : in(ps, name + ".in", d, hidden, rng), out(ps, name + ".out", hidden, d, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return out(t, ad::relu(in(t, x))); }
};

/// Key mask: 1 keeps a memory column, 0 hides it. Empty means keep all.
using KeyMask = std::vector<std::uint8_t>;

template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, int d, int n_heads, Rng& rng)
      : q(ps, name + ".q", d, d, rng),
        k(ps, name + ".k", d, d, rng),
        v(ps, name + ".v", d, d, rng),
        o(ps, name + ".o", d, d, rng),
        heads(n_heads) {}

  /// queries: d x m_q, memory: d x m_k. With `causal`, query i only sees
  /// memory columns <= i.
  Var<T> operator()(Tape<T>& t, Var<T> queries, Var<T> memory, const KeyMask& key_mask = {},
                    bool causal = false) const {
    const Eigen::Index d = queries.rows();
    if (memory.rows() != d) throw Error("attention width mismatch");
    const Eigen::Index mq = queries.cols(), mk = memory.cols();
    const Eigen::Index dh = d / heads;
    Var<T> Q = q(t, queries), K = k(t, memory), V = v(t, memory);

    std::optional<Matrix<T>> mask;
    if (!key_mask.empty() || causal) {
      if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != mk) throw Error("key mask length mismatch");
      mask = Matrix<T>::Zero(mk, mq);
      for (Eigen::Index j = 0; j < mq; ++j)
        for (Eigen::Index i = 0; i < mk; ++i)
          if ((!key_mask.empty() && !key_mask[i]) || (causal && i > j))
            (*mask)(i, j) = -std::numeric_limits<T>::infinity();
    }
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    for (int h = 0; h < heads; ++h) {
      Var<T> Qh = ad::slice_rows(Q, h * dh, dh);
      Var<T> Kh = ad::slice_rows(K, h * dh, dh);
      Var<T> Vh = ad::slice_rows(V, h * dh, dh);
      Var<T> scores = ad::scale(ad::matmul(ad::transpose(Kh), Qh), inv_sqrt);
      if (mask) scores = ad::add_const(scores, *mask);
      outs.push_back(ad::matmul(Vh, ad::softmax_cols(scores)));
    }
    return o(t, heads == 1 ? outs.front() : ad::concat_rows(outs));
  }
};

/// Fixed sinusoidal position codes, one column per position.
template <typename T>
Matrix<T> sinusoid_positions(Eigen::Index d, Eigen::Index m) {
  Matrix<T> pe(d, m);
  for (Eigen::Index pos = 0; pos < m; ++pos) {
    for (Eigen::Index i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / rate;
      pe(i, pos) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> attention;
  LayerNorm<T> norm1, norm2;
  FeedForward<T> ffn;

  EncoderLayer() = default;
  EncoderLayer(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, int d, Rng& rng)
      : attention(ps, name + ".attn", d, cfg.n_heads, rng),
        norm1(ps, name + ".norm1", d),
        norm2(ps, name + ".norm2", d),
        ffn(ps, name + ".ffn", d, cfg.ffn_width, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> x, const KeyMask& mask) const {
    x = norm1(t, ad::add(x, attention(t, x, x, mask)));
    return norm2(t, ad::add(x, ffn(t, x)));
  }
};

/// Token embeddings scaled by sqrt(d) plus sinusoidal positions.
template <typename T>
struct TokenEmbedding {
  Parameter<T>* table = nullptr;
  int width = 0;

  TokenEmbedding() = default;
  TokenEmbedding(ParamStore<T>& ps, const std::string& name, int vocab, int d, Rng& rng) : width(d) {
    table = ps.normal(name, d, vocab, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  }

  Var<T> operator()(Tape<T>& t, std::span<const TokenId> ids) const {
    Var<T> e = ad::scale(t.embedding(*table, ids), static_cast<T>(std::sqrt(static_cast<double>(width))));
    return ad::add_const(e, sinusoid_positions<T>(width, static_cast<Eigen::Index>(ids.size())));
  }
};

/// Standard post-norm Transformer encoder; returns the top-layer token
/// representations F (d x m).
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, int vocab, int d, Rng& rng)
      : embed_(ps, name + ".embedding", vocab, d, rng) {
    for (int l = 0; l < cfg.n_enc_layers; ++l) layers_.emplace_back(ps, name + ".layer" + std::to_string(l), cfg, d, rng);
  }

  Var<T> operator()(Tape<T>& t, std::span<const TokenId> ids, const KeyMask& mask = {}) const {
    if (ids.empty()) throw Error("transformer_encode: empty input");
    if (!mask.empty() && std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; }))
      throw Error("transformer_encode: every position is masked");
    Var<T> x = embed_(t, ids);
    for (const auto& layer : layers_) x = layer(t, x, mask);
    return x;
  }

 private:
  TokenEmbedding<T> embed_;
  std::vector<EncoderLayer<T>> layers_;
};

template <typename T>
struct Pooled {
  Var<T> vector;
  Vector<T> weights;
};

/// M . softmax(b^T tanh(W M)): a convex combination of the columns of M.
template <typename T>
class SelfAttentivePool {
 public:
  SelfAttentivePool() = default;
  SelfAttentivePool(ParamStore<T>& ps, const std::string& name, int d, Rng& rng) {
    weight_ = ps.glorot(name + ".weight", d, d, rng);
    query_ = ps.glorot(name + ".query", d, 1, rng);
  }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>& query() { return *query_; }

  Pooled<T> operator()(Tape<T>& t, Var<T> m) const {
    if (m.cols() < 1) throw Error("self_attentive_pool: no columns");
    Var<T> hidden = ad::tanh(ad::matmul(t.param(*weight_), m));
    Var<T> scores = ad::matmul(ad::transpose(hidden), t.param(*query_));  // m x 1
    Var<T> attn = ad::softmax_cols(scores);
    return {ad::matmul(m, attn), attn.value().col(0)};
  }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* query_ = nullptr;
};

/// Reference implementation of the pooling formula on plain matrices.
template <typename T>
Vector<T> self_attentive_pool(const Matrix<T>& m, const Matrix<T>& w_sa, const Vector<T>& b) {
  Tape<T> t(false);
  Parameter<T> w{"w", w_sa}, q{"b", b};
  Var<T> hidden = ad::tanh(ad::matmul(t.param(w), t.constant(m)));
  Var<T> attn = ad::softmax_cols(ad::matmul(ad::transpose(hidden), t.param(q)));
  return m * attn.value().col(0);
}

/// One R-GCN layer with an inverse relation added for every relation:
/// n_e' = relu( sum_r sum_{e' : <e', r, e>} W_r n_e' / Z + W n_e ).
template <typename T>
class RgcnLayer {
 public:
  /// Called once for every triple visited during a forward pass.
  using TripleHook = std::function<void(const Triple&)>;

  RgcnLayer() = default;
  RgcnLayer(ParamStore<T>& ps, const std::string& name, int d, int n_relations, Rng& rng) {
    self_ = ps.glorot(name + ".self", d, d, rng);
    for (int r = 0; r < 2 * n_relations; ++r) relation_.push_back(ps.glorot(name + ".rel" + std::to_string(r), d, d, rng));
  }

  Parameter<T>& self_weight() { return *self_; }
  Parameter<T>& relation_weight(int r) { return *relation_.at(static_cast<std::size_t>(r)); }
  int relation_slots() const { return static_cast<int>(relation_.size()); }

  Var<T> operator()(Tape<T>& t, Var<T> nodes, const KnowledgeGraph& kg, T z, const TripleHook& hook = {}) const {
    if (nodes.cols() != kg.n_entities()) throw Error("rgcn: node matrix does not cover every entity");
    if (2 * kg.n_relations() != static_cast<int>(relation_.size())) throw Error("rgcn: relation count mismatch");
    const int n_rel = kg.n_relations();
    std::vector<std::vector<int>> src(relation_.size()), dst(relation_.size());
    for (const Triple& tr : kg.triples()) {
      if (hook) hook(tr);
      src[tr.relation].push_back(tr.head);
      dst[tr.relation].push_back(tr.tail);
      src[tr.relation + n_rel].push_back(tr.tail);
      dst[tr.relation + n_rel].push_back(tr.head);
    }
    Var<T> acc = ad::matmul(t.param(*self_), nodes);
    for (std::size_t r = 0; r < relation_.size(); ++r) {
      if (src[r].empty()) continue;
      Var<T> messages = ad::matmul(t.param(*relation_[r]), nodes);
      acc = ad::add(acc, ad::scatter_add_cols(messages, std::move(src[r]), std::move(dst[r]), nodes.cols(), T(1) / z));
    }
    return ad::relu(acc);
  }

 private:
  Parameter<T>* self_ = nullptr;
  std::vector<Parameter<T>*> relation_;
};

}  // namespace nn

/// Conversation-history encoder: F = Transformer(s_1:n), e_C = pool(F).
template <typename T>
class ConversationEncoder {
 public:
  ConversationEncoder() = default;
  ConversationEncoder(ParamStore<T>& ps, const ModelConfig& cfg, const CorpusShape& shape, Rng& rng)
      : transformer_(ps, "encoder.conv.transformer", cfg, shape.vocab_size, cfg.d_conv, rng),
        pool_(ps, "encoder.conv.pool", cfg.d_conv, rng) {}

  ad::Var<T> encode(ad::Tape<T>& t, std::span<const TokenId> ids, const nn::KeyMask& mask = {}) const {
    return transformer_(t, ids, mask);
  }

  nn::Pooled<T> pool(ad::Tape<T>& t, ad::Var<T> tokens) const { return pool_(t, tokens); }

 private:
  nn::TransformerEncoder<T> transformer_;
  nn::SelfAttentivePool<T> pool_;
};

/// Graph-view output; `cold` marks the learned default used for an empty
/// entity context.
template <typename T>
struct ViewVector {
  ad::Var<T> vector;
  Vector<T> weights;
  bool cold = false;
};

template <typename T>
class GraphEncoder {
 public:
  GraphEncoder() = default;
  GraphEncoder(ParamStore<T>& ps, const ModelConfig& cfg, const CorpusShape& shape, Rng& rng)
      : z_(static_cast<T>(cfg.rgcn_norm)), pool_(ps, "encoder.rgcn.pool", cfg.d_rec, rng) {
    entities_ = ps.normal("encoder.rgcn.entity_embedding", cfg.d_rec, shape.n_entities,
                          1.0 / std::sqrt(static_cast<double>(cfg.d_rec)), rng);
    for (int l = 0; l < cfg.n_rgcn_layers; ++l)
      layers_.emplace_back(ps, "encoder.rgcn.layer" + std::to_string(l), cfg.d_rec, shape.n_relations, rng);
    cold_ = ps.normal("encoder.rgcn.cold_default", cfg.d_rec, 1, 0.1, rng);
  }

  /// Node representation matrix N (d_rec x |entities|) from the top layer.
  ad::Var<T> nodes(ad::Tape<T>& t, const KnowledgeGraph& kg, const typename nn::RgcnLayer<T>::TripleHook& hook = {}) const {
    ad::Var<T> x = t.param(*entities_);
    for (const auto& layer : layers_) x = layer(t, x, kg, z_, hook);
    return x;
  }

  /// e_G = pool(N[:, entities]); the learned default when `entities` is empty.
  ViewVector<T> view(ad::Tape<T>& t, ad::Var<T> nodes, const std::vector<EntityId>& entities) const {
    if (entities.empty()) return {t.param(*cold_), Vector<T>(), true};
    auto pooled = pool_(t, ad::gather_cols(nodes, std::vector<int>(entities.begin(), entities.end())));
    return {pooled.vector, pooled.weights, false};
  }

  ad::Var<T> cold_default(ad::Tape<T>& t) const { return t.param(*cold_); }

 private:
  T z_ = T(1);
  Parameter<T>* entities_ = nullptr;
  std::vector<nn::RgcnLayer<T>> layers_;
  nn::SelfAttentivePool<T> pool_;
  Parameter<T>* cold_ = nullptr;
};

/// Review encoder with its own Transformer: each sentence is token-pooled
/// into one column of E, and E is pooled again into e_R.
template <typename T>
class ReviewEncoder {
 public:
  ReviewEncoder() = default;
  ReviewEncoder(ParamStore<T>& ps, const ModelConfig& cfg, const CorpusShape& shape, Rng& rng)
      : max_len_(static_cast<std::size_t>(cfg.max_sentence_len)),
        transformer_(ps, "encoder.review.transformer", cfg, shape.vocab_size, cfg.d_conv, rng),
        token_pool_(ps, "encoder.review.token_pool", cfg.d_conv, rng),
        sentence_pool_(ps, "encoder.review.sentence_pool", cfg.d_conv, rng) {
    cold_ = ps.normal("encoder.review.cold_default", cfg.d_conv, 1, 0.1, rng);
  }

  /// One sentence vector (d_conv x 1).
  ad::Var<T> sentence(ad::Tape<T>& t, std::span<const TokenId> ids) const {
    if (ids.size() > max_len_) ids = ids.first(max_len_);
    return token_pool_(t, transformer_(t, ids)).vector;
  }

  /// E with one column per sentence.
  ad::Var<T> sentences(ad::Tape<T>& t, const std::vector<std::span<const TokenId>>& sents) const {
    std::vector<ad::Var<T>> cols;
    for (const auto& s : sents) cols.push_back(sentence(t, s));
    return ad::concat_cols(cols);
  }

  /// e_R over the columns of E; the learned default when E is absent.
  ViewVector<T> view(ad::Tape<T>& t, std::optional<ad::Var<T>> sentence_matrix) const {
    if (!sentence_matrix || sentence_matrix->cols() == 0) return {t.param(*cold_), Vector<T>(), true};
    auto pooled = sentence_pool_(t, *sentence_matrix);
    return {pooled.vector, pooled.weights, false};
  }

  ad::Var<T> cold_default(ad::Tape<T>& t) const { return t.param(*cold_); }

 private:
  std::size_t max_len_ = 32;
  nn::TransformerEncoder<T> transformer_;
  nn::SelfAttentivePool<T> token_pool_;
  nn::SelfAttentivePool<T> sentence_pool_;
  Parameter<T>* cold_ = nullptr;
};

}  // namespace c2crs

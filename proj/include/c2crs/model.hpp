#pragma once

#include <map>
#include <optional>

#include "c2crs/contrastive.hpp"
#include "c2crs/encoders.hpp"
#include "c2crs/generator.hpp"
#include "c2crs/recommender.hpp"

namespace c2crs {

enum class View { kConversation, kGraph, kReview };

/// All parameters of the conversational recommender. Parameter names are
/// grouped by prefix: encoder.conv.*, encoder.rgcn.*, encoder.review.*,
/// contrastive.*, rec.*, decoder.*.
template <typename T>
class C2crsModel {
 public:
  C2crsModel(const ModelConfig& cfg, const CorpusShape& shape, std::uint64_t seed) : config_(cfg), shape_(shape) {
    cfg.validate();
    if (shape.vocab_size < Vocabulary::kSpecialCount || shape.n_entities < 1 || shape.n_items < 1)
      throw Error("model: corpus shape is empty");
    Rng rng(seed);
    conversation_ = ConversationEncoder<T>(params_, cfg, shape, rng);
    graph_ = GraphEncoder<T>(params_, cfg, shape, rng);
    reviews_ = ReviewEncoder<T>(params_, cfg, shape, rng);
    proj_conv_ = nn::Linear<T>(params_, "contrastive.proj.conv", cfg.d_conv, cfg.d_cl, rng);
    proj_graph_ = nn::Linear<T>(params_, "contrastive.proj.graph", cfg.d_rec, cfg.d_cl, rng);
    proj_review_ = nn::Linear<T>(params_, "contrastive.proj.review", cfg.d_conv, cfg.d_cl, rng);
    recommender_ = Recommender<T>(params_, cfg, rng);
    decoder_ = Decoder<T>(params_, cfg, shape, rng);
    fusion_ = FusionHead<T>(params_, cfg, shape, rng);
  }

  C2crsModel(C2crsModel&&) noexcept = default;
  C2crsModel& operator=(C2crsModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const CorpusShape& shape() const { return shape_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  const ConversationEncoder<T>& conversation() const { return conversation_; }
  const GraphEncoder<T>& graph() const { return graph_; }
  const ReviewEncoder<T>& reviews() const { return reviews_; }
  const Recommender<T>& recommender() const { return recommender_; }
  const Decoder<T>& decoder() const { return decoder_; }
  const FusionHead<T>& fusion() const { return fusion_; }

  /// Linear map of a view into the shared contrastive space.
  ad::Var<T> project(ad::Tape<T>& t, View view, ad::Var<T> x) const {
    switch (view) {
      case View::kConversation: return proj_conv_(t, x);
      case View::kGraph: return proj_graph_(t, x);
      case View::kReview: return proj_review_(t, x);
    }
    throw Error("unknown view");
  }

 private:
  ModelConfig config_;
  CorpusShape shape_;
  ParamStore<T> params_;
  ConversationEncoder<T> conversation_;
  GraphEncoder<T> graph_;
  ReviewEncoder<T> reviews_;
  nn::Linear<T> proj_conv_, proj_graph_, proj_review_;
  Recommender<T> recommender_;
  Decoder<T> decoder_;
  FusionHead<T> fusion_;
};

inline CorpusShape shape_of(const Corpus& c) {
  return {static_cast<int>(c.vocab.size()), c.kg.n_entities(), c.kg.n_relations(),
          static_cast<int>(c.kg.items().size())};
}

/// Sentence vectors memoised per tape.
template <typename T>
class SentenceCache {
 public:
  SentenceCache(const C2crsModel<T>& model, const Corpus& corpus) : model_(model), corpus_(corpus) {}

  ad::Var<T> get(ad::Tape<T>& t, const ReviewRef& ref) {
    if (auto it = cache_.find(ref); it != cache_.end()) return it->second;
    auto doc = corpus_.reviews.find(ref.item);
    if (doc == corpus_.reviews.end() || ref.sentence < 0 ||
        ref.sentence >= static_cast<int>(doc->second.sentences.size()))
      throw Error("unknown review sentence " + std::to_string(ref.item) + ":" + std::to_string(ref.sentence));
    ad::Var<T> v = model_.reviews().sentence(t, doc->second.sentences[ref.sentence]);
    cache_.emplace(ref, v);
    return v;
  }

 private:
  const C2crsModel<T>& model_;
  const Corpus& corpus_;
  std::map<ReviewRef, ad::Var<T>> cache_;
};

/// Multi-view encoding of one context.
template <typename T>
struct EncodedContext {
  ad::Var<T> tokens;  // F
  nn::KeyMask token_mask;
  ad::Var<T> conv;  // e_C
  ViewVector<T> graph;  // e_G
  std::vector<EntityId> entities;
  std::optional<ad::Var<T>> sentences;  // E
  ViewVector<T> review;  // e_R
};

/// Encodes a context given the node matrix N of the current pass. Views
/// disabled in the config are replaced by their learned defaults.
template <typename T>
EncodedContext<T> encode_context(ad::Tape<T>& t, const C2crsModel<T>& model, SentenceCache<T>& cache,
                                 ad::Var<T> nodes, std::span<const TokenId> tokens, const nn::KeyMask& mask,
                                 const std::vector<EntityId>& entities, const std::vector<ReviewRef>& reviews) {
  const ModelConfig& cfg = model.config();
  EncodedContext<T> ctx;
  std::vector<TokenId> ids(tokens.begin(), tokens.end());
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  ctx.tokens = model.conversation().encode(t, ids, mask);
  ctx.token_mask = mask;
  ctx.conv = model.conversation().pool(t, ctx.tokens).vector;
  ctx.entities = entities;
  ctx.graph = cfg.use_kg_view ? model.graph().view(t, nodes, entities)
                              : ViewVector<T>{model.graph().cold_default(t), Vector<T>(), true};
  if (cfg.use_review_view && !reviews.empty()) {
    std::vector<ad::Var<T>> cols;
    for (const auto& r : reviews) cols.push_back(cache.get(t, r));
    ctx.sentences = ad::concat_cols(cols);
  }
  ctx.review = model.reviews().view(t, ctx.sentences);
  return ctx;
}

/// Decoder memories for a context: F, the projected N_u (or the graph
/// default) and E (or the review default).
template <typename T>
DecoderMemory<T> decoder_memory(ad::Tape<T>& t, const C2crsModel<T>& model, const EncodedContext<T>& ctx,
                                ad::Var<T> nodes) {
  const ModelConfig& cfg = model.config();
  DecoderMemory<T> mem;
  mem.tokens = ctx.tokens;
  mem.token_mask = ctx.token_mask;
  ad::Var<T> ent = (cfg.use_kg_view && !ctx.entities.empty())
                       ? ad::gather_cols(nodes, std::vector<int>(ctx.entities.begin(), ctx.entities.end()))
                       : model.graph().cold_default(t);
  mem.entities = model.decoder().project_entities(t, ent);
  mem.sentences = ctx.sentences ? *ctx.sentences : model.reviews().cold_default(t);
  return mem;
}

/// Frozen-model inference: recommendations and responses for raw contexts.
/// Node representations are computed once; every call uses its own tape, so
/// concurrent calls are safe.
template <typename T>
class Predictor {
 public:
  Predictor(const C2crsModel<T>& model, const Corpus& corpus) : model_(model), corpus_(corpus) {
    ad::Tape<T> t(false);
    nodes_ = model.graph().nodes(t, corpus.kg).value();
  }

  const Matrix<T>& nodes() const { return nodes_; }

  RecommendationResult recommend(const std::vector<EntityId>& entities) const {
    ad::Tape<T> t(false);
    ad::Var<T> n = t.constant(nodes_);
    auto user = model_.recommender().user_representation(t, n, entities);
    const auto& items = corpus_.kg.items();
    Matrix<T> item_matrix(nodes_.rows(), static_cast<Eigen::Index>(items.size()));
    for (std::size_t i = 0; i < items.size(); ++i) item_matrix.col(static_cast<Eigen::Index>(i)) = nodes_.col(items[i]);
    RecommendationResult r = rank_items(score_items<T>(user.vector.value().col(0), item_matrix), items);
    r.user_vector = user.vector.value().col(0).template cast<double>();
    return r;
  }

  GenerationOutput generate(std::span<const TokenId> context, const std::vector<EntityId>& entities,
                            const std::vector<ReviewRef>& reviews, const DecodeOptions& opt) const {
    ad::Tape<T> t(false);
    SentenceCache<T> cache(model_, corpus_);
    ad::Var<T> n = t.constant(nodes_);
    auto ctx = encode_context(t, model_, cache, n, context, {}, entities, reviews);
    auto mem = decoder_memory(t, model_, ctx, n);
    // Memories are fixed for the whole decode; each step runs on a fresh tape.
    const Matrix<T> tokens = mem.tokens.value(), ents = mem.entities.value(), sents = mem.sentences.value();
    NextTokenFn next = [&](std::span<const TokenId> prefix) {
      ad::Tape<T> step(false);
      DecoderMemory<T> m{step.constant(tokens), mem.token_mask, step.constant(ents), step.constant(sents)};
      ad::Var<T> states = model_.decoder()(step, prefix, m);
      ad::Var<T> last = ad::slice_cols(states, states.cols() - 1, 1);
      Matrix<T> p = model_.fusion().probabilities(step, last, m.sentences);
      std::vector<double> out(static_cast<std::size_t>(p.rows()));
      for (Eigen::Index i = 0; i < p.rows(); ++i) out[i] = static_cast<double>(p(i, 0));
      return out;
    };
    return decode(next, opt);
  }

 private:
  const C2crsModel<T>& model_;
  const Corpus& corpus_;
  Matrix<T> nodes_;
};

}  // namespace c2crs

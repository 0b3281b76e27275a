#pragma once

// Batch-level training objectives assembled from the model components.

#include "c2crs/model.hpp"

namespace c2crs {

struct ObjectiveSet {
  bool coarse = false;
  bool fine = false;
  bool rec = false;
  bool gen = false;
  double coarse_weight = 1.0;
};

template <typename T>
struct BatchLoss {
  LossTerms<T> terms;
  bool fine_skipped = false;
  bool coarse_skipped = false;
};

namespace detail {

inline ViewSelection view_selection(const ModelConfig& cfg) {
  return {cfg.use_conversation_view, cfg.use_kg_view, cfg.use_review_view};
}

template <typename T>
InfoNceOptions nce_options(const ModelConfig& cfg, const std::vector<std::string>* groups) {
  InfoNceOptions opt;
  opt.literal = cfg.literal_infonce;
  opt.symmetric = cfg.symmetric;
  if (cfg.exclude_same_conversation) opt.groups = groups;
  return opt;
}

}  // namespace detail

/// Computes the requested objectives on one batch. Rows without entities
/// are left out of the contrastive terms, rows without a target item out of
/// L_rec and rows without a response out of L_gen.
template <typename T>
BatchLoss<T> batch_objective(ad::Tape<T>& t, const C2crsModel<T>& model, const Corpus& corpus, const Batch& batch,
                             const ObjectiveSet& obj, const typename nn::RgcnLayer<T>::TripleHook& hook = {}) {
  const ModelConfig& cfg = model.config();
  const T tau = static_cast<T>(cfg.temperature);
  BatchLoss<T> out;
  ad::Var<T> nodes = model.graph().nodes(t, corpus.kg, hook);
  SentenceCache<T> cache(model, corpus);

  std::vector<std::optional<EncodedContext<T>>> encoded(batch.size());
  auto context = [&](std::size_t i) -> const EncodedContext<T>& {
    if (!encoded[i]) encoded[i] = encode_context(t, model, cache, nodes, batch.context_row(i), {}, batch.entities[i], batch.reviews[i]);
    return *encoded[i];
  };

  if (obj.coarse || obj.fine) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (!batch.entities[i].empty()) rows.push_back(i);

    if (obj.coarse) {
      if (rows.size() >= 2) {
        std::vector<ad::Var<T>> c, g, r;
        std::vector<std::string> groups;
        for (std::size_t i : rows) {
          const auto& ctx = context(i);
          c.push_back(ctx.conv);
          g.push_back(ctx.graph.vector);
          r.push_back(ctx.review.vector);
          groups.push_back(batch.conversation_ids[i]);
        }
        auto terms = coarse_loss(model.project(t, View::kConversation, ad::concat_cols(c)),
                                 model.project(t, View::kGraph, ad::concat_cols(g)),
                                 model.project(t, View::kReview, ad::concat_cols(r)), tau, detail::view_selection(cfg),
                                 detail::nce_options<T>(cfg, &groups));
        for (const auto& term : terms.terms)
          out.terms.add(term.name, term.value, static_cast<T>(obj.coarse_weight));
      } else {
        out.coarse_skipped = true;
      }
    }

    if (obj.fine) {
      std::vector<ad::Var<T>> words, sentences;
      std::vector<int> entity_ids;
      std::vector<std::string> groups;
      for (std::size_t i : rows) {
        for (const auto& unit : batch.alignment[i]) {
          const auto& ctx = context(i);
          words.push_back(ad::slice_cols(ctx.tokens, unit.context_position, 1));
          entity_ids.push_back(unit.entity);
          sentences.push_back(cache.get(t, unit.sentence));
          groups.push_back(batch.conversation_ids[i]);
        }
      }
      FinePairBatch<T> fb;
      if (!words.empty()) {
        fb.words = model.project(t, View::kConversation, ad::concat_cols(words));
        fb.entities = model.project(t, View::kGraph, ad::gather_cols(nodes, entity_ids));
        fb.sentences = model.project(t, View::kReview, ad::concat_cols(sentences));
        fb.groups = std::move(groups);
      }
      InfoNceOptions opt = detail::nce_options<T>(cfg, nullptr);
      if (!cfg.exclude_same_conversation) fb.groups.clear();
      auto terms = fine_loss(fb, tau, detail::view_selection(cfg), opt);
      out.fine_skipped = terms.skipped;
      for (const auto& term : terms.terms) out.terms.add(term.name, term.value);
    }
  }

  if (obj.rec) {
    std::vector<ad::Var<T>> logits;
    std::vector<EntityId> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!batch.target_items[i]) continue;
      auto user = model.recommender().user_representation(t, nodes, batch.entities[i]);
      logits.push_back(Recommender<T>::item_logits(user.vector, nodes, corpus.kg.items()));
      targets.push_back(*batch.target_items[i]);
    }
    if (!logits.empty()) out.terms.add("rec", rec_loss(ad::concat_cols(logits), targets, corpus.kg));
  }

  if (obj.gen) {
    std::vector<ad::Var<T>> per_row;
    const auto max_resp = static_cast<std::size_t>(cfg.max_response_len);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto resp = batch.response_row(i);
      if (resp.empty()) continue;
      if (resp.size() > max_resp) resp = resp.first(max_resp);
      std::vector<TokenId> prefix = {Vocabulary::kBos};
      prefix.insert(prefix.end(), resp.begin(), resp.end());
      std::vector<TokenId> targets(resp.begin(), resp.end());
      targets.push_back(Vocabulary::kEos);
      const auto& ctx = context(i);
      auto mem = decoder_memory(t, model, ctx, nodes);
      ad::Var<T> states = model.decoder()(t, prefix, mem);
      ad::Var<T> logits = model.fusion().logits(t, states, mem.sentences);
      per_row.push_back(gen_loss(logits, targets, token_weights(targets, corpus.vocab, cfg.weight_threshold, cfg.weight_floor)));
    }
    if (!per_row.empty())
      out.terms.add("gen", ad::scale(ad::add_all(per_row), T(1) / static_cast<T>(per_row.size())));
  }
  return out;
}

}  // namespace c2crs

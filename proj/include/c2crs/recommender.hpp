#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "c2crs/encoders.hpp"

namespace c2crs {

struct RecommendationResult {
  std::vector<EntityId> ranked_items;
  std::vector<double> scores;  // probability of ranked_items[i]
  Vector<double> user_vector;
};

struct RecEvalReport {
  std::map<int, double> recall_at;
  std::size_t n_instances = 0;
};

/// Item ordering by descending probability, ties broken by ascending item id.
inline std::vector<std::size_t> rank_order(const std::vector<double>& probs, const std::vector<EntityId>& items) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return items[a] < items[b];
  });
  return order;
}

/// Recommendation head: e_u = pool(N[:, N_u]) and P_rec = softmax(e_u^T n_i)
/// with the item's node representation as its embedding.
template <typename T>
class Recommender {
 public:
  Recommender() = default;
  Recommender(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) : pool_(ps, "rec.user_pool", cfg.d_rec, rng) {
    cold_ = ps.normal("rec.cold_default", cfg.d_rec, 1, 0.1, rng);
  }

  ViewVector<T> user_representation(ad::Tape<T>& t, ad::Var<T> nodes, const std::vector<EntityId>& entities) const {
    if (entities.empty()) return {t.param(*cold_), Vector<T>(), true};
    auto pooled = pool_(t, ad::gather_cols(nodes, std::vector<int>(entities.begin(), entities.end())));
    return {pooled.vector, pooled.weights, false};
  }

  /// e_u^T n_i for every item, as an |items| x 1 column.
  static ad::Var<T> item_logits(ad::Var<T> user, ad::Var<T> nodes, const std::vector<EntityId>& items) {
    ad::Var<T> item_matrix = ad::gather_cols(nodes, std::vector<int>(items.begin(), items.end()));
    return ad::matmul(ad::transpose(item_matrix), user);
  }

 private:
  nn::SelfAttentivePool<T> pool_;
  Parameter<T>* cold_ = nullptr;
};

/// softmax over all items.
template <typename T>
std::vector<double> score_items(const Vector<T>& user, const Matrix<T>& item_embeddings) {
  if (item_embeddings.cols() < 2) throw Error("score_items: need at least two items");
  Matrix<T> logits = item_embeddings.transpose() * user;
  Matrix<T> probs = ad::detail::softmax_cols<T>(logits);
  std::vector<double> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) out[i] = static_cast<double>(probs(i, 0));
  return out;
}

/// Ranked recommendation over `items` given their probabilities.
inline RecommendationResult rank_items(const std::vector<double>& probs, const std::vector<EntityId>& items) {
  RecommendationResult r;
  for (std::size_t idx : rank_order(probs, items)) {
    r.ranked_items.push_back(items[idx]);
    r.scores.push_back(probs[idx]);
  }
  return r;
}

/// Mean cross-entropy; `logits` is |items| x batch, one column per instance,
/// and targets are row indices into the item list.
template <typename T>
ad::Var<T> rec_loss(ad::Var<T> logits, const std::vector<int>& target_rows) {
  if (static_cast<Eigen::Index>(target_rows.size()) != logits.cols()) throw Error("rec_loss: one target per column");
  for (int r : target_rows)
    if (r < 0 || r >= logits.rows()) throw Error("rec_loss: target outside the item set");
  ad::Var<T> nll = ad::sub(ad::logsumexp_cols(logits), ad::pick(logits, target_rows));
  return ad::scale(ad::sum(nll), T(1) / static_cast<T>(target_rows.size()));
}

/// Same loss with targets given as item ids.
template <typename T>
ad::Var<T> rec_loss(ad::Var<T> logits, const std::vector<EntityId>& targets, const KnowledgeGraph& kg) {
  std::vector<int> rows;
  for (EntityId e : targets) {
    if (!kg.is_item(e)) throw Error("rec_loss: target " + std::to_string(e) + " outside the item set");
    rows.push_back(kg.item_index(e));
  }
  return rec_loss(logits, rows);
}

/// Fraction of instances whose target appears in the top k of its ranking.
inline RecEvalReport recall_at_k(const std::vector<std::vector<EntityId>>& rankings, const std::vector<EntityId>& targets,
                                 const std::vector<int>& ks = {1, 10, 50}) {
  if (rankings.size() != targets.size()) throw Error("recall_at_k: one target per ranking");
  RecEvalReport report;
  report.n_instances = targets.size();
  for (int k : ks) report.recall_at[k] = 0.0;
  if (targets.empty()) return report;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& ranked = rankings[i];
    const auto it = std::find(ranked.begin(), ranked.end(), targets[i]);
    if (it == ranked.end()) continue;
    const auto rank = static_cast<int>(it - ranked.begin()) + 1;
    for (int k : ks)
      if (rank <= k) report.recall_at[k] += 1.0;
  }
  for (auto& [k, v] : report.recall_at) v /= static_cast<double>(targets.size());
  return report;
}

}  // namespace c2crs

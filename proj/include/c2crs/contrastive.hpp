#pragma once

// InfoNCE alignment objectives over paired views. Examples are stored as
// columns: column i of X and column i of Y form a positive pair and every
// other column of Y is an in-batch negative for X[:, i].

#include <string>
#include <utility>
#include <vector>

#include "c2crs/autograd.hpp"

namespace c2crs {

struct InfoNceOptions {
  /// Negated log-softmax with the positive inside the denominator. When
  /// set, the raw log(pos / sum(neg)) without negation is returned instead.
  bool literal = false;
  /// Average of the X->Y and Y->X directions.
  bool symmetric = false;
  /// Optional group label per column; columns sharing a label are not used
  /// as negatives for each other.
  const std::vector<std::string>* groups = nullptr;
};

namespace detail {

template <typename T>
ad::Var<T> info_nce_directed(ad::Var<T> x, ad::Var<T> y, T tau, const InfoNceOptions& opt) {
  const Eigen::Index b = x.cols();
  ad::Var<T> xn = ad::normalize_cols(x);
  ad::Var<T> yn = ad::normalize_cols(y);
  // logits(j, i) = sim(x_i, y_j) / tau; column i scores every candidate for x_i.
  ad::Var<T> logits = ad::scale(ad::matmul(ad::transpose(yn), xn), T(1) / tau);
  std::vector<int> diag(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) diag[i] = static_cast<int>(i);
  ad::Var<T> positives = ad::pick(logits, diag);

  const T neg_inf = -std::numeric_limits<T>::infinity();
  Matrix<T> mask = Matrix<T>::Zero(b, b);
  bool masked = false;
  if (opt.groups) {
    if (static_cast<Eigen::Index>(opt.groups->size()) != b) throw Error("info_nce: one group label per column required");
    for (Eigen::Index i = 0; i < b; ++i)
      for (Eigen::Index j = 0; j < b; ++j)
        if (i != j && (*opt.groups)[i] == (*opt.groups)[j]) {
          mask(j, i) = neg_inf;
          masked = true;
        }
  }
  if (opt.literal) {
    for (Eigen::Index i = 0; i < b; ++i) mask(i, i) = neg_inf;
    masked = true;
  }
  ad::Var<T> denom = ad::logsumexp_cols(masked ? ad::add_const(logits, mask) : logits);
  const T inv_b = T(1) / static_cast<T>(b);
  if (opt.literal) return ad::scale(ad::sum(ad::sub(positives, denom)), inv_b);
  return ad::scale(ad::sum(ad::sub(denom, positives)), inv_b);
}

}  // namespace detail

/// L = -(1/b) sum_i log( exp(sim(x_i,y_i)/tau) / sum_j exp(sim(x_i,y_j)/tau) )
/// with cosine similarity. Throws on a zero-norm column.
template <typename T>
ad::Var<T> info_nce(ad::Var<T> x, ad::Var<T> y, T tau, const InfoNceOptions& opt = {}) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw Error("info_nce: views must have equal shapes");
  if (x.cols() < 1) throw Error("info_nce: empty batch");
  if (!(tau > T(0))) throw Error("info_nce: temperature must be positive");
  ad::Var<T> forward = detail::info_nce_directed(x, y, tau, opt);
  if (!opt.symmetric) return forward;
  return ad::scale(ad::add(forward, detail::info_nce_directed(y, x, tau, opt)), T(0.5));
}

/// Convenience overload on plain matrices.
template <typename T>
T info_nce(const Matrix<T>& x, const Matrix<T>& y, T tau, const InfoNceOptions& opt = {}) {
  ad::Tape<T> t(false);
  return info_nce(t.constant(x), t.constant(y), tau, opt).scalar();
}

template <typename T>
struct NamedTerm {
  std::string name;
  ad::Var<T> value;
};

/// Sum of named scalar terms; `total` is invalid when there are none.
template <typename T>
struct LossTerms {
  ad::Var<T> total;
  std::vector<NamedTerm<T>> terms;
  bool skipped = false;

  bool empty() const { return !total.valid(); }

  /// Records the raw term and adds weight * term to the total.
  void add(std::string name, ad::Var<T> v, T weight = T(1)) {
    ad::Var<T> w = weight == T(1) ? v : ad::scale(v, weight);
    total = total.valid() ? ad::add(total, w) : w;
    terms.push_back({std::move(name), v});
  }
};

/// Which views take part in the contrastive objectives.
struct ViewSelection {
  bool conversation = true;
  bool graph = true;
  bool review = true;
};

/// Pairwise InfoNCE over every enabled pair of views (C,G), (C,R), (G,R).
/// Inputs are projected coarse vectors, one column per user.
template <typename T>
LossTerms<T> coarse_loss(ad::Var<T> conv, ad::Var<T> graph, ad::Var<T> review, T tau, const ViewSelection& views,
                         const InfoNceOptions& opt = {}) {
  LossTerms<T> out;
  if (views.conversation && views.graph) out.add("coarse.C-G", info_nce(conv, graph, tau, opt));
  if (views.conversation && views.review) out.add("coarse.C-R", info_nce(conv, review, tau, opt));
  if (views.graph && views.review) out.add("coarse.G-R", info_nce(graph, review, tau, opt));
  return out;
}

/// Word / entity / sentence columns of the alignment triples realised in a
/// batch; column k of each matrix comes from the same triple.
template <typename T>
struct FinePairBatch {
  ad::Var<T> words;
  ad::Var<T> entities;
  ad::Var<T> sentences;
  std::vector<std::string> groups;

  Eigen::Index size() const { return words.valid() ? words.cols() : 0; }
};

/// Pairwise InfoNCE over the aligned fine-grained units. Batches with fewer
/// than two triples have no negatives and are skipped (`skipped` set).
template <typename T>
LossTerms<T> fine_loss(const FinePairBatch<T>& batch, T tau, const ViewSelection& views, InfoNceOptions opt = {}) {
  LossTerms<T> out;
  if (batch.size() < 2) {
    out.skipped = true;
    return out;
  }
  if (batch.entities.cols() != batch.size() || batch.sentences.cols() != batch.size())
    throw Error("fine_loss: unequal unit counts");
  if (!batch.groups.empty()) opt.groups = &batch.groups;
  if (views.conversation && views.graph) out.add("fine.F-N", info_nce(batch.words, batch.entities, tau, opt));
  if (views.conversation && views.review) out.add("fine.F-E", info_nce(batch.words, batch.sentences, tau, opt));
  if (views.graph && views.review) out.add("fine.N-E", info_nce(batch.entities, batch.sentences, tau, opt));
  return out;
}

enum class PretrainStage { kCoarse, kFine };

/// Coarse stage: L_coarse. Fine stage: L_fine + lambda * L_coarse.
inline double pretrain_objective(PretrainStage stage, double fine, double coarse, double lambda) {
  return stage == PretrainStage::kCoarse ? coarse : fine + lambda * coarse;
}

template <typename T>
LossTerms<T> pretrain_objective(PretrainStage stage, const LossTerms<T>& fine, const LossTerms<T>& coarse, T lambda) {
  LossTerms<T> out;
  if (stage == PretrainStage::kCoarse) return coarse;
  out = fine;
  out.skipped = false;
  if (!coarse.empty() && lambda != T(0)) {
    ad::Var<T> weighted = ad::scale(coarse.total, lambda);
    out.total = out.total.valid() ? ad::add(out.total, weighted) : weighted;
    for (const auto& term : coarse.terms) out.terms.push_back(term);
  }
  return out;
}

}  // namespace c2crs

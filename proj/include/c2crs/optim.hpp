#pragma once

#include <cmath>
#include <vector>

#include "c2crs/parameters.hpp"

namespace c2crs {

/// Scales every gradient so that their joint L2 norm is at most `max_norm`.
/// Null entries are treated as zero. Returns the norm before clipping.
template <typename T>
double clip_global_norm(const std::vector<Matrix<T>*>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads)
    if (g) sq += static_cast<double>(g->squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto* g : grads)
      if (g) *g *= factor;
  }
  return norm;
}

/// Adam with bias correction. Parameters without a gradient on a step are
/// left untouched, moments included.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      t_.push_back(0);
    }
  }

  const std::vector<Parameter<T>*>& parameters() const { return params_; }

  /// One update; grads[i] belongs to parameters()[i] and may be null.
  void step(const std::vector<Matrix<T>*>& grads) {
    if (grads.size() != params_.size()) throw Error("adam: one gradient slot per parameter");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!grads[i]) continue;
      const Matrix<T>& g = *grads[i];
      const int t = ++t_[i];
      m_[i] = static_cast<T>(beta1_) * m_[i] + static_cast<T>(1 - beta1_) * g;
      v_[i] = static_cast<T>(beta2_) * v_[i] + static_cast<T>(1 - beta2_) * g.cwiseProduct(g);
      const T c1 = static_cast<T>(1 - std::pow(beta1_, t));
      const T c2 = static_cast<T>(1 - std::pow(beta2_, t));
      const T lr = static_cast<T>(lr_);
      const T eps = static_cast<T>(eps_);
      params_[i]->value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  double lr_, beta1_, beta2_, eps_;
  std::vector<Matrix<T>> m_, v_;
  std::vector<int> t_;
};

}  // namespace c2crs

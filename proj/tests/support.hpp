#pragma once

// Shared fixtures and independent reference implementations for the test
// suites. The references deliberately avoid the library's own helpers.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "c2crs/objectives.hpp"
#include "c2crs/synthetic.hpp"

namespace c2crs::testing {

/// A model small enough for finite differences.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.d_conv = 4;
  m.d_rec = 4;
  m.d_cl = 4;
  m.n_heads = 2;
  m.ffn_width = 6;
  m.n_enc_layers = 1;
  m.n_dec_layers = 1;
  m.max_review_sentences = 3;
  return m;
}

inline Corpus tiny_corpus(std::uint64_t seed = 1) { return generate_synthetic_corpus(4, 8, 4, seed); }

struct GradCheck {
  double max_rel_err = 0.0;
  int checked = 0;
  std::string worst;
};

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is (numerically) zero compare on an absolute scale.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Compares tape gradients of `loss` against central differences on
/// `n_coords` coordinates drawn from the parameters the loss touches.
inline GradCheck check_gradients(ParamStore<double>& params,
                                 const std::function<ad::Var<double>(ad::Tape<double>&)>& loss, int n_coords,
                                 std::uint64_t seed, double h = 1e-5) {
  ad::Tape<double> tape;
  ad::Var<double> l = loss(tape);
  tape.backward(l);
  std::vector<std::pair<Parameter<double>*, Matrix<double>>> touched;
  for (std::size_t k = 0; k < params.size(); ++k)
    if (const auto* g = tape.gradient(params[k])) touched.emplace_back(&params[k], *g);
  GradCheck out;
  if (touched.empty()) return out;

  auto value = [&] {
    ad::Tape<double> t(false);
    return loss(t).scalar();
  };
  Rng rng(seed);
  for (int n = 0; n < n_coords; ++n) {
    auto& [p, grad] = touched[rng.index(touched.size())];
    const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.rows())));
    const auto j = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.cols())));
    const double saved = p->value(i, j);
    p->value(i, j) = saved + h;
    const double up = value();
    p->value(i, j) = saved - h;
    const double down = value();
    p->value(i, j) = saved;
    const double numeric = (up - down) / (2 * h);
    const double err = relative_error(grad(i, j), numeric);
    if (err > out.max_rel_err) {
      out.max_rel_err = err;
      out.worst = p->name + "(" + std::to_string(i) + "," + std::to_string(j) + ") analytic " +
                  std::to_string(grad(i, j)) + " numeric " + std::to_string(numeric);
    }
    ++out.checked;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference implementations

/// -(1/b) sum_i log softmax_j(cos(x_i, y_j) / tau)[i], written out with plain loops.
inline double reference_info_nce(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y,
                                 double tau) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    return dot / std::sqrt(na * nb);
  };
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < y.size(); ++j) denom += std::exp(cosine(x[i], y[j]) / tau);
    total -= std::log(std::exp(cosine(x[i], y[i]) / tau) / denom);
  }
  return total / static_cast<double>(x.size());
}

/// Counts, for every k, the instances whose target sits at a position < k.
inline std::map<int, double> reference_recall(const std::vector<std::vector<EntityId>>& rankings,
                                              const std::vector<EntityId>& targets, const std::vector<int>& ks) {
  std::map<int, double> out;
  for (int k : ks) {
    int hits = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      for (int pos = 0; pos < k && pos < static_cast<int>(rankings[i].size()); ++pos) {
        if (rankings[i][static_cast<std::size_t>(pos)] == targets[i]) {
          ++hits;
          break;
        }
      }
    }
    out[k] = targets.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(targets.size());
  }
  return out;
}

/// Distinct n-grams keyed as strings.
inline double reference_distinct(const std::vector<std::vector<TokenId>>& responses, int n) {
  std::set<std::string> unique;
  long total = 0;
  for (const auto& r : responses) {
    for (int i = 0; i + n <= static_cast<int>(r.size()); ++i) {
      std::string key;
      for (int k = 0; k < n; ++k) key += std::to_string(r[static_cast<std::size_t>(i + k)]) + ",";
      unique.insert(key);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

}  // namespace c2crs::testing

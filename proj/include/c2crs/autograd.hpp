#pragma once

// Reverse-mode automatic differentiation over dense column-major matrices.
//
// A Tape records every intermediate value together with a closure that
// propagates the output gradient to its inputs. Nodes are appended in
// evaluation order, so walking the tape backwards is a valid topological
// order. Parameters are bound read-only; their gradients are accumulated on
// the tape and queried afterwards, which keeps a model const during forward
// passes and lets independent tapes run concurrently on shared weights.

#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "c2crs/common.hpp"
#include "c2crs/parameters.hpp"

namespace c2crs::ad {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix<T>&)>;

  /// With record=false no closures are kept: inference only.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }

  /// Binds a parameter as a leaf. Repeated binds on one tape share a node.
  Var<T> param(const Parameter<T>& p) {
    const Parameter<T>* ptr = &p;
    if (auto it = bound_.find(ptr); it != bound_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, true, [ptr](Tape& t, const Matrix<T>& g) { t.param_grad(*ptr) += g; });
    bound_.emplace(ptr, v.id());
    return v;
  }

  /// Columns of `table` selected by `ids`; gradients scatter back into the
  /// table without materialising it on the tape.
  Var<T> embedding(const Parameter<T>& table, std::span<const int> ids) {
    Matrix<T> out(table.value.rows(), static_cast<Eigen::Index>(ids.size()));
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] < 0 || ids[j] >= table.value.cols())
        throw Error("embedding id " + std::to_string(ids[j]) + " out of range for " + table.name);
      out.col(static_cast<Eigen::Index>(j)) = table.value.col(ids[j]);
    }
    const Parameter<T>* ptr = &table;
    std::vector<int> idx(ids.begin(), ids.end());
    return push(std::move(out), true, [ptr, idx = std::move(idx)](Tape& t, const Matrix<T>& g) {
      Matrix<T>& pg = t.param_grad(*ptr);
      for (std::size_t j = 0; j < idx.size(); ++j) pg.col(idx[j]) += g.col(static_cast<Eigen::Index>(j));
    });
  }

  Var<T> push(Matrix<T> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size() - 1));
  }

  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  const Matrix<T>& value(int id) const { return nodes_[id].value; }

  /// Gradient slot for node `id`, zero-initialised on first use.
  Matrix<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Matrix<T>& param_grad(const Parameter<T>& p) {
    auto it = param_grads_.find(&p);
    if (it == param_grads_.end())
      it = param_grads_.emplace(&p, Matrix<T>::Zero(p.value.rows(), p.value.cols())).first;
    return it->second;
  }

  /// Accumulated gradient of a bound parameter, or nullptr if the parameter
  /// did not take part in the recorded computation.
  const Matrix<T>* gradient(const Parameter<T>& p) const {
    auto it = param_grads_.find(&p);
    return it == param_grads_.end() ? nullptr : &it->second;
  }
  Matrix<T>* gradient(const Parameter<T>& p) {
    auto it = param_grads_.find(&p);
    return it == param_grads_.end() ? nullptr : &it->second;
  }

  void backward(Var<T> loss) {
    if (!record_) throw Error("backward on a non-recording tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward requires a scalar loss");
    grad(loss.id()).setConstant(T(1));
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Backward backward;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Matrix<T>> param_grads_;
  std::unordered_map<const Parameter<T>*, int> bound_;
  bool record_;
};

namespace detail {

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars)
    if (v.tape().needs_grad(v.id())) return true;
  return false;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  auto& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const int ia = a.id();
  return a.tape().push(a.value().transpose(), detail::any_grad({a}),
                       [ia](Tape<T>& t, const Matrix<T>& g) { t.grad(ia) += g.transpose(); });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape().push(a.value() + b.value(), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape().push(a.value() - b.value(), detail::any_grad({a, b}), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) -= g;
  });
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "hadamard");
  const int ia = a.id(), ib = b.id();
  return a.tape().push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                       [ia, ib](Tape<T>& t, const Matrix<T>& g) {
                         if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
                         if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
                       });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const int ia = a.id();
  return a.tape().push(a.value() * s, detail::any_grad({a}),
                       [ia, s](Tape<T>& t, const Matrix<T>& g) { t.grad(ia) += g * s; });
}

/// Adds a constant matrix (e.g. an attention mask holding -inf entries).
template <typename T>
Var<T> add_const(Var<T> a, const Matrix<T>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw Error("add_const: shape mismatch");
  const int ia = a.id();
  return a.tape().push(a.value() + c, detail::any_grad({a}),
                       [ia](Tape<T>& t, const Matrix<T>& g) { t.grad(ia) += g; });
}

/// a + bias broadcast over columns; bias is rows x 1.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) throw Error("add_bias: bias must be a column of matching height");
  const int ia = a.id(), ib = bias.id();
  Matrix<T> out = a.value().colwise() + bias.value().col(0);
  return a.tape().push(std::move(out), detail::any_grad({a, bias}), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g.rowwise().sum();
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  const int ia = a.id();
  Matrix<T> out = a.value().array().tanh().matrix();
  const int out_id = static_cast<int>(a.tape().size());
  return a.tape().push(std::move(out), detail::any_grad({a}), [ia, out_id](Tape<T>& t, const Matrix<T>& g) {
    const auto& y = t.value(out_id);
    t.grad(ia) += (g.array() * (T(1) - y.array().square())).matrix();
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  const int ia = a.id();
  Matrix<T> out = a.value().cwiseMax(T(0));
  return a.tape().push(std::move(out), detail::any_grad({a}), [ia](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ia) += (t.value(ia).array() > T(0)).select(g.array(), T(0)).matrix();
  });
}

namespace detail {

template <typename T>
Matrix<T> softmax_cols(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const T mx = x.col(j).maxCoeff();
    out.col(j) = (x.col(j).array() - mx).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

}  // namespace detail

/// Softmax over the rows of every column.
template <typename T>
Var<T> softmax_cols(Var<T> a) {
  const int ia = a.id();
  const int out_id = static_cast<int>(a.tape().size());
  return a.tape().push(detail::softmax_cols(a.value()), detail::any_grad({a}),
                       [ia, out_id](Tape<T>& t, const Matrix<T>& g) {
                         const auto& y = t.value(out_id);
                         Matrix<T>& ga = t.grad(ia);
                         for (Eigen::Index j = 0; j < y.cols(); ++j) {
                           const T dot = y.col(j).dot(g.col(j));
                           ga.col(j).array() += y.col(j).array() * (g.col(j).array() - dot);
                         }
                       });
}

/// log-sum-exp of every column; result is 1 x cols.
template <typename T>
Var<T> logsumexp_cols(Var<T> a) {
  const auto& x = a.value();
  Matrix<T> out(1, x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const T mx = x.col(j).maxCoeff();
    out(0, j) = mx + std::log((x.col(j).array() - mx).exp().sum());
  }
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}), [ia](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> p = detail::softmax_cols(t.value(ia));
    Matrix<T>& ga = t.grad(ia);
    for (Eigen::Index j = 0; j < p.cols(); ++j) ga.col(j) += p.col(j) * g(0, j);
  });
}

/// out(0, j) = a(rows[j], j).
template <typename T>
Var<T> pick(Var<T> a, std::vector<int> rows) {
  if (static_cast<Eigen::Index>(rows.size()) != a.cols()) throw Error("pick: one row index per column required");
  Matrix<T> out(1, a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    if (rows[j] < 0 || rows[j] >= a.rows()) throw Error("pick: row index out of range");
    out(0, j) = a.value()(rows[j], j);
  }
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}), [ia, rows = std::move(rows)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& ga = t.grad(ia);
    for (Eigen::Index j = 0; j < g.cols(); ++j) ga(rows[j], j) += g(0, j);
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}),
                       [ia](Tape<T>& t, const Matrix<T>& g) { t.grad(ia).array() += g(0, 0); });
}

/// Σ w_ij a_ij for a constant weight matrix.
template <typename T>
Var<T> weighted_sum(Var<T> a, Matrix<T> w) {
  if (a.rows() != w.rows() || a.cols() != w.cols()) throw Error("weighted_sum: shape mismatch");
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(w).sum();
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}),
                       [ia, w = std::move(w)](Tape<T>& t, const Matrix<T>& g) { t.grad(ia) += w * g(0, 0); });
}

/// Per-column layer normalisation with a learned gain and bias (rows x 1).
template <typename T>
Var<T> layer_norm_cols(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const Eigen::Index d = xv.rows();
  Matrix<T> xhat(d, xv.cols());
  Vector<T> inv_std(xv.cols());
  for (Eigen::Index j = 0; j < xv.cols(); ++j) {
    const T mu = xv.col(j).mean();
    const T var = (xv.col(j).array() - mu).square().mean();
    inv_std(j) = T(1) / std::sqrt(var + eps);
    xhat.col(j) = (xv.col(j).array() - mu).matrix() * inv_std(j);
  }
  Matrix<T> out = (xhat.array().colwise() * gain.value().col(0).array()).matrix();
  out.colwise() += bias.value().col(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(std::move(out), detail::any_grad({x, gain, bias}),
                       [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Matrix<T>& g) {
                         if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).rowwise().sum();
                         if (t.needs_grad(ib)) t.grad(ib) += g.rowwise().sum();
                         if (!t.needs_grad(ix)) return;
                         const auto& gamma = t.value(ig);
                         Matrix<T>& gx = t.grad(ix);
                         for (Eigen::Index j = 0; j < g.cols(); ++j) {
                           Vector<T> dxhat = g.col(j).cwiseProduct(gamma.col(0));
                           const T m1 = dxhat.mean();
                           const T m2 = dxhat.cwiseProduct(xhat.col(j)).mean();
                           gx.col(j) += ((dxhat.array() - m1 - xhat.col(j).array() * m2) * inv_std(j)).matrix();
                         }
                       });
}

/// Scales every column to unit L2 norm. Zero columns are rejected because
/// cosine similarity is undefined for them; non-finite columns pass through
/// so the loss that consumes them can be reported.
template <typename T>
Var<T> normalize_cols(Var<T> x) {
  const auto& xv = x.value();
  Matrix<T> out(xv.rows(), xv.cols());
  Vector<T> norms(xv.cols());
  for (Eigen::Index j = 0; j < xv.cols(); ++j) {
    norms(j) = xv.col(j).norm();
    if (norms(j) == T(0)) throw Error("normalize_cols: zero-norm column " + std::to_string(j));
    out.col(j) = xv.col(j) / norms(j);
  }
  const int ix = x.id();
  const int out_id = static_cast<int>(x.tape().size());
  return x.tape().push(std::move(out), detail::any_grad({x}),
                       [ix, out_id, norms = std::move(norms)](Tape<T>& t, const Matrix<T>& g) {
                         const auto& y = t.value(out_id);
                         Matrix<T>& gx = t.grad(ix);
                         for (Eigen::Index j = 0; j < y.cols(); ++j) {
                           const T dot = y.col(j).dot(g.col(j));
                           gx.col(j) += (g.col(j) - y.col(j) * dot) / norms(j);
                         }
                       });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.rows()) throw Error("slice_rows: out of range");
  const int ia = a.id();
  return a.tape().push(a.value().middleRows(start, n), detail::any_grad({a}),
                       [ia, start, n](Tape<T>& t, const Matrix<T>& g) { t.grad(ia).middleRows(start, n) += g; });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw Error("slice_cols: out of range");
  const int ia = a.id();
  return a.tape().push(a.value().middleCols(start, n), detail::any_grad({a}),
                       [ia, start, n](Tape<T>& t, const Matrix<T>& g) { t.grad(ia).middleCols(start, n) += g; });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool grad = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
    grad = grad || p.tape().needs_grad(p.id());
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), r);
    r += p.rows();
  }
  return parts.front().tape().push(std::move(out), grad, [spans = std::move(spans)](Tape<T>& t, const Matrix<T>& g) {
    for (const auto& [id, start] : spans)
      if (t.needs_grad(id)) t.grad(id) += g.middleRows(start, t.value(id).rows());
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || p.tape().needs_grad(p.id());
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id(), c);
    c += p.cols();
  }
  return parts.front().tape().push(std::move(out), grad, [spans = std::move(spans)](Tape<T>& t, const Matrix<T>& g) {
    for (const auto& [id, start] : spans)
      if (t.needs_grad(id)) t.grad(id) += g.middleCols(start, t.value(id).cols());
  });
}

/// Columns of `a` at `idx` (repeats allowed).
template <typename T>
Var<T> gather_cols(Var<T> a, std::vector<int> idx) {
  Matrix<T> out(a.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= a.cols()) throw Error("gather_cols: index out of range");
    out.col(static_cast<Eigen::Index>(j)) = a.value().col(idx[j]);
  }
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}), [ia, idx = std::move(idx)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& ga = t.grad(ia);
    for (std::size_t j = 0; j < idx.size(); ++j) ga.col(idx[j]) += g.col(static_cast<Eigen::Index>(j));
  });
}

/// out[:, dst[k]] += s * a[:, src[k]] over a zero matrix with n_out columns.
template <typename T>
Var<T> scatter_add_cols(Var<T> a, std::vector<int> src, std::vector<int> dst, Eigen::Index n_out, T s = T(1)) {
  if (src.size() != dst.size()) throw Error("scatter_add_cols: index length mismatch");
  Matrix<T> out = Matrix<T>::Zero(a.rows(), n_out);
  for (std::size_t k = 0; k < src.size(); ++k) out.col(dst[k]) += s * a.value().col(src[k]);
  const int ia = a.id();
  return a.tape().push(std::move(out), detail::any_grad({a}),
                       [ia, s, src = std::move(src), dst = std::move(dst)](Tape<T>& t, const Matrix<T>& g) {
                         Matrix<T>& ga = t.grad(ia);
                         for (std::size_t k = 0; k < src.size(); ++k) ga.col(src[k]) += s * g.col(dst[k]);
                       });
}

/// Mean over columns of a (rows x 1 result).
template <typename T>
Var<T> mean_cols(Var<T> a) {
  const Eigen::Index n = a.cols();
  const int ia = a.id();
  return a.tape().push(a.value().rowwise().mean(), detail::any_grad({a}), [ia, n](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ia).colwise() += g.col(0) / static_cast<T>(n);
  });
}

/// Sum of scalar (1x1) terms.
template <typename T>
Var<T> add_all(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw Error("add_all: no terms");
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace c2crs::ad

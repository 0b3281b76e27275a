#pragma once

#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "c2crs/common.hpp"

namespace c2crs {

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
};

/// Owns every named parameter of a model. Addresses are stable for the
/// lifetime of the store, so layers may keep raw pointers into it.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>* add(std::string name, Matrix<T> value) {
    if (index_.contains(name)) throw Error("duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>(Parameter<T>{name, std::move(value)});
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  Parameter<T>* zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
    return add(std::move(name), Matrix<T>::Zero(rows, cols));
  }

  Parameter<T>* ones(std::string name, Eigen::Index rows, Eigen::Index cols) {
    return add(std::move(name), Matrix<T>::Ones(rows, cols));
  }

  /// Glorot-uniform initialisation.
  Parameter<T>* glorot(std::string name, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix<T> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
    return add(std::move(name), std::move(m));
  }

  Parameter<T>* uniform(std::string name, Eigen::Index rows, Eigen::Index cols, double limit, Rng& rng) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
    return add(std::move(name), std::move(m));
  }

  Parameter<T>* normal(std::string name, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(stddev * rng.normal());
    return add(std::move(name), std::move(m));
  }

  std::size_t size() const { return params_.size(); }

  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  Parameter<T>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  /// Parameters whose name starts with any of the given prefixes, in
  /// registration order.
  std::vector<Parameter<T>*> with_prefixes(const std::vector<std::string>& prefixes) {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) {
      for (const auto& prefix : prefixes) {
        if (p->name.starts_with(prefix)) {
          out.push_back(p.get());
          break;
        }
      }
    }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace c2crs

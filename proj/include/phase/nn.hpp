#pragma once

// Named parameter storage and the dense building block shared by every model part.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "phase/errors.hpp"
#include "phase/ops.hpp"

namespace phase::nn {

using ad::Shape;
using ad::Tensor;

/// Uniform draw in [0, 1) that is identical on every platform (the standard
/// distributions are implementation-defined).
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Parameters keyed by dotted name. Iteration order is the sorted name order,
/// which also fixes the serialization order.
template <class T>
class ParamStore {
 public:
  /// Adds a parameter drawn uniformly in +-sqrt(6/(fan_in+fan_out)).
  Tensor<T>& add_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                         std::size_t fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    ad::Buffer<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(uniform(rng, -a, a));
    return insert(name, Tensor<T>(std::move(shape), std::move(v), true));
  }

  Tensor<T>& add_constant(const std::string& name, Shape shape, T value) {
    ad::Buffer<T> v(ad::numel(shape), value);
    return insert(name, Tensor<T>(std::move(shape), std::move(v), true));
  }

  Tensor<T>& insert(const std::string& name, Tensor<T> t) {
    if (params_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    return params_.emplace(name, std::move(t)).first->second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Deep copy into another numeric width.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : params_) {
      out.insert(name, Tensor<U>(t.shape(), std::vector<U>(t.data().begin(), t.data().end())));
    }
    return out;
  }

  /// Deep copy with fresh nodes (no shared buffers, no grads).
  ParamStore clone() const { return cast<T>(); }

  /// Overwrites values from `other`, which must have identical names and shapes.
  void assign(const ParamStore& other) {
    if (other.params_.size() != params_.size()) throw ContractError("parameter set mismatch");
    for (auto& [name, t] : params_) {
      const auto& src = other.get(name);
      if (src.shape() != t.shape()) throw DimensionError("parameter shape mismatch for " + name);
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    }
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

template <class T>
void add_dense(ParamStore<T>& p, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng) {
  p.add_uniform(name + ".w", {in, out}, in, out, rng);
  p.add_constant(name + ".b", {out}, T(0));
}

/// x: [B, in] -> [B, out].
template <class T>
Tensor<T> dense(const ParamStore<T>& p, const std::string& name, const Tensor<T>& x) {
  return ad::add_trailing(ad::matmul(x, p.get(name + ".w")), p.get(name + ".b"));
}

}  // namespace phase::nn

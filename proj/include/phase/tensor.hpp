#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Ops executed while a Tape is
// active (see Tape::Scope) append their result node to that tape whenever any
// input requires a gradient; backward() then walks the tape once in reverse.
// Without an active tape ops are plain forward computations and keep no graph.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "phase/errors.hpp"

namespace phase::ad {

/// 64-byte aligned storage, so vectorized kernels take the same path for a
/// given shape no matter where the heap placed the buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(values), requires_grad) {}
  Tensor(Shape shape, Buffer<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> v(numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor filled(Shape shape, T value) {
    Buffer<T> v(numel(shape), value);
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, Buffer<T>{value}, requires_grad);
  }
  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access, meant for parameters between optimizer steps.
  std::span<T> mutable_data() { return node_->value; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// A new leaf with the same values and no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable ops for one forward/backward pass.
/// Ops are appended in execution order, so every op's parents precede it.
template <class T>
class Tape {
 public:
  using Node = TensorNode<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes `tape` the thread's active tape for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_; }

  void record(std::shared_ptr<Node> node) { ops_.push_back(std::move(node)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// Populates grads of every requires_grad leaf reachable from `loss`.
  /// Returns the number of op nodes whose backward rule ran.
  std::size_t backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          to_string(loss.shape()));
    }
    const auto& root = loss.node();
    if (!root->requires_grad) {
      throw ContractError("backward on a loss that does not depend on any parameter");
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    std::size_t visited = 0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      Node& n = **it;
      if (n.grad.empty() || !n.backward_fn) continue;
      n.backward_fn(n);
      ++visited;
    }
    return visited;
  }

 private:
  std::vector<std::shared_ptr<Node>> ops_;
  inline static thread_local Tape* active_ = nullptr;
};

/// Backpropagates through the thread's active tape.
template <class T>
std::size_t backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw ContractError("backward called without an active tape");
  return tape->backward(loss);
}

namespace detail {

template <class T>
void check_finite(const Buffer<T>& v) {
#ifndef NDEBUG
  for (const T x : v) assert(std::isfinite(x) && "non-finite value produced by forward op");
#else
  (void)v;
#endif
}

/// Wraps a computed value as an op result; records it on the active tape when
/// any parent participates in differentiation.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, Buffer<T> value,
                      std::initializer_list<Tensor<T>> parents, Backward&& bw) {
  check_finite(value);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<T>* tape = Tape<T>::active();
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (tape && needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::forward<Backward>(bw);
    tape->record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <class T, class Backward>
Tensor<T> make_result_n(Shape shape, Buffer<T> value, const std::vector<Tensor<T>>& parents,
                        Backward&& bw) {
  check_finite(value);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<T>* tape = Tape<T>::active();
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (tape && needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::forward<Backward>(bw);
    tape->record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Gradient buffer of parent `i`, or nullptr when it does not need one.
template <class T>
T* parent_grad(TensorNode<T>& n, std::size_t i) {
  auto& p = *n.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace detail
}  // namespace phase::ad

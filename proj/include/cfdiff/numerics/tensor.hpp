// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfdiff/numerics/rng.hpp"

namespace cfdiff {

/// Raised for shape violations, non-finite values and misuse of the tape.
class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw NumericsError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

namespace detail {
inline thread_local bool grad_mode = true;
inline std::atomic<std::uint64_t> next_node_id{1};
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// 64-byte aligned storage. Vectorized kernels peel unaligned prefixes, so
/// a fixed base alignment keeps results bitwise reproducible across calls.
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

template <std::floating_point T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::uint64_t id = detail::next_node_id.fetch_add(1, std::memory_order_relaxed);

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <std::floating_point T>
inline void check_finite(std::span<const T> values, const char* op, const char* what = "output") {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite " << what << " in op '" << op << "' at flat index " << i;
      throw NumericsError(os.str());
    }
  }
}

/// Dense row-major tensor with an attached reverse-mode tape.
///
/// A tensor is a cheap handle; copies alias the same storage. Results of
/// primitive ops remember their parents while grad mode is on, and
/// backward() walks that DAG once in reverse topological order.
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeT = Node<T>;
  using NodePtr = std::shared_ptr<NodeT>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor from_data(Shape shape, const std::vector<T>& data) {
    return from_data(std::move(shape), Buffer<T>(data.begin(), data.end()));
  }
  static BasicTensor from_data(Shape shape, std::initializer_list<T> data) {
    return from_data(std::move(shape), Buffer<T>(data));
  }
  static BasicTensor from_data(Shape shape, Buffer<T> data) {
    if (shape_numel(shape) != data.size()) {
      throw NumericsError("data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    }
    check_finite<T>(data, "from_data");
    auto node = std::make_shared<NodeT>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return BasicTensor(std::move(node));
  }

  static BasicTensor full(const Shape& shape, T value) {
    return from_data(shape, Buffer<T>(shape_numel(shape), value));
  }
  static BasicTensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static BasicTensor scalar(T value) { return from_data({1}, {value}); }

  static BasicTensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
    Buffer<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return from_data(shape, std::move(v));
  }

  static BasicTensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    Buffer<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return from_data(shape, std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw NumericsError("dim index out of range for " + shape_str(shape()));
    return shape()[static_cast<std::size_t>(i)];
  }
  std::size_t numel() const { return node().data.size(); }

  std::span<const T> data() const { return node().data; }
  /// Direct write access. Writing into a tensor that already feeds a
  /// recorded graph invalidates that graph's saved inputs.
  std::span<T> mutable_data() { return node().data; }
  std::vector<T> to_vector() const { return {node().data.begin(), node().data.end()}; }

  T item() const {
    if (numel() != 1) throw NumericsError("item() on non-scalar tensor " + shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    node().requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node().grad.empty(); }
  /// Accumulated gradient; zeros when nothing has flowed into this tensor.
  BasicTensor grad() const {
    if (!has_grad()) return zeros(shape());
    return from_data(shape(), node().grad);
  }
  std::span<const T> grad_data() const { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  /// Same values, cut from the graph.
  BasicTensor detach() const { return from_data(shape(), node().data); }

  template <std::floating_point U>
  BasicTensor<U> cast() const {
    std::vector<U> v(numel());
    std::transform(data().begin(), data().end(), v.begin(), [](T x) { return static_cast<U>(x); });
    return BasicTensor<U>::from_data(shape(), std::move(v));
  }

  std::uint64_t id() const { return node().id; }
  const char* op_name() const { return node().op; }

  NodeT& node() const {
    if (!node_) throw NumericsError("use of undefined tensor");
    return *node_;
  }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Wraps freshly computed output values into a tensor and, when grad mode is
/// on and some parent needs a gradient, records `backward` on the tape.
///
/// `backward` receives the output node; its grad buffer is populated and the
/// rule must accumulate into `self.parents[i]->grad_buffer()` for the parents
/// that require gradients.
template <std::floating_point T>
BasicTensor<T> make_op_result(const char* op, Shape shape, Buffer<T> data,
                              const std::vector<BasicTensor<T>>& parents,
                              std::function<void(Node<T>&)> backward) {
  check_finite<T>(data, op);
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return BasicTensor<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor with requires_grad; leaves keep them for the optimizer.
template <std::floating_point T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw NumericsError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  visited.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    for (const auto& p : node->parents) {
      if (p->requires_grad && !p->grad.empty()) check_finite<T>(p->grad, node->op, "gradient");
    }
  }
}

}  // namespace cfdiff

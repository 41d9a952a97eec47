#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A tensor is a shared handle to an immutable buffer plus an optional
// gradient accumulator. Operations that involve at least one tensor with
// requires_grad() record a node holding the backward closure; backward()
// walks those nodes in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ddc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
struct TensorImpl;

template <class T>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the inputs' gradients.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline thread_local bool grad_mode = true;

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording for the lifetime of the guard (per thread).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  BasicTensor() : impl_(std::make_shared<Impl>()) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape) {
    std::vector<T> d(shape_numel(shape), T(0));
    return BasicTensor(std::move(shape), std::move(d));
  }

  static BasicTensor full(Shape shape, T value) {
    std::vector<T> d(shape_numel(shape), value);
    return BasicTensor(std::move(shape), std::move(d));
  }

  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  template <class U>
  static BasicTensor cast_from(const BasicTensor<U>& other) {
    auto src = other.data();
    return BasicTensor(other.shape(), std::vector<T>(src.begin(), src.end()));
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  bool defined() const { return !impl_->shape.empty(); }

  std::span<const T> data() const { return impl_->data; }
  /// Writable view. Only meaningful for leaves (parameters, fresh buffers).
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  BasicTensor& set_requires_grad(bool value) {
    if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// New leaf holding a copy of the values; never participates in the graph.
  BasicTensor detach() const {
    if (!defined()) return {};
    return BasicTensor(shape(), impl_->data);
  }

  BasicTensor clone() const { return detach(); }

  const std::string& op_name() const {
    static const std::string leaf = "leaf";
    return impl_->grad_fn ? impl_->grad_fn->op : leaf;
  }

  void backward() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  bool same(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <class T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

/// Builds an op result; records a node when any input participates in the graph.
template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           std::function<void(const TensorImpl<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!grad_mode) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = std::string(op);
  for (const auto* in : inputs) {
    if (in->requires_grad()) node->inputs.push_back(in->impl());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace detail

template <class T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_string(shape()));
  }
  if (!requires_grad()) return;

  // Iterative DFS post-order gives a topological order (inputs before outputs).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      Impl* child = fn->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Impl* n : order) {
    if (n->grad_fn) n->grad.clear();
  }
  impl_->grad_buffer()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* n = *it;
    if (!n->grad_fn || n->grad.empty()) continue;
    n->grad_fn->backward(*n);
    for (const auto& in : n->grad_fn->inputs) {
      if (!in->grad.empty() && !detail::all_finite(in->grad)) {
        throw NumericError("non-finite gradient produced by backward of op '" +
                           n->grad_fn->op + "'");
      }
    }
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace ddc

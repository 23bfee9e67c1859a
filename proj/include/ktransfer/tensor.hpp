#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap handle onto shared storage. Operations that see at
// least one input with requires_grad() record a Node holding the inputs and a
// backward rule. backward() collects every node reachable from the loss,
// orders them by creation sequence (inputs always precede their consumers)
// and replays the rules in reverse, accumulating into leaf gradients.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ktransfer/error.hpp"

namespace ktransfer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node;

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty == absent
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;  // producer; null for leaves
};

// Backward rule: receives the gradient of the node's output and one span per
// input. Spans for inputs that do not require grad are empty and must be
// skipped; the others must be accumulated into (+=).
template <class T>
using BackwardFn = std::function<void(std::span<const T>, std::span<const std::span<T>>)>;

template <class T>
struct Node {
  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
};

}  // namespace detail

/// True while operations record onto the tape (default).
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    validate_shape(shape);
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    validate_shape(shape);
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
  std::size_t ndim() const { return impl().shape.size(); }
  std::size_t size() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  /// Direct write access; for leaves (parameters, inputs) only.
  std::span<T> mutable_data() { return impl().data; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl().data[0];
  }
  T operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool value) { impl().requires_grad = value; }
  bool is_leaf() const { return impl().node == nullptr; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return impl().grad;
  }
  void zero_grad() { impl().grad.clear(); }

  /// A new leaf sharing no storage and no history.
  Tensor detach() const {
    Tensor out;
    out.impl_ = std::make_shared<detail::TensorImpl<T>>();
    out.impl_->shape = shape();
    out.impl_->data = impl().data;
    return out;
  }
  Tensor clone() const {
    Tensor out = detach();
    out.impl_->requires_grad = requires_grad();
    return out;
  }

  /// Name of the recording operation, empty for leaves.
  std::string op_name() const { return impl().node ? impl().node->op : std::string{}; }

  const detail::TensorImpl<T>& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }
  detail::TensorImpl<T>& impl() {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }
  const std::shared_ptr<detail::TensorImpl<T>>& handle() const { return impl_; }

  /// Builds the result of an operation and records it when any input needs grad.
  static Tensor make_result(Shape shape, std::vector<T> data, std::string op,
                            std::vector<Tensor> inputs, detail::BackwardFn<T> backward) {
    Tensor out(std::move(shape), std::move(data));
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (!needs) return out;
    auto node = std::make_shared<detail::Node<T>>();
    node->seq = detail::node_counter().fetch_add(1) + 1;
    node->op = std::move(op);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl_);
    node->backward = std::move(backward);
    out.impl_->node = std::move(node);
    out.impl_->requires_grad = true;
    return out;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + to_string(shape));
    }
  }
  void ensure_grad() {
    if (impl().grad.empty()) impl().grad.assign(impl().data.size(), T(0));
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Ordered record of the operations reachable from a tensor, in creation
/// order. Every node's inputs precede it.
template <class T>
struct Tape {
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;

  static Tape collect(const Tensor<T>& root) {
    Tape tape;
    std::unordered_map<const detail::Node<T>*, bool> seen;
    std::vector<std::shared_ptr<detail::Node<T>>> stack;
    if (root.impl().node) stack.push_back(root.impl().node);
    while (!stack.empty()) {
      auto node = std::move(stack.back());
      stack.pop_back();
      if (seen.contains(node.get())) continue;
      seen.emplace(node.get(), true);
      for (const auto& in : node->inputs) {
        if (in->node && !seen.contains(in->node.get())) stack.push_back(in->node);
      }
      tape.nodes.push_back(std::move(node));
    }
    std::sort(tape.nodes.begin(), tape.nodes.end(),
              [](const auto& a, const auto& b) { return a->seq < b->seq; });
    return tape;
  }
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// the scalar `loss`. Repeated calls accumulate.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  auto& root = const_cast<detail::TensorImpl<T>&>(loss.impl());
  if (!root.node) {
    if (root.grad.empty()) root.grad.assign(1, T(0));
    root.grad[0] += T(1);
    return;
  }
  const Tape<T> tape = Tape<T>::collect(loss);
  std::unordered_map<const detail::Node<T>*, std::vector<T>> node_grads;
  node_grads[root.node.get()] = std::vector<T>{T(1)};

  std::vector<std::span<T>> spans;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    const auto& node = *it;
    auto found = node_grads.find(node.get());
    if (found == node_grads.end()) continue;
    const std::vector<T> out_grad = std::move(found->second);
    node_grads.erase(found);

    spans.assign(node->inputs.size(), std::span<T>{});
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      auto& in = *node->inputs[i];
      if (!in.requires_grad) continue;
      if (in.node) {
        auto& g = node_grads[in.node.get()];
        if (g.empty()) g.assign(in.data.size(), T(0));
        spans[i] = g;
      } else {
        if (in.grad.empty()) in.grad.assign(in.data.size(), T(0));
        spans[i] = in.grad;
      }
    }
    node->backward(out_grad, spans);
  }
}

}  // namespace ktransfer

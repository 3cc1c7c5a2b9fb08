#pragma once

// Dense row-major tensors with a define-by-run gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Every differentiable op
// creates a new node that remembers its inputs and a backward rule whenever
// gradient recording is enabled and at least one input requires a gradient.
// backward() orders the recorded nodes topologically, runs each rule once and
// then releases the graph.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace morphdiff {

using Shape = std::vector<std::int64_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <class S>
struct Node {
  using Ptr = std::shared_ptr<Node>;
  using BackwardFn = std::function<void(const std::vector<S>& grad_out, const std::vector<Ptr>& inputs)>;

  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  const char* op = "leaf";
  std::vector<Ptr> inputs;
  BackwardFn backward;

  std::vector<S>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), S{0});
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class S>
class Tensor {
  static_assert(std::is_floating_point_v<S>, "Tensor scalar must be a floating-point type");

 public:
  using Scalar = S;
  using NodeType = detail::Node<S>;
  using NodePtr = std::shared_ptr<NodeType>;

  Tensor() = default;

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false) : node_(std::make_shared<NodeType>()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("tensor shape " + shape_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                       " values but " + std::to_string(values.size()) + " were supplied");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), S{0}, requires_grad); }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return Tensor(std::move(shape), std::vector<S>(n, value), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) { return Tensor(Shape{}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return checked().shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  std::int64_t dim(std::size_t i) const {
    if (i >= shape().size()) throw ShapeError("dimension " + std::to_string(i) + " out of range for " + shape_string(shape()));
    return shape()[i];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(checked().value.size()); }

  std::span<const S> data() const { return checked().value; }

  // In-place access is limited to leaves (parameters, inputs); mutating a
  // recorded intermediate would silently invalidate its consumers.
  std::span<S> mutable_data() {
    if (!checked().leaf) throw TapeError(std::string("cannot modify the output of op '") + node_->op + "' in place");
    return node_->value;
  }

  S operator[](std::int64_t i) const { return checked().value.at(static_cast<std::size_t>(i)); }

  S item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return checked().requires_grad; }

  Tensor& set_requires_grad(bool on) {
    if (!checked().leaf) throw TapeError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return checked().leaf; }
  const char* op_name() const { return checked().op; }

  bool has_grad() const { return !checked().grad.empty(); }
  std::span<const S> grad() const { return checked().grad; }
  std::span<S> mutable_grad() { return checked().grad_buffer(); }
  void zero_grad() { checked().grad.clear(); }

  // Copy of the current values as a fresh leaf without gradient tracking.
  Tensor detach() const { return Tensor(shape(), checked().value, false); }

  template <class T>
  Tensor<T> cast() const {
    std::vector<T> out(checked().value.begin(), checked().value.end());
    return Tensor<T>(shape(), std::move(out), false);
  }

 private:
  NodeType& checked() const {
    if (!node_) throw TapeError("use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

// Records `value` as the output of `op`. The backward rule is attached only
// when recording is on and some input participates in the tape.
template <class S>
Tensor<S> record(const char* op, Shape shape, std::vector<S> value, const std::vector<Tensor<S>>& inputs,
                 typename detail::Node<S>::BackwardFn backward) {
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<S>& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor<S>(std::move(node));
}

// Ordered list of the recorded ops reachable from a root; inputs precede the
// ops that consume them.
template <class S>
class Tape {
 public:
  using NodeType = detail::Node<S>;

  static Tape collect(const Tensor<S>& root) {
    Tape tape;
    std::unordered_set<const NodeType*> seen;
    std::vector<std::pair<NodeType*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        NodeType* child = node->inputs[next++].get();
        if (child->requires_grad && !child->leaf && seen.insert(child).second) stack.emplace_back(child, 0);
        continue;
      }
      if (!node->leaf) tape.ops_.push_back(node);
      stack.pop_back();
    }
    return tape;
  }

  std::size_t size() const { return ops_.size(); }
  std::span<NodeType* const> ops() const { return ops_; }

  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    for (const auto* n : ops_) names.emplace_back(n->op);
    return names;
  }

  bool topologically_ordered() const {
    std::unordered_set<const NodeType*> done;
    for (const auto* n : ops_) {
      for (const auto& in : n->inputs) {
        if (!in->leaf && in->requires_grad && !done.count(in.get())) return false;
      }
      done.insert(n);
    }
    return true;
  }

 private:
  std::vector<NodeType*> ops_;
};

// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient and
// releases the graph. Calling it again on the same graph is an error.
template <class S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw TapeError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward expects a scalar loss, got shape " + shape_string(loss.shape()));
  auto& root = *loss.node();
  if (root.released) throw TapeError("backward already ran on this graph; rebuild it with a new forward pass");
  if (!root.requires_grad) throw TapeError("loss is not on the tape: none of its inputs requires a gradient");

  const Tape<S> tape = Tape<S>::collect(loss);
  root.grad_buffer()[0] += S{1};
  const auto ops = tape.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad, node->inputs);
  }
  for (auto* node : ops) {
    node->backward = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->released = true;
  }
}

}  // namespace morphdiff

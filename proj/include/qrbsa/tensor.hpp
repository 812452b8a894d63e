#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace qrbsa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Propagates this node's grad into its parents' grads. Set only on
  // non-leaf nodes created while grad mode is enabled.
  std::function<void(TensorNode&)> backward_step;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Thread-local switch recording whether ops should build the tape.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// RAII guard disabling tape construction (inference / raw evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense n-dimensional tensor with reverse-mode autodiff. A Tensor is a
// value-semantics handle to a shared node; ops record a dynamic tape that
// backward() replays in reverse topological order.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(1), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_size(shape), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size())
      throw std::invalid_argument("tensor data length does not match shape " +
                                  shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return filled(Shape{1}, v, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }

  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  void zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
  }

  T item() const {
    if (size() != 1) throw std::logic_error("item() requires a scalar tensor");
    return node_->value[0];
  }

  // Value copy detached from the tape.
  Tensor detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = false;
    return Tensor(std::move(node));
  }

  // Reverse-mode sweep seeded with d(root)/d(root) = 1. Root must be scalar.
  void backward() {
    if (size() != 1) throw std::logic_error("backward() requires a scalar root");
    std::vector<Node*> order = topo_order();
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_step && !n->grad.empty()) n->backward_step(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; tapes can be thousands of nodes deep.
    struct Frame {
      Node* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Node* p = f.node->parents[f.next_parent++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

}  // namespace qrbsa

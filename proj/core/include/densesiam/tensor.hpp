#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dsiam {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the autodiff graph. Non-leaf nodes own a backward closure
// that reads `grad` and accumulates into the grads of their parents.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a graph node; copies alias the same node.
/// Operations in ops.hpp build new nodes and record parent links only when
/// some input requires a gradient, so inference graphs carry no closures.
/// A graph is single-owner: evaluate and backpropagate it from one thread.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  // Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // Direct mutation; meant for leaves (parameters, inputs, running stats).
  std::span<T> data_mut();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  /// Backpropagates from this scalar into every reachable leaf with
  /// requires_grad. Leaf gradients accumulate across calls; intermediate
  /// gradients are reset at the start of each call. A loss that does not
  /// require grad (fully detached graph) is a no-op.
  void backward() const;

  // Fresh leaf holding a copy of the values, with no graph history.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Creates a result node. Parents and the closure are kept only when at least
// one parent requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<typename Tensor<T>::NodePtr> parents, BackwardFn<T> fn);

}  // namespace detail

}  // namespace dsiam

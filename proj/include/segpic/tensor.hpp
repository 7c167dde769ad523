#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "segpic/error.hpp"

namespace segpic {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording is enabled per thread; inference code disables it.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array that may participate in a reverse-mode graph.
///
/// Tensor is a handle: copies share the same node. Values produced by ops
/// are never modified afterwards; only leaves (parameters, test inputs) are
/// written through mutable_values().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Empty span when no gradient has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  // Reverse sweep from this scalar. Gradients accumulate into leaves.
  void backward() const;

  // Copy of the values with no graph attached.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

namespace detail {

// Builds an op result. When recording is on and any input requires grad,
// the result joins the graph with the given backward closure.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn);

// Adds src into the parent's gradient if the parent takes gradients.
template <typename T>
void accumulate(Node<T>& parent, std::span<const T> src);

// Branch decisions of piecewise ops (LeakyReLU sign, clamp range, likelihood
// floors). In record mode each op's decisions are stored in call order; in
// replay mode they are overwritten from the tape, so finite-difference
// evaluations stay on the same linear piece as the analytic pass.
enum class BranchMode { off, record, replay };
void set_branch_mode(BranchMode mode);
BranchMode branch_mode();
void clear_branch_tape();
void resolve_branches(std::vector<unsigned char>& decisions);

}  // namespace detail

}  // namespace segpic

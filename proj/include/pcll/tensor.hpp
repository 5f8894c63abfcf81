#pragma once

// Dense float tensors with reverse-mode automatic differentiation.
//
// Every op allocates a fresh node that remembers its inputs and a closure
// computing their gradient contributions, so the graph is rebuilt on each
// forward pass. Tensor is a cheap handle (shared ownership of the node);
// copying a Tensor aliases the same storage.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcll {

using Shape = std::vector<int>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  ShapeError(const std::string& op, const std::string& detail);
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;     // persistent gradient of a leaf
  std::vector<float> pending;  // scratch gradient during one backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  std::vector<float>& pending_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(int row, int col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // Gradient of a leaf tensor; empty until a backward pass reaches it.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  // Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  // New leaf with copied values and no history.
  Tensor detach() const;

  const void* id() const { return node_.get(); }

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace pcll

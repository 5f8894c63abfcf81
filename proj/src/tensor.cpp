#include "pcll/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace pcll {
namespace {
thread_local bool t_grad_enabled = true;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + to_string(a) + " vs " + to_string(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail) {}

std::vector<float>& detail::Node::pending_grad() {
  if (pending.empty()) pending.assign(data.size(), 0.0f);
  return pending;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  for (int d : shape)
    if (d < 0) throw ShapeError("tensor", "negative dimension in " + to_string(shape));
  node->data.assign(pcll::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (pcll::numel(shape) != values.size())
    throw ShapeError("tensor", "shape " + to_string(shape) + " needs " +
                                   std::to_string(pcll::numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("dim", "axis out of range for " + to_string(s));
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<float> Tensor::data() { return node_->data; }
std::span<const float> Tensor::data() const { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "expected a single element, shape " + to_string(shape()));
  return node_->data[0];
}

float Tensor::at(int row, int col) const {
  return node_->data[static_cast<std::size_t>(row) * static_cast<std::size_t>(dim(-1)) +
                     static_cast<std::size_t>(col)];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

std::span<float> Tensor::grad() { return node_->grad; }
std::span<const float> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
  if (numel() != 1)
    throw ShapeError("backward", "loss must be a scalar, got shape " + to_string(shape()));

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) n->pending.clear();
  node_->pending_grad()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    if (!n->pending.empty() && n->backward_fn) n->backward_fn(*n);
    n->pending.clear();
    n->pending.shrink_to_fit();
  }
  // Leaf gradients are summed in a scratch buffer first, so that repeated
  // backward passes add identical increments.
  for (detail::Node* n : order) {
    if (!n->is_leaf() || n->pending.empty()) continue;
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0f);
    for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pending[i];
    n->pending.clear();
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace pcll

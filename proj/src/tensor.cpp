#include "robtok/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace robtok {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
std::atomic<std::uint64_t> g_gradient_count{0};

detail::NodePtr new_node(Shape shape, Vector value, bool requires_grad) {
  if (numel(shape) != value.size()) {
    throw ShapeError("tensor data length " + std::to_string(value.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= e;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Vector& detail::Node::grad_buffer() {
  if (grad.size() == 0) grad = Vector::Zero(value.size());
  return grad;
}

Tensor::Tensor() : node_(new_node({}, Vector::Zero(1), false)) {}

Tensor::Tensor(Shape shape, Vector values, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Vector::Zero(n), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Vector::Constant(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, Vector::Constant(1, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Vector v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Index Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + to_string(shape()));
  return node_->shape[static_cast<size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Vector& Tensor::mutable_value() {
  if (!node_->is_leaf()) throw ContractError("mutable_value() on a non-leaf tensor");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.resize(0);
}

Vector Tensor::grad() const {
  if (node_->grad.size() == 0) return Vector::Zero(node_->value.size());
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

Tensor Tensor::clone(bool requires_grad) const { return Tensor(node_->shape, node_->value, requires_grad); }

ConstMatrixMap Tensor::matrix() const {
  const Index cols = rank() == 0 ? 1 : node_->shape.back();
  const Index rows = cols == 0 ? 0 : size() / cols;
  return ConstMatrixMap(node_->value.data(), rows, cols);
}

Tensor make_result(Shape shape, Vector value, const std::vector<Tensor>& inputs,
                   std::function<void(const Vector&)> backward_rule) {
  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  auto node = new_node(std::move(shape), std::move(value), needs_grad);
  if (needs_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward_rule);
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, Vector value, std::initializer_list<Tensor> inputs,
                   std::function<void(const Vector&)> backward_rule) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(backward_rule));
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  g_gradient_count.fetch_add(1, std::memory_order_relaxed);
  const auto& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !parent->is_leaf() && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().array() += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf() || node->grad.size() == 0) continue;
    node->backward(node->grad);
    // Interior gradients are not kept once propagated.
    node->grad.resize(0);
  }
}

std::uint64_t gradient_count() { return g_gradient_count.load(std::memory_order_relaxed); }

void reset_gradient_count() { g_gradient_count.store(0, std::memory_order_relaxed); }

}  // namespace robtok

#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robtok {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Raised for any extent or rank mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an operation's precondition (non-scalar loss,
/// degenerate input at the public API, invalid label, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Vector value;
  Vector grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Vector& out_grad)> backward;

  bool is_leaf() const { return parents.empty(); }
  Vector& grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major n-d array of doubles recorded on a dynamic tape.
///
/// Copies share the same underlying node, so a Tensor behaves like a handle.
/// Operations on tensors that require gradients record their parents and a
/// backward rule; operations on constants record nothing.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Vector values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  Index dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  std::uint64_t node_id() const { return node_->id; }

  const Vector& value() const { return node_->value; }
  std::span<const double> data() const { return {node_->value.data(), static_cast<size_t>(node_->value.size())}; }
  double item() const;
  double operator[](Index i) const { return node_->value[i]; }

  /// Writable storage; only permitted on leaves.
  Vector& mutable_value();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Gradient after backward(); zeros when nothing reached this tensor.
  Vector grad() const;
  void zero_grad() { node_->grad.resize(0); }

  /// New leaf with the same values and no history.
  Tensor detach() const;
  /// Independent deep copy (leaf).
  Tensor clone(bool requires_grad = false) const;

  /// Row-major matrix view folding all leading axes into rows.
  ConstMatrixMap matrix() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Build an op result. When any input requires grad the result records the
/// inputs as parents and keeps `backward`; otherwise the rule is dropped.
Tensor make_result(Shape shape, Vector value, std::initializer_list<Tensor> inputs,
                   std::function<void(const Vector&)> backward);
Tensor make_result(Shape shape, Vector value, const std::vector<Tensor>& inputs,
                   std::function<void(const Vector&)> backward);

/// Reverse sweep from a scalar loss. Leaf gradients accumulate.
void backward(const Tensor& loss);

/// Number of backward() invocations since process start (or last reset).
std::uint64_t gradient_count();
void reset_gradient_count();

}  // namespace robtok

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace vpcsv {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapRM = Eigen::Map<MatrixRM<Scalar>>;
template <typename Scalar>
using ConstMapRM = Eigen::Map<const MatrixRM<Scalar>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Disables graph recording on the current thread for its lifetime.
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

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  VectorX<Scalar> value;
  VectorX<Scalar> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool retain_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  VectorX<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = VectorX<Scalar>::Zero(value.size());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && value.size() > 0; }
};

}  // namespace detail

/// Dense row-major tensor with an optional reverse-mode tape.
///
/// A Tensor is a cheap shared handle; copies alias the same storage. Values are
/// stored flat in an Eigen column vector and reinterpreted as row-major
/// matrices by the kernels.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using Vector = VectorX<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_data(Shape shape, Vector data, bool requires_grad = false);
  static Tensor scalar(Scalar value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int axis) const;
  Index numel() const { return node_->value.size(); }

  Vector& data() { return node_->value; }
  const Vector& data() const { return node_->value; }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->has_grad(); }
  /// Gradient accumulated by backward(); zeros if nothing reached this tensor.
  Vector grad() const;
  Vector& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0); }
  /// Keep this intermediate's gradient after backward() instead of freeing it.
  void retain_grad() { node_->retain_grad = true; }

  /// Value copy that is a fresh leaf with no history.
  Tensor detach() const;

  MapRM<Scalar> matrix(Index rows, Index cols);
  ConstMapRM<Scalar> matrix(Index rows, Index cols) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Intermediate gradients are released unless retain_grad() was called.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

namespace detail {

/// Builds an op result. History is recorded only when grad mode is on and at
/// least one input requires grad.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, VectorX<Scalar> value, const char* op,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward_fn);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace vpcsv

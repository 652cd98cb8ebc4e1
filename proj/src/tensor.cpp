#include "vpcsv/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace vpcsv {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return from_data(std::move(shape), Vector::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_data(Shape shape, Vector data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return from_data({}, Vector::Constant(1, value));
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("dim: axis out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename Scalar>
typename Tensor<Scalar>::Vector Tensor<Scalar>::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Vector::Zero(numel());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return from_data(shape(), data());
}

template <typename Scalar>
MapRM<Scalar> Tensor<Scalar>::matrix(Index rows, Index cols) {
  if (rows * cols != numel()) {
    throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " of shape " + shape_str(shape()));
  }
  return MapRM<Scalar>(node_->value.data(), rows, cols);
}

template <typename Scalar>
ConstMapRM<Scalar> Tensor<Scalar>::matrix(Index rows, Index cols) const {
  if (rows * cols != numel()) {
    throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " of shape " + shape_str(shape()));
  }
  return ConstMapRM<Scalar>(node_->value.data(), rows, cols);
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using Node = detail::Node<Scalar>;
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer().array() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    if (node->has_grad()) node->backward(*node);
    if (!node->retain_grad && node != loss.node()) node->grad.resize(0);
  }
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, VectorX<Scalar> value, const char* op,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward_fn) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": internal shape " + shape_str(shape) + " vs " +
                     std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node_ptr());
    }
    node->backward = std::move(backward_fn);
  }
  return Tensor<Scalar>(std::move(node));
}

template Tensor<float> make_result(Shape, VectorX<float>, const char*, std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, VectorX<double>, const char*, std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace vpcsv

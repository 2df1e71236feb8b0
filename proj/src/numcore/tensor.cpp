#include "guided_attn/numcore/tensor.hpp"

#include <sstream>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::numcore {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw UsageError("tensor shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<Real>>(std::move(data));
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  data_ = std::make_shared<const std::vector<Real>>(shape_numel(shape_), fill);
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor with " + std::to_string(numel()) + " values");
  return (*data_)[0];
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

template <typename Real>
Tensor<Real> Tensor<Real>::with_shape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw UsageError("cannot view " + shape_to_string(shape_) + " as " + shape_to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

template <typename Real>
Tensor<Real> Tape<Real>::leaf(const Tensor<Real>& value) {
  Node node;
  node.numel = value.numel();
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  Tensor<Real> out = value.detach();
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

template <typename Real>
Tensor<Real> Tape<Real>::record(Shape shape, std::vector<Real> values, Adjoint adjoint) {
  Tensor<Real> out(std::move(shape), std::move(values));
  Node node;
  node.numel = out.numel();
  node.adjoint = std::move(adjoint);
  nodes_.push_back(std::move(node));
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

template <typename Real>
void Tape<Real>::accumulate(std::size_t node, std::span<const Real> grad) {
  Node& n = nodes_.at(node);
  if (grad.size() != n.numel) throw UsageError("gradient size mismatch on tape node");
  if (n.grad.empty()) {
    n.grad.assign(grad.begin(), grad.end());
    return;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) n.grad[i] += grad[i];
}

template <typename Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (loss.tape() != this) throw UsageError("backward(): loss is not recorded on this tape");
  if (loss.numel() != 1) {
    throw UsageError("backward(): loss must be scalar, got " + shape_to_string(loss.shape()));
  }
  for (auto& n : nodes_) {
    if (!n.is_leaf) n.grad.clear();
  }
  const Real one = 1;
  accumulate(loss.node(), std::span<const Real>(&one, 1));
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || n.grad.empty() || !n.adjoint) continue;
    // The adjoint may append to other nodes' grads but never to its own.
    std::vector<Real> g = std::move(n.grad);
    n.adjoint(g, *this);
    n.grad = std::move(g);
  }
}

template <typename Real>
std::span<const Real> Tape<Real>::grad(const Tensor<Real>& t) const {
  if (t.tape() != this) return {};
  return nodes_.at(t.node()).grad;
}

template <typename Real>
bool Tape<Real>::has_grad(const Tensor<Real>& t) const {
  return t.tape() == this && !nodes_.at(t.node()).grad.empty();
}

template <typename Real>
void Tape<Real>::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

template <typename Real>
void Tape<Real>::clear() {
  nodes_.clear();
}

template <typename Real>
Tape<Real>* common_tape(std::initializer_list<const Tensor<Real>*> inputs) {
  Tape<Real>* tape = nullptr;
  for (const auto* t : inputs) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape()) throw UsageError("inputs recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tape<float>* common_tape(std::initializer_list<const Tensor<float>*>);
template Tape<double>* common_tape(std::initializer_list<const Tensor<double>*>);

}  // namespace guided_attn::numcore

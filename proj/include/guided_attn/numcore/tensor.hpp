#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace guided_attn::numcore {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename Real>
class Tape;

// Immutable dense array. A tensor either is a constant (no tape) or refers
// to a node of exactly one Tape; only the latter participate in backward().
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data);
  explicit Tensor(Shape shape, Real fill = Real(0));

  static Tensor scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return numel() == 0; }

  std::span<const Real> data() const {
    return data_ ? std::span<const Real>(*data_) : std::span<const Real>();
  }
  const Real& operator[](std::size_t i) const { return (*data_)[i]; }
  Real item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<Real>* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  // Same values, no tape reference.
  Tensor detach() const;
  // Shares storage; only the extents change.
  Tensor with_shape(Shape shape) const;
  // Copy of the values converted to another precision (always a constant).
  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Other>((*data_)[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

 private:
  friend class Tape<Real>;

  Shape shape_;
  std::shared_ptr<const std::vector<Real>> data_;
  Tape<Real>* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Append-only record of primitive applications. Nodes are appended in
// evaluation order, so reverse insertion order is a valid reverse
// topological order for replaying adjoints.
template <typename Real>
class Tape {
 public:
  // Receives the gradient flowing into a node's output and pushes
  // contributions to its parents through Tape::accumulate.
  using Adjoint = std::function<void(std::span<const Real> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // New trainable leaf holding a copy of `value`'s storage (shared, not copied).
  Tensor<Real> leaf(const Tensor<Real>& value);

  // Records an op output. `adjoint` may capture parent node ids and saved
  // inputs; it is dropped by clear().
  Tensor<Real> record(Shape shape, std::vector<Real> values, Adjoint adjoint);

  void accumulate(std::size_t node, std::span<const Real> grad);

  // Seeds d loss / d loss = 1 and replays adjoints in reverse. Leaf
  // gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor<Real>& loss);

  // Gradient of a leaf (or any node after backward); empty span when the
  // node received no gradient.
  std::span<const Real> grad(const Tensor<Real>& t) const;
  bool has_grad(const Tensor<Real>& t) const;

  void zero_grad();
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t numel = 0;
    bool is_leaf = false;
    std::vector<Real> grad;
    Adjoint adjoint;
  };
  std::vector<Node> nodes_;
};

// Common tape of a set of inputs (nullptr when all are constants). Throws
// when inputs belong to different tapes.
template <typename Real>
Tape<Real>* common_tape(std::initializer_list<const Tensor<Real>*> inputs);

}  // namespace guided_attn::numcore

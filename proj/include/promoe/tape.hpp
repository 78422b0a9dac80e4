#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "promoe/array.hpp"

namespace promoe {

/// A trainable tensor that outlives any single tape. Gradients from every
/// backward pass are accumulated into `grad` until zeroed.
template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
  Array<T> grad;

  Parameter() = default;
  Parameter(std::string n, Array<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = Array<T>(value.shape()); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid as long as the
/// tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Array<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
  /// Gradient after backward(); zeros for nodes the loss does not depend on.
  Array<T> grad() const;
  bool requires_grad() const;
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
/// recording order is already a topological order; backward() walks it in
/// reverse exactly once.
template <typename T>
class Tape {
 public:
  /// Receives the tape and the id of the node whose gradient is being
  /// propagated. Reads `tape.grad_of(self)` and calls `tape.accumulate`.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Array<T> value);
  /// Free-standing differentiable leaf; its gradient is read back via Var::grad.
  Var<T> variable(Array<T> value);
  /// Leaf bound to a parameter; backward() adds into `p.grad`.
  Var<T> leaf(Parameter<T>& p);

  /// Records an op output. `fn` is dropped when no input requires a gradient.
  Var<T> record(Array<T> value, std::vector<std::size_t> inputs, BackwardFn fn);

  void backward(Var<T> loss);

  const Array<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node during backward; empty array when never touched.
  const Array<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient slot of `id`, zero-initialized on first use. Null when the node
  /// does not require a gradient.
  Array<T>* accumulate(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const Array<T>& Var<T>::value() const {
  return tape->value_of(id);
}

template <typename T>
Array<T> Var<T>::grad() const {
  const auto& g = tape->grad_of(id);
  if (g.empty() && value().size() != 0) return Array<T>(value().shape());
  return g;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

}  // namespace promoe

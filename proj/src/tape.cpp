#include "promoe/tape.hpp"

namespace promoe {

template <typename T>
Var<T> Tape<T>::constant(Array<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Array<T> value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr, {}, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Parameter<T>& p) {
  nodes_.push_back(Node{p.value, {}, true, &p, {}, {}});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Array<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  Node node{std::move(value), {}, needs, nullptr, {}, {}};
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Array<T>* Tape<T>::accumulate(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty() && n.value.size() != 0) n.grad = Array<T>(n.value.shape());
  return &n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  if (backward_done_) throw ContractError("backward: tape already consumed");
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  accumulate(loss.id)->fill(T{1});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.shape() != n.grad.shape()) pg = Array<T>(n.value.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace promoe

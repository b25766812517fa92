#include "molfuse/numerics/tape.hpp"

#include "molfuse/error.hpp"

namespace molfuse::numerics {

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Var::grad() const { return tape_->grad(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  require_finite(value, "constant input");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  require_finite(value, "variable input");
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw IndexError("tape input refers to a future node");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& node = nodes_[id];
  if (!node.has_grad) {
    // Untouched nodes have a zero gradient; materialise lazily.
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::backward(Var output) {
  if (output.tape_ != this) throw PreconditionError("backward called with a foreign Var");
  if (backward_done_) throw PreconditionError("backward already ran on this tape");
  if (value(output.id()).size() != 1) {
    throw DimensionError("backward needs a single-element output, got shape " +
                         shape_string(value(output.id()).shape()));
  }
  backward_done_ = true;
  grad_buffer(output.id())[0] = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.has_grad || !node.backward) continue;
    ++backward_visits_;
    node.backward(*this, i);
  }
}

}  // namespace molfuse::numerics

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "molfuse/numerics/tensor.hpp"

namespace molfuse::numerics {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node
// list is already a topological order; backward walks it in reverse once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Used by op implementations. `backward` is dropped when no input needs a
  // gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Accumulation target for node `id`, zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id);

  // Seeds d(output)/d(output) = 1 and propagates. `output` must hold a
  // single element. May be called once per tape.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;
    mutable bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references while the tape grows
  bool backward_done_ = false;
  std::size_t backward_visits_ = 0;
};

}  // namespace molfuse::numerics

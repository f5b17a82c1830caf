#include "nap/tape.hpp"

#include <algorithm>

#include "nap/errors.hpp"

namespace nap {

Tape& Var::tape() const {
  if (tape_ == nullptr) throw Error("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(*this); }

bool Var::requires_grad() const { return tape().requires_grad(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward_fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward_fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward_fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw Error("operand recorded on a different tape");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  Node n{std::move(value), {}, {}, needs, false};
  if (needs) n.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw Error("Var does not belong to this tape");
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw Error("Var does not belong to this tape");
  return nodes_[v.id_];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Tape::grad_accumulator(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (backward_done_) throw Error("tape has already been back-propagated");
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw DimensionError("backward() needs a single-valued loss, got shape " +
                         shape_to_string(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_accumulator(loss).fill(1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward_fn) continue;
    n.backward_fn(*this, Var(this, i));
    // Interior gradients are not needed once propagated.
    n.backward_fn = nullptr;
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.has_grad) return Tensor(n.value.shape());
  return n.grad;
}

}  // namespace nap

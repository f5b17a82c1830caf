#pragma once

#include <cstddef>
#include <deque>
#include <functional>

#include "nap/tensor.hpp"

namespace nap {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid only while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] Tape& tape() const;
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Operations append nodes in execution order; `backward` walks them in
/// reverse and calls each node's backward closure once. A tape can be
/// back-propagated exactly once. Tapes share no state, so independent tapes
/// may be used from different threads.
class Tape {
 public:
  /// Receives the tape and the node being differentiated; reads the node's
  /// gradient and accumulates into the gradients of its inputs.
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is collected by `backward`.
  Var parameter(Tensor value);

  /// Appends a computed node. The node requires a gradient iff any input
  /// does; otherwise `backward_fn` is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward_fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward_fn);

  [[nodiscard]] const Tensor& value(Var v) const;
  [[nodiscard]] bool requires_grad(Var v) const;

  /// Gradient buffer of `v`, zero-initialized on first access. Backward
  /// closures accumulate into this.
  Tensor& grad_accumulator(Var v);

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(Var loss);

  /// Gradient of the loss w.r.t. `v` after `backward`; zeros if `v` did not
  /// influence the loss.
  [[nodiscard]] Tensor grad(Var v) const;

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] bool backward_done() const noexcept { return backward_done_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward_fn;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  // deque keeps node addresses stable as the tape grows.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace nap

#pragma once

#include "bagcn/tensor.hpp"

#include <functional>
#include <unordered_map>
#include <vector>

namespace bagcn {

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid for the tape's
/// lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Dynamic reverse-mode tape. One tape records one forward pass; backward()
/// replays it in reverse and accumulates gradients into every watched
/// Parameter reachable from the loss. A tape is confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a plain value; no gradient flows out of it.
  Var constant(Tensor value);

  /// Leaf bound to a Parameter. Watching the same Parameter twice yields the
  /// same node, so all uses share one gradient accumulator.
  Var watch(Parameter& p);

  /// Record an operation result. `backward` reads grad(self) and adds into
  /// grad(parent) for each parent; it must not touch any value buffer.
  Var emit(Tensor value, std::vector<int> parents, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const std::vector<int>& parents(int id) const {
    return nodes_[static_cast<size_t>(id)].parents;
  }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Gradient buffer of a node; valid only inside backward().
  ArrayX& grad(int id);

  /// Reverse sweep from a scalar loss. Node gradients are scratch per call;
  /// Parameter gradients accumulate across calls until cleared externally.
  void backward(const Var& loss);

 private:
  struct Node {
    Tensor value;
    ArrayX grad;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> watched_;
  bool sweeping_ = false;
};

inline const Tensor& Var::value() const {
  require(valid(), "use of an empty Var");
  return tape->value(id);
}

/// Convenience free function mirroring loss.tape->backward(loss).
void backward(const Var& loss);

}  // namespace bagcn

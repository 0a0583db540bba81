#include "bagcn/tape.hpp"

namespace bagcn {

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, size() - 1};
}

Var Tape::watch(Parameter& p) {
  auto it = watched_.find(&p);
  if (it != watched_.end()) return Var{this, it->second};
  Node node;
  node.value = p.value;  // snapshot; parameters do not change during a pass
  node.param = &p;
  nodes_.push_back(std::move(node));
  int id = size() - 1;
  watched_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::emit(Tensor value, std::vector<int> parents, BackwardFn backward) {
  for (int parent : parents)
    require(parent >= 0 && parent < size(), "op parent recorded out of order");
  Node node;
  node.value = std::move(value);
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, size() - 1};
}

ArrayX& Tape::grad(int id) {
  Node& node = nodes_[static_cast<size_t>(id)];
  require(sweeping_, "node gradients exist only during backward()");
  if (node.grad.size() != node.value.numel()) node.grad = ArrayX::Zero(node.value.numel());
  return node.grad;
}

void Tape::backward(const Var& loss) {
  require(loss.valid() && loss.tape == this, "loss does not belong to this tape");
  require(loss.value().numel() == 1,
          "backward requires a scalar loss, got shape " +
              shape_string(std::span<const Index>(loss.value().shape())));

  sweeping_ = true;
  for (int id = 0; id <= loss.id; ++id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    node.grad = ArrayX::Zero(node.value.numel());
  }
  nodes_[static_cast<size_t>(loss.id)].grad[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (node.backward) node.backward(*this, id);
  }

  for (int id = 0; id <= loss.id; ++id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (node.param != nullptr) {
      node.param->value.ensure_grad();
      node.param->value.grad() += node.grad;
    }
    node.grad.resize(0);
  }
  sweeping_ = false;
}

void backward(const Var& loss) {
  require(loss.valid(), "backward on an empty Var");
  loss.tape->backward(loss);
}

}  // namespace bagcn

#include "badseg/autograd.hpp"

#include <string>

namespace badseg::ad {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Graph::constant_ref(const Tensor& value) {
  Node n;
  n.external = &value;
  return push(std::move(n));
}

Var Graph::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::variable_ref(const Tensor& value) {
  Node n;
  n.external = &value;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, Backward fn, std::string_view op) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn), op);
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, Backward fn, std::string_view op) {
  require_finite(value, op);
  Node n;
  n.owned = std::move(value);
  for (const Var& v : inputs) {
    if (v.valid() && v.requires_grad()) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Graph::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.owned;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.empty()) return Tensor(value(v.id()).shape());
  return n.grad;
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

void Graph::backward(Var scalar_loss) {
  if (scalar_loss.value().size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_string(scalar_loss.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  if (!scalar_loss.requires_grad()) return;
  grad_buffer(scalar_loss.id())[0] = 1.0f;
  for (int id = scalar_loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
    require_finite(n.grad, "backward pass");
  }
}

}  // namespace badseg::ad

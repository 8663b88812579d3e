#include "svqa/core/autodiff.hpp"

#include <algorithm>

namespace svqa {

Parameter::Parameter(std::string n, Array v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(value.shape()),
      adam_m(value.shape()),
      adam_v(value.shape()) {}

Parameter& ParameterStore::add(std::string name, Array value) {
  if (find(name) != nullptr) throw ContractViolation("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Parameter& ParameterStore::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

const Parameter& ParameterStore::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("unknown parameter: " + std::string(name));
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::with_prefix(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->name.starts_with(prefix)) out.push_back(p.get());
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParameterStore::set_trainable(std::string_view prefix, bool trainable) {
  for (auto* p : with_prefix(prefix)) p->trainable = trainable;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

const Array& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Array value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Array value) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

Var Tape::record(std::string_view op, std::vector<int> inputs, Array value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from op '" + std::string(op) + "'");
  }
  Node n;
  n.op = op;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](int i) { return requires_grad(i); });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Var Tape::record_detached(std::string_view op, Array value) {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from op '" + std::string(op) + "'");
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  return push(std::move(n));
}

Array* Tape::grad_sink(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Array(n.value.shape());
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractViolation("backward: loss belongs to another tape");
  Node& root = nodes_[static_cast<std::size_t>(loss.id_)];
  if (root.value.size() != 1) {
    throw ContractViolation("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
  }
  if (!root.requires_grad) return;
  grad_sink(loss.id_)->fill(1.0);
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Array(p.value.shape());
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
    } else if (n.backward) {
      n.backward(*this, n.value, n.grad);
    }
  }
}

Array Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id_)];
  if (n.grad.empty() && !n.value.empty()) return Array(n.value.shape());
  return n.grad;
}

}  // namespace svqa

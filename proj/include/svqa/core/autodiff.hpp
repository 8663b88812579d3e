#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "svqa/core/array.hpp"

namespace svqa {

/// Raised when a caller breaks an API precondition (e.g. backward from a non-scalar).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Trainable array plus its optimizer state.
struct Parameter {
  Parameter(std::string name, Array value);

  std::string name;
  Array value;
  Array grad;
  Array adam_m;
  Array adam_v;
  std::int64_t step = 0;
  bool trainable = true;

  void zero_grad() { grad.fill(0.0); }
};

/// Owns parameters with stable addresses; iteration order is insertion order.
class ParameterStore {
 public:
  Parameter& add(std::string name, Array value);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> with_prefix(std::string_view prefix);

  void zero_grad();
  void set_trainable(std::string_view prefix, bool trainable);
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t element_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Define-by-run reverse-mode tape. Each op evaluates eagerly and records a
/// closure that maps the output gradient onto its inputs. Nodes are appended in
/// evaluation order, so reverse insertion order is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array& out_value, const Array& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var constant(Array value);
  /// Leaf whose gradient is retained (queried with grad()).
  Var input(Array value);
  /// Leaf bound to a parameter; backward accumulates into param.grad when trainable.
  Var param(Parameter& p);

  /// Runs reverse accumulation from a scalar node.
  void backward(Var loss);

  /// Gradient of a node after backward(); zeros if it received none.
  Array grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

  // Op-author interface.
  Var record(std::string_view op, std::vector<int> inputs, Array value, BackwardFn backward);
  Var record_detached(std::string_view op, Array value);
  const Array& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient buffer of node `id`, or nullptr when that node does not need one.
  Array* grad_sink(int id);

 private:
  struct Node {
    std::string_view op;
    std::vector<int> inputs;
    Array value;
    Array grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

}  // namespace svqa

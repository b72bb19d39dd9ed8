#pragma once

// Reverse-mode automatic differentiation over dense 2-D arrays.
//
// A Tape records every forward op as a node holding its value and a
// backward closure. Var is a cheap handle (tape pointer + node id). Nodes are
// appended in evaluation order, so the node list is already topologically
// sorted and backward() is a single reverse sweep.
//
// Gradient semantics are accumulating: backward() adds d(loss)/d(leaf) into
// the grad slot of every requires_grad leaf. Calling it twice without
// zero_grad() doubles the stored gradients exactly.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcseg/matrix.hpp"

namespace mpcseg {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  /// Value of a 1x1 node.
  double item() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input node. Gradients are stored only for requires_grad leaves.
  Var leaf(Matrix value, bool requires_grad);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Appends an op node. `backward` receives d(loss)/d(output) and must
  /// call accumulate() for each differentiable input.
  Var record(Matrix value, std::vector<Var> inputs, BackwardFn backward);

  /// Adds `g` into the adjoint of `v` during a backward sweep.
  void accumulate(const Var& v, const Matrix& g);
  /// Adjoint buffer of `v`, allocated on demand (backward sweeps only).
  Matrix& adjoint(const Var& v);

  /// Reverse sweep from a 1x1 node. Throws if `loss` is not on this tape.
  void backward(const Var& loss);
  void zero_grad();

  /// Accumulated gradient of a requires_grad leaf (zeros if unreached).
  const Matrix& grad(const Var& v) const;

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Number of cross-entropy entries clamped away from log(0).
  std::size_t clamp_events() const { return clamp_events_; }
  void count_clamp(std::size_t n) { clamp_events_ += n; }

 private:
  struct Node {
    Matrix value;
    bool requires_grad = false;
    bool is_leaf = false;
    Matrix grad;
    std::vector<Var> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable references to values
  std::vector<Matrix> adjoints_;
  std::vector<bool> has_adjoint_;
  std::size_t clamp_events_ = 0;
};

// ---- differentiable ops ---------------------------------------------------
// All ops throw std::invalid_argument on shape mismatch or bad indices.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Element-wise product of equal shapes.
Var mul(const Var& a, const Var& b);
/// n x c plus a 1 x c row replicated over rows.
Var add_row(const Var& a, const Var& row);
/// n x c times a 1 x c row replicated over rows.
Var mul_broadcast(const Var& a, const Var& row);
Var concat_cols(std::span<const Var> parts);
Var scale(const Var& a, double factor);
/// a / b for a 1x1 b.
Var div_scalar(const Var& a, const Var& b);

Var sigmoid(const Var& x);
Var relu(const Var& x);
Var softmax_rows(const Var& x);
/// Divides each row by its sum.
Var normalize_rows(const Var& x);
/// Column mean: n x c -> 1 x c.
Var global_avg_pool(const Var& x);
Var sum(const Var& x);

/// Rows of x at the given indices; gradients scatter-add back.
Var gather_rows(const Var& x, std::span<const std::size_t> indices);
/// Fine row j copies coarse row parent_index[j].
Var nearest_upsample(const Var& coarse, std::span<const std::size_t> parent_index);

/// Cross-entropy with base-2 logarithm:
///   sum_j sum_l w_l * y_jl * (-log2 z_jl)
/// z entries at positive targets below 1e-12 are clamped (and counted on the
/// tape). `class_weights` is 1 x L.
Var cross_entropy(const Var& z, const Matrix& y, const Matrix& class_weights);
/// (1/n) * sum_j ||y_j - z_j||^2 over the n rows; 0 for n = 0.
Var mse(const Var& z, const Matrix& y);
/// Euclidean norm of all entries.
Var l2_norm(const Var& w);

inline constexpr double kLogClamp = 1e-12;

// ---- parameters -------------------------------------------------------------

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // subject to weight decay
};

using ParamId = std::size_t;

class ParameterStore {
 public:
  ParamId add(std::string name, Matrix value, bool decay);

  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  void zero_grad();

 private:
  std::vector<Parameter> params_;
};

/// Lazily places parameters on a tape as requires_grad leaves.
class Binding {
 public:
  /// With requires_grad = false parameters enter as constants (inference).
  Binding(Tape& tape, const ParameterStore& store, bool requires_grad = true)
      : tape_(tape), store_(store), vars_(store.size()), requires_grad_(requires_grad) {}

  Var operator()(ParamId id);
  /// Uses an existing leaf for a parameter (gradient checks perturb leaves).
  void preset(ParamId id, const Var& leaf) { vars_.at(id) = leaf; }
  Tape& tape() { return tape_; }

  /// Adds this tape's leaf gradients into `grads` (one matrix per
  /// parameter, shapes as in the store; unused parameters get nothing).
  void accumulate_grads(std::vector<Matrix>& grads) const;

 private:
  Tape& tape_;
  const ParameterStore& store_;
  std::vector<std::optional<Var>> vars_;
  bool requires_grad_ = true;
};

// ---- gradient checking ------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst;  // "input i entry j: tape=..., numeric=..."
};

/// Central-difference check of tape gradients. `f` builds a scalar from the
/// leaves it is given. When max_entries_per_input > 0 only that many
/// randomly chosen entries of each input are perturbed. The relative error
/// is |tape - numeric| / max(|tape|, |numeric|, abs_floor).
GradCheckReport grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f,
                           std::vector<Matrix> inputs, double eps = 1e-5,
                           std::size_t max_entries_per_input = 0, std::uint64_t seed = 0,
                           double abs_floor = 1e-6);

}  // namespace mpcseg

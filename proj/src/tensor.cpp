#include "mpcseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mpcseg/kernels.hpp"

namespace mpcseg {

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << a.rows << "x" << a.cols << " vs " << b.rows << "x" << b.cols;
  throw std::invalid_argument(os.str());
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *v.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
  return tape_of(a);
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

constexpr double kInvLn2 = 1.0 / 0.69314718055994530942;
const double kSigmoidHi = std::nextafter(1.0, 0.0);
constexpr double kSigmoidLo = std::numeric_limits<double>::min();

}  // namespace

// ---- Var / Tape -------------------------------------------------------------

const Matrix& Var::value() const { return tape_of(*this).value(id_); }

double Var::item() const {
  const Matrix& m = value();
  if (m.rows != 1 || m.cols != 1) throw std::invalid_argument("item() on a non-scalar Var");
  return m.data[0];
}

bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::invalid_argument("op input belongs to another tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::adjoint(const Var& v) {
  const std::size_t id = v.id();
  if (!has_adjoint_[id]) {
    adjoints_[id] = Matrix(nodes_[id].value.rows, nodes_[id].value.cols);
    has_adjoint_[id] = true;
  }
  return adjoints_[id];
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Matrix& adj = adjoint(v);
  if (!adj.same_shape(g)) shape_error("accumulate", adj, g);
  add_into(adj, g);
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this || loss.id() >= nodes_.size()) {
    throw std::invalid_argument("backward: loss is not on this tape");
  }
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
  adjoints_.assign(loss.id() + 1, Matrix());
  has_adjoint_.assign(loss.id() + 1, false);
  adjoint(loss).data[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!has_adjoint_[id]) continue;
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (n.is_leaf) {
      if (n.grad.data.empty()) {
        n.grad = std::move(adjoints_[id]);
      } else {
        add_into(n.grad, adjoints_[id]);
      }
    } else if (n.backward) {
      n.backward(*this, adjoints_[id]);
    }
    adjoints_[id] = Matrix();
  }
  adjoints_.clear();
  has_adjoint_.clear();
}

void Tape::zero_grad() {
  for (auto& n : nodes_) {
    if (n.is_leaf && !n.grad.data.empty()) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
}

const Matrix& Tape::grad(const Var& v) const {
  if (v.tape() != this) throw std::invalid_argument("grad: Var is not on this tape");
  const Node& n = nodes_[v.id()];
  if (!n.is_leaf || !n.requires_grad) throw std::invalid_argument("grad: not a requires_grad leaf");
  if (n.grad.data.empty() && n.value.size() > 0) {
    const_cast<Node&>(n).grad = Matrix(n.value.rows, n.value.cols);
  }
  return n.grad;
}

// ---- ops --------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols != bv.rows) shape_error("matmul", av, bv);
  Matrix out;
  kernels::omp::matmul(av, bv, out);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (a.requires_grad()) kernels::omp::matmul_a_bt_acc(g, b.value(), tp.adjoint(a));
    if (b.requires_grad()) kernels::omp::matmul_at_b_acc(a.value(), g, tp.adjoint(b));
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) shape_error("add", av, bv);
  Matrix out = av;
  add_into(out, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) shape_error("sub", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (b.requires_grad()) {
      Matrix& db = tp.adjoint(b);
      for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] -= g.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) shape_error("mul", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (a.requires_grad()) {
      Matrix& da = tp.adjoint(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
    }
    if (b.requires_grad()) {
      Matrix& db = tp.adjoint(b);
      for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av.data[i];
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows != 1 || rv.cols != av.cols) shape_error("add_row", av, rv);
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < out.cols; ++c) o[c] += rv.data[c];
  }
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (row.requires_grad()) {
      Matrix& dr = tp.adjoint(row);
      for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) dr.data[c] += g(r, c);
      }
    }
  });
}

Var mul_broadcast(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows != 1 || rv.cols != av.cols) shape_error("mul_broadcast", av, rv);
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < out.cols; ++c) o[c] *= rv.data[c];
  }
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    if (a.requires_grad()) {
      Matrix& da = tp.adjoint(a);
      for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) da(r, c) += g(r, c) * rv.data[c];
      }
    }
    if (row.requires_grad()) {
      Matrix& dr = tp.adjoint(row);
      for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) dr.data[c] += g(r, c) * av(r, c);
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_cols: operands on different tapes");
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    }
    off += pv.cols;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), inputs, [inputs, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!inputs[k].requires_grad()) continue;
      Matrix& d = tp.adjoint(inputs[k]);
      for (std::size_t r = 0; r < d.rows; ++r) {
        for (std::size_t c = 0; c < d.cols; ++c) d(r, c) += g(r, offsets[k] + c);
      }
    }
  });
}

Var scale(const Var& a, double factor) {
  Tape& t = tape_of(a);
  Matrix out = a.value();
  for (double& v : out.data) v *= factor;
  return t.record(std::move(out), {a}, [a, factor](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(a);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += factor * g.data[i];
  });
}

Var div_scalar(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Matrix& bv = b.value();
  if (bv.rows != 1 || bv.cols != 1) shape_error("div_scalar", a.value(), bv);
  const double den = bv.data[0];
  Matrix out = a.value();
  for (double& v : out.data) v /= den;
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    const double den = b.value().data[0];
    if (a.requires_grad()) {
      Matrix& da = tp.adjoint(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] / den;
    }
    if (b.requires_grad()) {
      const Matrix& av = a.value();
      double s = 0.0;
      for (std::size_t i = 0; i < g.data.size(); ++i) s += g.data[i] * av.data[i];
      tp.adjoint(b).data[0] -= s / (den * den);
    }
  });
}

Var sigmoid(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (double& v : out.data) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    v = std::clamp(s, kSigmoidLo, kSigmoidHi);
  }
  Matrix saved = out;
  return t.record(std::move(out), {x}, [x, y = std::move(saved)](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(x);
    for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Var relu(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (double& v : out.data) v = v < 0.0 ? 0.0 : v;  // NaN propagates
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
    const Matrix& xv = x.value();
    Matrix& d = tp.adjoint(x);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (xv.data[i] > 0.0) d.data[i] += g.data[i];
    }
  });
}

Var softmax_rows(const Var& x) {
  Tape& t = tape_of(x);
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  Matrix saved = out;
  return t.record(std::move(out), {x}, [x, y = std::move(saved)](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(x);
    for (std::size_t r = 0; r < g.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var normalize_rows(const Var& x) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  Matrix out = xv;
  std::vector<double> sums(out.rows);
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = out.row(r);
    double s = 0.0;
    for (double v : row) s += v;
    sums[r] = s;
    for (double& v : row) v /= s;
  }
  Matrix saved = out;
  return t.record(std::move(out), {x},
                  [x, y = std::move(saved), sums = std::move(sums)](Tape& tp, const Matrix& g) {
                    Matrix& d = tp.adjoint(x);
                    for (std::size_t r = 0; r < g.rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
                      for (std::size_t c = 0; c < g.cols; ++c) d(r, c) += (g(r, c) - dot) / sums[r];
                    }
                  });
}

Var global_avg_pool(const Var& x) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  if (xv.rows == 0) throw std::invalid_argument("global_avg_pool: empty input");
  Matrix out(1, xv.cols);
  for (std::size_t r = 0; r < xv.rows; ++r) {
    for (std::size_t c = 0; c < xv.cols; ++c) out.data[c] += xv(r, c);
  }
  const double inv = 1.0 / static_cast<double>(xv.rows);
  for (double& v : out.data) v *= inv;
  return t.record(std::move(out), {x}, [x, inv](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(x);
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) d(r, c) += g.data[c] * inv;
    }
  });
}

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data) s += v;
  Matrix out(1, 1, s);
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(x);
    for (double& v : d.data) v += g.data[0];
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> indices) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  Matrix out(indices.size(), xv.cols);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= xv.rows) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(indices[j]) +
                                  " out of range for " + std::to_string(xv.rows) + " rows");
    }
    std::copy(xv.row(indices[j]).begin(), xv.row(indices[j]).end(), out.row(j).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& tp, const Matrix& g) {
    Matrix& d = tp.adjoint(x);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      auto dst = d.row(idx[j]);
      auto src = g.row(j);
      for (std::size_t c = 0; c < d.cols; ++c) dst[c] += src[c];
    }
  });
}

Var nearest_upsample(const Var& coarse, std::span<const std::size_t> parent_index) {
  return gather_rows(coarse, parent_index);
}

Var cross_entropy(const Var& z, const Matrix& y, const Matrix& class_weights) {
  Tape& t = tape_of(z);
  const Matrix& zv = z.value();
  if (!zv.same_shape(y)) shape_error("cross_entropy", zv, y);
  if (class_weights.rows != 1 || class_weights.cols != zv.cols) {
    shape_error("cross_entropy(weights)", zv, class_weights);
  }
  double loss = 0.0;
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < zv.data.size(); ++i) {
    if (y.data[i] == 0.0) continue;
    double p = zv.data[i];
    if (!(p >= kLogClamp)) {
      p = kLogClamp;
      ++clamped;
    }
    loss -= class_weights.data[i % zv.cols] * y.data[i] * std::log2(p);
  }
  t.count_clamp(clamped);
  return t.record(Matrix(1, 1, loss), {z}, [z, y, class_weights](Tape& tp, const Matrix& g) {
    const Matrix& zv = z.value();
    Matrix& d = tp.adjoint(z);
    for (std::size_t i = 0; i < zv.data.size(); ++i) {
      if (y.data[i] == 0.0 || !(zv.data[i] >= kLogClamp)) continue;
      d.data[i] -= g.data[0] * class_weights.data[i % zv.cols] * y.data[i] * kInvLn2 / zv.data[i];
    }
  });
}

Var mse(const Var& z, const Matrix& y) {
  Tape& t = tape_of(z);
  const Matrix& zv = z.value();
  if (!zv.same_shape(y)) shape_error("mse", zv, y);
  const double n = static_cast<double>(zv.rows);
  double loss = 0.0;
  for (std::size_t i = 0; i < zv.data.size(); ++i) {
    const double e = y.data[i] - zv.data[i];
    loss += e * e;
  }
  loss = zv.rows ? loss / n : 0.0;
  return t.record(Matrix(1, 1, loss), {z}, [z, y, n](Tape& tp, const Matrix& g) {
    if (n == 0.0) return;
    const Matrix& zv = z.value();
    Matrix& d = tp.adjoint(z);
    for (std::size_t i = 0; i < zv.data.size(); ++i) {
      d.data[i] += g.data[0] * 2.0 * (zv.data[i] - y.data[i]) / n;
    }
  });
}

Var l2_norm(const Var& w) {
  Tape& t = tape_of(w);
  double s = 0.0;
  for (double v : w.value().data) s += v * v;
  const double norm = std::sqrt(s);
  return t.record(Matrix(1, 1, norm), {w}, [w, norm](Tape& tp, const Matrix& g) {
    if (norm == 0.0) return;
    const Matrix& wv = w.value();
    Matrix& d = tp.adjoint(w);
    for (std::size_t i = 0; i < wv.data.size(); ++i) d.data[i] += g.data[0] * wv.data[i] / norm;
  });
}

// ---- parameters -------------------------------------------------------------

ParamId ParameterStore::add(std::string name, Matrix value, bool decay) {
  Parameter p;
  p.name = std::move(name);
  p.grad = Matrix(value.rows, value.cols);
  p.value = std::move(value);
  p.decay = decay;
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

Var Binding::operator()(ParamId id) {
  auto& slot = vars_.at(id);
  if (!slot) slot = tape_.leaf(store_[id].value, requires_grad_);
  return *slot;
}

void Binding::accumulate_grads(std::vector<Matrix>& grads) const {
  if (grads.size() < vars_.size()) grads.resize(vars_.size());
  for (std::size_t id = 0; id < vars_.size(); ++id) {
    if (!vars_[id] || !requires_grad_) continue;
    const Matrix& g = tape_.grad(*vars_[id]);
    if (grads[id].data.empty()) grads[id] = Matrix(g.rows, g.cols);
    add_into(grads[id], g);
  }
}

// ---- gradient checking ------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f,
                           std::vector<Matrix> inputs, double eps,
                           std::size_t max_entries_per_input, std::uint64_t seed,
                           double abs_floor) {
  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
    Var out = f(tape, leaves);
    tape.backward(out);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
    return f(tape, leaves).item();
  };

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> entries(inputs[i].size());
    std::iota(entries.begin(), entries.end(), 0);
    if (max_entries_per_input > 0 && entries.size() > max_entries_per_input) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(max_entries_per_input);
    }
    for (std::size_t e : entries) {
      const double orig = inputs[i].data[e];
      inputs[i].data[e] = orig + eps;
      const double fp = evaluate();
      inputs[i].data[e] = orig - eps;
      const double fm = evaluate();
      inputs[i].data[e] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double tape_g = analytic[i].data[e];
      const double den = std::max({std::abs(tape_g), std::abs(numeric), abs_floor});
      const double rel = std::abs(tape_g - numeric) / den;
      ++report.entries_checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        std::ostringstream os;
        os << "input " << i << " entry " << e << ": tape=" << tape_g << ", numeric=" << numeric;
        report.worst = os.str();
      }
    }
  }
  return report;
}

}  // namespace mpcseg

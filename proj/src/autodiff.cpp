#include "gssm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gssm::ad {

std::string Shape::str() const {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

ShapeError::ShapeError(const std::string& op, Shape a, Shape b)
    : std::invalid_argument(op + ": shape mismatch " + a.str() + " vs " + b.str()) {}

ShapeError::ShapeError(const std::string& op, Shape a, const std::string& why)
    : std::invalid_argument(op + ": invalid shape " + a.str() + " (" + why + ")") {}

Param::Param(std::string n, std::size_t rows, std::size_t cols)
    : name(std::move(n)),
      value(Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))),
      grad(Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))) {}

const Matrix& Var::value() const { return tape_->value(id_); }
Shape Var::shape() const { return shape_of(value()); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item", shape(), "expected 1x1");
  return v(0, 0);
}

// ---------------------------------------------------------------- Tape ----

Var Tape::push(Node node) {
  if (!node.value.allFinite()) ++nonfinite_;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Tape::constant(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<Eigen::Index>(rows.size());
  const auto c = r == 0 ? 0 : static_cast<Eigen::Index>(rows.begin()->size());
  Matrix m(r, c);
  Eigen::Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Eigen::Index>(row.size()) != c)
      throw std::invalid_argument("Tape::constant: ragged initializer");
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return constant(std::move(m));
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Param& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::frozen(const Param& p) { return constant(p.value); }

Var Tape::record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Matrix& Tape::grad_in(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (nodes_[loss.id()].value.size() != 1)
    throw ShapeError("backward", loss.shape(), "loss must be 1x1");
  for (auto& n : nodes_) n.adjoint.resize(0, 0);
  grad_in(loss.id())(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.adjoint.size() == 0) continue;
    n.backward(*this, i);
  }
}

Matrix Tape::adjoint(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Tape::accumulate_param_grads() const {
  for (const auto& n : nodes_) {
    if (n.param == nullptr || n.adjoint.size() == 0) continue;
    if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols())
      n.param->zero_grad();
    n.param->grad += n.adjoint;
  }
}

// ------------------------------------------------------------- helpers ----

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape())
    throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

Shape broadcast_shape(const char* op, Shape a, Shape b) {
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(op, a, b);
  };
  return {dim(a.rows, b.rows), dim(a.cols, b.cols)};
}

// Operand viewed at the broadcast shape; copies only when replication is needed.
class Expanded {
 public:
  Expanded(const Matrix& m, Shape to) {
    if (static_cast<std::size_t>(m.rows()) == to.rows && static_cast<std::size_t>(m.cols()) == to.cols) {
      ref_ = &m;
    } else {
      tmp_ = m.replicate(static_cast<Eigen::Index>(to.rows / m.rows()),
                         static_cast<Eigen::Index>(to.cols / m.cols()));
      ref_ = &tmp_;
    }
  }
  Expanded(const Expanded&) = delete;
  const Matrix& get() const { return *ref_; }

 private:
  const Matrix* ref_ = nullptr;
  Matrix tmp_;
};

Matrix expand(const Matrix& m, Shape to) { return Expanded(m, to).get(); }

// Sum a broadcast-shaped adjoint back down to the operand's shape.
Matrix reduce_to(Matrix g, Shape to) {
  if (to.rows == 1 && g.rows() != 1) g = g.colwise().sum().eval();
  if (to.cols == 1 && g.cols() != 1) g = g.rowwise().sum().eval();
  return g;
}

template <class Fwd, class DA, class DB>
Var binary(const char* op, Var a, Var b, Fwd fwd, DA da, DB db) {
  Tape& t = same_tape(a, b, op);
  const Shape out = broadcast_shape(op, a.shape(), b.shape());
  Matrix v;
  {
    const Expanded av(a.value(), out);
    const Expanded bv(b.value(), out);
    v = fwd(av.get(), bv.get());
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(v), {ia, ib}, [ia, ib, out, da, db](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    const Expanded av(tp.value(ia), out);
    const Expanded bv(tp.value(ib), out);
    if (tp.requires_grad(ia))
      tp.grad_in(ia) += reduce_to(da(g, av.get(), bv.get()), shape_of(tp.value(ia)));
    if (tp.requires_grad(ib))
      tp.grad_in(ib) += reduce_to(db(g, av.get(), bv.get()), shape_of(tp.value(ib)));
  });
}

// Elementwise unary op with derivative expressed through (input, output).
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = *a.tape();
  Matrix v = fwd(a.value());
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia, deriv](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    tp.grad_in(ia).array() += g.array() * deriv(tp.value(ia), tp.value(self)).array();
  });
}

}  // namespace

// ------------------------------------------------------------- binary ----

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](const Matrix& x, const Matrix& y) { return Matrix(x + y); },
      [](const Matrix& g, const Matrix&, const Matrix&) { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](const Matrix& x, const Matrix& y) { return Matrix(x - y); },
      [](const Matrix& g, const Matrix&, const Matrix&) { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) { return Matrix(-g); });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b,
      [](const Matrix& x, const Matrix& y) { return Matrix(x.array() * y.array()); },
      [](const Matrix& g, const Matrix&, const Matrix& y) { return Matrix(g.array() * y.array()); },
      [](const Matrix& g, const Matrix& x, const Matrix&) { return Matrix(g.array() * x.array()); });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b,
      [](const Matrix& x, const Matrix& y) { return Matrix(x.array() / y.array()); },
      [](const Matrix& g, const Matrix&, const Matrix& y) { return Matrix(g.array() / y.array()); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) {
        return Matrix(-g.array() * x.array() / y.array().square());
      });
}

Var minimum(Var a, Var b) {
  Tape& t = same_tape(a, b, "minimum");
  const Shape out = broadcast_shape("minimum", a.shape(), b.shape());
  if ((expand(a.value(), out).array() == expand(b.value(), out).array()).any()) t.note_kink();
  return binary(
      "minimum", a, b,
      [](const Matrix& x, const Matrix& y) { return Matrix(x.array().min(y.array())); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) {
        return Matrix((x.array() <= y.array()).select(g.array(), 0.0));
      },
      [](const Matrix& g, const Matrix& x, const Matrix& y) {
        return Matrix((x.array() <= y.array()).select(0.0, g.array()));
      });
}

// ------------------------------------------------------------- scalar ----

Var scale(Var a, double c) {
  return unary(
      a, [c](const Matrix& x) { return Matrix(c * x); },
      [c](const Matrix& x, const Matrix&) { return Matrix::Constant(x.rows(), x.cols(), c); });
}

Var add_scalar(Var a, double c) {
  return unary(
      a, [c](const Matrix& x) { return Matrix(x.array() + c); },
      [](const Matrix& x, const Matrix&) { return Matrix::Ones(x.rows(), x.cols()); });
}

// -------------------------------------------------------------- unary ----

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().exp()); },
      [](const Matrix&, const Matrix& y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().log()); },
      [](const Matrix& x, const Matrix&) { return Matrix(x.array().inverse()); });
}

Var tanh(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().tanh()); },
      [](const Matrix&, const Matrix& y) { return Matrix(1.0 - y.array().square()); });
}

Var sigmoid(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix((1.0 + (-x.array()).exp()).inverse()); },
      [](const Matrix&, const Matrix& y) { return Matrix(y.array() * (1.0 - y.array())); });
}

Var relu(Var a) {
  if ((a.value().array() == 0.0).any()) a.tape()->note_kink();
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().max(0.0)); },
      [](const Matrix& x, const Matrix&) { return Matrix((x.array() > 0.0).cast<double>()); });
}

Var softplus(Var a) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  return unary(
      a,
      [](const Matrix& x) {
        return Matrix(x.array().max(0.0) + (-x.array().abs()).exp().log1p());
      },
      [](const Matrix& x, const Matrix&) { return Matrix((1.0 + (-x.array()).exp()).inverse()); });
}

Var square(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().square()); },
      [](const Matrix& x, const Matrix&) { return Matrix(2.0 * x.array()); });
}

Var sqrt(Var a) {
  if ((a.value().array() == 0.0).any()) a.tape()->note_kink();
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().sqrt()); },
      [](const Matrix&, const Matrix& y) { return Matrix(0.5 * y.array().inverse()); });
}

Var sin(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().sin()); },
      [](const Matrix& x, const Matrix&) { return Matrix(x.array().cos()); });
}

Var cos(Var a) {
  return unary(
      a, [](const Matrix& x) { return Matrix(x.array().cos()); },
      [](const Matrix& x, const Matrix&) { return Matrix(-x.array().sin()); });
}

Var clamp(Var a, double lo, double hi) {
  if (((a.value().array() == lo) || (a.value().array() == hi)).any()) a.tape()->note_kink();
  return unary(
      a, [lo, hi](const Matrix& x) { return Matrix(x.array().max(lo).min(hi)); },
      [lo, hi](const Matrix& x, const Matrix&) {
        return Matrix(((x.array() >= lo) && (x.array() <= hi)).cast<double>());
      });
}

Var clamp_min(Var a, double lo) {
  if ((a.value().array() == lo).any()) a.tape()->note_kink();
  return unary(
      a, [lo](const Matrix& x) { return Matrix(x.array().max(lo)); },
      [lo](const Matrix& x, const Matrix&) { return Matrix((x.array() >= lo).cast<double>()); });
}

// --------------------------------------------------------- reductions ----

Var sum(Var a) {
  Tape& t = *a.tape();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_in(ia).array() += tp.grad_out(self)(0, 0);
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean", a.shape(), "empty");
  return scale(sum(a), 1.0 / n);
}

Var sum_over_cols(Var a) {
  Tape& t = *a.tape();
  Matrix v = a.value().rowwise().sum();
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    Matrix& gi = tp.grad_in(ia);
    gi.colwise() += tp.grad_out(self).col(0);
  });
}

Var sum_over_rows(Var a) {
  Tape& t = *a.tape();
  Matrix v = a.value().colwise().sum();
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    Matrix& gi = tp.grad_in(ia);
    gi.rowwise() += tp.grad_out(self).row(0);
  });
}

Var mean_over_rows(Var a) {
  if (a.rows() == 0) throw ShapeError("mean_over_rows", a.shape(), "empty");
  return scale(sum_over_rows(a), 1.0 / static_cast<double>(a.rows()));
}

// ---------------------------------------------------------- structure ----

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  Matrix v = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(v), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    if (tp.requires_grad(ia)) tp.grad_in(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.requires_grad(ib)) tp.grad_in(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  Matrix v = a.value().transpose();
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_in(ia) += tp.grad_out(self).transpose();
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  Tape& t = *parts[0].tape();
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_cols: operands on different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix v(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k)
    v.middleCols(static_cast<Eigen::Index>(offsets[k]), parts[k].value().cols()) = parts[k].value();
  auto ids_copy = ids;
  return t.record(std::move(v), std::move(ids_copy), [ids, offsets](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Matrix& gi = tp.grad_in(ids[k]);
      gi += g.middleCols(static_cast<Eigen::Index>(offsets[k]), gi.cols());
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  Tape& t = *parts[0].tape();
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat_rows: operands on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
  }
  Matrix v(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k)
    v.middleRows(static_cast<Eigen::Index>(offsets[k]), parts[k].value().rows()) = parts[k].value();
  auto ids_copy = ids;
  return t.record(std::move(v), std::move(ids_copy), [ids, offsets](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Matrix& gi = tp.grad_in(ids[k]);
      gi += g.middleRows(static_cast<Eigen::Index>(offsets[k]), gi.rows());
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ShapeError("slice_cols", a.shape(), "range out of bounds");
  Tape& t = *a.tape();
  const auto b = static_cast<Eigen::Index>(begin);
  const auto n = static_cast<Eigen::Index>(end - begin);
  Matrix v = a.value().middleCols(b, n);
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia, b, n](Tape& tp, std::size_t self) {
    tp.grad_in(ia).middleCols(b, n) += tp.grad_out(self);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows", a.shape(), "range out of bounds");
  Tape& t = *a.tape();
  const auto b = static_cast<Eigen::Index>(begin);
  const auto n = static_cast<Eigen::Index>(end - begin);
  Matrix v = a.value().middleRows(b, n);
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia, b, n](Tape& tp, std::size_t self) {
    tp.grad_in(ia).middleRows(b, n) += tp.grad_out(self);
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix v(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw ShapeError("gather_rows", a.shape(), "row index out of bounds");
    v.row(static_cast<Eigen::Index>(i)) = av.row(static_cast<Eigen::Index>(index[i]));
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(v), {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    Matrix& gi = tp.grad_in(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      gi.row(static_cast<Eigen::Index>(idx[i])) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix v = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
  v.array().colwise() /= v.rowwise().sum().array();
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    const Matrix& y = tp.value(self);
    // dx = y * (g - <g, y>_row)
    const Eigen::VectorXd dot = (g.array() * y.array()).rowwise().sum();
    tp.grad_in(ia).array() += y.array() * (g.colwise() - dot).array();
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  const Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  Matrix v = shifted.colwise() - lse;
  const std::size_t ia = a.id();
  return t.record(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_out(self);
    const Matrix p = tp.value(self).array().exp();
    const Eigen::VectorXd gs = g.rowwise().sum();
    tp.grad_in(ia).array() += g.array() - (p.array().colwise() * gs.array());
  });
}

}  // namespace gssm::ad

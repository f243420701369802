#pragma once

// Reverse-mode automatic differentiation over dense rank-2 arrays of doubles.
//
// A Tape owns every node created while evaluating an expression. Nodes are
// appended in evaluation order, so the record is always topologically sorted
// and backward() is a single reverse sweep. Vectors are 1 x n or n x 1
// matrices; scalars are 1 x 1.
//
// Binary elementwise ops broadcast a dimension of size 1 against any size
// (1 x 1 scalars, 1 x c rows, r x 1 columns).

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gssm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  [[nodiscard]] std::size_t size() const { return rows * cols; }
  [[nodiscard]] std::string str() const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline Shape shape_of(const Matrix& m) {
  return {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, Shape a, Shape b);
  ShapeError(const std::string& op, Shape a, const std::string& why);
};

/// Persistent trainable tensor. `grad` accumulates across tapes until zeroed.
struct Param {
  Param() = default;
  Param(std::string name, std::size_t rows, std::size_t cols);

  std::string name;
  Matrix value;
  Matrix grad;

  [[nodiscard]] Shape shape() const { return shape_of(value); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Shape shape() const;
  [[nodiscard]] std::size_t rows() const { return shape().rows; }
  [[nodiscard]] std::size_t cols() const { return shape().cols; }
  /// Value of a 1 x 1 node.
  [[nodiscard]] double item() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Matrix value);
  Var constant(double value);
  Var constant(std::initializer_list<std::initializer_list<double>> rows);
  /// Differentiable input whose adjoint can be read after backward().
  Var leaf(Matrix value);
  /// Trainable parameter; accumulate_param_grads() adds its adjoint to p.grad.
  Var param(Param& p);
  /// Parameter read as a constant (no gradient work is done for it).
  Var frozen(const Param& p);

  /// Reverse sweep from a 1 x 1 node. Adjoint buffers are reset first, so
  /// calling this twice yields identical adjoints.
  void backward(Var loss);
  /// Adjoint of `v` from the last backward(); zeros if it received none.
  [[nodiscard]] Matrix adjoint(Var v) const;
  /// Adds parameter adjoints from the last backward() into Param::grad.
  void accumulate_param_grads() const;

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  /// Number of ops evaluated exactly at a non-differentiable point.
  [[nodiscard]] std::size_t kink_count() const { return kinks_; }
  /// Number of nodes whose forward value contains NaN or Inf.
  [[nodiscard]] std::size_t nonfinite_count() const { return nonfinite_; }

  // Op-implementation interface.
  Var record(Matrix value, std::vector<std::size_t> inputs, BackwardFn backward);
  [[nodiscard]] const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] const Matrix& grad_out(std::size_t id) const { return nodes_[id].adjoint; }
  [[nodiscard]] const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  /// Adjoint buffer of `id`, allocated as zeros on first use.
  Matrix& grad_in(std::size_t id);
  void note_kink() { ++kinks_; }

  [[nodiscard]] Var handle(std::size_t id) { return Var(this, id); }

 private:
  struct Node {
    Matrix value;
    Matrix adjoint;  // empty until touched during backward
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Param* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::size_t kinks_ = 0;
  std::size_t nonfinite_ = 0;
};

// ---- elementwise binary (broadcasting) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);

// ---- scalar broadcast ----
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

// ---- elementwise unary ----
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var softplus(Var a);
Var square(Var a);
Var sqrt(Var a);
Var sin(Var a);
Var cos(Var a);
/// Pass-through inside [lo, hi], zero gradient outside.
Var clamp(Var a, double lo, double hi);
Var clamp_min(Var a, double lo);

// ---- reductions ----
Var sum(Var a);            // 1 x 1
Var mean(Var a);           // 1 x 1
Var sum_over_cols(Var a);  // r x 1
Var sum_over_rows(Var a);  // 1 x c
Var mean_over_rows(Var a); // 1 x c

// ---- structure ----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// out[i] = a[index[i]]; backward scatter-adds.
Var gather_rows(Var a, std::span<const std::size_t> index);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

}  // namespace ad
}  // namespace gssm

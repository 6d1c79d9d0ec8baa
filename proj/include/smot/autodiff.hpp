#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a rank-2 tensor (rows x cols); scalars are 1x1 and vectors
// are 1xn or nx1. A Tape records one node per operation in creation order,
// so parents always precede children and backward() is a single reverse sweep.

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smot::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Raised when a forward pass produces NaN or Inf.
class NonFiniteError : public DomainError {
 public:
  using DomainError::DomainError;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(1, 1, value); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::span<const double> values);
  static Tensor column(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Value of a 1x1 tensor.
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class OpKind {
  Constant,
  Parameter,
  MatMul,
  AddBroadcastRow,  // a + b, b either same shape as a or a 1 x cols row
  Sub,
  MulElementwise,
  ScaleByConstant,
  SumAll,
  MeanAll,
  Square,
  Sqrt,
  Log,
  Exp,
  Tanh,
  LeakyRelu,
  ConcatColumns,
  SliceColumns,
  GatherRows,
  Transpose,
  FloorAt,  // max(x, floor); gradient passes only where x > floor
};

std::string_view op_name(OpKind kind);

struct OpArgs {
  double scalar = 0.0;  // scale factor, leaky slope, or floor value
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> permutation{};
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const Tape& tape, std::vector<Tensor> grads)
      : tape_(&tape), grads_(std::move(grads)) {}

  // Gradient of the seed with respect to v; zeros for untouched nodes.
  Tensor of(Var v) const;
  bool touched(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Records op_kind applied to inputs and returns the new node.
  Var apply(OpKind kind, std::span<const Var> inputs, OpArgs args = {});

  // Reverse sweep from a scalar seed node; seed_value scales the seed.
  Gradients backward(Var seed, double seed_value = 1.0) const;

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> parents;
    Tensor value;
    OpArgs args;
    bool needs_grad = false;
  };

  Var push(Node node);
  void propagate(std::size_t id, const Tensor& grad, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
};

// Convenience wrappers over Tape::apply. All inputs must share one tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum_all(Var a);
Var mean_all(Var a);
Var square(Var a);
Var sqrt(Var a);
Var log(Var a);
Var exp(Var a);
Var tanh(Var a);
Var leaky_relu(Var a, double slope);
Var concat_columns(std::span<const Var> parts);
Var slice_columns(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::vector<std::size_t> permutation);
Var transpose(Var a);
Var floor_at(Var a, double floor);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per component.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace smot::ad

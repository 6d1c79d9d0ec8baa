#include "smot/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace smot::ad {

namespace {

#if defined(__GLIBC__)
// Training rebuilds a tape of several hundred MB every step. Keep freed pages
// in the heap instead of returning them to the kernel after each step.
const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
MapMat as_matrix(Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void expect_arity(OpKind kind, std::span<const Var> inputs, std::size_t n) {
  if (inputs.size() != n)
    shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
}

template <class F>
Tensor map_unary(const Tensor& a, F&& f) {
  Tensor out(a.rows(), a.cols());
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

void accumulate(std::vector<Tensor>& grads, std::size_t id, Tensor&& g) {
  Tensor& slot = grads[id];
  if (slot.empty()) {
    slot = std::move(g);
    return;
  }
  double* dst = slot.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < slot.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) throw ShapeError("tensor dimensions must be positive");
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows == 0 || cols == 0) throw ShapeError("tensor dimensions must be positive");
  if (data_.size() != rows * cols)
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string());
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::column(std::span<const double> values) {
  return Tensor(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[' << rows_ << 'x' << cols_ << ']';
  return os.str();
}

// ---------------------------------------------------------------- naming

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::AddBroadcastRow: return "add_broadcast_row";
    case OpKind::Sub: return "sub";
    case OpKind::MulElementwise: return "mul_elementwise";
    case OpKind::ScaleByConstant: return "scale_by_constant";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Tanh: return "tanh";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::ConcatColumns: return "concat_columns";
    case OpKind::SliceColumns: return "slice_columns";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Transpose: return "transpose";
    case OpKind::FloorAt: return "floor_at";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Var / Gradients

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("Var is not bound to a tape");
  return tape->value(id);
}

Tensor Gradients::of(Var v) const {
  if (touched(v)) return grads_[v.id];
  const Tensor& value = tape_->value(v.id);
  return Tensor(value.rows(), value.cols(), 0.0);
}

// ---------------------------------------------------------------- Tape

Var Tape::push(Node node) {
  if (!node.value.all_finite())
    throw NonFiniteError(std::string("non-finite value produced by ") + std::string(op_name(node.kind)));
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  return push(Node{OpKind::Constant, {}, std::move(value), {}, false});
}

Var Tape::parameter(Tensor value) {
  return push(Node{OpKind::Parameter, {}, std::move(value), {}, true});
}

Var Tape::apply(OpKind kind, std::span<const Var> inputs, OpArgs args) {
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("input belongs to a different tape");
  }
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[inputs[i].id].value; };

  Tensor out;
  switch (kind) {
    case OpKind::Constant:
    case OpKind::Parameter:
      throw std::logic_error("use Tape::constant / Tape::parameter for leaves");

    case OpKind::MatMul: {
      expect_arity(kind, inputs, 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) shape_fail(kind, a.shape_string() + " x " + b.shape_string());
      out = Tensor(a.rows(), b.cols());
      as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
      break;
    }
    case OpKind::AddBroadcastRow: {
      expect_arity(kind, inputs, 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      out = a;
      if (b.same_shape(a)) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      } else if (b.rows() == 1 && b.cols() == a.cols()) {
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) += b[c];
      } else {
        shape_fail(kind, a.shape_string() + " + " + b.shape_string());
      }
      break;
    }
    case OpKind::Sub:
    case OpKind::MulElementwise: {
      expect_arity(kind, inputs, 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (!a.same_shape(b)) shape_fail(kind, a.shape_string() + " vs " + b.shape_string());
      out = a;
      if (kind == OpKind::Sub)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
      else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
      break;
    }
    case OpKind::ScaleByConstant: {
      expect_arity(kind, inputs, 1);
      const double s = args.scalar;
      out = map_unary(in(0), [s](double x) { return s * x; });
      break;
    }
    case OpKind::SumAll:
    case OpKind::MeanAll: {
      expect_arity(kind, inputs, 1);
      const Tensor& a = in(0);
      double acc = 0.0;
      for (double x : a.values()) acc += x;
      if (kind == OpKind::MeanAll) acc /= double(a.size());
      out = Tensor::scalar(acc);
      break;
    }
    case OpKind::Square:
      expect_arity(kind, inputs, 1);
      out = map_unary(in(0), [](double x) { return x * x; });
      break;
    case OpKind::Sqrt:
    case OpKind::Log: {
      expect_arity(kind, inputs, 1);
      const Tensor& a = in(0);
      for (double x : a.values())
        if (!(x > 0.0)) throw DomainError(std::string(op_name(kind)) + " of non-positive input");
      out = kind == OpKind::Sqrt ? map_unary(a, [](double x) { return std::sqrt(x); })
                                 : map_unary(a, [](double x) { return std::log(x); });
      break;
    }
    case OpKind::Exp:
      expect_arity(kind, inputs, 1);
      out = map_unary(in(0), [](double x) { return std::exp(x); });
      break;
    case OpKind::Tanh:
      expect_arity(kind, inputs, 1);
      out = map_unary(in(0), [](double x) { return std::tanh(x); });
      break;
    case OpKind::LeakyRelu: {
      expect_arity(kind, inputs, 1);
      const double slope = args.scalar;
      out = map_unary(in(0), [slope](double x) { return x > 0.0 ? x : slope * x; });
      break;
    }
    case OpKind::FloorAt: {
      expect_arity(kind, inputs, 1);
      const double f = args.scalar;
      out = map_unary(in(0), [f](double x) { return x > f ? x : f; });
      break;
    }
    case OpKind::ConcatColumns: {
      if (inputs.empty()) shape_fail(kind, "no inputs");
      const std::size_t rows = in(0).rows();
      std::size_t cols = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (in(i).rows() != rows) shape_fail(kind, "row count mismatch");
        cols += in(i).cols();
      }
      out = Tensor(rows, cols);
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& p = in(i);
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(p.data() + r * p.cols(), p.cols(), out.data() + r * cols + offset);
        offset += p.cols();
      }
      break;
    }
    case OpKind::SliceColumns: {
      expect_arity(kind, inputs, 1);
      const Tensor& a = in(0);
      if (args.begin >= args.end || args.end > a.cols())
        shape_fail(kind, "bad column range [" + std::to_string(args.begin) + "," + std::to_string(args.end) +
                             ") of " + a.shape_string());
      const std::size_t w = args.end - args.begin;
      out = Tensor(a.rows(), w);
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(a.data() + r * a.cols() + args.begin, w, out.data() + r * w);
      break;
    }
    case OpKind::GatherRows: {
      expect_arity(kind, inputs, 1);
      const Tensor& a = in(0);
      const auto& perm = args.permutation;
      if (perm.size() != a.rows()) shape_fail(kind, "permutation length does not match row count");
      std::vector<bool> seen(perm.size(), false);
      for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) shape_fail(kind, "not a permutation");
        seen[p] = true;
      }
      out = Tensor(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(a.data() + perm[r] * a.cols(), a.cols(), out.data() + r * a.cols());
      break;
    }
    case OpKind::Transpose: {
      expect_arity(kind, inputs, 1);
      const Tensor& a = in(0);
      out = Tensor(a.cols(), a.rows());
      as_matrix(out) = as_matrix(a).transpose();
      break;
    }
  }

  Node node{kind, {}, std::move(out), std::move(args), false};
  node.parents.reserve(inputs.size());
  for (const Var& v : inputs) {
    node.parents.push_back(v.id);
    node.needs_grad = node.needs_grad || nodes_[v.id].needs_grad;
  }
  return push(std::move(node));
}

void Tape::propagate(std::size_t id, const Tensor& g, std::vector<Tensor>& grads) const {
  const Node& node = nodes_[id];
  auto parent = [&](std::size_t i) -> const Node& { return nodes_[node.parents[i]]; };
  auto wants = [&](std::size_t i) { return parent(i).needs_grad; };
  auto send = [&](std::size_t i, Tensor&& t) { accumulate(grads, node.parents[i], std::move(t)); };

  switch (node.kind) {
    case OpKind::Constant:
    case OpKind::Parameter:
      return;

    case OpKind::MatMul: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (wants(0)) {
        Tensor ga(a.rows(), a.cols());
        as_matrix(ga).noalias() = as_matrix(g) * as_matrix(b).transpose();
        send(0, std::move(ga));
      }
      if (wants(1)) {
        Tensor gb(b.rows(), b.cols());
        as_matrix(gb).noalias() = as_matrix(a).transpose() * as_matrix(g);
        send(1, std::move(gb));
      }
      return;
    }
    case OpKind::AddBroadcastRow: {
      if (wants(0)) send(0, Tensor(g));
      if (wants(1)) {
        const Tensor& b = parent(1).value;
        if (b.same_shape(g)) {
          send(1, Tensor(g));
        } else {
          Tensor gb(1, g.cols(), 0.0);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
          send(1, std::move(gb));
        }
      }
      return;
    }
    case OpKind::Sub:
      if (wants(0)) send(0, Tensor(g));
      if (wants(1)) send(1, map_unary(g, [](double x) { return -x; }));
      return;
    case OpKind::MulElementwise: {
      const Tensor& a = parent(0).value;
      const Tensor& b = parent(1).value;
      if (wants(0)) {
        Tensor ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b[i];
        send(0, std::move(ga));
      }
      if (wants(1)) {
        Tensor gb = g;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a[i];
        send(1, std::move(gb));
      }
      return;
    }
    case OpKind::ScaleByConstant: {
      const double s = node.args.scalar;
      send(0, map_unary(g, [s](double x) { return s * x; }));
      return;
    }
    case OpKind::SumAll:
    case OpKind::MeanAll: {
      const Tensor& a = parent(0).value;
      double v = g.item();
      if (node.kind == OpKind::MeanAll) v /= double(a.size());
      send(0, Tensor(a.rows(), a.cols(), v));
      return;
    }
    case OpKind::Square: {
      const Tensor& a = parent(0).value;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 2.0 * a[i];
      send(0, std::move(ga));
      return;
    }
    case OpKind::Sqrt: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 0.5 / node.value[i];
      send(0, std::move(ga));
      return;
    }
    case OpKind::Log: {
      const Tensor& a = parent(0).value;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= a[i];
      send(0, std::move(ga));
      return;
    }
    case OpKind::Exp: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= node.value[i];
      send(0, std::move(ga));
      return;
    }
    case OpKind::Tanh: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - node.value[i] * node.value[i];
      send(0, std::move(ga));
      return;
    }
    case OpKind::LeakyRelu: {
      const Tensor& a = parent(0).value;
      const double slope = node.args.scalar;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (!(a[i] > 0.0)) ga[i] *= slope;
      send(0, std::move(ga));
      return;
    }
    case OpKind::FloorAt: {
      const Tensor& a = parent(0).value;
      const double f = node.args.scalar;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (!(a[i] > f)) ga[i] = 0.0;
      send(0, std::move(ga));
      return;
    }
    case OpKind::ConcatColumns: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < node.parents.size(); ++i) {
        const Tensor& p = parent(i).value;
        if (wants(i)) {
          Tensor gp(p.rows(), p.cols());
          for (std::size_t r = 0; r < p.rows(); ++r)
            std::copy_n(g.data() + r * g.cols() + offset, p.cols(), gp.data() + r * p.cols());
          send(i, std::move(gp));
        }
        offset += p.cols();
      }
      return;
    }
    case OpKind::SliceColumns: {
      const Tensor& a = parent(0).value;
      Tensor ga(a.rows(), a.cols(), 0.0);
      const std::size_t w = node.args.end - node.args.begin;
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(g.data() + r * w, w, ga.data() + r * a.cols() + node.args.begin);
      send(0, std::move(ga));
      return;
    }
    case OpKind::GatherRows: {
      const Tensor& a = parent(0).value;
      const auto& perm = node.args.permutation;
      Tensor ga(a.rows(), a.cols(), 0.0);
      for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(g.data() + r * a.cols(), a.cols(), ga.data() + perm[r] * a.cols());
      send(0, std::move(ga));
      return;
    }
    case OpKind::Transpose: {
      Tensor ga(g.cols(), g.rows());
      as_matrix(ga) = as_matrix(g).transpose();
      send(0, std::move(ga));
      return;
    }
  }
}

Gradients Tape::backward(Var seed, double seed_value) const {
  if (seed.tape != this) throw std::logic_error("seed belongs to a different tape");
  const Tensor& sv = nodes_.at(seed.id).value;
  if (sv.size() != 1) throw ShapeError("backward seed must be scalar, got " + sv.shape_string());

  std::vector<Tensor> grads(nodes_.size());
  grads[seed.id] = Tensor::scalar(seed_value);
  for (std::size_t i = seed.id + 1; i-- > 0;) {
    if (grads[i].empty() || !nodes_[i].needs_grad) continue;
    propagate(i, grads[i], grads);
  }
  return Gradients(*this, std::move(grads));
}

// ---------------------------------------------------------------- wrappers

namespace {
Var unary(OpKind kind, Var a, OpArgs args = {}) {
  const std::array<Var, 1> in{a};
  return a.tape->apply(kind, in, std::move(args));
}
Var binary(OpKind kind, Var a, Var b) {
  const std::array<Var, 2> in{a, b};
  return a.tape->apply(kind, in);
}
}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::MatMul, a, b); }
Var add(Var a, Var b) { return binary(OpKind::AddBroadcastRow, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::MulElementwise, a, b); }
Var scale(Var a, double factor) { return unary(OpKind::ScaleByConstant, a, {.scalar = factor}); }
Var sum_all(Var a) { return unary(OpKind::SumAll, a); }
Var mean_all(Var a) { return unary(OpKind::MeanAll, a); }
Var square(Var a) { return unary(OpKind::Square, a); }
Var sqrt(Var a) { return unary(OpKind::Sqrt, a); }
Var log(Var a) { return unary(OpKind::Log, a); }
Var exp(Var a) { return unary(OpKind::Exp, a); }
Var tanh(Var a) { return unary(OpKind::Tanh, a); }
Var leaky_relu(Var a, double slope) { return unary(OpKind::LeakyRelu, a, {.scalar = slope}); }
Var slice_columns(Var a, std::size_t begin, std::size_t end) {
  return unary(OpKind::SliceColumns, a, {.begin = begin, .end = end});
}
Var gather_rows(Var a, std::vector<std::size_t> permutation) {
  return unary(OpKind::GatherRows, a, {.permutation = std::move(permutation)});
}
Var transpose(Var a) { return unary(OpKind::Transpose, a); }
Var floor_at(Var a, double floor) { return unary(OpKind::FloorAt, a, {.scalar = floor}); }

Var concat_columns(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_columns: no inputs");
  return parts.front().tape->apply(OpKind::ConcatColumns, parts);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor grad(x.rows(), x.cols());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace smot::ad

#pragma once

// Minimal reverse-mode automatic differentiation over 2-D row-major
// tensors. A Tape records every primitive in execution order; backward()
// walks the record once in reverse. Vectors are 1 x n tensors, scalars 1 x 1.
//
// Instantiated for float and double.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geoproj/geometry.hpp"

namespace geoproj::nn {

template <typename S>
using Tensor = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named, ordered trainable tensors.
template <typename S>
class ParameterStore {
 public:
  int add(std::string name, Tensor<S> value);
  int index(const std::string& name) const;  // -1 when absent
  bool contains(const std::string& name) const { return index(name) >= 0; }

  Tensor<S>& at(int i) { return values_[static_cast<std::size_t>(i)]; }
  const Tensor<S>& at(int i) const { return values_[static_cast<std::size_t>(i)]; }
  Tensor<S>& at(const std::string& name);
  const Tensor<S>& at(const std::string& name) const;
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }

  int size() const { return static_cast<int>(values_.size()); }
  std::size_t total_elements() const;

  /// Element-wise cast to another scalar type, preserving order and names.
  template <typename T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out;
    for (int i = 0; i < size(); ++i) out.add(name(i), at(i).template cast<T>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> values_;
};

template <typename S>
class Tape;

/// Handle to a node on a tape.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
};

template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<S>& grad)>;

  /// A leaf that never receives a gradient.
  Var<S> constant(Tensor<S> value);
  /// A leaf whose gradient is kept (inputs under test).
  Var<S> input(Tensor<S> value);
  /// A leaf bound to store entry `index`; gradients are collected by
  /// parameter_grads(). Every use creates a separate leaf.
  Var<S> parameter(const ParameterStore<S>& store, int index);
  Var<S> parameter(const ParameterStore<S>& store, const std::string& name);

  /// Records an op result. `backward` is dropped when no parent needs a
  /// gradient.
  Var<S> record(Tensor<S> value, bool requires_grad, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 for a 1 x 1 root and propagates.
  void backward(Var<S> root);

  void accumulate(int id, const Tensor<S>& g);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& g);

  const Tensor<S>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor<S>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }

  /// Sum of gradients over every leaf bound to each store entry.
  std::vector<Tensor<S>> parameter_grads(const ParameterStore<S>& store) const;

  std::size_t size() const { return nodes_.size(); }

  /// Disables gradient recording for parameters (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    int param_index = -1;
    const ParameterStore<S>* store = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

template <typename S>
template <typename Expr>
void Tape<S>::accumulate_expr(int id, const Expr& g) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad.resize(g.rows(), g.cols());
    n.grad.noalias() = g;
  } else {
    n.grad.noalias() += g;
  }
}

/// Counter-based stream for dropout masks (SplitMix64).
class DropoutRng {
 public:
  explicit DropoutRng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() noexcept;
  /// Equivalent to n calls of next().
  void fill(std::uint64_t* out, std::size_t n) noexcept;

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Primitives

template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// x W + b with b a 1 x m row broadcast over rows.
template <typename S> Var<S> linear(Var<S> x, Var<S> w, Var<S> b);
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
/// a + row, row is 1 x n.
template <typename S> Var<S> add_row(Var<S> a, Var<S> row);
/// Scales every row i of a by col(i), col is n x 1.
template <typename S> Var<S> mul_col(Var<S> a, Var<S> col);
/// a * s with s a 1 x 1 tensor.
template <typename S> Var<S> mul_scalar(Var<S> a, Var<S> s);
template <typename S> Var<S> scale(Var<S> a, S factor);
template <typename S> Var<S> relu(Var<S> a);
/// Exact (erf) GELU.
template <typename S> Var<S> gelu(Var<S> a);
/// Row-wise LayerNorm with affine gamma/beta (1 x n each).
template <typename S> Var<S> layer_norm(Var<S> a, Var<S> gamma, Var<S> beta, S eps = S(1e-5));
template <typename S> Var<S> softmax_rows(Var<S> a);
/// Inverted dropout; identity when !training or p == 0.
template <typename S> Var<S> dropout(Var<S> a, S p, bool training, DropoutRng* rng);
template <typename S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count);
/// Per-row inner product, n x 1.
template <typename S> Var<S> row_dot(Var<S> a, Var<S> b);
/// Mean over all entries of (a - target)^2.
template <typename S> Var<S> mse(Var<S> a, Var<S> target);
/// (1/rows) sum_i ||a_i - target_i||^2.
template <typename S> Var<S> sse_mean_rows(Var<S> a, Var<S> target);
template <typename S> Var<S> sum_all(Var<S> a);
/// 0.5 * ||a||^2
template <typename S> Var<S> half_sq_norm(Var<S> a);

// Geometric primitives. Every row of the input is one ambient point.

/// Row-wise metric projection. Sphere and disk are differentiated exactly;
/// the SO(3) block (also inside SE(3)) passes the incoming gradient through
/// the tangent projection at the projected rotation.
template <typename S> Var<S> project_rows(Var<S> y, const ManifoldKernel& m);

/// Row-wise tangent projection u - <u,x> x for a sphere factor.
template <typename S> Var<S> sphere_tangent_rows(Var<S> x, Var<S> u);

/// Row-wise sphere exponential cos(|v|) x + sin(|v|) v/|v|.
template <typename S> Var<S> sphere_exp_rows(Var<S> x, Var<S> v);

/// Row-wise exp(hat(c)) * g for so(3) coordinates (cols 3) and g in R^9, or
/// exp(xi(c,u)) * g for se(3) coordinates (cols 6) and g in R^16.
template <typename S> Var<S> lie_exp_rows(Var<S> coords, Var<S> g);

}  // namespace geoproj::nn

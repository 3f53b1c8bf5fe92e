#include "geoproj/tape.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <numbers>

#include "geoproj/error.hpp"
#include "geoproj/liealg.hpp"

namespace geoproj::nn {

namespace {

[[noreturn]] void shape_error(const std::string& what) { throw Error(ErrorCode::ShapeMismatch, what); }

template <typename S>
void require_same_shape(Var<S> a, Var<S> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_error(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

template <typename S>
bool any_grad(std::initializer_list<Var<S>> vars) {
  for (const auto& v : vars)
    if (v.requires_grad()) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

template <typename S>
int ParameterStore<S>::add(std::string name, Tensor<S> value) {
  if (contains(name)) throw Error(ErrorCode::Config, "duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return size() - 1;
}

template <typename S>
int ParameterStore<S>::index(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (names_[static_cast<std::size_t>(i)] == name) return i;
  return -1;
}

template <typename S>
Tensor<S>& ParameterStore<S>::at(const std::string& name) {
  const int i = index(name);
  if (i < 0) throw Error(ErrorCode::Config, "no parameter " + name);
  return at(i);
}

template <typename S>
const Tensor<S>& ParameterStore<S>::at(const std::string& name) const {
  const int i = index(name);
  if (i < 0) throw Error(ErrorCode::Config, "no parameter " + name);
  return at(i);
}

template <typename S>
std::size_t ParameterStore<S>::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

// ---------------------------------------------------------------------------
// Var / Tape

template <typename S>
const Tensor<S>& Var<S>::value() const {
  return tape->value(id);
}

template <typename S>
bool Var<S>::requires_grad() const {
  return tape->requires_grad(id);
}

template <typename S>
Var<S> Tape<S>::constant(Tensor<S> value) {
  nodes_.push_back(Node{std::move(value), {}, false, -1, nullptr, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::input(Tensor<S> value) {
  nodes_.push_back(Node{std::move(value), {}, true, -1, nullptr, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::parameter(const ParameterStore<S>& store, int index) {
  nodes_.push_back(Node{store.at(index), {}, grad_enabled_, index, &store, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::parameter(const ParameterStore<S>& store, const std::string& name) {
  const int i = store.index(name);
  if (i < 0) throw Error(ErrorCode::Config, "no parameter " + name);
  return parameter(store, i);
}

template <typename S>
Var<S> Tape<S>::record(Tensor<S> value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
void Tape<S>::accumulate(int id, const Tensor<S>& g) {
  accumulate_expr(id, g);
}

template <typename S>
void Tape<S>::backward(Var<S> root) {
  if (root.rows() != 1 || root.cols() != 1) shape_error("backward: root must be 1x1");
  if (!requires_grad(root.id)) return;
  nodes_[static_cast<std::size_t>(root.id)].grad = Tensor<S>::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    // Closures only touch parents, so the gradient can be lent out.
    Tensor<S> g = std::move(n.grad);
    n.backward(*this, g);
    nodes_[static_cast<std::size_t>(i)].grad = std::move(g);
  }
}

template <typename S>
std::vector<Tensor<S>> Tape<S>::parameter_grads(const ParameterStore<S>& store) const {
  std::vector<Tensor<S>> grads;
  grads.reserve(static_cast<std::size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) grads.push_back(Tensor<S>::Zero(store.at(i).rows(), store.at(i).cols()));
  for (const auto& n : nodes_) {
    if (n.store == &store && n.param_index >= 0 && n.grad.size() > 0) {
      grads[static_cast<std::size_t>(n.param_index)] += n.grad;
    }
  }
  return grads;
}

namespace {

inline std::uint64_t splitmix(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t DropoutRng::next() noexcept { return splitmix(state_++); }

void DropoutRng::fill(std::uint64_t* out, std::size_t n) noexcept {
  const std::uint64_t base = state_;
  for (std::size_t i = 0; i < n; ++i) out[i] = splitmix(base + i);
  state_ += n;
}

// ---------------------------------------------------------------------------
// Elementary ops

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) shape_error("matmul: inner dimensions differ");
  Tensor<S> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), any_grad({a, b}), [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate_expr(ib, t.value(ia).transpose() * g);
  });
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  if (x.cols() != w.rows()) shape_error("linear: input width does not match weight rows");
  if (b.rows() != 1 || b.cols() != w.cols()) shape_error("linear: bias shape");
  Tensor<S> out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  const int ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(std::move(out), any_grad({x, w, b}), [ix, iw, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ix)) t.accumulate_expr(ix, g * t.value(iw).transpose());
    if (t.requires_grad(iw)) t.accumulate_expr(iw, t.value(ix).transpose() * g);
    if (t.requires_grad(ib)) t.accumulate_expr(ib, g.colwise().sum());
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "add");
  Tensor<S> out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), any_grad({a, b}), [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "sub");
  Tensor<S> out = a.value() - b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), any_grad({a, b}), [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(ia, g);
    t.accumulate_expr(ib, -g);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "mul");
  Tensor<S> out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), any_grad({a, b}), [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate_expr(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_row: row shape");
  Tensor<S> out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), any_grad({a, row}), [ia, ir](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate_expr(ir, g.colwise().sum());
  });
}

template <typename S>
Var<S> mul_col(Var<S> a, Var<S> col) {
  if (col.cols() != 1 || col.rows() != a.rows()) shape_error("mul_col: column shape");
  Tensor<S> out = col.value().col(0).asDiagonal() * a.value();
  const int ia = a.id, ic = col.id;
  return a.tape->record(std::move(out), any_grad({a, col}), [ia, ic](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.accumulate_expr(ia, t.value(ic).col(0).asDiagonal() * g);
    if (t.requires_grad(ic)) t.accumulate_expr(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

template <typename S>
Var<S> mul_scalar(Var<S> a, Var<S> s) {
  if (s.rows() != 1 || s.cols() != 1) shape_error("mul_scalar: scalar must be 1x1");
  Tensor<S> out = a.value() * s.value()(0, 0);
  const int ia = a.id, is = s.id;
  return a.tape->record(std::move(out), any_grad({a, s}), [ia, is](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g * t.value(is)(0, 0));
    if (t.requires_grad(is)) {
      Tensor<S> gs(1, 1);
      gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
      t.accumulate(is, gs);
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  Tensor<S> out = a.value() * factor;
  const int ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(),
                        [ia, factor](Tape<S>& t, const Tensor<S>& g) { t.accumulate_expr(ia, g * factor); });
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tensor<S> out = a.value().cwiseMax(S(0));
  const int ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_expr(ia, (t.value(ia).array() > S(0)).select(g, S(0)));
  });
}

template <typename S>
Var<S> gelu(Var<S> a) {
  constexpr S inv_sqrt2 = S(0.70710678118654752440);
  constexpr S inv_sqrt_2pi = S(0.39894228040143267794);
  const auto x = a.value().array();
  Tensor<S> cdf = (S(0.5) * (S(1) + (x * inv_sqrt2).erf())).matrix();
  Tensor<S> out = (x * cdf.array()).matrix();
  const int ia = a.id;
  if (!a.requires_grad()) return a.tape->record(std::move(out), false, {});
  // d/dx [x Phi(x)] = Phi(x) + x phi(x), kept from the forward pass.
  cdf.array() += x * inv_sqrt_2pi * (S(-0.5) * x.square()).exp();
  return a.tape->record(std::move(out), true, [ia, deriv = std::move(cdf)](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_expr(ia, g.cwiseProduct(deriv));
  });
}

template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gamma, Var<S> beta, S eps) {
  const Eigen::Index rows = a.rows(), n = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    shape_error("layer_norm: affine parameter shape");
  }
  const Tensor<S>& x = a.value();
  const auto gam = gamma.value().row(0).array();
  const auto bet = beta.value().row(0).array();
  Tensor<S> xhat(rows, n);
  Tensor<S> out(rows, n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto xr = x.row(r).array();
    const S mean = xr.sum() / S(n);
    auto hr = xhat.row(r).array();
    hr = xr - mean;
    const S is = S(1) / std::sqrt(hr.square().sum() / S(n) + eps);
    hr *= is;
    inv_std(r) = is;
    out.row(r).array() = hr * gam + bet;
  }
  const int ia = a.id, ig = gamma.id, ib = beta.id;
  if (!any_grad({a, gamma, beta})) return a.tape->record(std::move(out), false, {});
  return a.tape->record(
      std::move(out), true,
      [ia, ig, ib, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, const Tensor<S>& g) {
        if (t.requires_grad(ig)) t.accumulate_expr(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate_expr(ib, g.colwise().sum());
        if (t.requires_grad(ia)) {
          const auto gam = t.value(ig).row(0).array();
          Tensor<S> dx(g.rows(), n);
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            auto dr = dx.row(r).array();
            dr = g.row(r).array() * gam;
            const auto hr = xhat.row(r).array();
            const S m1 = dr.sum() / S(n);
            const S m2 = (dr * hr).sum() / S(n);
            dr = (dr - m1 - hr * m2) * inv_std(r);
          }
          t.accumulate(ia, dx);
        }
      });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tensor<S> out = a.value().colwise() - a.value().rowwise().maxCoeff();
  out = out.array().exp().matrix();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> inv_sum = out.rowwise().sum().cwiseInverse();
  out = inv_sum.asDiagonal() * out;
  const int ia = a.id;
  const int io = static_cast<int>(a.tape->size());  // id of the node recorded below
  return a.tape->record(std::move(out), a.requires_grad(), [ia, io](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& p = t.value(io);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = g.cwiseProduct(p).rowwise().sum();
    t.accumulate_expr(ia, p.cwiseProduct(g.colwise() - dot));
  });
}

template <typename S>
Var<S> dropout(Var<S> a, S p, bool training, DropoutRng* rng) {
  if (!training || p <= S(0)) return a;
  if (p >= S(1)) shape_error("dropout: p must be < 1");
  if (rng == nullptr) throw Error(ErrorCode::Config, "dropout in training mode needs an rng");
  const auto threshold = static_cast<std::uint16_t>(static_cast<double>(p) * 65536.0);
  const S keep_scale = S(1) / (S(1) - p);
  const Eigen::Index total = a.value().size();
  // Four 16-bit uniforms per 64-bit draw.
  std::vector<std::uint16_t> bits(static_cast<std::size_t>((total + 3) / 4 * 4));
  rng->fill(reinterpret_cast<std::uint64_t*>(bits.data()), bits.size() / 4);
  Tensor<S> out(a.rows(), a.cols());
  const S* x = a.value().data();
  const std::uint16_t* u = bits.data();
  S* o = out.data();
  for (Eigen::Index k = 0; k < total; ++k) o[k] = x[k] * (keep_scale * static_cast<S>(u[k] >= threshold));
  const int ia = a.id;
  if (!a.requires_grad()) return a.tape->record(std::move(out), false, {});
  return a.tape->record(std::move(out), true, [ia, bits = std::move(bits), threshold, keep_scale](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S> d(g.rows(), g.cols());
    const S* gi = g.data();
    const std::uint16_t* ub = bits.data();
    S* di = d.data();
    for (Eigen::Index k = 0; k < g.size(); ++k) di[k] = gi[k] * (keep_scale * static_cast<S>(ub[k] >= threshold));
    t.accumulate(ia, d);
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) shape_error("concat_cols: no inputs");
  const auto rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols: row counts differ");
    cols += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, p.cols());
    off += p.cols();
  }
  return parts.front().tape->record(std::move(out), needs_grad, [spans](Tape<S>& t, const Tensor<S>& g) {
    Eigen::Index o = 0;
    for (const auto& [id, c] : spans) {
      t.accumulate_expr(id, g.middleCols(o, c));
      o += c;
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) shape_error("slice_cols: out of range");
  if (start == 0 && count == a.cols()) return a;
  Tensor<S> out = a.value().middleCols(start, count);
  const int ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(), [ia, start, count](Tape<S>& t, const Tensor<S>& g) {
    Tensor<S> full = Tensor<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    full.middleCols(start, count) = g;
    t.accumulate(ia, full);
  });
}

template <typename S>
Var<S> row_dot(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "row_dot");
  Tensor<S> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), any_grad({a, b}), [ia, ib](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(ia)) t.accumulate_expr(ia, g.col(0).asDiagonal() * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate_expr(ib, g.col(0).asDiagonal() * t.value(ia));
  });
}

template <typename S>
Var<S> mse(Var<S> a, Var<S> target) {
  require_same_shape(a, target, "mse");
  const S count = S(a.value().size());
  Tensor<S> out(1, 1);
  out(0, 0) = (a.value() - target.value()).squaredNorm() / count;
  const int ia = a.id, it = target.id;
  return a.tape->record(std::move(out), any_grad({a, target}), [ia, it, count](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S> d = (S(2) * g(0, 0) / count) * (t.value(ia) - t.value(it));
    t.accumulate(ia, d);
    t.accumulate_expr(it, -d);
  });
}

template <typename S>
Var<S> sse_mean_rows(Var<S> a, Var<S> target) {
  require_same_shape(a, target, "sse_mean_rows");
  const S rows = S(a.rows());
  Tensor<S> out(1, 1);
  out(0, 0) = (a.value() - target.value()).squaredNorm() / rows;
  const int ia = a.id, it = target.id;
  return a.tape->record(std::move(out), any_grad({a, target}), [ia, it, rows](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S> d = (S(2) * g(0, 0) / rows) * (t.value(ia) - t.value(it));
    t.accumulate(ia, d);
    t.accumulate_expr(it, -d);
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tensor<S> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(), [ia](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate_expr(ia, Tensor<S>::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0)));
  });
}

template <typename S>
Var<S> half_sq_norm(Var<S> a) {
  Tensor<S> out(1, 1);
  out(0, 0) = S(0.5) * a.value().squaredNorm();
  const int ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(),
                        [ia](Tape<S>& t, const Tensor<S>& g) { t.accumulate_expr(ia, g(0, 0) * t.value(ia)); });
}

// ---------------------------------------------------------------------------
// Geometric primitives

namespace {

using lie::Mat3;
using lie::Vec3;

// Per-factor column blocks of a kernel.
struct Block {
  KernelKind kind;
  int offset;
  int width;
};

std::vector<Block> blocks_of(const ManifoldKernel& m) {
  std::vector<Block> out;
  if (m.kind() == KernelKind::Product) {
    const auto offs = m.factor_offsets();
    for (std::size_t i = 0; i < m.factors().size(); ++i) {
      out.push_back({m.factors()[i].kind(), offs[i], m.factors()[i].ambient_dim()});
    }
  } else {
    out.push_back({m.kind(), 0, m.ambient_dim()});
  }
  return out;
}

template <typename S>
Mat3 read3(const Tensor<S>& t, Eigen::Index row, int off, int stride = 3) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = static_cast<double>(t(row, off + i * stride + j));
  return m;
}

template <typename S>
void write3(Tensor<S>& t, Eigen::Index row, int off, const Mat3& m, int stride = 3) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t(row, off + i * stride + j) = static_cast<S>(m(i, j));
}

Mat3 skew(const Mat3& a) { return 0.5 * (a - a.transpose()); }

// Rotation and left-Jacobian coefficients as functions of s = theta^2 and
// their s-derivatives; series below theta = 1e-2.
struct ExpCoeffs {
  double a, b, c, a_s, b_s, c_s;
};

ExpCoeffs exp_coeffs(double theta) {
  ExpCoeffs k{};
  const double s = theta * theta;
  if (theta < 1e-2) {
    k.a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
    k.b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
    k.c = 1.0 / 6.0 - s / 120.0 + s * s / 5040.0 - s * s * s / 362880.0;
    k.a_s = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
    k.b_s = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
    k.c_s = -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0;
  } else {
    const double st = std::sin(theta), ct = std::cos(theta);
    const double t2 = s, t3 = s * theta, t4 = s * s, t5 = t4 * theta;
    k.a = st / theta;
    k.b = (1.0 - ct) / t2;
    k.c = (theta - st) / t3;
    k.a_s = (theta * ct - st) / (2.0 * t3);
    k.b_s = (theta * st - 2.0 * (1.0 - ct)) / (2.0 * t4);
    k.c_s = (theta * (1.0 - ct) - 3.0 * (theta - st)) / (2.0 * t5);
  }
  return k;
}

// d/dc_k of a(s) K + b(s) K^2 style expansions: first * K + second * K^2
// with coefficient derivatives (d_first, d_second) in s.
Mat3 expansion_partial(const Vec3& c, int k, double first, double second, double d_first, double d_second) {
  const Mat3 kk = lie::hat(c);
  const Mat3 ek = lie::so3_basis(k);
  return 2.0 * c(k) * (d_first * kk + d_second * kk * kk) + first * ek + second * (ek * kk + kk * ek);
}

}  // namespace

template <typename S>
Var<S> project_rows(Var<S> y, const ManifoldKernel& m) {
  if (y.cols() != m.ambient_dim()) shape_error("project_rows: width does not match kernel");
  const auto blocks = blocks_of(m);
  const Tensor<S>& in = y.value();
  Tensor<S> out = in;
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    for (const auto& b : blocks) {
      switch (b.kind) {
        case KernelKind::Sphere:
        case KernelKind::Disk: {
          const double n = static_cast<double>(in.row(r).segment(b.offset, b.width).norm());
          if (b.kind == KernelKind::Sphere && n == 0.0) {
            throw Error(ErrorCode::ZeroInput, "project_rows: zero row on a sphere");
          }
          if (b.kind == KernelKind::Sphere || n > 1.0) out.row(r).segment(b.offset, b.width) /= static_cast<S>(n);
          break;
        }
        case KernelKind::SO3:
          write3(out, r, b.offset, nearest_rotation(read3(in, r, b.offset)));
          break;
        case KernelKind::SE3:
          write3(out, r, b.offset, nearest_rotation(read3(in, r, b.offset, 4)), 4);
          out(r, b.offset + 12) = S(0);
          out(r, b.offset + 13) = S(0);
          out(r, b.offset + 14) = S(0);
          out(r, b.offset + 15) = S(1);
          break;
        case KernelKind::Product: break;
      }
    }
  }
  const int iy = y.id;
  const int io = static_cast<int>(y.tape->size());
  return y.tape->record(std::move(out), y.requires_grad(), [iy, io, blocks](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& x = t.value(iy);
    const Tensor<S>& p = t.value(io);
    Tensor<S> dx = g;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (const auto& b : blocks) {
        switch (b.kind) {
          case KernelKind::Sphere:
          case KernelKind::Disk: {
            const S n = x.row(r).segment(b.offset, b.width).norm();
            if (b.kind == KernelKind::Disk && n <= S(1)) break;
            const auto pr = p.row(r).segment(b.offset, b.width);
            const auto gr = g.row(r).segment(b.offset, b.width);
            dx.row(r).segment(b.offset, b.width) = (gr - gr.dot(pr) * pr) / n;
            break;
          }
          case KernelKind::SO3: {
            const Mat3 rot = read3(p, r, b.offset);
            write3(dx, r, b.offset, Mat3(skew(read3(g, r, b.offset) * rot.transpose()) * rot));
            break;
          }
          case KernelKind::SE3: {
            const Mat3 rot = read3(p, r, b.offset, 4);
            write3(dx, r, b.offset, Mat3(skew(read3(g, r, b.offset, 4) * rot.transpose()) * rot), 4);
            dx.row(r).segment(b.offset + 12, 4).setZero();
            break;
          }
          case KernelKind::Product: break;
        }
      }
    }
    t.accumulate(iy, dx);
  });
}

template <typename S>
Var<S> sphere_tangent_rows(Var<S> x, Var<S> u) {
  require_same_shape(x, u, "sphere_tangent_rows");
  const Eigen::Matrix<S, Eigen::Dynamic, 1> ux = u.value().cwiseProduct(x.value()).rowwise().sum();
  Tensor<S> out = u.value() - ux.asDiagonal() * x.value();
  const int ix = x.id, iu = u.id;
  return x.tape->record(std::move(out), any_grad({x, u}), [ix, iu, ux](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& xv = t.value(ix);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> gx = g.cwiseProduct(xv).rowwise().sum();
    if (t.requires_grad(iu)) t.accumulate_expr(iu, g - gx.asDiagonal() * xv);
    if (t.requires_grad(ix)) t.accumulate_expr(ix, -(ux.asDiagonal() * g + gx.asDiagonal() * t.value(iu)));
  });
}

template <typename S>
Var<S> sphere_exp_rows(Var<S> x, Var<S> v) {
  require_same_shape(x, v, "sphere_exp_rows");
  const Tensor<S>& xv = x.value();
  const Tensor<S>& vv = v.value();
  Tensor<S> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S n = vv.row(r).norm();
    if (n == S(0)) {
      out.row(r) = xv.row(r);
    } else {
      out.row(r) = std::cos(n) * xv.row(r) + (std::sin(n) / n) * vv.row(r);
    }
  }
  const int ix = x.id, iv = v.id;
  return x.tape->record(std::move(out), any_grad({x, v}), [ix, iv](Tape<S>& t, const Tensor<S>& g) {
    const Tensor<S>& xv = t.value(ix);
    const Tensor<S>& vv = t.value(iv);
    Tensor<S> dx(xv.rows(), xv.cols());
    Tensor<S> dv(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const double n = static_cast<double>(vv.row(r).norm());
      double sinc = 0.0, d = 0.0;
      if (n < 1e-2) {
        const double n2 = n * n;
        sinc = 1.0 - n2 / 6.0 + n2 * n2 / 120.0;
        d = -1.0 / 3.0 + n2 / 30.0 - n2 * n2 / 840.0;
      } else {
        sinc = std::sin(n) / n;
        d = (std::cos(n) - sinc) / (n * n);
      }
      const S gdx = g.row(r).dot(xv.row(r));
      const S gdv = g.row(r).dot(vv.row(r));
      dx.row(r) = static_cast<S>(std::cos(n)) * g.row(r);
      dv.row(r) = static_cast<S>(sinc) * (g.row(r) - gdx * vv.row(r)) + static_cast<S>(d) * gdv * vv.row(r);
    }
    if (t.requires_grad(ix)) t.accumulate(ix, dx);
    if (t.requires_grad(iv)) t.accumulate(iv, dv);
  });
}

template <typename S>
Var<S> lie_exp_rows(Var<S> coords, Var<S> g) {
  const bool so3 = coords.cols() == 3 && g.cols() == 9;
  const bool se3 = coords.cols() == 6 && g.cols() == 16;
  if (!so3 && !se3) shape_error("lie_exp_rows: expects (3, 9) or (6, 16) columns");
  if (coords.rows() != g.rows()) shape_error("lie_exp_rows: row counts differ");
  const Tensor<S>& cv = coords.value();
  const Tensor<S>& gv = g.value();
  Tensor<S> out(gv.rows(), gv.cols());
  for (Eigen::Index r = 0; r < gv.rows(); ++r) {
    const Vec3 c(cv(r, 0), cv(r, 1), cv(r, 2));
    if (so3) {
      write3(out, r, 0, Mat3(lie::exp_so3(c) * read3(gv, r, 0)));
    } else {
      const Vec3 u(cv(r, 3), cv(r, 4), cv(r, 5));
      lie::Mat4 base;
      for (int i = 0; i < 16; ++i) base(i / 4, i % 4) = static_cast<double>(gv(r, i));
      const lie::Mat4 res = lie::exp_se3(c, u) * base;
      for (int i = 0; i < 16; ++i) out(r, i) = static_cast<S>(res(i / 4, i % 4));
    }
  }
  const int ic = coords.id, ig = g.id;
  return coords.tape->record(std::move(out), any_grad({coords, g}), [ic, ig, so3](Tape<S>& t, const Tensor<S>& grad) {
    const Tensor<S>& cv = t.value(ic);
    const Tensor<S>& gv = t.value(ig);
    Tensor<S> dc = Tensor<S>::Zero(cv.rows(), cv.cols());
    Tensor<S> dg(gv.rows(), gv.cols());
    for (Eigen::Index r = 0; r < gv.rows(); ++r) {
      const Vec3 c(cv(r, 0), cv(r, 1), cv(r, 2));
      const ExpCoeffs k = exp_coeffs(c.norm());
      if (so3) {
        const Mat3 rot = lie::exp_so3(c);
        const Mat3 base = read3(gv, r, 0);
        const Mat3 gout = read3(grad, r, 0);
        write3(dg, r, 0, Mat3(rot.transpose() * gout));
        const Mat3 drot = gout * base.transpose();
        for (int j = 0; j < 3; ++j) {
          dc(r, j) = static_cast<S>(drot.cwiseProduct(expansion_partial(c, j, k.a, k.b, k.a_s, k.b_s)).sum());
        }
      } else {
        const Vec3 u(cv(r, 3), cv(r, 4), cv(r, 5));
        lie::Mat4 base, gout;
        for (int i = 0; i < 16; ++i) {
          base(i / 4, i % 4) = static_cast<double>(gv(r, i));
          gout(i / 4, i % 4) = static_cast<double>(grad(r, i));
        }
        const lie::Mat4 e = lie::exp_se3(c, u);
        const lie::Mat4 dbase = e.transpose() * gout;
        for (int i = 0; i < 16; ++i) dg(r, i) = static_cast<S>(dbase(i / 4, i % 4));
        const lie::Mat4 de = gout * base.transpose();
        const Mat3 drot = de.topLeftCorner<3, 3>();
        const Vec3 dtrans = de.topRightCorner<3, 1>();
        const Mat3 v = lie::so3_left_jacobian(c);
        for (int j = 0; j < 3; ++j) {
          const double from_rot = drot.cwiseProduct(expansion_partial(c, j, k.a, k.b, k.a_s, k.b_s)).sum();
          const double from_trans = dtrans.dot(expansion_partial(c, j, k.b, k.c, k.b_s, k.c_s) * u);
          dc(r, j) = static_cast<S>(from_rot + from_trans);
        }
        const Vec3 du = v.transpose() * dtrans;
        for (int j = 0; j < 3; ++j) dc(r, 3 + j) = static_cast<S>(du(j));
      }
    }
    if (t.requires_grad(ic)) t.accumulate(ic, dc);
    if (t.requires_grad(ig)) t.accumulate(ig, dg);
  });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define GEOPROJ_INSTANTIATE(S)                                                          \
  template class ParameterStore<S>;                                                    \
  template struct Var<S>;                                                              \
  template class Tape<S>;                                                              \
  template Var<S> matmul(Var<S>, Var<S>);                                              \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                      \
  template Var<S> add(Var<S>, Var<S>);                                                 \
  template Var<S> sub(Var<S>, Var<S>);                                                 \
  template Var<S> mul(Var<S>, Var<S>);                                                 \
  template Var<S> add_row(Var<S>, Var<S>);                                             \
  template Var<S> mul_col(Var<S>, Var<S>);                                             \
  template Var<S> mul_scalar(Var<S>, Var<S>);                                          \
  template Var<S> scale(Var<S>, S);                                                    \
  template Var<S> relu(Var<S>);                                                        \
  template Var<S> gelu(Var<S>);                                                        \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                               \
  template Var<S> softmax_rows(Var<S>);                                                \
  template Var<S> dropout(Var<S>, S, bool, DropoutRng*);                               \
  template Var<S> concat_cols(const std::vector<Var<S>>&);                             \
  template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                      \
  template Var<S> row_dot(Var<S>, Var<S>);                                             \
  template Var<S> mse(Var<S>, Var<S>);                                                 \
  template Var<S> sse_mean_rows(Var<S>, Var<S>);                                       \
  template Var<S> sum_all(Var<S>);                                                     \
  template Var<S> half_sq_norm(Var<S>);                                                \
  template Var<S> project_rows(Var<S>, const ManifoldKernel&);                         \
  template Var<S> sphere_tangent_rows(Var<S>, Var<S>);                                 \
  template Var<S> sphere_exp_rows(Var<S>, Var<S>);                                     \
  template Var<S> lie_exp_rows(Var<S>, Var<S>);

GEOPROJ_INSTANTIATE(float)
GEOPROJ_INSTANTIATE(double)

#undef GEOPROJ_INSTANTIATE

}  // namespace geoproj::nn

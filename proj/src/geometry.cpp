#include "geoproj/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "geoproj/error.hpp"

namespace geoproj {

using lie::Mat3;
using lie::Mat4;
using lie::Vec3;

namespace {

void check_dim(const ManifoldKernel& m, const AmbientVector& y, const char* what) {
  if (y.size() != m.ambient_dim()) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(what) + ": expected ambient dim " + std::to_string(m.ambient_dim()) +
                    ", got " + std::to_string(y.size()));
  }
}

Mat3 skew_part(const Mat3& a) { return 0.5 * (a - a.transpose()); }

Mat4 se3_inverse(const Mat4& g) {
  Mat4 inv = Mat4::Identity();
  const Mat3 rt = g.topLeftCorner<3, 3>().transpose();
  inv.topLeftCorner<3, 3>() = rt;
  inv.topRightCorner<3, 1>() = -rt * g.topRightCorner<3, 1>();
  return inv;
}

double orth_residual(const Mat3& r) { return (r * r.transpose() - Mat3::Identity()).norm(); }
double det_residual(const Mat3& r) { return std::abs(r.determinant() - 1.0); }

double se3_row_residual(const Mat4& g) {
  Eigen::RowVector4d row = g.row(3);
  row(3) -= 1.0;
  return row.cwiseAbs().maxCoeff();
}

bool is_boundary(double norm) { return std::abs(norm - 1.0) <= kDiskBoundaryTol; }

template <typename Fn>
AmbientVector blockwise(const ManifoldKernel& m, const Fn& fn) {
  AmbientVector out(m.ambient_dim());
  const auto offsets = m.factor_offsets();
  for (std::size_t i = 0; i < m.factors().size(); ++i) {
    const auto& f = m.factors()[i];
    out.segment(offsets[i], f.ambient_dim()) = fn(f, offsets[i]);
  }
  return out;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat3 g;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Mat3> qr(g);
  Mat3 q = qr.householderQ();
  const Mat3 r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Sign fix makes Q Haar-distributed on O(3).
  for (int j = 0; j < 3; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  if (q.determinant() < 0.0) q.col(0) = -q.col(0);
  return q;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// ManifoldKernel

ManifoldKernel ManifoldKernel::sphere(int ambient_dim) {
  if (ambient_dim < 2) {
    throw Error(ErrorCode::Config, "sphere ambient dimension must be >= 2");
  }
  return ManifoldKernel(KernelKind::Sphere, ambient_dim, ambient_dim - 1);
}

ManifoldKernel ManifoldKernel::so3() { return ManifoldKernel(KernelKind::SO3, 9, 3); }
ManifoldKernel ManifoldKernel::se3() { return ManifoldKernel(KernelKind::SE3, 16, 6); }
ManifoldKernel ManifoldKernel::disk() { return ManifoldKernel(KernelKind::Disk, 2, 2); }

ManifoldKernel ManifoldKernel::product(std::vector<ManifoldKernel> factors) {
  if (factors.empty()) throw Error(ErrorCode::Config, "product of zero kernels");
  int ambient = 0;
  int intrinsic = 0;
  std::vector<ManifoldKernel> flat;
  for (auto& f : factors) {
    if (f.kind() == KernelKind::Product) {
      flat.insert(flat.end(), f.factors().begin(), f.factors().end());
    } else {
      flat.push_back(f);
    }
    ambient += f.ambient_dim();
    intrinsic += f.intrinsic_dim();
  }
  ManifoldKernel k(KernelKind::Product, ambient, intrinsic);
  k.factors_ = std::move(flat);
  return k;
}

ManifoldKernel ManifoldKernel::power(const ManifoldKernel& factor, int n) {
  if (n < 1) throw Error(ErrorCode::Config, "kernel power must be >= 1");
  return product(std::vector<ManifoldKernel>(static_cast<std::size_t>(n), factor));
}

ManifoldKernel ManifoldKernel::parse(std::string_view text) {
  auto bad = [&] { return Error(ErrorCode::Config, "unknown manifold '" + std::string(text) + "'"); };
  if (text == "so3") return so3();
  if (text == "se3") return se3();
  if (text == "disk") return disk();
  if (text == "circle") return sphere(2);
  if (text.starts_with("sphere:")) {
    int d = 0;
    const auto rest = text.substr(7);
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), d);
    if (ec != std::errc() || p != rest.data() + rest.size()) throw bad();
    return sphere(d);
  }
  if (text.starts_with("product(") && text.ends_with(")")) {
    const auto inner = text.substr(8, text.size() - 9);
    std::vector<ManifoldKernel> factors;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= inner.size(); ++i) {
      if (i == inner.size() || (inner[i] == ',' && depth == 0)) {
        factors.push_back(parse(inner.substr(start, i - start)));
        start = i + 1;
      } else if (inner[i] == '(') {
        ++depth;
      } else if (inner[i] == ')') {
        --depth;
      }
    }
    return product(std::move(factors));
  }
  if (const auto caret = text.rfind('^'); caret != std::string_view::npos) {
    int n = 0;
    const auto rest = text.substr(caret + 1);
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), n);
    if (ec != std::errc() || p != rest.data() + rest.size()) throw bad();
    return power(parse(text.substr(0, caret)), n);
  }
  throw bad();
}

std::string ManifoldKernel::name() const {
  switch (kind_) {
    case KernelKind::Sphere: return "sphere:" + std::to_string(ambient_dim_);
    case KernelKind::SO3: return "so3";
    case KernelKind::SE3: return "se3";
    case KernelKind::Disk: return "disk";
    case KernelKind::Product: {
      const bool uniform = std::all_of(factors_.begin(), factors_.end(),
                                       [&](const ManifoldKernel& f) { return f == factors_.front(); });
      if (uniform) return factors_.front().name() + "^" + std::to_string(factors_.size());
      std::string out = "product(";
      for (std::size_t i = 0; i < factors_.size(); ++i) {
        if (i) out += ",";
        out += factors_[i].name();
      }
      return out + ")";
    }
  }
  return "?";
}

bool ManifoldKernel::operator==(const ManifoldKernel& other) const {
  return kind_ == other.kind_ && ambient_dim_ == other.ambient_dim_ && factors_ == other.factors_;
}

std::vector<int> ManifoldKernel::factor_offsets() const {
  std::vector<int> offsets;
  int off = 0;
  for (const auto& f : factors_) {
    offsets.push_back(off);
    off += f.ambient_dim();
  }
  return offsets;
}

bool ManifoldKernel::has_exp() const {
  switch (kind_) {
    case KernelKind::Disk: return false;
    case KernelKind::Product:
      return std::all_of(factors_.begin(), factors_.end(), [](const auto& f) { return f.has_exp(); });
    default: return true;
  }
}

bool ManifoldKernel::is_group() const {
  switch (kind_) {
    case KernelKind::SO3:
    case KernelKind::SE3: return true;
    case KernelKind::Product:
      return std::all_of(factors_.begin(), factors_.end(), [](const auto& f) { return f.is_group(); });
    default: return false;
  }
}

int ManifoldKernel::exp_coord_dim() const {
  switch (kind_) {
    case KernelKind::Sphere: return ambient_dim_;
    case KernelKind::SO3: return 3;
    case KernelKind::SE3: return 6;
    case KernelKind::Disk:
      throw Error(ErrorCode::UnsupportedManifold, "the disk has no exponential map");
    case KernelKind::Product: {
      int m = 0;
      for (const auto& f : factors_) m += f.exp_coord_dim();
      return m;
    }
  }
  return 0;
}

double ConstraintResidual::part(std::string_view name) const {
  for (const auto& [k, v] : parts)
    if (k == name) return v;
  return 0.0;
}

// ---------------------------------------------------------------------------
// Maps

Mat3 nearest_rotation(const Mat3& a) {
  Eigen::JacobiSVD<Mat3> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s(0) > 0.0) || s(2) <= 1e-12 * s(0)) {
    throw Error(ErrorCode::SingularRotationBlock, "rotation block is rank deficient");
  }
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  const double sign = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return u * Vec3(1.0, 1.0, sign).asDiagonal() * v.transpose();
}

AmbientVector metric_project(const ManifoldKernel& m, const AmbientVector& y) {
  check_dim(m, y, "metric_project");
  if (!y.allFinite()) throw Error(ErrorCode::ProjectionFailure, "non-finite input");
  switch (m.kind()) {
    case KernelKind::Sphere: {
      const double n = y.norm();
      if (n == 0.0) throw Error(ErrorCode::ZeroInput, "cannot project the origin onto a sphere");
      return y / n;
    }
    case KernelKind::Disk: {
      const double n = y.norm();
      return n > 1.0 ? AmbientVector(y / n) : y;
    }
    case KernelKind::SO3: return lie::flatten(nearest_rotation(lie::to_mat3(y)));
    case KernelKind::SE3: {
      Mat4 g = lie::to_mat4(y);
      g.topLeftCorner<3, 3>() = nearest_rotation(g.topLeftCorner<3, 3>());
      g.row(3) << 0.0, 0.0, 0.0, 1.0;
      return lie::flatten(g);
    }
    case KernelKind::Product:
      return blockwise(m, [&](const ManifoldKernel& f, int off) {
        return metric_project(f, y.segment(off, f.ambient_dim()));
      });
  }
  return y;
}

ConstraintResidual constraint_residual(const ManifoldKernel& m, const AmbientVector& y) {
  check_dim(m, y, "constraint_residual");
  ConstraintResidual r;
  switch (m.kind()) {
    case KernelKind::Sphere:
      r.parts = {{"norm", std::abs(y.norm() - 1.0)}};
      break;
    case KernelKind::Disk:
      r.parts = {{"outside", std::max(0.0, y.norm() - 1.0)}};
      break;
    case KernelKind::SO3: {
      const Mat3 rot = lie::to_mat3(y);
      r.parts = {{"orth", orth_residual(rot)}, {"det", det_residual(rot)}};
      break;
    }
    case KernelKind::SE3: {
      const Mat4 g = lie::to_mat4(y);
      const Mat3 rot = g.topLeftCorner<3, 3>();
      r.parts = {{"orth", orth_residual(rot)}, {"det", det_residual(rot)}, {"row", se3_row_residual(g)}};
      break;
    }
    case KernelKind::Product: {
      const auto offsets = m.factor_offsets();
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        const auto& f = m.factors()[i];
        const auto sub = constraint_residual(f, y.segment(offsets[i], f.ambient_dim()));
        for (const auto& [k, v] : sub.parts) r.parts.emplace_back(std::to_string(i) + "." + k, v);
      }
      break;
    }
  }
  for (const auto& [k, v] : r.parts) r.total += v;
  return r;
}

double residual_total(const ManifoldKernel& m, const AmbientVector& y) {
  return constraint_residual(m, y).total;
}

bool on_manifold(const ManifoldKernel& m, const AmbientVector& x, double tol) {
  return x.size() == m.ambient_dim() && x.allFinite() && residual_total(m, x) <= tol;
}

AmbientVector tangent_project(const ManifoldKernel& m, const AmbientVector& x,
                              const AmbientVector& u) {
  check_dim(m, x, "tangent_project");
  check_dim(m, u, "tangent_project");
  if (!on_manifold(m, x)) throw Error(ErrorCode::OffManifoldBase, "tangent_project: base point off manifold");
  switch (m.kind()) {
    case KernelKind::Sphere: return u - u.dot(x) * x;
    case KernelKind::Disk: {
      const double n = x.norm();
      if (!is_boundary(n)) return u;
      const AmbientVector normal = x / n;
      const double outward = u.dot(normal);
      return outward > 0.0 ? AmbientVector(u - outward * normal) : u;
    }
    case KernelKind::SO3: {
      const Mat3 r = lie::to_mat3(x);
      return lie::flatten(Mat3(skew_part(lie::to_mat3(u) * r.transpose()) * r));
    }
    case KernelKind::SE3: {
      const Mat4 g = lie::to_mat4(x);
      const Mat4 v = lie::to_mat4(u);
      const Mat3 r = g.topLeftCorner<3, 3>();
      Mat4 out = Mat4::Zero();
      out.topLeftCorner<3, 3>() = skew_part(v.topLeftCorner<3, 3>() * r.transpose()) * r;
      out.topRightCorner<3, 1>() = v.topRightCorner<3, 1>();
      return lie::flatten(out);
    }
    case KernelKind::Product:
      return blockwise(m, [&](const ManifoldKernel& f, int off) {
        return tangent_project(f, x.segment(off, f.ambient_dim()), u.segment(off, f.ambient_dim()));
      });
  }
  return u;
}

bool in_tangent_cone(const ManifoldKernel& m, const AmbientVector& x, const AmbientVector& v,
                     double tol) {
  if (v.size() != m.ambient_dim()) return false;
  switch (m.kind()) {
    case KernelKind::Sphere: return std::abs(v.dot(x)) <= tol * std::max(1.0, v.norm());
    case KernelKind::Disk: {
      const double n = x.norm();
      return !is_boundary(n) || v.dot(x / n) <= tol;
    }
    case KernelKind::SO3: {
      const Mat3 a = lie::to_mat3(v) * lie::to_mat3(x).transpose();
      return (a + a.transpose()).norm() <= tol * std::max(1.0, a.norm());
    }
    case KernelKind::SE3: {
      const Mat4 xi = lie::to_mat4(v) * se3_inverse(lie::to_mat4(x));
      const Mat3 a = xi.topLeftCorner<3, 3>();
      const double scale = std::max(1.0, xi.norm());
      return (a + a.transpose()).norm() <= tol * scale && xi.row(3).norm() <= tol * scale;
    }
    case KernelKind::Product: {
      const auto offsets = m.factor_offsets();
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        const auto& f = m.factors()[i];
        if (!in_tangent_cone(f, x.segment(offsets[i], f.ambient_dim()),
                             v.segment(offsets[i], f.ambient_dim()), tol))
          return false;
      }
      return true;
    }
  }
  return false;
}

AmbientVector exp_map(const ManifoldKernel& m, const AmbientVector& x, const AmbientVector& v) {
  check_dim(m, x, "exp_map");
  check_dim(m, v, "exp_map");
  if (!m.has_exp()) {
    throw Error(ErrorCode::UnsupportedManifold, "no exponential map for " + m.name());
  }
  if (!on_manifold(m, x)) throw Error(ErrorCode::OffManifoldBase, "exp_map: base point off manifold");
  if (!in_tangent_cone(m, x, v)) throw Error(ErrorCode::OffTangent, "exp_map: velocity not tangent");
  if (m.kind() != KernelKind::Product && (v.array() == 0.0).all()) return x;

  switch (m.kind()) {
    case KernelKind::Sphere: {
      const double n = v.norm();
      return std::cos(n) * x + std::sin(n) * (v / n);
    }
    case KernelKind::SO3: {
      const Mat3 r = lie::to_mat3(x);
      const Mat3 xi = skew_part(lie::to_mat3(v) * r.transpose());
      return lie::flatten(Mat3(lie::exp_so3(lie::vee(xi)) * r));
    }
    case KernelKind::SE3: {
      const Mat4 g = lie::to_mat4(x);
      const Mat4 xi = lie::to_mat4(v) * se3_inverse(g);
      const Vec3 c = lie::vee(skew_part(xi.topLeftCorner<3, 3>()));
      const Vec3 u = xi.topRightCorner<3, 1>();
      return lie::flatten(Mat4(lie::exp_se3(c, u) * g));
    }
    case KernelKind::Product:
      return blockwise(m, [&](const ManifoldKernel& f, int off) {
        return exp_map(f, x.segment(off, f.ambient_dim()), v.segment(off, f.ambient_dim()));
      });
    case KernelKind::Disk: break;
  }
  return x;
}

AmbientVector random_point(const ManifoldKernel& m, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (m.kind()) {
    case KernelKind::Sphere: {
      AmbientVector y(m.ambient_dim());
      do {
        for (auto& c : y) c = normal(rng);
      } while (y.norm() < 1e-12);
      return y / y.norm();
    }
    case KernelKind::Disk: {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      const double r = std::sqrt(unif(rng));
      const double a = 2.0 * std::numbers::pi * unif(rng);
      AmbientVector y(2);
      y << r * std::cos(a), r * std::sin(a);
      return y;
    }
    case KernelKind::SO3: return lie::flatten(random_rotation(rng));
    case KernelKind::SE3: {
      Mat4 g = Mat4::Identity();
      g.topLeftCorner<3, 3>() = random_rotation(rng);
      for (int i = 0; i < 3; ++i) g(i, 3) = normal(rng);
      return lie::flatten(g);
    }
    case KernelKind::Product:
      return blockwise(m, [&](const ManifoldKernel& f, int) { return random_point(f, rng); });
  }
  return {};
}

AmbientVector random_point(const ManifoldKernel& m, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed));
  return random_point(m, rng);
}

double sphere_distance(const AmbientVector& a, const AmbientVector& b) {
  // atan2 form keeps full precision for nearly coincident points.
  const double c = a.dot(b);
  const double s = (b - c * a).norm();
  return std::atan2(s, c);
}

AmbientVector sphere_log(const AmbientVector& p, const AmbientVector& q) {
  const double c = p.dot(q);
  const AmbientVector w = q - c * p;
  const double s = w.norm();
  const double theta = std::atan2(s, c);
  if (s == 0.0) {
    if (c > 0.0) return AmbientVector::Zero(p.size());
    throw Error(ErrorCode::CutLocus, "sphere_log: antipodal points");
  }
  return theta * (w / s);
}

}  // namespace geoproj

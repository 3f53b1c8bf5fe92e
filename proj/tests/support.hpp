#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "geoproj/geometry.hpp"

namespace testsupport {

inline Eigen::VectorXd gaussian(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Eigen::Matrix3d skew3(const Eigen::Vector3d& c) {
  Eigen::Matrix3d k;
  k << 0, -c(2), c(1), c(2), 0, -c(0), -c(1), c(0), 0;
  return k;
}

// Pade-based matrix exponential from Eigen's unsupported module.
inline Eigen::MatrixXd expm_reference(const Eigen::MatrixXd& a) { return a.exp(); }

inline Eigen::Matrix3d mat3_rowmajor(const Eigen::VectorXd& flat) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = flat(3 * i + j);
  return m;
}

inline Eigen::Matrix4d mat4_rowmajor(const Eigen::VectorXd& flat) {
  Eigen::Matrix4d m;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m(i, j) = flat(4 * i + j);
  return m;
}

inline Eigen::VectorXd flat_rowmajor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v(i * m.cols() + j) = m(i, j);
  return v;
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  Eigen::Matrix3d g;
  std::normal_distribution<double> nd;
  for (int i = 0; i < 9; ++i) g(i / 3, i % 3) = nd(rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(g);
  Eigen::Matrix3d q = qr.householderQ();
  Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < 3; ++i)
    if (r(i, i) < 0) q.col(i) *= -1.0;
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("geoproj_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testsupport

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "wsdesc/errors.hpp"

namespace wsdesc {

/// Eigenvalues sorted descending with matching unit eigenvectors as columns.
template <int N>
struct SymmetricEigen {
  Eigen::Matrix<double, N, 1> values;
  Eigen::Matrix<double, N, N> vectors;
};

namespace detail {

template <int N>
void sort_descending(SymmetricEigen<N>& e) {
  std::array<int, N> order;
  for (int i = 0; i < N; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return e.values[a] > e.values[b]; });
  SymmetricEigen<N> sorted;
  for (int i = 0; i < N; ++i) {
    sorted.values[i] = e.values[order[i]];
    sorted.vectors.col(i) = e.vectors.col(order[i]);
  }
  e = sorted;
}

}  // namespace detail

/// Cyclic Jacobi rotations. Slow but accurate for clustered eigenvalues.
template <int N>
SymmetricEigen<N> jacobi_eigen(const Eigen::Matrix<double, N, N>& m) {
  Eigen::Matrix<double, N, N> a = m;
  Eigen::Matrix<double, N, N> v = Eigen::Matrix<double, N, N>::Identity();
  const double scale = std::max(m.cwiseAbs().maxCoeff(), 1e-300);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < N; ++p)
      for (int q = p + 1; q < N; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-18 * scale) break;
    for (int p = 0; p < N; ++p) {
      for (int q = p + 1; q < N; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < N; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < N; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < N; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  SymmetricEigen<N> e;
  e.values = a.diagonal();
  e.vectors = v;
  detail::sort_descending(e);
  return e;
}

/// Closed-form (trigonometric) 3x3 symmetric eigensolver with a Jacobi
/// fallback when eigenvalues are nearly repeated.
inline SymmetricEigen<3> symmetric_eig3(const Eigen::Matrix3d& m) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw InvalidArgument("symmetric_eig3: matrix is not symmetric");
  }
  const Eigen::Matrix3d a = 0.5 * (m + m.transpose());
  const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
  if (p1 == 0.0) {
    SymmetricEigen<3> e;
    e.values = a.diagonal();
    e.vectors = Eigen::Matrix3d::Identity();
    detail::sort_descending(e);
    return e;
  }
  const double q = a.trace() / 3.0;
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  const Eigen::Matrix3d b = (a - q * Eigen::Matrix3d::Identity()) / p;
  const double r = std::clamp(b.determinant() / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double l1 = q + 2.0 * p * std::cos(phi);
  const double l3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double l2 = 3.0 * q - l1 - l3;

  const double spread = std::max({std::abs(l1), std::abs(l3), 1e-300});
  if ((l1 - l2) < 1e-10 * spread || (l2 - l3) < 1e-10 * spread) return jacobi_eigen<3>(a);

  auto null_vector = [&](double lambda) {
    const Eigen::Matrix3d s = a - lambda * Eigen::Matrix3d::Identity();
    const Eigen::Vector3d c0 = s.row(0).cross(s.row(1));
    const Eigen::Vector3d c1 = s.row(0).cross(s.row(2));
    const Eigen::Vector3d c2 = s.row(1).cross(s.row(2));
    const double n0 = c0.squaredNorm(), n1 = c1.squaredNorm(), n2 = c2.squaredNorm();
    if (n0 >= n1 && n0 >= n2) return Eigen::Vector3d(c0 / std::sqrt(n0));
    if (n1 >= n2) return Eigen::Vector3d(c1 / std::sqrt(n1));
    return Eigen::Vector3d(c2 / std::sqrt(n2));
  };
  SymmetricEigen<3> e;
  e.values << l1, l2, l3;
  const Eigen::Vector3d v1 = null_vector(l1);
  Eigen::Vector3d v3 = null_vector(l3);
  v3 = (v3 - v3.dot(v1) * v1).normalized();
  e.vectors.col(0) = v1;
  e.vectors.col(1) = v3.cross(v1);
  e.vectors.col(2) = v3;

  const double residual = (a * e.vectors - e.vectors * e.values.asDiagonal()).cwiseAbs().maxCoeff();
  if (!(residual <= 1e-12 * scale)) return jacobi_eigen<3>(a);
  return e;
}

}  // namespace wsdesc

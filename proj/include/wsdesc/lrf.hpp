#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "wsdesc/eigen_sym.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"

namespace wsdesc {

inline constexpr double kDefaultLrfRadius = 0.3;

/// Local reference frame: columns of `axes` are the x, y, z axes.
struct LrfFrame {
  Mat3 axes = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  double radius = kDefaultLrfRadius;

  bool is_valid(double tol = 1e-8) const {
    return ((axes.transpose() * axes - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol) &&
           std::abs(axes.determinant() - 1.0) <= tol;
  }
};

namespace detail {

/// Flip `axis` toward the majority of offsets; the signed dot sum breaks count ties.
inline Vec3 disambiguate_sign(const Vec3& axis, const std::vector<Vec3>& offsets) {
  std::size_t positive = 0, negative = 0;
  double sum = 0.0;
  for (const auto& d : offsets) {
    const double dot = d.dot(axis);
    if (dot > 0.0) ++positive;
    if (dot < 0.0) ++negative;
    sum += dot;
  }
  if (negative > positive || (negative == positive && sum < 0.0)) return -axis;
  return axis;
}

}  // namespace detail

/// Covariance-based frame of the patch within r_lrf of the keypoint. The
/// covariance is taken about the keypoint itself. z is the least-variance
/// direction, x the largest; both are sign-fixed by a majority vote of
/// keypoint-to-neighbour offsets, and y = z x x.
inline LrfFrame estimate_lrf(const PointCloud& cloud, const SpatialIndex& index, std::size_t center_idx,
                             double r_lrf = kDefaultLrfRadius) {
  if (center_idx >= cloud.size()) throw InvalidArgument("LRF center index out of range");
  const Vec3 center = cloud.points[center_idx];
  const auto patch = index.radius_query(center, r_lrf);
  if (patch.size() < 5) {
    throw DegeneratePatch("patch around point " + std::to_string(center_idx) + " has " +
                          std::to_string(patch.size()) + " points (need 5)");
  }
  std::vector<Vec3> offsets;
  offsets.reserve(patch.size());
  Mat3 cov = Mat3::Zero();
  for (auto j : patch) {
    const Vec3 d = cloud.points[j] - center;
    offsets.push_back(d);
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(patch.size());

  const auto eig = symmetric_eig3(cov);
  const double l1 = eig.values[0], l2 = eig.values[1], l3 = eig.values[2];
  if (!(l1 > 0.0) || (l1 - l2) < 1e-6 * l1 || (l2 - l3) < 1e-6 * l1) {
    throw AmbiguousFrame("covariance eigenvalues too close at point " + std::to_string(center_idx));
  }

  const Vec3 z = detail::disambiguate_sign(eig.vectors.col(2), offsets);
  Vec3 x = detail::disambiguate_sign(eig.vectors.col(0), offsets);
  x = (x - x.dot(z) * z).normalized();
  LrfFrame frame;
  frame.axes.col(0) = x;
  frame.axes.col(1) = z.cross(x);
  frame.axes.col(2) = z;
  frame.center = center;
  frame.radius = r_lrf;
  return frame;
}

}  // namespace wsdesc

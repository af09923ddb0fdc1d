#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include "wsdesc/errors.hpp"

namespace wsdesc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Ordered set of 3D points in scene coordinates (meters).
struct PointCloud {
  std::vector<Vec3> points;
  std::string id;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts, std::string label = {})
      : points(std::move(pts)), id(std::move(label)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }

  /// Throws InvalidArgument unless the cloud is non-empty and finite.
  void validate() const {
    if (points.empty()) throw InvalidArgument("point cloud '" + id + "' is empty");
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!points[i].allFinite()) {
        throw InvalidArgument("point cloud '" + id + "' has a non-finite coordinate at index " +
                              std::to_string(i));
      }
    }
  }

  PointCloud subset(const std::vector<std::size_t>& indices) const {
    PointCloud out;
    out.id = id;
    out.points.reserve(indices.size());
    for (auto i : indices) out.points.push_back(points.at(i));
    return out;
  }
};

/// x -> matrix * x + translation, with no constraint on the matrix.
struct AffineTransform {
  Mat3 matrix = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static AffineTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return matrix * p + translation; }

  Mat4 homogeneous() const {
    Mat4 h = Mat4::Identity();
    h.topLeftCorner<3, 3>() = matrix;
    h.topRightCorner<3, 1>() = translation;
    return h;
  }

  bool all_finite() const { return matrix.allFinite() && translation.allFinite(); }
};

/// Proper rigid motion. Construction does not validate; call validate() or
/// is_valid() where the invariant matters.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  AffineTransform affine() const { return {rotation, translation}; }

  Mat4 homogeneous() const { return affine().homogeneous(); }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const Mat3 gram = rotation.transpose() * rotation;
    if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
  }

  void validate(double tol = 1e-9) const {
    if (!is_valid(tol)) throw InvalidArgument("rotation is not orthonormal with det +1");
  }
};

inline PointCloud apply_transform(const AffineTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.id = cloud.id + "@T";
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  return out;
}

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  return apply_transform(t.affine(), cloud);
}

/// Applies b first, then a.
inline AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  return {a.matrix * b.matrix, a.matrix * b.translation + a.translation};
}

inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline RigidTransform invert_rigid(const RigidTransform& t) {
  t.validate();
  const Mat3 rt = t.rotation.transpose();
  return {rt, -rt * t.translation};
}

/// Rotation from intrinsic X-then-Y-then-Z Euler angles in radians: Rx(a) * Ry(b) * Rz(c).
inline Mat3 euler_xyz_to_matrix(const Vec3& angles) {
  const double ca = std::cos(angles.x()), sa = std::sin(angles.x());
  const double cb = std::cos(angles.y()), sb = std::sin(angles.y());
  const double cc = std::cos(angles.z()), sc = std::sin(angles.z());
  Mat3 rx, ry, rz;
  rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
  ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
  rz << cc, -sc, 0, sc, cc, 0, 0, 0, 1;
  return rx * ry * rz;
}

/// Inverse of euler_xyz_to_matrix; the middle angle lies in [-pi/2, pi/2].
inline Vec3 matrix_to_euler_xyz(const Mat3& r) {
  const double sb = std::clamp(r(0, 2), -1.0, 1.0);
  const double b = std::asin(sb);
  if (std::abs(sb) > 1.0 - 1e-12) {
    // Gimbal lock: only a +/- c is observable, put everything into a.
    const double a = std::atan2(r(2, 1), r(1, 1));
    return {a, b, 0.0};
  }
  return {std::atan2(-r(1, 2), r(2, 2)), b, std::atan2(-r(0, 1), r(0, 0))};
}

/// Geodesic angle of the relative rotation, in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace wsdesc

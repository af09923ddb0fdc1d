#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "wsdesc/autodiff.hpp"
#include "wsdesc/eigen_sym.hpp"
#include "wsdesc/errors.hpp"
#include "wsdesc/pointcloud.hpp"

namespace wsdesc {

inline constexpr double kDefaultDamping = 1e-9;
inline constexpr double kMaxConditionNumber = 1e12;

/// Source/target points of each correspondence and its weight.
struct WeightedCorrMatrices {
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  std::vector<double> weights;

  void validate() const {
    if (source.size() != target.size() || source.size() != weights.size()) {
      throw InvalidArgument("correspondence column counts disagree");
    }
    std::size_t positive = 0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw InvalidArgument("correspondence weights must be non-negative");
      if (w > 0.0) ++positive;
    }
    if (positive < 4) throw InvalidArgument("need at least 4 positively weighted correspondences");
  }
};

struct LossReport {
  double l_o = 0.0;
  double l_c = 0.0;
  double l_pcr = 0.0;
  double lambda_o = 1.0;
  double lambda_c = 1.0;
};

namespace detail {

using Mat4 = Eigen::Matrix4d;
using Mat43 = Eigen::Matrix<double, 4, 3>;

inline Eigen::Vector4d homogeneous(const Vec3& p) { return {p.x(), p.y(), p.z(), 1.0}; }

/// Inverse of the damped normal matrix through its eigen-decomposition, with
/// the rank check applied when undamped.
inline Mat4 normal_inverse(const Mat4& a, double damping) {
  const auto eig = jacobi_eigen<4>(a);
  const double lmax = eig.values[0], lmin = eig.values[3];
  if (!(lmin > 0.0) || (damping == 0.0 && lmax > kMaxConditionNumber * lmin)) {
    throw RankDeficient("weighted normal matrix is rank deficient (condition " +
                        std::to_string(lmin > 0.0 ? lmax / lmin : INFINITY) + ")");
  }
  return eig.vectors * eig.values.cwiseInverse().asDiagonal() * eig.vectors.transpose();
}

struct AffineSolve {
  Mat4 a_inv;
  Mat43 y;  // X^T
};

inline AffineSolve solve_affine(std::span<const Vec3> src, std::span<const Vec3> dst, std::span<const double> w,
                                double damping) {
  if (!(damping >= 0.0)) throw InvalidArgument("damping must be non-negative");
  Mat4 a = damping * Mat4::Identity();
  Mat43 b = Mat43::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector4d p = homogeneous(src[i]);
    const double w2 = w[i] * w[i];
    a += w2 * p * p.transpose();
    b += w2 * p * dst[i].transpose();
  }
  AffineSolve s;
  s.a_inv = normal_inverse(a, damping);
  s.y = s.a_inv * b;
  return s;
}

inline AffineTransform affine_from_rows(const Eigen::Matrix<double, 3, 4>& x) {
  AffineTransform t;
  t.matrix = x.leftCols<3>();
  t.translation = x.col(3);
  return t;
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Weighted least-squares affine map minimizing sum w_i^2 |X p_i - q_i|^2
/// through damped 4x4 normal equations.
inline AffineTransform fit_affine_weighted(const WeightedCorrMatrices& m, double damping = kDefaultDamping) {
  m.validate();
  const auto s = detail::solve_affine(m.source, m.target, m.weights, damping);
  return detail::affine_from_rows(s.y.transpose());
}

/// Differentiable fit. weights [C]; target [C, 3] (a tensor so soft positions
/// can carry gradient). Output [3, 4] = [R | t], row-major.
template <typename T>
ad::Tensor<T> fit_affine_weighted(ad::Tape<T>& tape, const std::vector<Vec3>& source, const ad::Tensor<T>& target,
                                  const ad::Tensor<T>& weights, double damping = kDefaultDamping) {
  const std::size_t c = source.size();
  if (weights.shape() != ad::Shape{c} || target.shape() != ad::Shape{c, 3}) {
    throw InvalidArgument("fit_affine_weighted: expected weights [C] and target [C, 3]");
  }
  std::vector<Vec3> dst(c);
  std::vector<double> w(c);
  std::size_t positive = 0;
  for (std::size_t i = 0; i < c; ++i) {
    dst[i] = Vec3(target[3 * i], target[3 * i + 1], target[3 * i + 2]);
    w[i] = weights[i];
    if (!(w[i] >= 0.0)) throw InvalidArgument("correspondence weights must be non-negative");
    if (w[i] > 0.0) ++positive;
  }
  if (positive < 4) throw InvalidArgument("need at least 4 positively weighted correspondences");
  const auto s = detail::solve_affine(source, dst, w, damping);
  std::vector<T> out(12);
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 4; ++col) out[static_cast<std::size_t>(r * 4 + col)] = static_cast<T>(s.y(col, r));
  const bool rg = ad::detail::any_requires_grad(target, weights);
  auto result = ad::Tensor<T>({3, 4}, std::move(out), rg);
  if (!rg) return result;
  tape.record([tq = target.ptr(), tw = weights.ptr(), res = result.ptr(), source, dst, w, s] {
    if (res->grad.empty()) return;
    detail::Mat43 gy;  // dL/dX^T
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 4; ++col) gy(col, r) = res->grad[static_cast<std::size_t>(r * 4 + col)];
    const detail::Mat43 h = s.a_inv * gy;
    const Eigen::Matrix<double, 3, 4> x = s.y.transpose();
    if (tw->requires_grad) tw->ensure_grad();
    if (tq->requires_grad) tq->ensure_grad();
    for (std::size_t i = 0; i < source.size(); ++i) {
      const Eigen::Vector4d p = detail::homogeneous(source[i]);
      const Vec3 hp = h.transpose() * p;
      if (tw->requires_grad) tw->grad[i] += static_cast<T>(2.0 * w[i] * hp.dot(dst[i] - x * p));
      if (tq->requires_grad) {
        for (int k = 0; k < 3; ++k) tq->grad[3 * i + static_cast<std::size_t>(k)] += static_cast<T>(w[i] * w[i] * hp[k]);
      }
    }
  });
  return result;
}

/// (|R^T R - I|_1 + |R'^T R' - I|_1) / 2 with entrywise absolute sums.
inline double orthogonality_loss(const AffineTransform& fwd, const AffineTransform& bwd) {
  const Mat3 i = Mat3::Identity();
  return 0.5 * ((fwd.matrix.transpose() * fwd.matrix - i).cwiseAbs().sum() +
                (bwd.matrix.transpose() * bwd.matrix - i).cwiseAbs().sum());
}

/// |R R' - I|_1 + |R t' + t|_1.
inline double cycle_loss(const AffineTransform& fwd, const AffineTransform& bwd) {
  return (fwd.matrix * bwd.matrix - Mat3::Identity()).cwiseAbs().sum() +
         (fwd.matrix * bwd.translation + fwd.translation).cwiseAbs().sum();
}

inline LossReport registration_loss(const AffineTransform& fwd, const AffineTransform& bwd, double lambda_o = 1.0,
                                    double lambda_c = 1.0) {
  if (!(lambda_o >= 0.0) || !(lambda_c >= 0.0)) throw InvalidArgument("loss weights must be non-negative");
  LossReport r;
  r.lambda_o = lambda_o;
  r.lambda_c = lambda_c;
  r.l_o = orthogonality_loss(fwd, bwd);
  r.l_c = cycle_loss(fwd, bwd);
  r.l_pcr = lambda_o * r.l_o + lambda_c * r.l_c;
  return r;
}

namespace detail {

template <typename T>
Eigen::Matrix<double, 3, 4> rows_of(const ad::Node<T>& n) {
  Eigen::Matrix<double, 3, 4> x;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) x(r, c) = (*n.storage)[static_cast<std::size_t>(r * 4 + c)];
  return x;
}

template <typename T>
void add_rows_grad(ad::Node<T>& n, const Eigen::Matrix<double, 3, 4>& g) {
  if (!n.requires_grad) return;
  n.ensure_grad();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) n.grad[static_cast<std::size_t>(r * 4 + c)] += static_cast<T>(g(r, c));
}

}  // namespace detail

/// Orthogonality loss on [3, 4] transform tensors.
template <typename T>
ad::Tensor<T> orthogonality_loss(ad::Tape<T>& tape, const ad::Tensor<T>& fwd, const ad::Tensor<T>& bwd) {
  if (fwd.shape() != ad::Shape{3, 4} || bwd.shape() != ad::Shape{3, 4}) {
    throw InvalidArgument("transform tensors must be [3, 4]");
  }
  const auto xf = detail::rows_of(fwd.node()), xb = detail::rows_of(bwd.node());
  const AffineTransform f = detail::affine_from_rows(xf), b = detail::affine_from_rows(xb);
  const bool rg = ad::detail::any_requires_grad(fwd, bwd);
  auto result = ad::Tensor<T>({1}, {static_cast<T>(orthogonality_loss(f, b))}, rg);
  if (!rg) return result;
  tape.record([pf = fwd.ptr(), pb = bwd.ptr(), res = result.ptr(), f, b] {
    if (res->grad.empty()) return;
    const double g = res->grad[0];
    auto grad_of = [&](const Mat3& r) {
      const Mat3 s = (r.transpose() * r - Mat3::Identity()).unaryExpr(&detail::sign0);
      Eigen::Matrix<double, 3, 4> out = Eigen::Matrix<double, 3, 4>::Zero();
      out.leftCols<3>() = 0.5 * g * r * (s + s.transpose());
      return out;
    };
    detail::add_rows_grad(*pf, grad_of(f.matrix));
    detail::add_rows_grad(*pb, grad_of(b.matrix));
  });
  return result;
}

/// Cycle-consistency loss on [3, 4] transform tensors.
template <typename T>
ad::Tensor<T> cycle_loss(ad::Tape<T>& tape, const ad::Tensor<T>& fwd, const ad::Tensor<T>& bwd) {
  if (fwd.shape() != ad::Shape{3, 4} || bwd.shape() != ad::Shape{3, 4}) {
    throw InvalidArgument("transform tensors must be [3, 4]");
  }
  const AffineTransform f = detail::affine_from_rows(detail::rows_of(fwd.node()));
  const AffineTransform b = detail::affine_from_rows(detail::rows_of(bwd.node()));
  const bool rg = ad::detail::any_requires_grad(fwd, bwd);
  auto result = ad::Tensor<T>({1}, {static_cast<T>(cycle_loss(f, b))}, rg);
  if (!rg) return result;
  tape.record([pf = fwd.ptr(), pb = bwd.ptr(), res = result.ptr(), f, b] {
    if (res->grad.empty()) return;
    const double g = res->grad[0];
    const Mat3 s1 = (f.matrix * b.matrix - Mat3::Identity()).unaryExpr(&detail::sign0);
    const Vec3 s2 = (f.matrix * b.translation + f.translation).unaryExpr(&detail::sign0);
    Eigen::Matrix<double, 3, 4> gf, gb;
    gf.leftCols<3>() = g * (s1 * b.matrix.transpose() + s2 * b.translation.transpose());
    gf.col(3) = g * s2;
    gb.leftCols<3>() = g * f.matrix.transpose() * s1;
    gb.col(3) = g * f.matrix.transpose() * s2;
    detail::add_rows_grad(*pf, gf);
    detail::add_rows_grad(*pb, gb);
  });
  return result;
}

template <typename T>
struct TapeLoss {
  ad::Tensor<T> l_o;
  ad::Tensor<T> l_c;
  ad::Tensor<T> l_pcr;
};

/// lambda_o * L_o + lambda_c * L_c on the tape. A zero lambda drops its term
/// from the graph.
template <typename T>
TapeLoss<T> registration_loss(ad::Tape<T>& tape, const ad::Tensor<T>& fwd, const ad::Tensor<T>& bwd,
                              double lambda_o = 1.0, double lambda_c = 1.0) {
  if (!(lambda_o >= 0.0) || !(lambda_c >= 0.0)) throw InvalidArgument("loss weights must be non-negative");
  TapeLoss<T> out;
  out.l_o = orthogonality_loss(tape, fwd, bwd);
  out.l_c = cycle_loss(tape, fwd, bwd);
  out.l_pcr = ad::axpby(tape, static_cast<T>(lambda_o), out.l_o, static_cast<T>(lambda_c), out.l_c);
  return out;
}

/// Weighted rigid fit (Horn's quaternion method): the rotation is the top
/// eigenvector of the 4x4 symmetric matrix built from the weighted
/// cross-covariance.
inline RigidTransform kabsch_rigid(std::span<const Vec3> src, std::span<const Vec3> dst,
                                   std::span<const double> weights) {
  if (src.size() != dst.size() || src.size() != weights.size()) throw InvalidArgument("kabsch: size mismatch");
  double wsum = 0.0;
  std::size_t positive = 0;
  Vec3 cp = Vec3::Zero(), cq = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw InvalidArgument("kabsch: weights must be non-negative");
    if (weights[i] > 0.0) ++positive;
    wsum += weights[i];
    cp += weights[i] * src[i];
    cq += weights[i] * dst[i];
  }
  if (positive < 3) throw InvalidArgument("kabsch: need at least 3 positively weighted points");
  cp /= wsum;
  cq /= wsum;
  Mat3 s = Mat3::Zero(), cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - cp, b = dst[i] - cq;
    s += weights[i] * a * b.transpose();
    cov += weights[i] * a * a.transpose();
  }
  const auto spread = symmetric_eig3(0.5 * (cov + cov.transpose()));
  if (!(spread.values[1] > 1e-12 * spread.values[0])) throw RankDeficient("kabsch: points are collinear");

  Eigen::Matrix4d n;
  const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2), syx = s(1, 0), syy = s(1, 1), syz = s(1, 2),
               szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
  n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
       syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
       szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
       sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  const auto eig = jacobi_eigen<4>(n);
  const Eigen::Vector4d q = eig.vectors.col(0).normalized();
  const Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  RigidTransform t;
  t.rotation = quat.toRotationMatrix();
  t.translation = cq - t.rotation * cp;
  return t;
}

inline RigidTransform kabsch_rigid(std::span<const Vec3> src, std::span<const Vec3> dst) {
  const std::vector<double> w(src.size(), 1.0);
  return kabsch_rigid(src, dst, w);
}

}  // namespace wsdesc

#pragma once

#include <cmath>
#include <limits>
#include <ostream>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wsdesc/autodiff.hpp"
#include "wsdesc/errors.hpp"
#include "wsdesc/pointcloud.hpp"

namespace wsdesc {

inline constexpr double kDefaultSigmaD = 0.1;
inline constexpr int kDefaultPowerIters = 10;

using DescriptorBatch = std::vector<std::vector<float>>;

/// Putative correspondences between keypoint sets and their weights.
struct CorrespondenceSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (source keypoint, target keypoint)
  std::vector<double> w_f;
  std::vector<double> w_sm;
  std::vector<double> w;

  std::size_t size() const { return pairs.size(); }
};

namespace detail {

inline double descriptor_distance(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw InvalidArgument("descriptor dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline Eigen::MatrixXd distance_matrix(const DescriptorBatch& p, const DescriptorBatch& q) {
  if (p.empty() || q.empty()) throw InvalidArgument("descriptor batches must be non-empty");
  Eigen::MatrixXd d(static_cast<Eigen::Index>(p.size()), static_cast<Eigen::Index>(q.size()));
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = descriptor_distance(p[i], q[j]);
  return d;
}

/// Column of the row minimum; the first (lowest) index wins ties.
inline std::size_t row_argmin(const Eigen::MatrixXd& d, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < d.cols(); ++j)
    if (d(row, j) < d(row, best)) best = j;
  return static_cast<std::size_t>(best);
}

}  // namespace detail

/// Nearest target descriptor for every source descriptor, with w_f the
/// softmax(-distance) weight of the selected target. w_sm and w start at
/// 1 and w_f respectively.
inline CorrespondenceSet match_descriptors(const DescriptorBatch& p, const DescriptorBatch& q) {
  const auto d = detail::distance_matrix(p, q);
  CorrespondenceSet c;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const std::size_t j = detail::row_argmin(d, i);
    const double dmin = d(i, static_cast<Eigen::Index>(j));
    double z = 0.0;
    for (Eigen::Index l = 0; l < d.cols(); ++l) z += std::exp(-(d(i, l) - dmin));
    c.pairs.emplace_back(static_cast<std::size_t>(i), j);
    c.w_f.push_back(1.0 / z);
  }
  c.w_sm.assign(c.size(), 1.0);
  c.w = c.w_f;
  return c;
}

/// Differentiable matching over descriptor rows: hard argmin selects the
/// target, w_f carries the gradient. `affinity` is the full softmax table.
template <typename T>
struct TapeMatch {
  std::vector<std::size_t> targets;
  ad::Tensor<T> affinity;  // [a, m]
  ad::Tensor<T> w_f;       // [a]
};

template <typename T>
TapeMatch<T> match_descriptors(ad::Tape<T>& tape, const ad::Tensor<T>& fp, const ad::Tensor<T>& fq) {
  if (fp.rank() != 2 || fq.rank() != 2 || fp.dim(1) != fq.dim(1) || fp.dim(0) == 0 || fq.dim(0) == 0) {
    throw InvalidArgument("match_descriptors expects non-empty [a, n] and [m, n] batches");
  }
  const std::size_t a = fp.dim(0), m = fq.dim(0), n = fp.dim(1);
  TapeMatch<T> out;
  Eigen::MatrixXd d(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double diff = static_cast<double>(fp[i * n + k]) - fq[j * n + k];
        s += diff * diff;
      }
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::sqrt(s);
    }
  for (std::size_t i = 0; i < a; ++i) out.targets.push_back(detail::row_argmin(d, static_cast<Eigen::Index>(i)));
  out.affinity = ad::softmax_neg_distance(tape, fp, fq);
  out.w_f = ad::gather_rows(tape, out.affinity, out.targets);
  return out;
}

/// M(c_i, c_j) = [1 - d_ij^2 / sigma_d^2]_+ with d_ij the change in pairwise
/// length between the source and target ends; zero diagonal.
inline Eigen::MatrixXd compatibility_matrix(const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                            const std::vector<Vec3>& kp_p, const std::vector<Vec3>& kp_q,
                                            double sigma_d = kDefaultSigmaD) {
  if (pairs.size() < 2) throw InvalidArgument("compatibility matrix needs at least 2 correspondences");
  if (!(sigma_d > 0.0)) throw InvalidArgument("sigma_d must be positive");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& [pi, qi] = pairs[static_cast<std::size_t>(i)];
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto& [pj, qj] = pairs[static_cast<std::size_t>(j)];
      const double d = (kp_p.at(pi) - kp_p.at(pj)).norm() - (kp_q.at(qi) - kp_q.at(qj)).norm();
      const double v = std::max(0.0, 1.0 - d * d / (sigma_d * sigma_d));
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

/// Exactly `iters` power-iteration steps from the all-ones vector.
inline Eigen::VectorXd spectral_weights(const Eigen::MatrixXd& m, int iters = kDefaultPowerIters) {
  if (iters < 1) throw InvalidArgument("power iteration needs at least one step");
  if (m.rows() != m.cols() || m.rows() == 0) throw InvalidArgument("compatibility matrix must be square");
  Eigen::VectorXd w = Eigen::VectorXd::Ones(m.rows());
  for (int k = 0; k < iters; ++k) {
    const Eigen::VectorXd mw = m * w;
    const double norm = mw.norm();
    if (!(norm > 0.0)) throw DegenerateSpectrum("compatibility matrix annihilates the weight vector");
    w = mw / norm;
  }
  return w;
}

/// Fills w_sm from the spectral weights of the correspondence geometry.
inline void apply_spectral_weights(CorrespondenceSet& c, const std::vector<Vec3>& kp_p, const std::vector<Vec3>& kp_q,
                                   double sigma_d = kDefaultSigmaD, int iters = kDefaultPowerIters) {
  const auto w = spectral_weights(compatibility_matrix(c.pairs, kp_p, kp_q, sigma_d), iters);
  c.w_sm.assign(w.data(), w.data() + w.size());
}

/// w = w_f * w_sm, elementwise.
inline CorrespondenceSet confidence(CorrespondenceSet c) {
  if (c.w_f.size() != c.size() || c.w_sm.size() != c.size()) throw InvalidArgument("weights not populated");
  c.w.resize(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) c.w[i] = c.w_f[i] * c.w_sm[i];
  return c;
}

/// Pairs (i, j) that are each other's nearest neighbour in descriptor space.
inline std::vector<std::pair<std::size_t, std::size_t>> mutual_nearest(const DescriptorBatch& p,
                                                                       const DescriptorBatch& q) {
  const auto d = detail::distance_matrix(p, q);
  std::vector<std::size_t> best_p(q.size());
  const Eigen::MatrixXd dt = d.transpose();
  for (std::size_t j = 0; j < q.size(); ++j) best_p[j] = detail::row_argmin(dt, static_cast<Eigen::Index>(j));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::size_t j = detail::row_argmin(d, static_cast<Eigen::Index>(i));
    if (best_p[j] == i) out.emplace_back(i, j);
  }
  return out;
}

/// One `i j w_f w_sm w` line per correspondence.
inline void dump_correspondences(const CorrespondenceSet& c, std::ostream& out) {
  const auto old = out.precision(17);
  for (std::size_t k = 0; k < c.size(); ++k) {
    out << c.pairs[k].first << ' ' << c.pairs[k].second << ' ' << c.w_f[k] << ' ' << c.w_sm[k] << ' ' << c.w[k]
        << '\n';
  }
  out.precision(old);
}

}  // namespace wsdesc

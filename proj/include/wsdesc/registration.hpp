#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsdesc/alignment.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/io.hpp"
#include "wsdesc/matching.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"

namespace wsdesc {

struct RansacConfig {
  std::size_t max_iters = 50000;
  double inlier_tau = 0.1;
  std::size_t min_sample = 3;
  double confidence = 0.999;
  std::uint64_t seed = 0;
  bool refine = true;

  void validate() const {
    if (max_iters < 1) throw InvalidArgument("max_iters must be >= 1");
    if (!(inlier_tau > 0.0)) throw InvalidArgument("inlier_tau must be positive");
    if (min_sample != 3) throw InvalidArgument("min_sample must be 3");
    if (!(confidence > 0.0 && confidence < 1.0)) throw InvalidArgument("confidence must lie in (0, 1)");
  }
};

struct RegistrationResult {
  RigidTransform transform;
  std::vector<std::size_t> inlier_indices;
  std::size_t num_iters_run = 0;
  double inlier_rmse = 0.0;
};

namespace detail {

struct Hypothesis {
  RigidTransform transform;
  std::vector<std::size_t> inliers;
  double rmse = std::numeric_limits<double>::infinity();
};

inline Hypothesis score_hypothesis(const RigidTransform& t, const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                   double tau) {
  Hypothesis h;
  h.transform = t;
  double ss = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double d = (t.apply(src[i]) - dst[i]).norm();
    if (d < tau) {
      h.inliers.push_back(i);
      ss += d * d;
    }
  }
  h.rmse = h.inliers.empty() ? std::numeric_limits<double>::infinity()
                             : std::sqrt(ss / static_cast<double>(h.inliers.size()));
  return h;
}

inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.inliers.size() != b.inliers.size()) return a.inliers.size() > b.inliers.size();
  return a.rmse < b.rmse;
}

inline RigidTransform fit_subset(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                 const std::vector<std::size_t>& idx) {
  std::vector<Vec3> a, b;
  for (auto i : idx) {
    a.push_back(src[i]);
    b.push_back(dst[i]);
  }
  return kabsch_rigid(a, b);
}

}  // namespace detail

/// RANSAC over positioned correspondences src[i] -> dst[i] with 3-point rigid
/// hypotheses. Stops early once 1 - (1 - ir^3)^k reaches the confidence.
inline RegistrationResult ransac_register(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                          const RansacConfig& cfg = {}) {
  cfg.validate();
  if (src.size() != dst.size()) throw InvalidArgument("ransac: correspondence size mismatch");
  if (src.size() < 3) throw InvalidArgument("ransac: need at least 3 correspondences");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, src.size() - 1);
  detail::Hypothesis best;
  std::size_t needed = cfg.max_iters;
  std::size_t it = 0;
  while (it < std::min(needed, cfg.max_iters)) {
    ++it;
    std::size_t s[3];
    s[0] = pick(rng);
    do s[1] = pick(rng); while (s[1] == s[0]);
    do s[2] = pick(rng); while (s[2] == s[0] || s[2] == s[1]);
    RigidTransform t;
    try {
      t = detail::fit_subset(src, dst, {s[0], s[1], s[2]});
    } catch (const Error&) {
      continue;  // collinear sample
    }
    auto h = detail::score_hypothesis(t, src, dst, cfg.inlier_tau);
    if (!detail::better(h, best)) continue;
    best = std::move(h);
    const double ir = static_cast<double>(best.inliers.size()) / static_cast<double>(src.size());
    const double p_good = ir * ir * ir;
    if (p_good >= 1.0) {
      needed = it;
    } else if (p_good > 0.0) {
      const double k = std::log(1.0 - cfg.confidence) / std::log(1.0 - p_good);
      needed = static_cast<std::size_t>(std::min(static_cast<double>(cfg.max_iters), std::ceil(k)));
    }
  }
  if (best.inliers.size() < 3) throw RegistrationFailed("no hypothesis reached 3 inliers");
  if (cfg.refine) {
    for (int round = 0; round < 2; ++round) {
      RigidTransform t;
      try {
        t = detail::fit_subset(src, dst, best.inliers);
      } catch (const Error&) {
        break;
      }
      auto h = detail::score_hypothesis(t, src, dst, cfg.inlier_tau);
      if (h.inliers.size() < best.inliers.size()) break;
      best = std::move(h);
    }
  }
  RegistrationResult r;
  r.transform = best.transform;
  r.inlier_indices = best.inliers;
  r.num_iters_run = it;
  r.inlier_rmse = best.rmse;
  return r;
}

struct PairRegistration {
  RegistrationResult result;
  std::vector<std::size_t> source_keypoints;  // kept keypoints, cloud indices
  std::vector<std::size_t> target_keypoints;
  std::vector<std::pair<std::size_t, std::size_t>> correspondences;  // into the kept keypoint lists
  DescriptorBatch source_descriptors;
  DescriptorBatch target_descriptors;
  std::size_t skipped_keypoints = 0;
};

/// FPS keypoints on both sides, descriptors, mutual nearest matches, RANSAC.
template <typename T>
PairRegistration register_pair(const PointCloud& p, const PointCloud& q, const NetworkParamsT<T>& params,
                               std::size_t kp_count, const RansacConfig& cfg, std::size_t threads = 1) {
  if (p.size() < kp_count || q.size() < kp_count) throw InvalidArgument("clouds smaller than keypoint count");
  const SpatialIndex ip(p), iq(q);
  const auto kp_p = farthest_point_sample(p, kp_count, cfg.seed);
  const auto kp_q = farthest_point_sample(q, kp_count, cfg.seed);
  const auto dp = extract_descriptors(p, ip, kp_p, params, threads);
  const auto dq = extract_descriptors(q, iq, kp_q, params, threads);
  PairRegistration out;
  out.skipped_keypoints = dp.skipped + dq.skipped;
  out.source_keypoints = dp.keypoints;
  out.target_keypoints = dq.keypoints;
  if (dp.descriptors.empty() || dq.descriptors.empty()) throw RegistrationFailed("no usable keypoints");
  out.source_descriptors = dp.descriptors;
  out.target_descriptors = dq.descriptors;
  out.correspondences = mutual_nearest(dp.descriptors, dq.descriptors);
  if (out.correspondences.size() < 3) throw RegistrationFailed("fewer than 3 mutual correspondences");
  std::vector<Vec3> src, dst;
  for (const auto& [i, j] : out.correspondences) {
    src.push_back(p.points[dp.keypoints[i]]);
    dst.push_back(q.points[dq.keypoints[j]]);
  }
  out.result = ransac_register(src, dst, cfg);
  return out;
}

inline std::string format_registration(const RegistrationResult& r) {
  std::ostringstream os;
  os << io::format_transform(r.transform.rotation, r.transform.translation);
  os.precision(17);
  os << "inliers " << r.inlier_indices.size() << "\n"
     << "inlier_rmse " << r.inlier_rmse << "\n"
     << "iterations " << r.num_iters_run << "\n";
  return os.str();
}

inline nlohmann::json registration_json(const RegistrationResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) {
    rows.push_back({r.transform.rotation(i, 0), r.transform.rotation(i, 1), r.transform.rotation(i, 2),
                    r.transform.translation[i]});
  }
  return {{"transform", rows},
          {"inliers", r.inlier_indices.size()},
          {"inlier_rmse", r.inlier_rmse},
          {"iterations", r.num_iters_run}};
}

}  // namespace wsdesc

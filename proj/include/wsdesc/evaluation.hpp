#pragma once

#include <string>
#include <vector>

#include "wsdesc/datagen.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/metrics.hpp"
#include "wsdesc/registration.hpp"

namespace wsdesc {

struct EvaluationConfig {
  std::size_t kp_count = 128;
  double tau1 = kDefaultTau1;
  double tau2 = kDefaultTau2;
  double recall_threshold = kDefaultRecallThreshold;
  RansacConfig ransac;
  std::size_t threads = 1;
};

/// Registers one pair and scores it. Ground-truth correspondences are
/// (p, gt(p)) for every source point, so the RMSE does not depend on which
/// target points survived cropping. A failed registration scores identity.
template <typename T>
PairEvaluation evaluate_pair(const PairSample& pair, const std::string& id, const NetworkParamsT<T>& params,
                             const EvaluationConfig& cfg) {
  PairEvaluation row;
  row.pair_id = id;
  row.gt = pair.gt;
  row.est = RigidTransform{};
  const std::size_t k = std::min({cfg.kp_count, pair.source.size(), pair.target.size()});
  try {
    const auto reg = register_pair(pair.source, pair.target, params, k, cfg.ransac, cfg.threads);
    std::vector<Vec3> src, dst;
    for (const auto& [i, j] : reg.correspondences) {
      src.push_back(pair.source.points[reg.source_keypoints[i]]);
      dst.push_back(pair.target.points[reg.target_keypoints[j]]);
    }
    row.ir = inlier_ratio(src, dst, pair.gt, cfg.tau1).value;
    row.est = reg.result.transform;
  } catch (const RegistrationFailed&) {
    // keeps IR 0 and the identity estimate
  }
  std::vector<Vec3> gt_dst;
  gt_dst.reserve(pair.source.size());
  for (const auto& p : pair.source.points) gt_dst.push_back(pair.gt.apply(p));
  row.corr_rmse = correspondence_rmse(pair.source.points, gt_dst, row.est);
  row.registration_ok = row.corr_rmse < cfg.recall_threshold;
  return row;
}

}  // namespace wsdesc

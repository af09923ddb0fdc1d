#pragma once

#include <cmath>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsdesc/errors.hpp"
#include "wsdesc/pointcloud.hpp"

namespace wsdesc {

inline constexpr double kDefaultTau1 = 0.1;
inline constexpr double kDefaultTau2 = 0.05;
inline constexpr double kDefaultRecallThreshold = 0.2;

struct RatioResult {
  double value = 0.0;
  bool empty = false;  // no pairs were given; value is 0 by convention
};

/// Fraction of pairs with |gt(p) - q| < tau1.
inline RatioResult inlier_ratio(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, const RigidTransform& gt,
                                double tau1 = kDefaultTau1) {
  if (!(tau1 > 0.0)) throw InvalidArgument("tau1 must be positive");
  if (src.size() != dst.size()) throw InvalidArgument("inlier_ratio: size mismatch");
  if (src.empty()) return {0.0, true};
  std::size_t hits = 0;
  for (std::size_t i = 0; i < src.size(); ++i)
    if ((gt.apply(src[i]) - dst[i]).norm() < tau1) ++hits;
  return {static_cast<double>(hits) / static_cast<double>(src.size()), false};
}

/// Fraction of pairs whose inlier ratio is strictly above tau2.
inline double feature_match_recall(const std::vector<double>& irs, double tau2 = kDefaultTau2) {
  if (irs.empty()) throw InvalidArgument("feature_match_recall of an empty list");
  std::size_t hits = 0;
  for (double ir : irs)
    if (ir > tau2) ++hits;
  return static_cast<double>(hits) / static_cast<double>(irs.size());
}

/// sqrt(mean |est(p) - q|^2) over ground-truth pairs.
inline double correspondence_rmse(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                  const RigidTransform& est) {
  if (src.size() != dst.size()) throw InvalidArgument("correspondence_rmse: size mismatch");
  if (src.empty()) throw InvalidArgument("correspondence_rmse of an empty pair list");
  double ss = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) ss += (est.apply(src[i]) - dst[i]).squaredNorm();
  return std::sqrt(ss / static_cast<double>(src.size()));
}

/// Fraction of pairs with RMSE strictly below the threshold.
inline double registration_recall(const std::vector<double>& rmses, double threshold = kDefaultRecallThreshold) {
  if (rmses.empty()) throw InvalidArgument("registration_recall of an empty list");
  if (!(threshold > 0.0)) throw InvalidArgument("threshold must be positive");
  std::size_t hits = 0;
  for (double r : rmses)
    if (r < threshold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(rmses.size());
}

struct PoseErrors {
  double rmse_rot_deg = 0.0;
  double r2_rot = 1.0;
  double rmse_trans = 0.0;
  double r2_trans = 1.0;
};

namespace detail {

/// Mean over columns of 1 - SS_res / SS_tot. A constant ground-truth column
/// scores 1 when predicted exactly and 0 otherwise.
inline double r2_score(const std::vector<Vec3>& truth, const std::vector<Vec3>& pred) {
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (const auto& t : truth) mean += t[c];
    mean /= static_cast<double>(truth.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      ss_res += (truth[i][c] - pred[i][c]) * (truth[i][c] - pred[i][c]);
      ss_tot += (truth[i][c] - mean) * (truth[i][c] - mean);
    }
    if (ss_tot > 0.0) {
      total += 1.0 - ss_res / ss_tot;
    } else {
      total += ss_res == 0.0 ? 1.0 : 0.0;
    }
  }
  return total / 3.0;
}

inline double rmse_components(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]).squaredNorm();
  return std::sqrt(ss / (3.0 * static_cast<double>(a.size())));
}

}  // namespace detail

/// Rotation errors on intrinsic X-Y-Z Euler angles in degrees, translation
/// errors on vector components.
inline PoseErrors pose_errors(const std::vector<RigidTransform>& est, const std::vector<RigidTransform>& gt) {
  if (est.size() != gt.size()) throw InvalidArgument("pose_errors: list length mismatch");
  if (est.empty()) throw InvalidArgument("pose_errors of empty lists");
  std::vector<Vec3> ea, ga, et, gtr;
  const double deg = 180.0 / std::numbers::pi;
  for (std::size_t i = 0; i < est.size(); ++i) {
    ea.push_back(matrix_to_euler_xyz(est[i].rotation) * deg);
    ga.push_back(matrix_to_euler_xyz(gt[i].rotation) * deg);
    et.push_back(est[i].translation);
    gtr.push_back(gt[i].translation);
  }
  PoseErrors e;
  e.rmse_rot_deg = detail::rmse_components(ea, ga);
  e.r2_rot = detail::r2_score(ga, ea);
  e.rmse_trans = detail::rmse_components(et, gtr);
  e.r2_trans = detail::r2_score(gtr, et);
  return e;
}

struct PairEvaluation {
  std::string pair_id;
  double ir = 0.0;
  double corr_rmse = 0.0;
  bool registration_ok = false;
  RigidTransform est;
  RigidTransform gt;
};

struct EvaluationSummary {
  std::size_t pairs = 0;
  double mean_ir = 0.0;
  double fmr = 0.0;
  double rr = 0.0;
  PoseErrors pose;
};

inline EvaluationSummary summarize(const std::vector<PairEvaluation>& rows, double tau2 = kDefaultTau2,
                                   double threshold = kDefaultRecallThreshold) {
  if (rows.empty()) throw InvalidArgument("no pairs to summarize");
  std::vector<double> irs, rmses;
  std::vector<RigidTransform> est, gt;
  EvaluationSummary s;
  s.pairs = rows.size();
  for (const auto& r : rows) {
    irs.push_back(r.ir);
    rmses.push_back(r.corr_rmse);
    est.push_back(r.est);
    gt.push_back(r.gt);
    s.mean_ir += r.ir;
  }
  s.mean_ir /= static_cast<double>(rows.size());
  s.fmr = feature_match_recall(irs, tau2);
  s.rr = registration_recall(rmses, threshold);
  s.pose = pose_errors(est, gt);
  return s;
}

/// One row per pair followed by `# key,value` summary lines.
inline void write_evaluation_csv(const std::vector<PairEvaluation>& rows, const EvaluationSummary& s,
                                 std::ostream& out) {
  const auto old = out.precision(17);
  out << "pair_id,ir,corr_rmse,registration_ok\n";
  for (const auto& r : rows) out << r.pair_id << ',' << r.ir << ',' << r.corr_rmse << ',' << (r.registration_ok ? 1 : 0) << '\n';
  out << "# pairs," << s.pairs << '\n'
      << "# mean_ir," << s.mean_ir << '\n'
      << "# fmr," << s.fmr << '\n'
      << "# rr," << s.rr << '\n'
      << "# rmse_rot_deg," << s.pose.rmse_rot_deg << '\n'
      << "# r2_rot," << s.pose.r2_rot << '\n'
      << "# rmse_trans," << s.pose.rmse_trans << '\n'
      << "# r2_trans," << s.pose.r2_trans << '\n';
  out.precision(old);
}

inline nlohmann::json evaluation_json(const std::vector<PairEvaluation>& rows, const EvaluationSummary& s) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& r : rows) {
    pairs.push_back({{"pair_id", r.pair_id}, {"ir", r.ir}, {"corr_rmse", r.corr_rmse},
                     {"registration_ok", r.registration_ok}});
  }
  return {{"pairs", pairs},
          {"summary",
           {{"pairs", s.pairs},
            {"mean_ir", s.mean_ir},
            {"fmr", s.fmr},
            {"rr", s.rr},
            {"rmse_rot_deg", s.pose.rmse_rot_deg},
            {"r2_rot", s.pose.r2_rot},
            {"rmse_trans", s.pose.rmse_trans},
            {"r2_trans", s.pose.r2_trans}}}};
}

}  // namespace wsdesc

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "wsdesc/lrf.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"

namespace wsdesc {

inline constexpr int kDefaultResolution = 16;
inline constexpr double kDefaultSharpness = 1e-3;
inline constexpr double kDefaultCutoff = 1e-6;

/// Geometry of a keypoint-centered grid rotated into the keypoint's LRF.
struct VoxelGridSpec {
  Vec3 center = Vec3::Zero();
  LrfFrame frame;
  double support = 1.0;  // grid edge length s
  int resolution = kDefaultResolution;
  double sharpness = kDefaultSharpness;
  double cutoff = kDefaultCutoff;

  void validate() const {
    if (!(support > 0.0) || !std::isfinite(support)) throw InvalidArgument("voxel support must be positive");
    if (resolution < 2) throw InvalidArgument("voxel resolution must be at least 2");
    if (!(sharpness > 0.0)) throw InvalidArgument("voxel sharpness must be positive");
    if (!(cutoff >= 0.0 && cutoff <= 1e-3)) throw InvalidArgument("voxel cutoff must lie in [0, 1e-3]");
  }

  /// Radius of the sphere standing in for each voxel.
  double sphere_radius() const { return support / (2.0 * resolution); }
  std::size_t voxel_count() const {
    const auto h = static_cast<std::size_t>(resolution);
    return h * h * h;
  }
};

struct VoxelGrid {
  std::vector<double> values;  // index (a * h + b) * h + c
  VoxelGridSpec spec;

  double at(int a, int b, int c) const {
    const int h = spec.resolution;
    return values[static_cast<std::size_t>((a * h + b) * h + c)];
  }
};

struct VoxelizeGradients {
  double d_support = 0.0;
  std::vector<Vec3> d_points;
};

inline std::vector<Vec3> voxel_centers(const VoxelGridSpec& spec) {
  spec.validate();
  const int h = spec.resolution;
  const double cell = spec.support / h;
  const double half = spec.support / 2.0;
  std::vector<Vec3> centers;
  centers.reserve(spec.voxel_count());
  for (int a = 0; a < h; ++a)
    for (int b = 0; b < h; ++b)
      for (int c = 0; c < h; ++c) {
        const Vec3 local((a + 0.5) * cell - half, (b + 0.5) * cell - half, (c + 0.5) * cell - half);
        centers.push_back(spec.center + spec.frame.axes * local);
      }
  return centers;
}

namespace detail {

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// z such that p = sigmoid(z); sign(0) is taken as 0.
inline double voxel_logit(double d, double sigma) { return -d * std::abs(d) / sigma; }

struct Contribution {
  std::size_t point;
  double p;  // probability the point lies in the voxel
  double q;  // 1 - p, evaluated without cancellation
  double d;  // signed distance to the voxel sphere
  Vec3 normal;  // unit (x - o), zero when x coincides with o
};

/// Per-voxel contribution lists in CSR layout, each list sorted by q so the
/// product does not depend on point order.
struct ContributionTable {
  std::vector<std::size_t> offsets;
  std::vector<Contribution> entries;
};

inline ContributionTable collect_contributions(const PointCloud& cloud, const SpatialIndex* index,
                                               const VoxelGridSpec& spec) {
  spec.validate();
  const int h = spec.resolution;
  const std::size_t nvox = spec.voxel_count();
  const auto centers = voxel_centers(spec);
  const double r = spec.sphere_radius();
  const double sigma = spec.sharpness;
  const double cell = spec.support / h;
  const double half = spec.support / 2.0;
  const bool sparse = spec.cutoff > 0.0;
  const double influence = sparse ? r + std::sqrt(sigma * std::log(1.0 / spec.cutoff))
                                  : std::numeric_limits<double>::infinity();

  std::vector<std::size_t> candidates;
  if (sparse && index != nullptr) {
    candidates = index->radius_query(spec.center, half * std::sqrt(3.0) + influence);
  } else {
    candidates.resize(cloud.size());
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
  }

  std::vector<std::pair<std::size_t, Contribution>> raw;
  const Mat3 to_local = spec.frame.axes.transpose();
  for (auto j : candidates) {
    const Vec3& x = cloud.points[j];
    int lo[3] = {0, 0, 0}, hi[3] = {h - 1, h - 1, h - 1};
    if (sparse) {
      const Vec3 local = to_local * (x - spec.center);
      bool outside = false;
      for (int a = 0; a < 3; ++a) {
        const double u = (local[a] + half) / cell - 0.5;
        const double reach = influence / cell;
        lo[a] = std::max(0, static_cast<int>(std::floor(u - reach)));
        hi[a] = std::min(h - 1, static_cast<int>(std::ceil(u + reach)));
        if (lo[a] > hi[a]) outside = true;
      }
      if (outside) continue;
    }
    for (int a = lo[0]; a <= hi[0]; ++a)
      for (int b = lo[1]; b <= hi[1]; ++b)
        for (int c = lo[2]; c <= hi[2]; ++c) {
          const auto k = static_cast<std::size_t>((a * h + b) * h + c);
          const Vec3 diff = x - centers[k];
          const double dist = diff.norm();
          const double d = dist - r;
          const double z = voxel_logit(d, sigma);
          const double p = stable_sigmoid(z);
          if (sparse && p < spec.cutoff) continue;
          const Vec3 normal = dist > 0.0 ? Vec3(diff / dist) : Vec3::Zero();
          raw.push_back({k, Contribution{j, p, stable_sigmoid(-z), d, normal}});
        }
  }

  ContributionTable table;
  table.offsets.assign(nvox + 1, 0);
  for (const auto& [k, c] : raw) ++table.offsets[k + 1];
  for (std::size_t k = 0; k < nvox; ++k) table.offsets[k + 1] += table.offsets[k];
  table.entries.resize(raw.size());
  std::vector<std::size_t> cursor(table.offsets.begin(), table.offsets.end() - 1);
  for (const auto& [k, c] : raw) table.entries[cursor[k]++] = c;
  for (std::size_t k = 0; k < nvox; ++k) {
    std::sort(table.entries.begin() + static_cast<std::ptrdiff_t>(table.offsets[k]),
              table.entries.begin() + static_cast<std::ptrdiff_t>(table.offsets[k + 1]),
              [](const Contribution& x, const Contribution& y) { return x.q < y.q; });
  }
  return table;
}

}  // namespace detail

/// Probability that `point` lies in the sphere of radius r around voxel_center.
inline double point_in_voxel_prob(const Vec3& point, const Vec3& voxel_center, double r, double sigma) {
  if (!(r > 0.0) || !(sigma > 0.0)) throw InvalidArgument("radius and sigma must be positive");
  const double d = (point - voxel_center).norm() - r;
  return detail::stable_sigmoid(detail::voxel_logit(d, sigma));
}

/// v_k = 1 - prod_j (1 - p_jk), skipping factors with p_jk < cutoff. The
/// index, when given, must be built over `cloud`.
inline VoxelGrid voxelize(const PointCloud& cloud, const SpatialIndex* index, const VoxelGridSpec& spec) {
  const auto table = detail::collect_contributions(cloud, index, spec);
  VoxelGrid grid;
  grid.spec = spec;
  grid.values.assign(spec.voxel_count(), 0.0);
  for (std::size_t k = 0; k < grid.values.size(); ++k) {
    double empty = 1.0;
    for (std::size_t e = table.offsets[k]; e < table.offsets[k + 1]; ++e) empty *= table.entries[e].q;
    grid.values[k] = std::clamp(1.0 - empty, 0.0, 1.0);
  }
  return grid;
}

inline VoxelGrid voxelize(const PointCloud& cloud, const VoxelGridSpec& spec) {
  const SpatialIndex index(cloud);
  return voxelize(cloud, &index, spec);
}

/// Gradients of sum_k upstream[k] * v_k with respect to the support s
/// (through both the sphere radius and the voxel centers) and every point.
inline VoxelizeGradients voxelize_backward(const PointCloud& cloud, const SpatialIndex* index,
                                           const VoxelGridSpec& spec, std::span<const double> upstream) {
  if (upstream.size() != spec.voxel_count()) throw InvalidArgument("upstream gradient size mismatch");
  VoxelizeGradients grads;
  grads.d_points.assign(cloud.size(), Vec3::Zero());
  if (std::all_of(upstream.begin(), upstream.end(), [](double g) { return g == 0.0; })) return grads;

  const auto table = detail::collect_contributions(cloud, index, spec);
  const int h = spec.resolution;
  const double sigma = spec.sharpness;
  std::vector<double> suffix;
  for (int a = 0; a < h; ++a)
    for (int b = 0; b < h; ++b)
      for (int c = 0; c < h; ++c) {
        const auto k = static_cast<std::size_t>((a * h + b) * h + c);
        const double g = upstream[k];
        const std::size_t begin = table.offsets[k], end = table.offsets[k + 1];
        if (g == 0.0 || begin == end) continue;
        // d o_k / d s in world coordinates.
        const Vec3 dcenter_ds =
            spec.frame.axes * Vec3((a + 0.5) / h - 0.5, (b + 0.5) / h - 0.5, (c + 0.5) / h - 0.5);
        const double dr_ds = 1.0 / (2.0 * h);
        const std::size_t n = end - begin;
        suffix.assign(n + 1, 1.0);
        for (std::size_t i = n; i-- > 0;) suffix[i] = suffix[i + 1] * table.entries[begin + i].q;
        double prefix = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const auto& e = table.entries[begin + i];
          const double dv_dp = prefix * suffix[i + 1];
          prefix *= e.q;
          const double dp_dd = e.p * e.q * (-2.0 * std::abs(e.d) / sigma);
          const double gd = g * dv_dp * dp_dd;
          if (gd == 0.0) continue;
          grads.d_points[e.point] += gd * e.normal;
          grads.d_support += gd * (-e.normal.dot(dcenter_ds) - dr_ds);
        }
      }
  return grads;
}

inline VoxelizeGradients voxelize_backward(const PointCloud& cloud, const VoxelGridSpec& spec,
                                           std::span<const double> upstream) {
  const SpatialIndex index(cloud);
  return voxelize_backward(cloud, &index, spec, upstream);
}

/// Text dump, one `h a b c value` line per voxel with value >= 0.01.
inline void dump_voxels(const VoxelGrid& grid, std::ostream& out) {
  const int h = grid.spec.resolution;
  for (int a = 0; a < h; ++a)
    for (int b = 0; b < h; ++b)
      for (int c = 0; c < h; ++c) {
        const double v = grid.at(a, b, c);
        if (v >= 0.01) out << h << ' ' << a << ' ' << b << ' ' << c << ' ' << v << '\n';
      }
}

}  // namespace wsdesc

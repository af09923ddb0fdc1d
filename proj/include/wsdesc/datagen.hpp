#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wsdesc/io.hpp"
#include "wsdesc/pointcloud.hpp"
#include "wsdesc/spatial_index.hpp"

namespace wsdesc {

/// A source/target pair with the rigid map taking source onto target.
struct PairSample {
  PointCloud source;
  PointCloud target;
  RigidTransform gt;
  double overlap = 0.0;
  // Indices into the cloud the pair was cut from (empty for loaded pairs).
  std::vector<std::size_t> source_indices;
  std::vector<std::size_t> target_indices;
};

inline constexpr double kDefaultNoiseStd = 0.01;
inline constexpr double kDefaultNoiseClip = 0.05;

struct PairGenConfig {
  double max_rot_deg = 45.0;
  double trans_range = 0.5;
  std::size_t crop_k = 768;
  double noise_std = 0.0;
  double noise_clip = kDefaultNoiseClip;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(max_rot_deg >= 0.0 && max_rot_deg <= 180.0)) throw InvalidArgument("max_rot_deg must lie in [0, 180]");
    if (crop_k < 4) throw InvalidArgument("crop_k must be at least 4");
    if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
    if (!(noise_clip >= 0.0)) throw InvalidArgument("noise_clip must be non-negative");
    if (!(trans_range >= 0.0)) throw InvalidArgument("trans_range must be non-negative");
  }
};

/// Per-coordinate N(0, std) noise clamped to [-clip, clip].
inline PointCloud add_gaussian_noise(const PointCloud& cloud, double std_dev, double clip, std::uint64_t seed) {
  if (!(std_dev >= 0.0) || !(clip >= 0.0)) throw InvalidArgument("noise std and clip must be non-negative");
  PointCloud out = cloud;
  if (std_dev == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std_dev);
  for (auto& p : out.points) {
    for (int a = 0; a < 3; ++a) p[a] += std::clamp(normal(rng), -clip, clip);
  }
  return out;
}

namespace detail {

inline std::pair<Vec3, Vec3> bounding_box(const PointCloud& cloud) {
  Vec3 lo = cloud.points.front(), hi = lo;
  for (const auto& p : cloud.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

inline Vec3 random_point_in_inflated_box(const PointCloud& cloud, std::mt19937_64& rng) {
  auto [lo, hi] = bounding_box(cloud);
  const Vec3 pad = 0.05 * (hi - lo);  // 10% total inflation, split over both sides
  lo -= pad;
  hi += pad;
  Vec3 c;
  for (int a = 0; a < 3; ++a) {
    std::uniform_real_distribution<double> u(lo[a], hi[a]);
    c[a] = lo[a] == hi[a] ? lo[a] : u(rng);
  }
  return c;
}

inline std::vector<std::size_t> crop_nearest(const PointCloud& cloud, const Vec3& center, std::size_t k) {
  const SpatialIndex index(cloud);
  auto idx = index.knn_query(center, k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

/// Random rigid map with per-axis angles uniform in [0, max_rot_deg]
/// (intrinsic X, Y, Z) and translation components uniform in +/- trans_range.
inline RigidTransform random_rigid(std::mt19937_64& rng, double max_rot_deg, double trans_range) {
  std::uniform_real_distribution<double> angle(0.0, max_rot_deg * std::numbers::pi / 180.0);
  Vec3 angles;
  for (int a = 0; a < 3; ++a) angles[a] = max_rot_deg > 0.0 ? angle(rng) : 0.0;
  Vec3 t = Vec3::Zero();
  if (trans_range > 0.0) {
    std::uniform_real_distribution<double> shift(-trans_range, trans_range);
    for (int a = 0; a < 3; ++a) t[a] = shift(rng);
  }
  return {euler_xyz_to_matrix(angles), t};
}

/// Partial-overlap pair: transform the cloud, then crop each side to the
/// crop_k nearest neighbours of an independent random point.
inline PairSample make_pair(const PointCloud& cloud, const PairGenConfig& cfg) {
  cfg.validate();
  cloud.validate();
  if (cloud.size() < cfg.crop_k) {
    throw InvalidArgument("cloud '" + cloud.id + "' has " + std::to_string(cloud.size()) +
                          " points, fewer than crop_k=" + std::to_string(cfg.crop_k));
  }
  std::mt19937_64 rng(cfg.seed);
  PairSample pair;
  pair.gt = random_rigid(rng, cfg.max_rot_deg, cfg.trans_range);
  const PointCloud moved = apply_transform(pair.gt, cloud);

  const Vec3 src_center = detail::random_point_in_inflated_box(cloud, rng);
  const Vec3 dst_center = detail::random_point_in_inflated_box(moved, rng);
  const std::uint64_t noise_seed_src = rng();
  const std::uint64_t noise_seed_dst = rng();

  pair.source_indices = detail::crop_nearest(cloud, src_center, cfg.crop_k);
  pair.target_indices = detail::crop_nearest(moved, dst_center, cfg.crop_k);
  pair.source = cloud.subset(pair.source_indices);
  pair.target = moved.subset(pair.target_indices);
  pair.source.id = cloud.id + "/src";
  pair.target.id = cloud.id + "/dst";
  if (cfg.noise_std > 0.0) {
    pair.source = add_gaussian_noise(pair.source, cfg.noise_std, cfg.noise_clip, noise_seed_src);
    pair.target = add_gaussian_noise(pair.target, cfg.noise_std, cfg.noise_clip, noise_seed_dst);
  }

  std::vector<std::size_t> shared;
  std::set_intersection(pair.source_indices.begin(), pair.source_indices.end(), pair.target_indices.begin(),
                        pair.target_indices.end(), std::back_inserter(shared));
  pair.overlap = static_cast<double>(shared.size()) /
                 static_cast<double>(std::min(pair.source.size(), pair.target.size()));
  return pair;
}

/// Fraction of the smaller cloud whose ground-truth image has a neighbour in
/// the other cloud within tau.
inline double overlap_ratio(const PairSample& pair, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("overlap tau must be positive");
  const bool source_smaller = pair.source.size() <= pair.target.size();
  const PointCloud& probe = source_smaller ? pair.source : pair.target;
  const PointCloud& other = source_smaller ? pair.target : pair.source;
  const AffineTransform map = source_smaller ? pair.gt.affine() : invert_rigid(pair.gt).affine();
  const SpatialIndex index(other);
  std::size_t hits = 0;
  for (const auto& p : probe.points) {
    if (!index.radius_query(map.apply(p), tau).empty()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probe.size());
}

/// Procedural closed surfaces used as a synthetic object corpus. Candidates
/// are drawn from the surface parameterization and thinned with farthest
/// point sampling so the spacing is close to uniform.
inline PointCloud make_procedural_shape(std::uint64_t seed, std::size_t num_points, double radius = 1.0) {
  if (num_points < 4) throw InvalidArgument("procedural shapes need at least 4 points");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  // Sequenced draws: constructor argument evaluation order is unspecified.
  auto uni3 = [&](const Vec3& lo, const Vec3& hi) {
    Vec3 v;
    for (int i = 0; i < 3; ++i) v[i] = uni(lo[i], hi[i]);
    return v;
  };
  const double pi = std::numbers::pi;

  const int family = static_cast<int>(rng() % 7);
  const Vec3 axes = uni3({0.5, 0.35, 0.25}, {1.0, 0.9, 0.8});
  const double e1 = uni(0.3, 1.6);
  const double e2 = uni(0.3, 1.6);
  const int bumps_a = 2 + static_cast<int>(rng() % 4);
  const int bumps_b = 1 + static_cast<int>(rng() % 3);
  const double bump_amp = uni(0.1, 0.3);
  const double tube = uni(0.15, 0.35);
  const Vec3 offset = uni3({-0.5, -0.4, -0.3}, {0.5, 0.4, 0.3});

  auto spow = [](double v, double e) { return std::copysign(std::pow(std::abs(v), e), v); };
  auto sample = [&](int fam) -> Vec3 {
    const double a = uni(0.0, 2.0 * pi);
    const double b = uni(-pi / 2.0, pi / 2.0);
    switch (fam) {
      case 0:  // ellipsoid
        return {axes.x() * std::cos(b) * std::cos(a), axes.y() * std::cos(b) * std::sin(a), axes.z() * std::sin(b)};
      case 1: {  // box surface
        Vec3 p = uni3(Vec3::Constant(-1.0), Vec3::Constant(1.0));
        const int face = static_cast<int>(rng() % 6);
        p[face / 2] = face % 2 ? 1.0 : -1.0;
        return p.cwiseProduct(axes);
      }
      case 2: {  // capped cylinder
        const double which = u01(rng);
        if (which < 0.7) return {axes.x() * std::cos(a), axes.y() * std::sin(a), axes.z() * uni(-1, 1)};
        const double r = std::sqrt(u01(rng));
        return {axes.x() * r * std::cos(a), axes.y() * r * std::sin(a), which < 0.85 ? axes.z() : -axes.z()};
      }
      case 3: {  // torus
        const double c = uni(0.0, 2.0 * pi);
        const double ring = axes.x();
        return {(ring + tube * std::cos(c)) * std::cos(a), (ring + tube * std::cos(c)) * std::sin(a),
                tube * std::sin(c)};
      }
      case 4:  // superquadric
        return {axes.x() * spow(std::cos(b), e1) * spow(std::cos(a), e2),
                axes.y() * spow(std::cos(b), e1) * spow(std::sin(a), e2), axes.z() * spow(std::sin(b), e1)};
      case 5: {  // bumpy sphere
        const double r = 1.0 + bump_amp * std::sin(bumps_a * a) * std::cos(bumps_b * 2.0 * b);
        return {axes.x() * r * std::cos(b) * std::cos(a), axes.y() * r * std::cos(b) * std::sin(a),
                axes.z() * r * std::sin(b)};
      }
      default: {  // union of a box and an offset ellipsoid
        if (u01(rng) < 0.5) {
          Vec3 p = uni3(Vec3::Constant(-1.0), Vec3::Constant(1.0));
          const int face = static_cast<int>(rng() % 6);
          p[face / 2] = face % 2 ? 1.0 : -1.0;
          return 0.6 * p.cwiseProduct(axes);
        }
        return offset + 0.55 * Vec3(axes.z() * std::cos(b) * std::cos(a), axes.x() * std::cos(b) * std::sin(a),
                                    axes.y() * std::sin(b));
      }
    }
  };

  PointCloud dense;
  dense.points.reserve(num_points * 20);
  for (std::size_t i = 0; i < num_points * 20; ++i) dense.points.push_back(sample(family));

  // Random orientation, centered, scaled to the requested bounding radius.
  const Mat3 orient = euler_xyz_to_matrix(uni3(Vec3::Zero(), Vec3::Constant(2.0 * pi)));
  Vec3 mean = Vec3::Zero();
  for (const auto& p : dense.points) mean += p;
  mean /= static_cast<double>(dense.size());
  double max_norm = 0.0;
  for (auto& p : dense.points) {
    p = orient * (p - mean);
    max_norm = std::max(max_norm, p.norm());
  }
  for (auto& p : dense.points) p *= radius / max_norm;

  const auto keep = farthest_point_sample(dense, num_points, rng());
  PointCloud shape = dense.subset(keep);
  std::ostringstream id;
  id << "shape_" << seed;
  shape.id = id.str();
  return shape;
}

/// Writes pair_NNNN/{source.ply,target.ply,gt.txt} under root.
inline std::filesystem::path save_pair_directory(const PairSample& pair, const std::filesystem::path& root,
                                                 std::size_t index) {
  std::ostringstream name;
  name << "pair_" << std::setw(4) << std::setfill('0') << index;
  const auto dir = root / name.str();
  std::filesystem::create_directories(dir);
  io::save_ply(pair.source, dir / "source.ply");
  io::save_ply(pair.target, dir / "target.ply");
  io::save_transform(pair.gt, dir / "gt.txt");
  return dir;
}

inline PairSample load_pair_directory(const std::filesystem::path& dir) {
  PairSample pair;
  pair.source = io::load_point_cloud(dir / "source.ply");
  pair.target = io::load_point_cloud(dir / "target.ply");
  pair.gt = io::load_rigid_transform(dir / "gt.txt");
  pair.source.id = dir.filename().string() + "/src";
  pair.target.id = dir.filename().string() + "/dst";
  return pair;
}

/// Every pair_* subdirectory of root, in lexicographic order.
inline std::vector<std::filesystem::path> list_pair_directories(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> dirs;
  if (!std::filesystem::is_directory(root)) throw InvalidArgument("not a directory: " + root.string());
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("pair_", 0) == 0) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace wsdesc

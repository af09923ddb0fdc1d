#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "wsdesc/alignment.hpp"
#include "wsdesc/autodiff.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/datagen.hpp"
#include "wsdesc/trainer.hpp"
#include "wsdesc/voxelizer.hpp"

// Finite-difference checks of every differentiable stage, shared by the CLI
// `gradcheck` subcommand and the test suites.

namespace wsdesc::gradsuite {

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kStepTolerance = 1e-3;

namespace detail {

inline std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline ad::Tensor<double> random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(shape);
  return ad::Tensor<double>(std::move(shape), uniform(rng, n, lo, hi), true);
}

/// sum(c * y) with fixed random c, so every output coordinate is exercised.
inline ad::Tensor<double> project(ad::Tape<double>& tape, const ad::Tensor<double>& y, const std::vector<double>& c) {
  return ad::sum(tape, ad::mul_const<double>(tape, y, c));
}

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); }

inline SuiteResult from_report(std::string name, const ad::GradCheckReport& r, double tol) {
  return {std::move(name), r.max_rel_error, tol, r.coordinates_checked};
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace detail

/// Gradient of sum(u * v) with respect to the support and every point.
inline SuiteResult voxelization(std::uint64_t seed, bool full) {
  std::mt19937_64 rng(seed);
  PointCloud cloud;
  const std::size_t n = full ? 40 : 16;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = detail::uniform(rng, 3, -0.25, 0.25);
    cloud.points.emplace_back(p[0], p[1], p[2]);
  }
  VoxelGridSpec spec;
  spec.frame.axes = detail::random_rotation(rng);
  spec.support = 0.5;
  spec.resolution = full ? 6 : 4;
  spec.sharpness = 1e-3;
  spec.cutoff = 0.0;  // smooth everywhere, no truncation jumps
  const auto upstream = detail::uniform(rng, spec.voxel_count(), -1.0, 1.0);
  auto value = [&](const PointCloud& c, const VoxelGridSpec& s) {
    const auto g = voxelize(c, s);
    double acc = 0.0;
    for (std::size_t k = 0; k < g.values.size(); ++k) acc += upstream[k] * g.values[k];
    return acc;
  };
  const auto grads = voxelize_backward(cloud, spec, upstream);
  const double h = 1e-6;
  SuiteResult r{"voxelization", 0.0, kOpTolerance, 0};
  auto record = [&](double a, double numeric) {
    r.max_rel_error = std::max(r.max_rel_error, detail::rel_error(a, numeric));
    ++r.coordinates;
  };
  {
    auto sp = spec, sm = spec;
    sp.support += h;
    sm.support -= h;
    record(grads.d_support, (value(cloud, sp) - value(cloud, sm)) / (2 * h));
  }
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      auto cp = cloud, cm = cloud;
      cp.points[i][a] += h;
      cm.points[i][a] -= h;
      record(grads.d_points[i][a], (value(cp, spec) - value(cm, spec)) / (2 * h));
    }
  return r;
}

inline SuiteResult conv3d(std::uint64_t seed, bool full) {
  std::mt19937_64 rng(seed);
  const std::size_t ci = 2, co = 3, d = full ? 6 : 4;
  auto x = detail::random_tensor(rng, {ci, d, d, d});
  auto k = detail::random_tensor(rng, {co, ci, 3, 3, 3});
  auto b = detail::random_tensor(rng, {co});
  std::vector<double> c1, c2;
  const std::size_t o1 = d, o2 = (d + 2 - 3) / 2 + 1;
  c1 = detail::uniform(rng, co * o1 * o1 * o1, -1, 1);
  c2 = detail::uniform(rng, co * o2 * o2 * o2, -1, 1);
  ad::ScalarFn fn = [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    const auto y1 = ad::conv3d(t, in[0], in[1], in[2], 1, 1);
    const auto y2 = ad::conv3d(t, in[0], in[1], in[2], 2, 1);
    return ad::axpby(t, 1.0, detail::project(t, y1, c1), 1.0, detail::project(t, y2, c2));
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  opt.max_coords_per_input = full ? 0 : 40;
  return detail::from_report("conv3d", ad::grad_check(fn, {x, k, b}, opt), kOpTolerance);
}

inline SuiteResult instance_norm(std::uint64_t seed, bool full) {
  std::mt19937_64 rng(seed);
  const std::size_t d = full ? 4 : 3;
  auto x = detail::random_tensor(rng, {3, d, d, d});
  const auto c = detail::uniform(rng, x.size(), -1, 1);
  ad::ScalarFn fn = [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    return detail::project(t, ad::instance_norm(t, in[0]), c);
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  return detail::from_report("instance_norm", ad::grad_check(fn, {x}, opt), kOpTolerance);
}

inline SuiteResult softmax_neg_distance(std::uint64_t seed, bool) {
  std::mt19937_64 rng(seed);
  auto q = detail::random_tensor(rng, {4, 6});
  auto k = detail::random_tensor(rng, {5, 6});
  const auto c = detail::uniform(rng, 20, -1, 1);
  ad::ScalarFn fn = [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    return detail::project(t, ad::softmax_neg_distance(t, in[0], in[1]), c);
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  return detail::from_report("softmax_neg_distance", ad::grad_check(fn, {q, k}, opt), kOpTolerance);
}

inline SuiteResult fit_affine(std::uint64_t seed, bool) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 10;
  std::vector<Vec3> src;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = detail::uniform(rng, 3, -1, 1);
    src.emplace_back(p[0], p[1], p[2]);
  }
  auto target = detail::random_tensor(rng, {n, 3});
  auto weights = detail::random_tensor(rng, {n}, 0.2, 1.0);
  const auto c = detail::uniform(rng, 12, -1, 1);
  ad::ScalarFn fn = [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    return detail::project(t, fit_affine_weighted(t, src, in[0], in[1], 0.0), c);
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  return detail::from_report("fit_affine_weighted", ad::grad_check(fn, {target, weights}, opt), kOpTolerance);
}

inline SuiteResult orthogonality(std::uint64_t seed, bool) {
  std::mt19937_64 rng(seed);
  auto f = detail::random_tensor(rng, {3, 4});
  auto b = detail::random_tensor(rng, {3, 4});
  ad::ScalarFn fn = [](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    return orthogonality_loss(t, in[0], in[1]);
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  return detail::from_report("orthogonality_loss", ad::grad_check(fn, {f, b}, opt), kOpTolerance);
}

inline SuiteResult cycle(std::uint64_t seed, bool) {
  std::mt19937_64 rng(seed);
  auto f = detail::random_tensor(rng, {3, 4});
  auto b = detail::random_tensor(rng, {3, 4});
  ad::ScalarFn fn = [](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
    return cycle_loss(t, in[0], in[1]);
  };
  ad::GradCheckOptions opt;
  opt.seed = seed;
  return detail::from_report("cycle_loss", ad::grad_check(fn, {f, b}, opt), kOpTolerance);
}

/// Full training-step loss on an h=8 micro network against central
/// differences over a seeded subset of parameters, log_support included.
/// Conv biases feed instance norm, so their gradient must be exactly zero
/// and is checked as such; a difference quotient there is pure roundoff.
inline SuiteResult training_step_loss(std::uint64_t seed, bool full) {
  auto shape = make_procedural_shape(seed, 170, 0.55);
  PairGenConfig pc;
  pc.crop_k = 128;
  pc.seed = seed + 1;
  const auto pair = make_pair(shape, pc);
  TrainConfig cfg;
  cfg.kp_per_cloud = 8;
  cfg.h = 8;
  cfg.channels = {4, 8};
  cfg.strides = {1, 2};
  auto params = init_network<double>(seed, cfg.network());
  const auto base = training_step(pair, params, cfg, seed);
  SuiteResult r{"training_step", 0.0, kStepTolerance, 0};
  if (base.skipped) {
    r.max_rel_error = std::numeric_limits<double>::infinity();
    return r;
  }
  const auto ts = params.tensors();
  const auto names = cfg.network().tensor_shapes();
  std::mt19937_64 rng(seed);
  const std::size_t per_tensor = full ? 6 : 2;
  const double h = 1e-6;
  for (std::size_t t = 0; t < ts.size(); ++t) {
    std::vector<std::size_t> coords(ts[t].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(coords.size(), per_tensor));
    const auto& name = names[t].first;
    if (name.rfind("conv", 0) == 0 && name.find(".bias") != std::string::npos) {
      for (auto g : base.grads[t]) {
        if (std::abs(g) > 1e-12) r.max_rel_error = std::max(r.max_rel_error, 1.0);
        ++r.coordinates;
      }
      continue;
    }
    auto v = ts[t].mutable_values();
    for (auto j : coords) {
      const double saved = v[j];
      v[j] = saved + h;
      const auto plus = training_step(pair, params, cfg, seed, false);
      v[j] = saved - h;
      const auto minus = training_step(pair, params, cfg, seed, false);
      v[j] = saved;
      const double numeric = (plus.loss.l_pcr - minus.loss.l_pcr) / (2 * h);
      r.max_rel_error = std::max(r.max_rel_error, detail::rel_error(base.grads[t][j], numeric));
      ++r.coordinates;
    }
  }
  return r;
}

/// Every suite; `full` widens the sampled coordinates and problem sizes.
inline std::vector<SuiteResult> run_all(std::uint64_t seed, bool full) {
  return {voxelization(seed, full), conv3d(seed, full),         instance_norm(seed, full),
          softmax_neg_distance(seed, full), fit_affine(seed, full), orthogonality(seed, full),
          cycle(seed, full),        training_step_loss(seed, full)};
}

}  // namespace wsdesc::gradsuite

#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <random>

#include "test_util.hpp"
#include "wsdesc/alignment.hpp"
#include "wsdesc/gradsuite.hpp"

using namespace wsdesc;
using wsdesc::testing::random_rigid;
using wsdesc::testing::random_rotation;
using wsdesc::testing::random_vec;

namespace {

WeightedCorrMatrices exact_instance(std::mt19937_64& rng, const RigidTransform& t, std::size_t n) {
  std::uniform_real_distribution<double> w(0.1, 2.0);
  WeightedCorrMatrices m;
  for (std::size_t i = 0; i < n; ++i) {
    m.source.push_back(random_vec(rng));
    m.target.push_back(t.apply(m.source.back()));
    m.weights.push_back(w(rng));
  }
  return m;
}

AffineTransform affine_of(const RigidTransform& t) { return {t.rotation, t.translation}; }

Eigen::Matrix<double, 3, 4> pinv_oracle(const WeightedCorrMatrices& m) {
  const auto c = static_cast<Eigen::Index>(m.source.size());
  Eigen::MatrixXd pw(4, c), qw(3, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    const double w = m.weights[static_cast<std::size_t>(i)];
    pw.col(i) << w * m.source[static_cast<std::size_t>(i)], w;
    qw.col(i) = w * m.target[static_cast<std::size_t>(i)];
  }
  const Eigen::MatrixXd pinv = pw.completeOrthogonalDecomposition().pseudoInverse();
  return qw * pinv;
}

Eigen::Matrix<double, 3, 4> rows(const AffineTransform& a) {
  Eigen::Matrix<double, 3, 4> x;
  x << a.matrix, a.translation;
  return x;
}

}  // namespace

TEST(FitAffine, RecoversRigidMapFromExactCorrespondences) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_rigid(rng);
    const auto m = exact_instance(rng, t, 4 + trial % 10);
    const auto a = fit_affine_weighted(m, 0.0);
    EXPECT_LT((a.matrix - t.rotation).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((a.translation - t.translation).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(FitAffine, CoplanarPointsAreRankDeficient) {
  WeightedCorrMatrices m;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    Vec3 p = random_vec(rng);
    p.z() = 0.0;
    m.source.push_back(p);
    m.target.push_back(p);
    m.weights.push_back(1.0);
  }
  EXPECT_THROW(fit_affine_weighted(m, 0.0), RankDeficient);
}

TEST(FitAffine, MatchesPseudoinverseOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> w(0.2, 1.5);
  for (int trial = 0; trial < 20; ++trial) {
    WeightedCorrMatrices m;
    for (int i = 0; i < 25; ++i) {
      m.source.push_back(random_vec(rng));
      m.target.push_back(random_vec(rng, 2.0));
      m.weights.push_back(w(rng));
    }
    const auto x = rows(fit_affine_weighted(m, 0.0));
    EXPECT_LT((x - pinv_oracle(m)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(FitAffine, DampingPerturbsContinuously) {
  std::mt19937_64 rng(4);
  WeightedCorrMatrices m;
  for (int i = 0; i < 12; ++i) {
    m.source.push_back(random_vec(rng));
    m.target.push_back(random_vec(rng));
    m.weights.push_back(1.0);
  }
  const auto x0 = rows(fit_affine_weighted(m, 0.0));
  double prev = INFINITY;
  for (double damping : {1e-2, 1e-4, 1e-6, 1e-8}) {
    const double diff = (rows(fit_affine_weighted(m, damping)) - x0).norm();
    EXPECT_LT(diff, prev);
    prev = diff;
  }
  EXPECT_LT(prev, 1e-6);
}

TEST(FitAffine, RejectsTooFewPositiveWeights) {
  std::mt19937_64 rng(5);
  auto m = exact_instance(rng, random_rigid(rng), 6);
  m.weights = {1.0, 1.0, 1.0, 0.0, 0.0, 0.0};
  EXPECT_THROW(fit_affine_weighted(m), InvalidArgument);
  m.weights = {1.0, 1.0, 1.0, 1.0, -1.0, 0.0};
  EXPECT_THROW(fit_affine_weighted(m), InvalidArgument);
}

TEST(FitAffine, TapeVersionAgreesAndGradientsCheck) {
  std::mt19937_64 rng(6);
  const auto m = exact_instance(rng, random_rigid(rng), 9);
  std::vector<double> tv, wv(m.weights);
  for (const auto& q : m.target) tv.insert(tv.end(), {q.x(), q.y(), q.z()});
  ad::Tape<double> tape;
  const auto x = fit_affine_weighted(tape, m.source, ad::Tensor<double>({9, 3}, tv), ad::Tensor<double>({9}, wv));
  const auto plain = rows(fit_affine_weighted(m));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(x[std::size_t(r * 4 + c)], plain(r, c), 1e-12);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) EXPECT_LT(gradsuite::fit_affine(seed, true).max_rel_error, 1e-4);
}

TEST(RigidityLosses, HandValues) {
  std::mt19937_64 rng(7);
  const AffineTransform rot{random_rotation(rng), Vec3::Zero()};
  const AffineTransform twice{2.0 * Mat3::Identity(), Vec3::Zero()};
  EXPECT_NEAR(orthogonality_loss(rot, rot), 0.0, 1e-9);
  EXPECT_NEAR(orthogonality_loss(twice, twice), 9.0, 1e-12);
  EXPECT_NEAR(orthogonality_loss(rot, twice), 4.5, 1e-9);
  const AffineTransform shifted{Mat3::Identity(), Vec3(1, 0, 0)};
  EXPECT_NEAR(cycle_loss(shifted, shifted), 2.0, 1e-12);
}

TEST(RigidityLosses, ExactInversePairScoresZero) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto t = random_rigid(rng);
    const auto f = affine_of(t), b = affine_of(invert_rigid(t));
    EXPECT_NEAR(cycle_loss(f, b), 0.0, 1e-9);
    const auto r1 = registration_loss(f, b), r2 = registration_loss(b, f);
    EXPECT_NEAR(r1.l_pcr, 0.0, 1e-9);
    EXPECT_NEAR(r2.l_pcr, 0.0, 1e-9);
  }
}

TEST(RigidityLosses, CycleMatchesDirectEvaluation) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    AffineTransform f, b;
    f.matrix = Mat3::NullaryExpr([&] { return n(rng); });
    b.matrix = Mat3::NullaryExpr([&] { return n(rng); });
    f.translation = random_vec(rng);
    b.translation = random_vec(rng);
    const Mat4 prod = f.homogeneous() * b.homogeneous() - Mat4::Identity();
    EXPECT_NEAR(cycle_loss(f, b), prod.topRows<3>().cwiseAbs().sum(), 1e-12);
  }
}

TEST(RigidityLosses, WeightingAndAblation) {
  std::mt19937_64 rng(10);
  AffineTransform f{random_rotation(rng) * 1.3, random_vec(rng)}, b{random_rotation(rng), random_vec(rng)};
  const auto r = registration_loss(f, b, 0.7, 2.0);
  EXPECT_NEAR(r.l_pcr, 0.7 * r.l_o + 2.0 * r.l_c, 1e-9);
  EXPECT_GE(r.l_o, 0.0);
  EXPECT_GE(r.l_c, 0.0);
  EXPECT_NEAR(registration_loss(f, b, 1.0, 0.0).l_pcr, r.l_o, 1e-12);
  EXPECT_THROW(registration_loss(f, b, -1.0, 1.0), InvalidArgument);
}

TEST(RigidityLosses, GradientsOverAllTransformEntries) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    EXPECT_LT(gradsuite::orthogonality(seed, true).max_rel_error, 1e-5);
    EXPECT_LT(gradsuite::cycle(seed, true).max_rel_error, 1e-5);
  }
}

TEST(RigidityLosses, WeightGradientPathMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto t = random_rigid(rng);
  std::vector<Vec3> src, back_src;
  std::vector<double> fwd_target, bwd_target;
  for (int i = 0; i < 10; ++i) {
    src.push_back(random_vec(rng));
    const Vec3 q = t.apply(src.back()) + 0.05 * random_vec(rng);
    back_src.push_back(q);
    fwd_target.insert(fwd_target.end(), {q.x(), q.y(), q.z()});
    bwd_target.insert(bwd_target.end(), {src.back().x(), src.back().y(), src.back().z()});
  }
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::vector<double> w1(10), w2(10);
  for (auto& w : w1) w = u(rng);
  for (auto& w : w2) w = u(rng);
  ad::ScalarFn fn = [&](ad::Tape<double>& tape, const std::vector<ad::Tensor<double>>& in) {
    const auto f = fit_affine_weighted(tape, src, ad::Tensor<double>({10, 3}, fwd_target), in[0], 0.0);
    const auto b = fit_affine_weighted(tape, back_src, ad::Tensor<double>({10, 3}, bwd_target), in[1], 0.0);
    return registration_loss(tape, f, b).l_pcr;
  };
  EXPECT_LT(ad::grad_check(fn, {ad::Tensor<double>({10}, w1), ad::Tensor<double>({10}, w2)}).max_rel_error, 1e-4);
}

TEST(Kabsch, IdentityAndExactRecovery) {
  std::mt19937_64 rng(12);
  std::vector<Vec3> src;
  for (int i = 0; i < 20; ++i) src.push_back(random_vec(rng));
  const auto id = kabsch_rigid(src, src);
  EXPECT_LT((id.rotation - Mat3::Identity()).norm(), 1e-9);
  EXPECT_LT(id.translation.norm(), 1e-9);
  for (int trial = 0; trial < 30; ++trial) {
    const auto t = random_rigid(rng);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.push_back(t.apply(p));
    const auto r = kabsch_rigid(src, dst);
    EXPECT_LT((r.rotation - t.rotation).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((r.translation - t.translation).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(r.rotation.determinant(), 1.0, 1e-12);
  }
}

TEST(Kabsch, NoisyFitBeatsRandomCandidates) {
  std::mt19937_64 rng(13);
  std::vector<Vec3> src, dst;
  std::vector<double> w;
  const auto t = random_rigid(rng);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int i = 0; i < 30; ++i) {
    src.push_back(random_vec(rng));
    dst.push_back(t.apply(src.back()) + 0.1 * random_vec(rng));
    w.push_back(u(rng));
  }
  auto residual = [&](const RigidTransform& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) s += w[i] * (r.apply(src[i]) - dst[i]).squaredNorm();
    return s;
  };
  const double best = residual(kabsch_rigid(src, dst, w));
  for (int k = 0; k < 1000; ++k) {
    // candidates near the truth make the bound meaningful
    RigidTransform c{Eigen::AngleAxisd(0.05, random_vec(rng).normalized()).toRotationMatrix() * t.rotation,
                     t.translation + 0.05 * random_vec(rng)};
    EXPECT_LE(best, residual(c) + 1e-12);
  }
}

TEST(Kabsch, CollinearPointsThrow) {
  std::vector<Vec3> line;
  for (int i = 0; i < 6; ++i) line.emplace_back(i, 2.0 * i, -i);
  EXPECT_THROW(kabsch_rigid(line, line), RankDeficient);
  std::vector<Vec3> two{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(kabsch_rigid(two, two), InvalidArgument);
}

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "wsdesc/matching.hpp"

using namespace wsdesc;
using wsdesc::testing::random_rigid;
using wsdesc::testing::random_vec;

namespace {

DescriptorBatch random_batch(std::mt19937_64& rng, std::size_t count, std::size_t dim) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  DescriptorBatch b(count, std::vector<float>(dim));
  for (auto& row : b)
    for (auto& v : row) v = n(rng);
  return b;
}

double brute_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return std::sqrt(s);
}

struct Instance {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<Vec3> p, q;
  std::size_t inliers = 0;
};

// Inliers first, related by one rigid map; outliers are independent uniform points.
Instance inlier_outlier_instance(std::mt19937_64& rng, std::size_t inliers, std::size_t outliers) {
  Instance s;
  const auto t = random_rigid(rng);
  for (std::size_t i = 0; i < inliers + outliers; ++i) {
    const Vec3 a = random_vec(rng);
    s.p.push_back(a);
    s.q.push_back(i < inliers ? t.apply(a) : random_vec(rng));
    s.pairs.emplace_back(i, i);
  }
  s.inliers = inliers;
  return s;
}

}  // namespace

TEST(MatchDescriptors, IdenticalSetsMatchThemselves) {
  std::mt19937_64 rng(1);
  const auto p = random_batch(rng, 12, 8);
  const auto c = match_descriptors(p, p);
  ASSERT_EQ(c.size(), 12u);
  const auto d = detail::distance_matrix(p, p);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c.pairs[i], std::make_pair(i, i));
    // the self match carries the largest softmax weight in its row
    double z = 0.0;
    for (std::size_t l = 0; l < 12; ++l) z += std::exp(-d(long(i), long(l)));
    for (std::size_t l = 0; l < 12; ++l) EXPECT_GE(c.w_f[i] + 1e-12, std::exp(-d(long(i), long(l))) / z);
  }
}

TEST(MatchDescriptors, SingleTargetGivesUnitWeights) {
  std::mt19937_64 rng(2);
  const auto c = match_descriptors(random_batch(rng, 5, 4), random_batch(rng, 1, 4));
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c.pairs[i].second, 0u);
    EXPECT_DOUBLE_EQ(c.w_f[i], 1.0);
  }
}

TEST(MatchDescriptors, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_batch(rng, 10, 6), q = random_batch(rng, 10, 6);
    const auto c = match_descriptors(p, q);
    for (std::size_t i = 0; i < 10; ++i) {
      std::size_t best = 0;
      double z = 0.0;
      for (std::size_t j = 0; j < 10; ++j) {
        if (brute_distance(p[i], q[j]) < brute_distance(p[i], q[best])) best = j;
        z += std::exp(-brute_distance(p[i], q[j]));
      }
      EXPECT_EQ(c.pairs[i].second, best);
      EXPECT_NEAR(c.w_f[i], std::exp(-brute_distance(p[i], q[best])) / z, 1e-6);
      EXPECT_GT(c.w_f[i], 0.0);
      EXPECT_LE(c.w_f[i], 1.0);
      EXPECT_NEAR(c.w[i], c.w_f[i] * c.w_sm[i], 1e-9);
    }
  }
}

TEST(MatchDescriptors, TiesGoToLowerIndex) {
  const DescriptorBatch p{{0.0f, 0.0f}};
  const DescriptorBatch q{{1.0f, 0.0f}, {0.0f, 1.0f}, {-1.0f, 0.0f}};
  EXPECT_EQ(match_descriptors(p, q).pairs[0].second, 0u);
}

TEST(MatchDescriptors, TapeVersionAgreesWithPlain) {
  std::mt19937_64 rng(4);
  const auto p = random_batch(rng, 7, 5), q = random_batch(rng, 9, 5);
  std::vector<double> fp, fq;
  for (const auto& r : p) fp.insert(fp.end(), r.begin(), r.end());
  for (const auto& r : q) fq.insert(fq.end(), r.begin(), r.end());
  ad::Tape<double> tape;
  const auto m = match_descriptors(tape, ad::Tensor<double>({7, 5}, fp), ad::Tensor<double>({9, 5}, fq));
  const auto c = match_descriptors(p, q);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(m.targets[i], c.pairs[i].second);
    EXPECT_NEAR(m.w_f[i], c.w_f[i], 1e-9);
  }
}

TEST(MatchDescriptors, EmptyBatchThrows) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(match_descriptors(DescriptorBatch{}, random_batch(rng, 3, 2)), InvalidArgument);
}

TEST(CompatibilityMatrix, HandValues) {
  const double sigma = 0.1;
  // pair 0/1 preserves length, 0/2 distorts it by exactly sigma
  std::vector<Vec3> p{{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
  std::vector<Vec3> q{{0, 0, 0}, {1, 0, 0}, {0, 2.0 + sigma, 0}};
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 1}, {2, 2}};
  const auto m = compatibility_matrix(pairs, p, q, sigma);
  EXPECT_DOUBLE_EQ(m(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(m(0, 1), 1.0);
  EXPECT_NEAR(m(0, 2), 0.0, 1e-12);

  std::vector<Vec3> a{{0, 0, 0}, {1, 0, 0}}, b{{0, 0, 0}, {1.0 + sigma / std::sqrt(2.0), 0, 0}};
  const auto half = compatibility_matrix({{0, 0}, {1, 1}}, a, b, sigma);
  EXPECT_NEAR(half(0, 1), 0.5, 1e-12);
}

TEST(CompatibilityMatrix, StructuralInvariants) {
  std::mt19937_64 rng(6);
  const auto s = inlier_outlier_instance(rng, 10, 10);
  const auto m = compatibility_matrix(s.pairs, s.p, s.q, 0.1);
  for (long i = 0; i < m.rows(); ++i) {
    EXPECT_EQ(m(i, i), 0.0);
    for (long j = 0; j < m.cols(); ++j) {
      EXPECT_GE(m(i, j), 0.0);
      EXPECT_LE(m(i, j), 1.0);
      EXPECT_NEAR(m(i, j), m(j, i), 1e-12);
    }
  }
  // reordering correspondences permutes rows and columns alike
  std::vector<std::size_t> perm(s.pairs.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::pair<std::size_t, std::size_t>> shuffled;
  for (auto k : perm) shuffled.push_back(s.pairs[k]);
  const auto mp = compatibility_matrix(shuffled, s.p, s.q, 0.1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < perm.size(); ++j) EXPECT_EQ(mp(long(i), long(j)), m(long(perm[i]), long(perm[j])));
}

TEST(CompatibilityMatrix, NeedsTwoCorrespondences) {
  EXPECT_THROW(compatibility_matrix({{0, 0}}, {Vec3::Zero()}, {Vec3::Zero()}), InvalidArgument);
}

TEST(SpectralWeights, ConsistentSetIsUniform) {
  const long n = 7;
  Eigen::MatrixXd m = Eigen::MatrixXd::Ones(n, n);
  m.diagonal().setZero();
  const auto w = spectral_weights(m);
  for (long i = 0; i < n; ++i) EXPECT_NEAR(w[i], 1.0 / std::sqrt(double(n)), 1e-12);
}

TEST(SpectralWeights, CliqueDominatesIsolatedRows) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(40, 40);
  m.topLeftCorner(20, 20).setOnes();
  m.diagonal().setZero();
  const auto w = spectral_weights(m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd v = es.eigenvectors().col(39);
  if (v.sum() < 0) v = -v;
  EXPECT_LT((w - v).norm(), 1e-6);
  for (long i = 20; i < 40; ++i) EXPECT_EQ(w[i], 0.0);
  EXPECT_GT(w.head(20).minCoeff(), 0.2);
}

TEST(SpectralWeights, TenIterationsMatchFifty) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = inlier_outlier_instance(rng, 20, 0);
    const auto m = compatibility_matrix(s.pairs, s.p, s.q, 0.1);
    EXPECT_LT((spectral_weights(m, 10) - spectral_weights(m, 50)).norm(), 1e-6);
  }
}

TEST(SpectralWeights, SeparatesInliersFromGrossOutliers) {
  std::mt19937_64 rng(8);
  int separated = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = inlier_outlier_instance(rng, 20, 20);
    const auto w = spectral_weights(compatibility_matrix(s.pairs, s.p, s.q, 0.1));
    EXPECT_NEAR(w.norm(), 1.0, 1e-6);
    EXPECT_GE(w.minCoeff(), 0.0);
    if (w.head(20).minCoeff() > w.tail(20).maxCoeff()) ++separated;
  }
  EXPECT_GE(separated, 19);
}

TEST(SpectralWeights, InvariantToRigidMotionOfEitherSide) {
  std::mt19937_64 rng(9);
  auto s = inlier_outlier_instance(rng, 15, 5);
  const auto w0 = spectral_weights(compatibility_matrix(s.pairs, s.p, s.q, 0.1));
  const auto t = random_rigid(rng);
  for (auto& v : s.q) v = t.apply(v);
  const auto w1 = spectral_weights(compatibility_matrix(s.pairs, s.p, s.q, 0.1));
  EXPECT_LT((w0 - w1).norm(), 1e-9);
}

TEST(SpectralWeights, FullyIncompatibleSetIsDegenerate) {
  EXPECT_THROW(spectral_weights(Eigen::MatrixXd::Zero(5, 5)), DegenerateSpectrum);
  EXPECT_THROW(spectral_weights(Eigen::MatrixXd::Ones(2, 2), 0), InvalidArgument);
}

TEST(Confidence, ProductOfWeights) {
  CorrespondenceSet c;
  c.pairs = {{0, 0}, {1, 1}};
  c.w_f = {0.2, 0.5};
  c.w_sm = {0.5, 0.2};
  const auto r = confidence(c);
  EXPECT_NEAR(r.w[0], 0.1, 1e-15);
  EXPECT_NEAR(r.w[1], 0.1, 1e-15);
  c.w_sm = {1.0, 1.0};
  EXPECT_EQ(confidence(c).w, c.w_f);
  c.w_sm.clear();
  EXPECT_THROW(confidence(c), InvalidArgument);
}

TEST(MutualNearest, IdenticalSets) {
  std::mt19937_64 rng(10);
  const auto p = random_batch(rng, 15, 4);
  const auto m = mutual_nearest(p, p);
  ASSERT_EQ(m.size(), 15u);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(m[i], std::make_pair(i, i));
}

TEST(MutualNearest, AsymmetricRelationExcluded) {
  // p0 and p1 both prefer q0; q0 prefers p1.
  const DescriptorBatch p{{0.0f}, {0.9f}};
  const DescriptorBatch q{{1.0f}, {-5.0f}};
  const auto m = mutual_nearest(p, q);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0], std::make_pair(std::size_t{1}, std::size_t{0}));
}

TEST(MutualNearest, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_batch(rng, 20, 3), q = random_batch(rng, 20, 3);
    std::vector<std::pair<std::size_t, std::size_t>> expected;
    for (std::size_t i = 0; i < 20; ++i) {
      std::size_t j = 0;
      for (std::size_t k = 1; k < 20; ++k)
        if (brute_distance(p[i], q[k]) < brute_distance(p[i], q[j])) j = k;
      std::size_t back = 0;
      for (std::size_t k = 1; k < 20; ++k)
        if (brute_distance(p[k], q[j]) < brute_distance(p[back], q[j])) back = k;
      if (back == i) expected.emplace_back(i, j);
    }
    EXPECT_EQ(mutual_nearest(p, q), expected);
  }
}

TEST(DumpCorrespondences, OneLinePerPair) {
  CorrespondenceSet c;
  c.pairs = {{3, 4}, {5, 6}};
  c.w_f = {0.5, 0.25};
  c.w_sm = {1.0, 0.5};
  c = confidence(c);
  std::ostringstream os;
  dump_correspondences(c, os);
  EXPECT_EQ(os.str(), "3 4 0.5 1 0.5\n5 6 0.25 0.5 0.125\n");
}

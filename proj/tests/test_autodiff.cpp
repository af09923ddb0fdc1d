#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "wsdesc/autodiff.hpp"
#include "wsdesc/gradsuite.hpp"

using namespace wsdesc;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

struct NaiveConv {
  std::vector<double> out, dx, dk, db;
};

// Direct nested-loop cross-correlation and the gradients of sum(c * y).
NaiveConv naive_conv(const std::vector<double>& x, std::size_t ci, std::size_t d, const std::vector<double>& k,
                     std::size_t co, std::size_t ks, const std::vector<double>& b, std::size_t stride, std::size_t pad,
                     const std::vector<double>& c) {
  const std::size_t od = (d + 2 * pad - ks) / stride + 1;
  NaiveConv r;
  r.out.assign(co * od * od * od, 0.0);
  r.dx.assign(x.size(), 0.0);
  r.dk.assign(k.size(), 0.0);
  r.db.assign(co, 0.0);
  auto xi = [&](std::size_t c_, std::size_t z, std::size_t y, std::size_t w) { return ((c_ * d + z) * d + y) * d + w; };
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < od; ++y)
        for (std::size_t w = 0; w < od; ++w) {
          const std::size_t oi = ((o * od + z) * od + y) * od + w;
          double acc = b[o];
          r.db[o] += c[oi];
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t a = 0; a < ks; ++a)
              for (std::size_t bb = 0; bb < ks; ++bb)
                for (std::size_t e = 0; e < ks; ++e) {
                  const long zz = long(z * stride + a) - long(pad);
                  const long yy = long(y * stride + bb) - long(pad);
                  const long ww = long(w * stride + e) - long(pad);
                  if (zz < 0 || yy < 0 || ww < 0 || zz >= long(d) || yy >= long(d) || ww >= long(d)) continue;
                  const std::size_t ki = (((o * ci + i) * ks + a) * ks + bb) * ks + e;
                  const std::size_t xj = xi(i, zz, yy, ww);
                  acc += k[ki] * x[xj];
                  r.dk[ki] += c[oi] * x[xj];
                  r.dx[xj] += c[oi] * k[ki];
                }
          r.out[oi] = acc;
        }
  return r;
}

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), InvalidArgument);
  Tensor<double> t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Conv3d, UnitKernelScalesInput) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 1, 1}, {3.5});
  Tensor<double> k({1, 1, 1, 1, 1}, {2.0});
  const auto y = ad::conv3d(tape, x, k, Tensor<double>(), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 7.0);
}

TEST(Conv3d, OnesKernelOverOnesCube) {
  Tape<double> tape;
  Tensor<double> x({1, 3, 3, 3}, std::vector<double>(27, 1.0));
  Tensor<double> k({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0));
  const auto y = ad::conv3d(tape, x, k, Tensor<double>(), 1, 0);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y[0], 27.0);
}

TEST(Conv3d, OutputExtentFormula) {
  Tape<double> tape;
  for (std::size_t d : {4u, 5u, 7u})
    for (std::size_t s : {1u, 2u, 3u})
      for (std::size_t p : {0u, 1u}) {
        Tensor<double> x({1, d, d, d}, std::vector<double>(d * d * d, 1.0));
        Tensor<double> k({2, 1, 3, 3, 3}, std::vector<double>(54, 1.0));
        const auto y = ad::conv3d(tape, x, k, Tensor<double>(), s, p);
        const std::size_t e = (d + 2 * p - 3) / s + 1;
        EXPECT_EQ(y.shape(), (Shape{2, e, e, e}));
      }
}

TEST(Conv3d, ShapeErrors) {
  Tape<double> tape;
  Tensor<double> x({2, 4, 4, 4}, std::vector<double>(128, 1.0));
  Tensor<double> k({1, 3, 3, 3, 3}, std::vector<double>(81, 1.0));
  EXPECT_THROW(ad::conv3d(tape, x, k, Tensor<double>(), 1, 1), InvalidArgument);
  Tensor<double> small({1, 2, 2, 2}, std::vector<double>(8, 1.0));
  Tensor<double> k1({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0));
  EXPECT_THROW(ad::conv3d(tape, small, k1, Tensor<double>(), 1, 0), InvalidArgument);
}

TEST(Conv3d, MatchesNaiveOracleForwardAndBackward) {
  std::mt19937_64 rng(11);
  const std::size_t ci = 2, co = 4, d = 6, ks = 3;
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      const auto xv = uniform(rng, ci * d * d * d), kv = uniform(rng, co * ci * 27), bv = uniform(rng, co);
      const std::size_t od = (d + 2 * pad - ks) / stride + 1;
      const auto c = uniform(rng, co * od * od * od);
      const auto oracle = naive_conv(xv, ci, d, kv, co, ks, bv, stride, pad, c);
      Tensor<double> x({ci, d, d, d}, xv, true), k({co, ci, 3, 3, 3}, kv, true), b({co}, bv, true);
      Tape<double> tape;
      const auto y = ad::conv3d(tape, x, k, b, stride, pad);
      ASSERT_EQ(y.size(), oracle.out.size());
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], oracle.out[i], 1e-5);
      tape.backward(y, c);
      for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x.grad()[i], oracle.dx[i], 1e-5);
      for (std::size_t i = 0; i < k.size(); ++i) EXPECT_NEAR(k.grad()[i], oracle.dk[i], 1e-5);
      for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(b.grad()[i], oracle.db[i], 1e-5);
    }
}

TEST(Conv3d, FloatAgreesWithDouble) {
  std::mt19937_64 rng(12);
  const auto xv = uniform(rng, 2 * 125), kv = uniform(rng, 3 * 2 * 27);
  Tape<double> td;
  Tape<float> tf;
  const auto yd = ad::conv3d(td, Tensor<double>({2, 5, 5, 5}, xv), Tensor<double>({3, 2, 3, 3, 3}, kv),
                             Tensor<double>(), 1, 1);
  const auto yf = ad::conv3d(tf, Tensor<double>({2, 5, 5, 5}, xv).cast<float>(),
                             Tensor<double>({3, 2, 3, 3, 3}, kv).cast<float>(), Tensor<float>(), 1, 1);
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}

TEST(InstanceNorm, ConstantChannelMapsToZero) {
  Tape<double> tape;
  Tensor<double> x({1, 2, 2, 2}, std::vector<double>(8, 4.2));
  const auto y = ad::instance_norm(tape, x);
  for (auto v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, TwoValueChannel) {
  Tape<double> tape;
  const double eps = 1e-5;
  Tensor<double> x({1, 1, 1, 2}, {-1.0, 1.0});
  const auto y = ad::instance_norm(tape, x, eps);
  EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + eps), 1e-12);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + eps), 1e-12);
}

TEST(InstanceNorm, ChannelsAreIndependent) {
  std::mt19937_64 rng(3);
  auto v = uniform(rng, 2 * 27);
  Tape<double> tape;
  const auto a = ad::instance_norm(tape, Tensor<double>({2, 3, 3, 3}, v));
  for (std::size_t i = 27; i < 54; ++i) v[i] = 5.0 * v[i] + 3.0;
  const auto b = ad::instance_norm(tape, Tensor<double>({2, 3, 3, 3}, v));
  for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(a[i], b[i]);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 27; ++i) mean += b[c * 27 + i];
    EXPECT_NEAR(mean / 27.0, 0.0, 1e-12);
  }
}

TEST(InstanceNorm, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = gradsuite::instance_norm(seed, true);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Relu, ValuesAndSubgradient) {
  Tensor<double> x({3}, {-3.0, 0.0, 3.0}, true);
  Tape<double> tape;
  const auto y = ad::relu(tape, x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 3.0);
  const std::vector<double> ones{1.0, 1.0, 1.0};
  tape.backward(y, ones);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Linear, IdentityWeightIsNoOp) {
  Tensor<double> x({3}, {0.5, -2.0, 7.0});
  Tensor<double> w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<double> b({3}, {0, 0, 0});
  Tape<double> tape;
  const auto y = ad::linear(tape, x, w, b);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(L2Normalize, UnitNormAndZeroVectorError) {
  std::mt19937_64 rng(5);
  Tape<double> tape;
  for (int t = 0; t < 20; ++t) {
    const auto y = ad::l2_normalize(tape, Tensor<double>({7}, uniform(rng, 7)));
    double s = 0.0;
    for (auto v : y.values()) s += v * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-7);
  }
  EXPECT_THROW(ad::l2_normalize(tape, Tensor<double>({4}, std::vector<double>(4, 0.0))), InvalidArgument);
}

TEST(SoftmaxNegDistance, SingleKeyHasWeightOne) {
  Tape<double> tape;
  const auto a = ad::softmax_neg_distance(tape, Tensor<double>({2}, {0.3, -1.0}), Tensor<double>({1, 2}, {5.0, 5.0}));
  ASSERT_EQ(a.size(), 1u);
  EXPECT_DOUBLE_EQ(a[0], 1.0);
}

TEST(SoftmaxNegDistance, EquidistantKeysSplitEvenly) {
  Tape<double> tape;
  const auto a =
      ad::softmax_neg_distance(tape, Tensor<double>({2}, {0.0, 0.0}), Tensor<double>({2, 2}, {1.0, 0.0, 0.0, -1.0}));
  EXPECT_NEAR(a[0], 0.5, 1e-15);
  EXPECT_NEAR(a[1], 0.5, 1e-15);
}

TEST(SoftmaxNegDistance, MatchesDirectEvaluationAndSumsToOne) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + t % 7, n = 5;
    const auto q = uniform(rng, n), k = uniform(rng, m * n);
    Tape<double> tape;
    const auto a = ad::softmax_neg_distance(tape, Tensor<double>({n}, q), Tensor<double>({m, n}, k));
    std::vector<double> e(m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += (q[i] - k[j * n + i]) * (q[i] - k[j * n + i]);
      e[j] = std::exp(-std::sqrt(d));
      z += e[j];
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      EXPECT_NEAR(a[j], e[j] / z, 1e-12);
      EXPECT_GE(a[j], 0.0);
      sum += a[j];
    }
    EXPECT_NEAR(sum, 1.0, 1e-7);
  }
}

TEST(SoftmaxNegDistance, StableForFarKeys) {
  Tape<double> tape;
  const auto a = ad::softmax_neg_distance(tape, Tensor<double>({1}, {0.0}), Tensor<double>({2, 1}, {1000.0, 1001.0}));
  EXPECT_TRUE(std::isfinite(a[0]) && std::isfinite(a[1]));
  EXPECT_NEAR(a[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(SoftmaxNegDistance, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) EXPECT_LT(gradsuite::softmax_neg_distance(seed, true).max_rel_error, 1e-5);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor<double>> p{Tensor<double>({3}, {1.0, -2.0, 0.5})};
  std::vector<std::vector<double>> g{{0.0, 0.0, 0.0}};
  ad::AdamState<double> s;
  for (int i = 0; i < 5; ++i) ad::adam_step<double>(p, g, s);
  EXPECT_EQ(p[0][0], 1.0);
  EXPECT_EQ(p[0][1], -2.0);
  EXPECT_EQ(p[0][2], 0.5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor<double>> p{Tensor<double>::scalar(0.7)};
  std::vector<std::vector<double>> g{{1.0}};
  ad::AdamState<double> s;
  ad::AdamConfig cfg;
  ad::adam_step<double>(p, g, s, cfg);
  EXPECT_NEAR(p[0][0], 0.7 - cfg.lr, 1e-9);
}

TEST(Adam, ConvergesOnQuadraticBowl) {
  std::vector<Tensor<double>> p{Tensor<double>::scalar(1.0)};
  ad::AdamState<double> s;
  ad::AdamConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 200; ++i) {
    std::vector<std::vector<double>> g{{2.0 * p[0][0]}};
    ad::adam_step<double>(p, g, s, cfg);
  }
  EXPECT_LT(std::abs(p[0][0]), 1e-2);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Tensor<double>> p{Tensor<double>({2}, {1.0, 2.0})};
  std::vector<std::vector<double>> g{{1.0}};
  ad::AdamState<double> s;
  EXPECT_THROW(ad::adam_step<double>(p, g, s), InvalidArgument);
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(7);
  Tensor<double> x({6}, uniform(rng, 6)), w({2, 6}, uniform(rng, 12)), b({2}, uniform(rng, 2));
  ad::ScalarFn fn = [](Tape<double>& t, const std::vector<Tensor<double>>& in) {
    return ad::sum(t, ad::linear(t, in[0], in[1], in[2]));
  };
  // No truncation error for a linear map, so a wide step keeps roundoff out of the way.
  ad::GradCheckOptions opts;
  opts.step = 1e-3;
  EXPECT_LT(ad::grad_check(fn, {x, w, b}, opts).max_rel_error, 1e-10);
}

TEST(GradCheck, ConvReluLinearComposition) {
  std::mt19937_64 rng(8);
  Tensor<double> x({1, 4, 4, 4}, uniform(rng, 64)), k({2, 1, 3, 3, 3}, uniform(rng, 54)),
      w({3, 2 * 8}, uniform(rng, 48)), b({3}, uniform(rng, 3));
  const auto c = uniform(rng, 3);
  ad::ScalarFn fn = [&](Tape<double>& t, const std::vector<Tensor<double>>& in) {
    auto y = ad::relu(t, ad::conv3d(t, in[0], in[1], Tensor<double>(), 2, 1));
    y = ad::reshape(t, y, {y.size()});
    return ad::sum(t, ad::mul_const<double>(t, ad::linear(t, y, in[2], in[3]), c));
  };
  EXPECT_LT(ad::grad_check(fn, {x, k, w, b}).max_rel_error, 1e-4);
}

TEST(GradCheck, CatchesCorruptedBackward) {
  // y = 2x with a backward that pretends dy/dx = 3.
  ad::ScalarFn fn = [](Tape<double>& t, const std::vector<Tensor<double>>& in) {
    const auto& x = in[0];
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0 * x[i];
    Tensor<double> y(x.shape(), v, x.requires_grad());
    if (x.requires_grad()) {
      t.record([xn = x.ptr(), yn = y.ptr()] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += 3.0 * yn->grad[i];
      });
    }
    return ad::sum(t, y);
  };
  Tensor<double> x({3}, {0.1, 0.2, 0.3});
  EXPECT_GT(ad::grad_check(fn, {x}).max_rel_error, 1e-2);
}

TEST(Backward, IsBitDeterministic) {
  std::mt19937_64 rng(9);
  const auto xv = uniform(rng, 2 * 216), kv = uniform(rng, 4 * 2 * 27);
  std::vector<double> first;
  for (int run = 0; run < 3; ++run) {
    Tensor<double> x({2, 6, 6, 6}, xv, true), k({4, 2, 3, 3, 3}, kv, true);
    Tape<double> tape;
    auto y = ad::instance_norm(tape, ad::conv3d(tape, x, k, Tensor<double>(), 1, 1));
    y = ad::l2_normalize(tape, ad::reshape(tape, ad::relu(tape, y), {y.size()}));
    tape.backward(ad::sum(tape, y));
    std::vector<double> g(k.grad().begin(), k.grad().end());
    g.insert(g.end(), x.grad().begin(), x.grad().end());
    if (run == 0) first = g;
    else EXPECT_EQ(g, first);
  }
}

TEST(Tape, ReplayingTwiceThrows) {
  Tensor<double> x({1}, {2.0}, true);
  Tape<double> tape;
  const auto y = ad::sum(tape, x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), Error);
}

TEST(GradSuite, AllOperationSuitesPassQuickMode) {
  for (const auto& r : gradsuite::run_all(3, false)) EXPECT_TRUE(r.passed()) << r.name << " " << r.max_rel_error;
}

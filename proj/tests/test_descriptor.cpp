#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_util.hpp"
#include "wsdesc/datagen.hpp"
#include "wsdesc/descriptor.hpp"
#include "wsdesc/lrf.hpp"

using namespace wsdesc;
using wsdesc::testing::random_rigid;
using wsdesc::testing::temp_dir;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.resolution = 8;
  c.channels = {4, 8};
  c.strides = {1, 2};
  return c;
}

VoxelGrid random_grid(std::mt19937_64& rng, int h) {
  VoxelGrid g;
  g.spec.resolution = h;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  g.values.resize(static_cast<std::size_t>(h * h * h));
  for (auto& v : g.values) v = u(rng);
  return g;
}

double distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(InitNetwork, DeterministicPerSeed) {
  const auto a = init_network(5, 32), b = init_network(5, 32), c = init_network(6, 32);
  const auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
  bool differs = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    ASSERT_EQ(ta[i].shape(), tb[i].shape());
    for (std::size_t j = 0; j < ta[i].size(); ++j) {
      EXPECT_EQ(ta[i][j], tb[i][j]);
      differs |= ta[i][j] != tc[i][j];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(InitNetwork, InitialSupportAndHeadWidth) {
  const auto p = init_network(1, 32);
  EXPECT_NEAR(p.support(), 2.0 * 0.3 / std::sqrt(3.0), 1e-6);
  EXPECT_NEAR(p.support(), 0.34641, 1e-5);
  EXPECT_EQ(p.head_weight.dim(0), 32u);
  EXPECT_EQ(p.head_bias.dim(0), 32u);
  EXPECT_EQ(p.head_weight.dim(1), 4u * 4u * 4u * 128u);
  for (const auto& b : p.biases)
    for (auto v : b.values()) EXPECT_EQ(v, 0.0f);
}

TEST(InitNetwork, RejectsTinyDescriptor) { EXPECT_THROW(init_network(1, 1), InvalidArgument); }

TEST(Forward, UnitNormOutput) {
  std::mt19937_64 rng(1);
  const auto p = init_network(2, 32);
  for (int t = 0; t < 3; ++t) {
    const auto d = compute_descriptor(random_grid(rng, 16), p);
    ASSERT_EQ(d.size(), 32u);
    double s = 0.0;
    for (float v : d) s += double(v) * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
  }
}

TEST(Forward, ResolutionMismatchThrows) {
  std::mt19937_64 rng(1);
  const auto p = init_network(2, 32);
  EXPECT_THROW(compute_descriptor(random_grid(rng, 8), p), InvalidArgument);
}

TEST(Forward, IdenticalGridsGiveIdenticalDescriptors) {
  std::mt19937_64 rng(2);
  const auto p = init_network(3, small_config());
  const auto g = random_grid(rng, 8);
  EXPECT_EQ(compute_descriptor(g, p), compute_descriptor(g, p));
}

TEST(Forward, IndependentOfBatchCompanions) {
  std::mt19937_64 rng(3);
  const auto p = init_network(3, small_config());
  const auto g = random_grid(rng, 8), other = random_grid(rng, 8);
  ad::Tape<float> tape;
  const auto frozen = p.alias();
  frozen.set_requires_grad(false);
  (void)forward(tape, grid_tensor<float>(other), frozen);
  const auto shared = forward(tape, grid_tensor<float>(g), frozen);
  const auto alone = compute_descriptor(g, p);
  for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_EQ(shared[i], alone[i]);
}

TEST(Forward, RotationInvariantOnNoiseFreePatches) {
  std::mt19937_64 rng(4);
  const auto cloud = make_procedural_shape(21, 1024, 1.0);
  const auto p = init_network(4, 32);
  const SpatialIndex index(cloud);
  const auto kps = farthest_point_sample(cloud, 12, 0);
  std::size_t checked = 0;
  for (int trial = 0; trial < 3; ++trial) {
    const auto t = random_rigid(rng);
    const auto moved = apply_transform(t, cloud);
    const SpatialIndex moved_index(moved);
    const auto a = extract_descriptors(cloud, index, kps, p);
    const auto b = extract_descriptors(moved, moved_index, kps, p);
    ASSERT_EQ(a.keypoints, b.keypoints);
    for (std::size_t i = 0; i < a.descriptors.size(); ++i) {
      EXPECT_LT(distance(a.descriptors[i], b.descriptors[i]), 1e-3);
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
}

TEST(Forward, LogSupportGradientIsLive) {
  const auto cloud = make_procedural_shape(22, 600, 1.0);
  const SpatialIndex index(cloud);
  const auto cfg = small_config();
  const auto p = init_network<double>(5, cfg);
  const auto frame = estimate_lrf(cloud, index, 0, cfg.r_lrf);
  const auto spec = keypoint_grid_spec(cfg, frame, p.support());
  const auto grid = voxelize(cloud, &index, spec);
  ad::Tape<double> tape;
  const auto x = grid_tensor<double>(grid, true);
  const auto d = forward(tape, x, p);
  std::vector<double> c(d.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sin(1.0 + double(i));
  tape.backward(ad::sum(tape, ad::mul_const<double>(tape, d, c)));
  const std::vector<double> upstream(x.grad().begin(), x.grad().end());
  const double d_support = voxelize_backward(cloud, spec, upstream).d_support;
  EXPECT_GT(std::abs(d_support * p.support()), 1e-8);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = temp_dir("ckpt_roundtrip");
  const auto p = init_network(7, 32);
  save_checkpoint(p, dir / "m.ckpt");
  const auto q = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(q.config.to_json(), p.config.to_json());
  const auto tp = p.tensors(), tq = q.tensors();
  ASSERT_EQ(tp.size(), tq.size());
  for (std::size_t i = 0; i < tp.size(); ++i) {
    ASSERT_EQ(tp[i].shape(), tq[i].shape());
    for (std::size_t j = 0; j < tp[i].size(); ++j) EXPECT_EQ(tp[i][j], tq[i][j]);
  }
  EXPECT_TRUE(std::filesystem::is_regular_file(dir / "m.ckpt"));
}

TEST(Checkpoint, CorruptMagicIsRejected) {
  const auto dir = temp_dir("ckpt_magic");
  save_checkpoint(init_network(7, small_config()), dir / "m.ckpt");
  {
    std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  const auto dir = temp_dir("ckpt_trunc");
  save_checkpoint(init_network(7, small_config()), dir / "m.ckpt");
  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", size - 10);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
}

TEST(Checkpoint, DescriptorDimMismatchNamesTensor) {
  const auto dir = temp_dir("ckpt_dim");
  auto cfg = small_config();
  cfg.descriptor_dim = 16;
  save_checkpoint(init_network(7, cfg), dir / "m.ckpt");
  auto expected = small_config();
  expected.descriptor_dim = 32;
  try {
    load_checkpoint(dir / "m.ckpt", &expected);
    FAIL() << "expected a shape error";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingFileThrows) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/m.ckpt"), Error);
}

TEST(DescriptorExport, RoundTrip) {
  const auto dir = temp_dir("desc_export");
  KeypointDescriptors d;
  d.keypoints = {4, 9, 1};
  d.descriptors = {{0.5f, -0.25f}, {1.0f, 0.0f}, {0.125f, 3.0f}};
  save_descriptors(dir / "d.bin", d);
  const auto e = load_descriptors(dir / "d.bin");
  EXPECT_EQ(e.keypoints, d.keypoints);
  EXPECT_EQ(e.descriptors, d.descriptors);
  EXPECT_EQ(std::filesystem::file_size(dir / "d.bin"), 8u + 4u * 6u);
}

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <utility>
#include <vector>

#include "wsdesc/pointcloud.hpp"

namespace wsdesc {

/// Balanced k-d tree over a point cloud. Immutable after construction; queries
/// return exactly the brute-force result sets.
class SpatialIndex {
 public:
  static constexpr std::size_t kLeafSize = 8;

  explicit SpatialIndex(const PointCloud& cloud) : points_(cloud.points) {
    if (points_.empty()) throw InvalidArgument("cannot build a spatial index over an empty cloud");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  /// All indices with |p - center| <= radius, ascending.
  std::vector<std::size_t> radius_query(const Vec3& center, double radius) const {
    if (!(radius > 0.0)) throw InvalidArgument("radius must be positive");
    std::vector<std::size_t> out;
    radius_recurse(0, center, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// The k nearest indices ordered by (distance, index).
  std::vector<std::size_t> knn_query(const Vec3& center, std::size_t k) const {
    if (k < 1 || k > points_.size()) {
      throw InvalidArgument("k=" + std::to_string(k) + " out of range [1, " +
                            std::to_string(points_.size()) + "]");
    }
    KnnHeap heap;
    knn_recurse(0, center, k, heap);
    std::vector<Candidate> sorted;
    sorted.reserve(k);
    while (!heap.empty()) {
      sorted.push_back(heap.top());
      heap.pop();
    }
    std::reverse(sorted.begin(), sorted.end());
    std::vector<std::size_t> out;
    out.reserve(k);
    for (const auto& c : sorted) out.push_back(c.index);
    return out;
  }

 private:
  struct Node {
    Vec3 lo, hi;
    std::size_t begin = 0, end = 0;
    std::int64_t left = -1, right = -1;
  };

  struct Candidate {
    double dist2;
    std::size_t index;
    bool operator<(const Candidate& o) const {
      return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
    }
  };
  using KnnHeap = std::priority_queue<Candidate>;

  std::size_t build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.hi = -node.lo;
    for (std::size_t i = begin; i < end; ++i) {
      node.lo = node.lo.cwiseMin(points_[order_[i]]);
      node.hi = node.hi.cwiseMax(points_[order_[i]]);
    }
    const std::size_t id = nodes_.size();
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) return id;

    int axis = 0;
    (node.hi - node.lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       const double va = points_[a][axis], vb = points_[b][axis];
                       return va < vb || (va == vb && a < b);
                     });
    const auto left = static_cast<std::int64_t>(build(begin, mid));
    const auto right = static_cast<std::int64_t>(build(mid, end));
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  static double box_dist2(const Node& n, const Vec3& c) {
    const Vec3 d = (n.lo - c).cwiseMax(c - n.hi).cwiseMax(0.0);
    return d.squaredNorm();
  }

  void radius_recurse(std::size_t id, const Vec3& c, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    if (box_dist2(n, c) > r2) return;
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        if ((points_[idx] - c).squaredNorm() <= r2) out.push_back(idx);
      }
      return;
    }
    radius_recurse(static_cast<std::size_t>(n.left), c, r2, out);
    radius_recurse(static_cast<std::size_t>(n.right), c, r2, out);
  }

  void knn_recurse(std::size_t id, const Vec3& c, std::size_t k, KnnHeap& heap) const {
    const Node& n = nodes_[id];
    // Equal distance must still be visited: a lower index can win the tie.
    if (heap.size() == k && box_dist2(n, c) > heap.top().dist2) return;
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const Candidate cand{(points_[order_[i]] - c).squaredNorm(), order_[i]};
        if (heap.size() < k) {
          heap.push(cand);
        } else if (cand < heap.top()) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    const auto l = static_cast<std::size_t>(n.left), r = static_cast<std::size_t>(n.right);
    if (box_dist2(nodes_[l], c) <= box_dist2(nodes_[r], c)) {
      knn_recurse(l, c, k, heap);
      knn_recurse(r, c, k, heap);
    } else {
      knn_recurse(r, c, k, heap);
      knn_recurse(l, c, k, heap);
    }
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

inline SpatialIndex build_spatial_index(const PointCloud& cloud) { return SpatialIndex(cloud); }

/// Greedy farthest point sampling from a fixed start index. Each next index
/// maximizes the distance to the chosen set; ties go to the lower index.
inline std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t k,
                                                           std::size_t start) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) {
    throw InvalidArgument("farthest point sample count " + std::to_string(k) + " out of range [1, " +
                          std::to_string(n) + "]");
  }
  if (start >= n) throw InvalidArgument("farthest point sample start index out of range");
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::size_t current = start;
  for (std::size_t step = 0; step < k; ++step) {
    chosen.push_back(current);
    const Vec3& c = cloud.points[current];
    min_d2[current] = -1.0;
    std::size_t best = n;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] < 0.0) continue;
      min_d2[i] = std::min(min_d2[i], (cloud.points[i] - c).squaredNorm());
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

/// Farthest point sampling with a seed-driven uniform start index.
inline std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t k,
                                                      std::uint64_t seed) {
  if (cloud.empty()) throw InvalidArgument("farthest point sampling on an empty cloud");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
  return farthest_point_sample_from(cloud, k, pick(rng));
}

}  // namespace wsdesc

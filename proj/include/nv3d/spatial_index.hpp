#ifndef NV3D_SPATIAL_INDEX_HPP
#define NV3D_SPATIAL_INDEX_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/vec3.hpp"

namespace nv3d {

struct Neighbor {
  std::size_t index = 0;
  double squared_distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Total order used for neighbor ranking: distance, then index.
inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  if (a.squared_distance != b.squared_distance) return a.squared_distance < b.squared_distance;
  return a.index < b.index;
}

/// Exact kd-tree over a fixed set of 3D positions.
///
/// Results are identical to a brute-force scan computing squared_distance()
/// on the same doubles: pruning only discards subtrees whose every point is
/// strictly farther than the current bound, and ties are resolved by index.
/// An index is immutable after construction and safe for concurrent queries.
class KdTree3 {
 public:
  static constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

  explicit KdTree3(std::span<const Vec3> positions, std::size_t leaf_size = 12)
      : points_(positions.begin(), positions.end()), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    if (points_.empty()) throw Error(ErrorCode::EmptyInput, "cannot index an empty position set");
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (!is_finite(points_[i])) {
        throw Error(ErrorCode::NonFiniteValue, "position " + std::to_string(i) + " is not finite");
      }
    }
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points_.size() / leaf_size_ + 1);
    build_node(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const Vec3& position(std::size_t i) const { return points_[i]; }

  /// k nearest positions ordered by (distance, index). When `exclude_self` is
  /// set, the lowest-indexed position coinciding exactly with the query is
  /// skipped.
  std::vector<Neighbor> knn(const Vec3& query, std::size_t k, bool exclude_self = false) const {
    std::size_t skip = kNoIndex;
    if (exclude_self) {
      const auto nearest = knn_skip(query, 1, kNoIndex);
      if (nearest.front().squared_distance == 0.0) skip = nearest.front().index;
    }
    return knn_skip(query, k, skip);
  }

  /// k nearest neighbours of an indexed position, excluding that position.
  std::vector<Neighbor> knn_of(std::size_t index, std::size_t k) const {
    return knn_skip(points_.at(index), k, index);
  }

  /// Number of positions within the closed ball of the given radius.
  std::size_t count_within_radius(const Vec3& query, double radius) const {
    if (!(radius > 0.0)) throw Error(ErrorCode::InvalidArgument, "radius must be positive");
    const double r2 = radius * radius;
    std::size_t count = 0;
    count_node(0, query, r2, count);
    return count;
  }

 private:
  struct Node {
    Vec3 lo;
    Vec3 hi;
    std::size_t begin;
    std::size_t end;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    bool leaf = true;
  };

  std::vector<Neighbor> knn_skip(const Vec3& query, std::size_t k, std::size_t skip) const {
    const std::size_t available = points_.size() - (skip == kNoIndex ? 0 : 1);
    if (k > available) {
      throw Error(ErrorCode::InsufficientNeighbors,
                  "requested k=" + std::to_string(k) + " but only " + std::to_string(available) + " available");
    }
    std::vector<Neighbor> best;
    best.reserve(k + 1);
    if (k == 0) return best;
    knn_node(0, query, k, skip, best);
    return best;
  }

  std::uint32_t build_node(std::size_t begin, std::size_t end) {
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back({});
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = points_[order_[begin]];
    node.hi = node.lo;
    for (std::size_t i = begin; i < end; ++i) {
      const Vec3& p = points_[order_[i]];
      for (int d = 0; d < 3; ++d) {
        node.lo[d] = std::min(node.lo[d], p[d]);
        node.hi[d] = std::max(node.hi[d], p[d]);
      }
    }
    const bool degenerate = node.lo == node.hi;
    if (end - begin > leaf_size_ && !degenerate) {
      int axis = 0;
      for (int d = 1; d < 3; ++d) {
        if (node.hi[d] - node.lo[d] > node.hi[axis] - node.lo[axis]) axis = d;
      }
      const std::size_t mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                       order_.begin() + static_cast<std::ptrdiff_t>(mid),
                       order_.begin() + static_cast<std::ptrdiff_t>(end),
                       [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
      node.leaf = false;
      node.left = build_node(begin, mid);
      node.right = build_node(mid, end);
    }
    nodes_[id] = node;
    return id;
  }

  static double min_box_distance2(const Node& n, const Vec3& q) {
    double d2 = 0.0;
    for (int d = 0; d < 3; ++d) {
      double diff = 0.0;
      if (q[d] < n.lo[d]) {
        diff = q[d] - n.lo[d];
      } else if (q[d] > n.hi[d]) {
        diff = q[d] - n.hi[d];
      }
      d2 += diff * diff;
    }
    return d2;
  }

  static double max_box_distance2(const Node& n, const Vec3& q) {
    double d2 = 0.0;
    for (int d = 0; d < 3; ++d) {
      const double a = q[d] - n.lo[d];
      const double b = q[d] - n.hi[d];
      const double diff = std::abs(a) > std::abs(b) ? a : b;
      d2 += diff * diff;
    }
    return d2;
  }

  void knn_node(std::uint32_t id, const Vec3& q, std::size_t k, std::size_t skip,
                std::vector<Neighbor>& best) const {
    const Node& node = nodes_[id];
    if (best.size() == k && min_box_distance2(node, q) > best.back().squared_distance) return;
    if (node.leaf) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        if (idx == skip) continue;
        const Neighbor cand{idx, squared_distance(points_[idx], q)};
        if (best.size() == k && !neighbor_less(cand, best.back())) continue;
        best.insert(std::upper_bound(best.begin(), best.end(), cand, neighbor_less), cand);
        if (best.size() > k) best.pop_back();
      }
      return;
    }
    const double dl = min_box_distance2(nodes_[node.left], q);
    const double dr = min_box_distance2(nodes_[node.right], q);
    if (dl <= dr) {
      knn_node(node.left, q, k, skip, best);
      knn_node(node.right, q, k, skip, best);
    } else {
      knn_node(node.right, q, k, skip, best);
      knn_node(node.left, q, k, skip, best);
    }
  }

  void count_node(std::uint32_t id, const Vec3& q, double r2, std::size_t& count) const {
    const Node& node = nodes_[id];
    if (min_box_distance2(node, q) > r2) return;
    // Rounding is monotone, so a box corner within the ball bounds every
    // member's computed distance too.
    if (max_box_distance2(node, q) <= r2) {
      count += node.end - node.begin;
      return;
    }
    if (node.leaf) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        if (squared_distance(points_[order_[i]], q) <= r2) ++count;
      }
      return;
    }
    count_node(node.left, q, r2, count);
    count_node(node.right, q, r2, count);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

}  // namespace nv3d

#endif  // NV3D_SPATIAL_INDEX_HPP

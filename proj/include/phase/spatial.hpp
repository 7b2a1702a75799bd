#pragma once

// Nearest-neighbour mapping in (lat, lon) degree space, plain Euclidean metric.
// Ties resolve to the lowest forcing-point index.

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "phase/errors.hpp"

namespace phase::spatial {

struct Point {
  double lat = 0, lon = 0;
};

inline double dist2(const Point& a, const Point& b) {
  const double dl = a.lat - b.lat, dn = a.lon - b.lon;
  return dl * dl + dn * dn;
}

inline std::size_t brute_nearest(const std::vector<Point>& pts, const Point& q) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = dist2(pts[i], q);
    if (d < bd) bd = d, best = i;
  }
  return best;
}

class KdTree {
 public:
  explicit KdTree(std::vector<Point> pts) : pts_(std::move(pts)) {
    if (pts_.empty()) throw ContractError("kd-tree needs at least one point");
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    nodes_.reserve(pts_.size());
    root_ = build(0, idx_.size(), 0);
  }

  std::size_t size() const { return pts_.size(); }

  std::size_t nearest(const Point& q) const {
    std::size_t best = std::numeric_limits<std::size_t>::max();
    double bd = std::numeric_limits<double>::infinity();
    search(root_, q, best, bd);
    return best;
  }

 private:
  struct Node {
    std::size_t point;
    int axis;
    int left = -1, right = -1;
  };

  static double coord(const Point& p, int axis) { return axis == 0 ? p.lat : p.lon; }

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 2;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(lo), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::size_t a, std::size_t b) {
                       const double ca = coord(pts_[a], axis), cb = coord(pts_[b], axis);
                       return ca < cb || (ca == cb && a < b);
                     });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({idx_[mid], axis});
    const int l = build(lo, mid, depth + 1);
    const int r = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void search(int n, const Point& q, std::size_t& best, double& bd) const {
    if (n < 0) return;
    const Node& node = nodes_[static_cast<std::size_t>(n)];
    const double d = dist2(pts_[node.point], q);
    if (d < bd || (d == bd && node.point < best)) bd = d, best = node.point;
    const double diff = coord(q, node.axis) - coord(pts_[node.point], node.axis);
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    search(near, q, best, bd);
    // `<=` so that equidistant points on the far side still compete on index.
    if (diff * diff <= bd) search(far, q, best, bd);
  }

  std::vector<Point> pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Index of the nearest forcing point for every model point.
inline std::vector<std::size_t> kdtree_map(const std::vector<Point>& model,
                                           const std::vector<Point>& forcing) {
  if (model.empty() || forcing.empty()) throw ContractError("kdtree_map needs non-empty point sets");
  const KdTree tree(forcing);
  std::vector<std::size_t> out(model.size());
  for (std::size_t i = 0; i < model.size(); ++i) out[i] = tree.nearest(model[i]);
  return out;
}

}  // namespace phase::spatial

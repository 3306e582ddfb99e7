#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "iwm/geometry.hpp"
#include "iwm/simworld.hpp"

namespace iwm::testing {

// Exhaustive optimum over all assignments of n points to k labels.
inline double brute_force_sse(const std::vector<Eigen::Vector2d>& pts, int k) {
  const auto n = pts.size();
  std::vector<int> labels(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<Eigen::Vector2d> sums(static_cast<std::size_t>(k), Eigen::Vector2d::Zero());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[static_cast<std::size_t>(labels[i])] += pts[i];
      ++counts[static_cast<std::size_t>(labels[i])];
    }
    bool all_used = true;
    for (int c : counts) all_used = all_used && c > 0;
    if (all_used) {
      double sse = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto l = static_cast<std::size_t>(labels[i]);
        sse += (pts[i] - sums[l] / counts[l]).squaredNorm();
      }
      best = std::min(best, sse);
    }
    std::size_t pos = 0;
    while (pos < n && ++labels[pos] == k) labels[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

// Grid-sampling collision oracle: dense points over each rectangle (edges
// and corners included) tested for containment in the other.
inline bool grid_overlap(const sim::OrientedRect& a, const sim::OrientedRect& b) {
  auto sweep = [](const sim::OrientedRect& r, const sim::OrientedRect& other) {
    const int nl = static_cast<int>(std::ceil(r.length / 0.05)) + 1;
    const int nw = static_cast<int>(std::ceil(r.width / 0.05)) + 1;
    const Eigen::Vector2d ax(std::cos(r.heading), std::sin(r.heading)), ay(-ax.y(), ax.x());
    for (int i = 0; i < nl; ++i) {
      for (int j = 0; j < nw; ++j) {
        const double lx = -r.length / 2 + r.length * i / (nl - 1);
        const double ly = -r.width / 2 + r.width * j / (nw - 1);
        if (other.contains(r.center + lx * ax + ly * ay)) return true;
      }
    }
    return false;
  };
  return sweep(a, b) || sweep(b, a);
}

}  // namespace iwm::testing

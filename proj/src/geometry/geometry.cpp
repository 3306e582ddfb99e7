#include "iwm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Geometry>

namespace iwm::geometry {

void CameraModel::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ValueError("camera focal lengths must be positive");
  const Eigen::Matrix3d& R = cam_to_ego.rotation;
  if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
      std::abs(R.determinant() - 1.0) > 1e-9) {
    throw ValueError("camera rotation must be orthonormal with determinant +1");
  }
}

CameraModel CameraModel::upsampled(Index factor) const {
  CameraModel c = *this;
  const double f = static_cast<double>(factor);
  c.fx *= f;
  c.fy *= f;
  c.cx *= f;
  c.cy *= f;
  c.h *= factor;
  c.w *= factor;
  return c;
}

Eigen::Matrix3d camera_rotation(double yaw, double pitch) {
  // Columns are the camera x (right), y (down), z (forward) axes in ego
  // coordinates for a level camera looking along ego +x.
  Eigen::Matrix3d base;
  base << 0, 0, 1,
         -1, 0, 0,
          0, -1, 0;
  const Eigen::Matrix3d yaw_m = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Matrix3d pitch_m = Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()).toRotationMatrix();
  return yaw_m * pitch_m * base;
}

Eigen::Vector3d pixel_to_ego(double u, double v, double depth, const CameraModel& cam) {
  if (!(depth > 0)) throw ValueError("pixel_to_ego: depth must be positive, got " + std::to_string(depth));
  const Eigen::Vector3d p_cam((u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth);
  return cam.cam_to_ego.apply(p_cam);
}

std::optional<PixelDepth> ego_to_pixel(const Eigen::Vector3d& p, const CameraModel& cam) {
  const Eigen::Vector3d q = cam.cam_to_ego.inverse_apply(p);
  if (!(q.z() > 0)) return std::nullopt;
  return PixelDepth{cam.fx * q.x() / q.z() + cam.cx, cam.fy * q.y() / q.z() + cam.cy, q.z()};
}

std::pair<Eigen::Vector3d, Eigen::Vector3d> pixel_ray(double u, double v, const CameraModel& cam) {
  const Eigen::Vector3d d_cam((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  return {cam.cam_to_ego.translation, (cam.cam_to_ego.rotation * d_cam).normalized()};
}

PositionMap position_maps(std::span<const double> depth, std::span<const CameraModel> rig) {
  if (rig.empty()) throw ValueError("position_maps: empty camera rig");
  const Index h = rig.front().h, w = rig.front().w;
  const auto views = static_cast<Index>(rig.size());
  if (static_cast<Index>(depth.size()) != views * h * w) {
    throw ShapeError("position_maps", Shape{static_cast<Index>(depth.size())}, Shape{views, h, w});
  }
  PositionMap map{views, h, w, {}};
  map.points.resize(views * h * w, 3);
  for (Index m = 0; m < views; ++m) {
    const CameraModel& cam = rig[static_cast<std::size_t>(m)];
    if (cam.h != h || cam.w != w) throw ValueError("position_maps: cameras disagree on feature extents");
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const Index idx = (m * h + i) * w + j;
        const double d = depth[static_cast<std::size_t>(idx)];
        const double u = static_cast<double>(j) + 0.5, v = static_cast<double>(i) + 0.5;
        if (std::isfinite(d) && d > 0) {
          map.points.row(idx) = pixel_to_ego(u, v, d, cam).transpose();
        } else {
          const auto [origin, dir] = pixel_ray(u, v, cam);
          map.points.row(idx) = (origin + kSkyDistance * dir).transpose();
        }
      }
  }
  return map;
}

std::string to_string(Command c) {
  switch (c) {
    case Command::left: return "left";
    case Command::straight: return "straight";
    case Command::right: return "right";
  }
  return "?";
}

Command command_from_string(const std::string& s) {
  for (Command c : kCommands)
    if (to_string(c) == s) return c;
  throw ValueError("unknown command '" + s + "'");
}

Command command_of_endpoint(const Eigen::Vector2d& endpoint, double lateral_threshold) {
  if (endpoint.y() > lateral_threshold) return Command::left;
  if (endpoint.y() < -lateral_threshold) return Command::right;
  return Command::straight;
}

double sum_squared_error(std::span<const Eigen::Vector2d> points, std::span<const int> assignment,
                         std::span<const Eigen::Vector2d> centroids) {
  double sse = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    sse += (points[i] - centroids[static_cast<std::size_t>(assignment[i])]).squaredNorm();
  }
  return sse;
}

namespace {

using Points = std::span<const Eigen::Vector2d>;

std::vector<Eigen::Vector2d> kmeanspp_init(Points pts, int k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Eigen::Vector2d> centers;
  const std::size_t n = pts.size();
  centers.push_back(pts[std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)))]);
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, (pts[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      double target = unit(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        if (target < d2[pick]) break;
        target -= d2[pick];
      }
    }
    centers.push_back(pts[pick]);
  }
  return centers;
}

struct Clustering {
  std::vector<Eigen::Vector2d> centroids;
  std::vector<int> assignment;
  std::vector<double> history;
};

void recompute_means(Points pts, Clustering& c) {
  const auto k = c.centroids.size();
  std::vector<Eigen::Vector2d> sums(k, Eigen::Vector2d::Zero());
  std::vector<int> counts(k, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sums[static_cast<std::size_t>(c.assignment[i])] += pts[i];
    ++counts[static_cast<std::size_t>(c.assignment[i])];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] > 0) {
      c.centroids[j] = sums[j] / counts[j];
      continue;
    }
    // Empty cluster: move it onto the point farthest from its own centroid.
    std::size_t far = 0;
    double far_d = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = (pts[i] - c.centroids[static_cast<std::size_t>(c.assignment[i])]).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    c.centroids[j] = pts[far];
    c.assignment[far] = static_cast<int>(j);
  }
}

void lloyd(Points pts, Clustering& c, int max_iters) {
  const auto k = c.centroids.size();
  c.assignment.assign(pts.size(), -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = (pts[i] - c.centroids[j]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(j);
        }
      }
      if (c.assignment[i] != best) {
        c.assignment[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    recompute_means(pts, c);
    c.history.push_back(sum_squared_error(pts, c.assignment, c.centroids));
  }
  recompute_means(pts, c);
}

// Exchange pass: move a point whenever that strictly lowers the SSE.
void refine_single_moves(Points pts, Clustering& c) {
  const auto k = c.centroids.size();
  std::vector<int> counts(k, 0);
  for (int a : c.assignment) ++counts[static_cast<std::size_t>(a)];
  bool moved = true;
  for (int pass = 0; moved && pass < 1000; ++pass) {
    moved = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto from = static_cast<std::size_t>(c.assignment[i]);
      const double n_from = counts[from];
      if (n_from <= 1) continue;
      const double removal = n_from / (n_from - 1) * (pts[i] - c.centroids[from]).squaredNorm();
      std::size_t best = from;
      double best_gain = 1e-12 * (1.0 + removal);
      for (std::size_t j = 0; j < k; ++j) {
        if (j == from) continue;
        const double n_to = counts[j];
        const double gain = removal - n_to / (n_to + 1) * (pts[i] - c.centroids[j]).squaredNorm();
        if (gain > best_gain) {
          best_gain = gain;
          best = j;
        }
      }
      if (best == from) continue;
      const double n_to = counts[best];
      c.centroids[from] = (c.centroids[from] * n_from - pts[i]) / (n_from - 1);
      c.centroids[best] = (c.centroids[best] * n_to + pts[i]) / (n_to + 1);
      --counts[from];
      ++counts[best];
      c.assignment[i] = static_cast<int>(best);
      moved = true;
    }
  }
  recompute_means(pts, c);
}

}  // namespace

KMeansResult kmeans(std::span<const Eigen::Vector2d> points, int k, std::uint64_t seed, KMeansOptions options) {
  if (k <= 0) throw ValueError("kmeans: cluster count must be positive");
  if (points.size() < static_cast<std::size_t>(k)) {
    throw ValueError("kmeans: " + std::to_string(points.size()) + " points cannot form " + std::to_string(k) + " clusters");
  }
  std::mt19937_64 rng(seed);
  Clustering best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int run = 0; run < std::max(1, options.restarts); ++run) {
    Clustering c{kmeanspp_init(points, k, rng), {}, {}};
    lloyd(points, c, options.max_iters);
    refine_single_moves(points, c);
    const double sse = sum_squared_error(points, c.assignment, c.centroids);
    c.history.push_back(sse);
    if (sse < best_sse) {
      best_sse = sse;
      best = std::move(c);
    }
  }

  std::vector<int> order(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) order[static_cast<std::size_t>(j)] = j;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& pa = best.centroids[static_cast<std::size_t>(a)];
    const auto& pb = best.centroids[static_cast<std::size_t>(b)];
    return pa.x() != pb.x() ? pa.x() < pb.x() : pa.y() < pb.y();
  });
  std::vector<int> rank(static_cast<std::size_t>(k));
  KMeansResult result;
  for (int r = 0; r < k; ++r) {
    rank[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r;
    result.centroids.push_back(best.centroids[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])]);
  }
  for (int a : best.assignment) result.assignment.push_back(rank[static_cast<std::size_t>(a)]);
  result.sse = best_sse;
  result.sse_history = std::move(best.history);
  return result;
}

void sinusoidal_encode(std::span<const double> position, std::span<double> out) {
  const auto P = position.size();
  const std::size_t per = out.size() / P;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < per / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(per));
      out[p * per + 2 * i] = std::sin(position[p] * freq);
      out[p * per + 2 * i + 1] = std::cos(position[p] * freq);
    }
  }
}

}  // namespace iwm::geometry

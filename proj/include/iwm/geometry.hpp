#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "iwm/diffcore/tensor.hpp"

/// Camera geometry, positional encodings and clustering.
///
/// Frame conventions (used everywhere in the library):
///   ego frame:    x forward, y left, z up, origin at the rear-axle center
///   camera frame: z forward (optical axis), x right, y down
///   pixels:       u is the column coordinate, v the row coordinate; the
///                 center of feature cell (row i, col j) is (j + 0.5, i + 0.5)
namespace iwm::geometry {

/// Distance along the pixel ray used for pixels without valid depth (sky).
inline constexpr double kSkyDistance = 200.0;

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Eigen::Vector3d inverse_apply(const Eigen::Vector3d& p) const { return rotation.transpose() * (p - translation); }
};

/// Pinhole camera at feature-map resolution.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Index h = 1, w = 1;
  RigidTransform cam_to_ego;

  /// Throws ValueError unless fx, fy > 0 and the rotation is proper
  /// orthonormal to 1e-9.
  void validate() const;

  /// Same camera sampled `factor` times more densely (image resolution).
  CameraModel upsampled(Index factor) const;
};

/// Rotation taking camera axes to ego axes for a camera yawed by `yaw`
/// (positive = left) and pitched down by `pitch` radians.
Eigen::Matrix3d camera_rotation(double yaw, double pitch);

/// Back-projects pixel (u, v) at optical-axis depth `depth` (meters) into
/// the ego frame. Throws ValueError for depth <= 0.
Eigen::Vector3d pixel_to_ego(double u, double v, double depth, const CameraModel& cam);

struct PixelDepth {
  double u = 0, v = 0, depth = 0;
};

/// Forward pinhole projection; nullopt when the point is not in front of the
/// camera.
std::optional<PixelDepth> ego_to_pixel(const Eigen::Vector3d& p, const CameraModel& cam);

/// Camera center and unit ray direction of pixel (u, v) in the ego frame.
std::pair<Eigen::Vector3d, Eigen::Vector3d> pixel_ray(double u, double v, const CameraModel& cam);

/// Ego-frame 3D position of every feature cell, [M*h*w, 3], view-major then
/// row-major. Depth values that are not finite and positive are replaced by
/// the point kSkyDistance along the pixel ray.
struct PositionMap {
  Index views = 0, h = 0, w = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> points;
};

PositionMap position_maps(std::span<const double> depth, std::span<const CameraModel> rig);

// ---------------------------------------------------------------------------
// Driving commands.

enum class Command : std::uint8_t { left = 0, straight = 1, right = 2 };
inline constexpr std::array<Command, 3> kCommands{Command::left, Command::straight, Command::right};

std::string to_string(Command c);
Command command_from_string(const std::string& s);

/// Command implied by a trajectory endpoint's lateral offset (y > threshold
/// is left, y < -threshold is right).
Command command_of_endpoint(const Eigen::Vector2d& endpoint, double lateral_threshold);

// ---------------------------------------------------------------------------
// Clustering.

struct KMeansResult {
  std::vector<Eigen::Vector2d> centroids;  // lexicographically sorted (x, then y)
  std::vector<int> assignment;             // index into centroids
  double sse = 0;
  std::vector<double> sse_history;  // winning run: after each Lloyd update, then after refinement
};

struct KMeansOptions {
  int max_iters = 100;
  // Independent k-means++ restarts; the lowest-SSE run wins (earliest on ties).
  int restarts = 8;
};

/// Lloyd iterations from seeded k-means++ starts, followed by single-point
/// exchange refinement so that no single reassignment lowers the SSE.
/// An empty cluster is re-seeded at the point farthest from its centroid.
/// Throws ValueError if there are fewer points than clusters.
KMeansResult kmeans(std::span<const Eigen::Vector2d> points, int k, std::uint64_t seed, KMeansOptions options = {});

double sum_squared_error(std::span<const Eigen::Vector2d> points, std::span<const int> assignment,
                         std::span<const Eigen::Vector2d> centroids);

/// Per-command K intention endpoints, [3][K] of (x, y) meters in the ego frame.
struct IntentionPointSet {
  Index k = 0;
  std::vector<Eigen::Vector2d> points;  // command-major

  const Eigen::Vector2d& at(Command c, Index i) const {
    return points[static_cast<std::size_t>(static_cast<Index>(c) * k + i)];
  }
  std::span<const Eigen::Vector2d> of(Command c) const {
    return std::span<const Eigen::Vector2d>(points).subspan(static_cast<std::size_t>(static_cast<Index>(c) * k),
                                                            static_cast<std::size_t>(k));
  }
};

// ---------------------------------------------------------------------------
// Positional encoding.

/// Fills `out` (length D) with the encoding of one P-dimensional position:
/// coordinate p occupies [p*D/P, (p+1)*D/P) as interleaved sin/cos pairs at
/// frequencies 10000^(-2i/(D/P)).
void sinusoidal_encode(std::span<const double> position, std::span<double> out);

/// Parameter-free encoding of positions[..., P] into [..., D]. D must be
/// even and divisible by 2P. The result carries no gradient.
template <typename S>
Tensor<S> sinusoidal_pe(const Tensor<S>& positions, Index dim) {
  const Index P = positions.cols();
  if (dim <= 0 || dim % (2 * P) != 0) {
    throw ShapeError("sinusoidal_pe", "dimension " + std::to_string(dim) + " not divisible by 2*" + std::to_string(P));
  }
  Shape shape = positions.shape();
  shape.back() = dim;
  Vec<S> out(numel(shape));
  std::vector<double> pos(static_cast<std::size_t>(P)), enc(static_cast<std::size_t>(dim));
  for (Index r = 0; r < positions.rows(); ++r) {
    for (Index p = 0; p < P; ++p) pos[static_cast<std::size_t>(p)] = static_cast<double>(positions[r * P + p]);
    sinusoidal_encode(pos, enc);
    for (Index d = 0; d < dim; ++d) out[r * dim + d] = static_cast<S>(enc[static_cast<std::size_t>(d)]);
  }
  return Tensor<S>(std::move(shape), std::move(out));
}

}  // namespace iwm::geometry

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "iwm/geometry.hpp"

/// Synthetic multi-view driving world with exact depth and semantics.
namespace iwm::sim {

using geometry::CameraModel;
using geometry::Command;

enum class SemanticClass : std::uint8_t { road = 0, vehicle = 1, pedestrian = 2, barrier = 3, background = 4 };
inline constexpr Index kNumClasses = 5;
inline constexpr std::uint8_t kSkyLabel = 255;

/// Ground hits farther than this (optical-axis depth, meters) render as sky.
inline constexpr double kMaxRenderDepth = 150.0;

struct Pose2 {
  double x = 0, y = 0, yaw = 0;

  Eigen::Vector2d to_world(const Eigen::Vector2d& local) const;
  Eigen::Vector2d to_local(const Eigen::Vector2d& world) const;
};

struct OrientedRect {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double length = 1, width = 1;  // along / across the heading
  double heading = 0;

  bool contains(const Eigen::Vector2d& p) const;
};

/// Separating-axis test; touching edges count as overlap.
bool overlaps(const OrientedRect& a, const OrientedRect& b);

struct Obstacle {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();  // world, at time 0
  double length = 1, width = 1, height = 1;
  double heading = 0;
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();  // m/s, world
  SemanticClass cls = SemanticClass::vehicle;

  OrientedRect footprint_at(double time) const;
};

/// Constant-curvature corridor whose centerline starts at the world origin
/// heading along +x (the ego path).
struct Road {
  double curvature = 0;  // 1/m, positive turns left
  double width = 7.0;

  double lateral_distance(const Eigen::Vector2d& p) const;
};

struct Scene {
  std::vector<Obstacle> obstacles;
  Road road;
  double world_radius = 500;
};

/// Ego motion along the road centerline: constant speed, optionally braking
/// at a constant rate from `brake_time` until standstill.
struct EgoScript {
  double speed = 5;
  double curvature = 0;
  std::optional<double> brake_time;
  double deceleration = 2.0;

  double distance_at(double time) const;
  Pose2 pose_at(double time) const;
};

struct FrameObservation {
  Index t = 0;
  Index views = 0, image_h = 0, image_w = 0, channels = 3;
  Index h = 0, w = 0;
  std::vector<std::uint8_t> images;     // [views, image_h, image_w, channels]
  std::vector<double> depth;            // [views, h, w], meters; 0 where sky
  std::vector<std::uint8_t> semantics;  // [views, h, w]; kSkyLabel where sky
  Command command = Command::straight;
  Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> expert;  // [S, 2] ego frame
  Pose2 ego_pose;
};

struct Episode {
  std::string id;
  std::uint64_t seed = 0;
  double dt = 0.5;
  Command maneuver = Command::straight;
  Scene scene;
  EgoScript script;
  std::vector<CameraModel> rig;
  std::vector<FrameObservation> frames;
};

struct RigConfig {
  Index views = 3;
  Index image_h = 64, image_w = 64;
  Index feat_h = 8, feat_w = 8;
  double side_yaw_deg = 55.0;
  double pitch_deg = 10.0;
  double hfov_deg = 70.0;
  double mount_x = 1.5, mount_z = 1.6;
};

struct GenConfig {
  double dt = 0.5;
  int frames = 40;
  int waypoints = 6;
  int min_obstacles = 2, max_obstacles = 6;
  double road_width = 7.0;
  double ego_length = 4.0, ego_width = 1.85;
  double min_speed = 2.0, max_speed = 6.0;
  double max_yaw_rate = 0.35;
  double lateral_threshold = 1.5;
  double slowdown_probability = 0.2;
  std::array<double, 3> maneuver_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // left, straight, right
  RigConfig rig;
  // When set, every episode drives exactly to one intention endpoint of its
  // command at the waypoint horizon (constant speed, no slowdown).
  std::optional<geometry::IntentionPointSet> align_to;

  void validate() const;
};

std::vector<CameraModel> make_rig(const RigConfig& rig);

/// Deterministic in (config, seed). Throws ValueError on infeasible configs.
Episode generate_episode(const GenConfig& config, std::uint64_t seed);

/// Seeds for a corpus of `count` episodes derived from one corpus seed.
std::vector<std::uint64_t> episode_seeds(std::uint64_t corpus_seed, int count);

struct RenderOutput {
  std::vector<std::uint8_t> images;
  std::vector<double> depth;
  std::vector<std::uint8_t> semantics;
  // Ego-frame hit point per feature cell, [views*h*w, 3]; NaN where sky.
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> hits;
};

/// Casts one ray per pixel against the ground plane and obstacle boxes.
RenderOutput render_frame(const Scene& scene, double time, const Pose2& ego, std::span<const CameraModel> rig,
                          Index image_h, Index image_w);

/// Ego footprint used for collision checks, centered on the given pose.
OrientedRect ego_footprint(const Eigen::Vector2d& center, double heading, double length = 4.0, double width = 1.85);

// ---------------------------------------------------------------------------
// Prior provider: per-pixel depth and semantics consumed by the encoders.

class PriorProvider {
 public:
  virtual ~PriorProvider() = default;
  virtual std::vector<double> depth_of(const FrameObservation& frame) const = 0;
  virtual std::vector<std::uint8_t> semantics_of(const FrameObservation& frame) const = 0;
};

/// Returns the simulator's exact ground truth.
class SimulatorPriors final : public PriorProvider {
 public:
  std::vector<double> depth_of(const FrameObservation& frame) const override { return frame.depth; }
  std::vector<std::uint8_t> semantics_of(const FrameObservation& frame) const override { return frame.semantics; }
};

// ---------------------------------------------------------------------------
// Corpus I/O.
//
//   <root>/index.json                 episode list + generator config
//   <root>/<id>/episode.json          scene, ego script, rig
//   <root>/<id>/frame_<t:04>.bin      one FrameObservation
//
// Frame record (little-endian):
//   "IWMFRAME" u32 version u32 t u8 command f64 pose[3]
//   4 arrays { u8 dtype u32 rank u32 dims[rank] raw }: images(u8) depth(f64)
//   semantics(u8) expert(f64)
//   "IWMFEND\0"

inline constexpr std::uint32_t kFrameFormatVersion = 1;

struct CorpusEntry {
  std::string id;
  std::uint64_t seed = 0;
  Command maneuver = Command::straight;
  int frames = 0;
};

struct CorpusIndex {
  std::uint64_t corpus_seed = 0;
  GenConfig config;
  std::vector<CorpusEntry> episodes;

  std::map<Command, int> maneuver_counts() const;
};

void write_frame(const std::filesystem::path& path, const FrameObservation& frame);
FrameObservation read_frame(const std::filesystem::path& path);

void write_episode(const std::filesystem::path& dir, const Episode& episode);
Episode read_episode(const std::filesystem::path& dir);

/// Generates `count` episodes and writes them with their index.
CorpusIndex write_corpus(const std::filesystem::path& root, const GenConfig& config, std::uint64_t corpus_seed, int count);
CorpusIndex read_index(const std::filesystem::path& root);
std::vector<Episode> read_corpus(const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Open-loop metrics.

inline constexpr std::array<double, 3> kHorizonsSeconds{1.0, 2.0, 3.0};

struct SampleRecord {
  std::string episode;
  Index frame = 0;
  std::array<double, 3> l2{};
  std::array<bool, 3> collision{};
};

struct MetricsReport {
  double l2_1s = 0, l2_2s = 0, l2_3s = 0, l2_avg = 0;
  double cr_1s = 0, cr_2s = 0, cr_3s = 0, cr_avg = 0;  // percent
  Index samples = 0;
  Index skipped = 0;
  std::vector<SampleRecord> records;

  /// Recomputes the aggregate fields from `records`.
  void aggregate();
  std::string to_json() const;
};

using Trajectory = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Scores predictions (frame index -> [S, 2] ego-frame trajectory). Frames
/// whose horizon runs past the episode are skipped and counted.
MetricsReport evaluate_plan(const Episode& episode, const std::map<Index, Trajectory>& predictions);

/// Per-sample scoring helper; appends to `report.records` (call aggregate()).
void score_sample(const Episode& episode, Index frame, const Trajectory& prediction, MetricsReport& report);

/// Merges per-episode reports.
MetricsReport merge_reports(const std::vector<MetricsReport>& reports);

/// Heading of waypoint i from the forward difference, reusing the previous
/// segment for the last waypoint.
double waypoint_heading(const Trajectory& traj, Index i);

}  // namespace iwm::sim

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include "iwm/simworld.hpp"

namespace iwm::sim {

namespace {

Eigen::Matrix2d rot2(double a) {
  Eigen::Matrix2d r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return r;
}

std::array<Eigen::Vector2d, 4> corners(const OrientedRect& r) {
  const Eigen::Matrix2d R = rot2(r.heading);
  const double hl = r.length / 2, hw = r.width / 2;
  return {r.center + R * Eigen::Vector2d(hl, hw), r.center + R * Eigen::Vector2d(-hl, hw),
          r.center + R * Eigen::Vector2d(-hl, -hw), r.center + R * Eigen::Vector2d(hl, -hw)};
}

bool separated_along(const Eigen::Vector2d& axis, const std::array<Eigen::Vector2d, 4>& a,
                     const std::array<Eigen::Vector2d, 4>& b) {
  double amin = std::numeric_limits<double>::infinity(), amax = -amin;
  double bmin = amin, bmax = -amin;
  for (const auto& p : a) {
    const double d = axis.dot(p);
    amin = std::min(amin, d);
    amax = std::max(amax, d);
  }
  for (const auto& p : b) {
    const double d = axis.dot(p);
    bmin = std::min(bmin, d);
    bmax = std::max(bmax, d);
  }
  return amax < bmin || bmax < amin;
}

// Point on the road centerline (and heading) at arc length s.
Pose2 path_pose(double curvature, double s) {
  if (std::abs(curvature) < 1e-12) return {s, 0.0, 0.0};
  return {std::sin(curvature * s) / curvature, (1 - std::cos(curvature * s)) / curvature, curvature * s};
}

struct Rgb {
  double r, g, b;
};

Rgb class_color(std::uint8_t cls) {
  switch (cls) {
    case 0: return {95, 95, 105};
    case 1: return {205, 45, 45};
    case 2: return {245, 205, 50};
    case 3: return {245, 125, 25};
    case 4: return {70, 150, 70};
    default: return {140, 190, 235};
  }
}

struct Hit {
  double depth = 0;  // 0 = sky
  std::uint8_t cls = kSkyLabel;
  bool lane_edge = false;
};

// Ray with world origin `o` and direction `d` scaled so that the parameter
// equals optical-axis depth.
Hit cast(const Scene& scene, double time, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  Hit best;
  double t_best = std::numeric_limits<double>::infinity();
  if (d.z() < -1e-12) {
    const double t = -o.z() / d.z();
    if (t > 0) {
      t_best = t;
      const Eigen::Vector2d p = (o + t * d).head<2>();
      const double lat = scene.road.lateral_distance(p);
      const double half = scene.road.width / 2;
      best.cls = static_cast<std::uint8_t>(lat <= half ? SemanticClass::road : SemanticClass::background);
      best.lane_edge = std::abs(lat - half) < 0.15;
    }
  }
  for (const auto& ob : scene.obstacles) {
    const OrientedRect fp = ob.footprint_at(time);
    const Eigen::Matrix2d Rt = rot2(-fp.heading);
    const Eigen::Vector2d ol = Rt * (o.head<2>() - fp.center);
    const Eigen::Vector2d dl = Rt * d.head<2>();
    const double lo[3] = {-fp.length / 2, -fp.width / 2, 0.0};
    const double hi[3] = {fp.length / 2, fp.width / 2, ob.height};
    const double oo[3] = {ol.x(), ol.y(), o.z()};
    const double dd[3] = {dl.x(), dl.y(), d.z()};
    double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(dd[a]) < 1e-15) {
        if (oo[a] < lo[a] || oo[a] > hi[a]) miss = true;
        continue;
      }
      double t1 = (lo[a] - oo[a]) / dd[a], t2 = (hi[a] - oo[a]) / dd[a];
      if (t1 > t2) std::swap(t1, t2);
      tmin = std::max(tmin, t1);
      tmax = std::min(tmax, t2);
      if (tmin > tmax) miss = true;
    }
    if (miss || tmin <= 1e-9 || tmin >= t_best) continue;
    t_best = tmin;
    best.cls = static_cast<std::uint8_t>(ob.cls);
    best.lane_edge = false;
  }
  if (!std::isfinite(t_best) || t_best > kMaxRenderDepth) return Hit{};
  best.depth = t_best;
  return best;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Eigen::Vector2d Pose2::to_world(const Eigen::Vector2d& local) const { return rot2(yaw) * local + Eigen::Vector2d(x, y); }

Eigen::Vector2d Pose2::to_local(const Eigen::Vector2d& world) const {
  return rot2(-yaw) * (world - Eigen::Vector2d(x, y));
}

bool OrientedRect::contains(const Eigen::Vector2d& p) const {
  const Eigen::Vector2d l = rot2(-heading) * (p - center);
  return std::abs(l.x()) <= length / 2 && std::abs(l.y()) <= width / 2;
}

bool overlaps(const OrientedRect& a, const OrientedRect& b) {
  const auto ca = corners(a), cb = corners(b);
  const Eigen::Vector2d axes[4] = {{std::cos(a.heading), std::sin(a.heading)},
                                   {-std::sin(a.heading), std::cos(a.heading)},
                                   {std::cos(b.heading), std::sin(b.heading)},
                                   {-std::sin(b.heading), std::cos(b.heading)}};
  for (const auto& axis : axes) {
    if (separated_along(axis, ca, cb)) return false;
  }
  return true;
}

OrientedRect Obstacle::footprint_at(double time) const { return {center + velocity * time, length, width, heading}; }

double Road::lateral_distance(const Eigen::Vector2d& p) const {
  if (std::abs(curvature) < 1e-12) return std::abs(p.y());
  const Eigen::Vector2d c(0, 1 / curvature);
  return std::abs((p - c).norm() - 1 / std::abs(curvature));
}

double EgoScript::distance_at(double time) const {
  if (!brake_time || time <= *brake_time) return speed * time;
  const double tb = *brake_time;
  const double tau = std::min(time - tb, speed / deceleration);
  return speed * tb + speed * tau - 0.5 * deceleration * tau * tau;
}

Pose2 EgoScript::pose_at(double time) const { return path_pose(curvature, distance_at(time)); }

OrientedRect ego_footprint(const Eigen::Vector2d& center, double heading, double length, double width) {
  return {center, length, width, heading};
}

void GenConfig::validate() const {
  if (!(dt > 0)) throw ValueError("tick dt must be positive");
  if (waypoints < 2) throw ValueError("need at least two expert waypoints");
  if (frames < waypoints + 4) throw ValueError("episode too short for the expert horizon plus a future frame");
  if (min_obstacles < 0 || max_obstacles < min_obstacles) throw ValueError("bad obstacle count range");
  if (!(road_width > ego_width)) throw ValueError("road narrower than the ego vehicle");
  if (!(min_speed > 0) || max_speed < min_speed) throw ValueError("bad speed range");
  if (!(max_yaw_rate > 0)) throw ValueError("max yaw rate must be positive");
  double total = 0;
  for (double m : maneuver_mix) {
    if (m < 0) throw ValueError("maneuver mix weights must be nonnegative");
    total += m;
  }
  if (!(total > 0)) throw ValueError("maneuver mix is all zero");
  if (slowdown_probability < 0 || slowdown_probability > 1) throw ValueError("slowdown probability outside [0, 1]");
  if (rig.views < 1 || rig.feat_h < 1 || rig.feat_w < 1) throw ValueError("bad rig dimensions");
  if (rig.image_h % rig.feat_h != 0 || rig.image_w % rig.feat_w != 0 ||
      rig.image_h / rig.feat_h != rig.image_w / rig.feat_w) {
    throw ValueError("image size must be the same integer multiple of the feature size on both axes");
  }
  if (align_to && align_to->k < 1) throw ValueError("aligned generation needs intention points");
}

std::vector<CameraModel> make_rig(const RigConfig& rig) {
  const double deg = std::numbers::pi / 180;
  std::vector<double> yaws{0.0};
  if (rig.views >= 2) yaws.push_back(rig.side_yaw_deg * deg);
  if (rig.views >= 3) yaws.push_back(-rig.side_yaw_deg * deg);
  for (Index m = 3; m < rig.views; ++m) yaws.push_back(std::numbers::pi * (m % 2 ? 1 : -1) * (0.5 + 0.1 * m));
  std::vector<CameraModel> out;
  for (Index m = 0; m < rig.views; ++m) {
    CameraModel cam;
    cam.w = rig.feat_w;
    cam.h = rig.feat_h;
    cam.fx = cam.fy = (static_cast<double>(rig.feat_w) / 2) / std::tan(rig.hfov_deg * deg / 2);
    cam.cx = static_cast<double>(rig.feat_w) / 2;
    cam.cy = static_cast<double>(rig.feat_h) / 2;
    cam.cam_to_ego.rotation = geometry::camera_rotation(yaws[static_cast<std::size_t>(m)], rig.pitch_deg * deg);
    cam.cam_to_ego.translation = Eigen::Vector3d(rig.mount_x, 0, rig.mount_z);
    out.push_back(cam);
  }
  return out;
}

RenderOutput render_frame(const Scene& scene, double time, const Pose2& ego, std::span<const CameraModel> rig,
                          Index image_h, Index image_w) {
  RenderOutput out;
  if (rig.empty()) return out;
  const Index h = rig[0].h, w = rig[0].w, M = static_cast<Index>(rig.size());
  const Index factor = image_h / h;
  out.depth.assign(static_cast<std::size_t>(M * h * w), 0.0);
  out.semantics.assign(static_cast<std::size_t>(M * h * w), kSkyLabel);
  out.images.assign(static_cast<std::size_t>(M * image_h * image_w * 3), 0);
  out.hits.setConstant(M * h * w, 3, std::numeric_limits<double>::quiet_NaN());

  const Eigen::Matrix2d yaw = rot2(ego.yaw);
  auto world_ray = [&](const CameraModel& cam, double u, double v) {
    const Eigen::Vector3d dc((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    const Eigen::Vector3d de = cam.cam_to_ego.rotation * dc;
    const Eigen::Vector3d oe = cam.cam_to_ego.translation;
    Eigen::Vector3d o, d;
    o << ego.to_world(oe.head<2>()), oe.z();
    d << yaw * de.head<2>(), de.z();
    return std::pair{o, d};
  };

  for (Index m = 0; m < M; ++m) {
    const CameraModel& cam = rig[static_cast<std::size_t>(m)];
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const auto [o, d] = world_ray(cam, j + 0.5, i + 0.5);
        const Hit hit = cast(scene, time, o, d);
        const Index k = (m * h + i) * w + j;
        out.semantics[static_cast<std::size_t>(k)] = hit.cls;
        if (hit.depth > 0) {
          out.depth[static_cast<std::size_t>(k)] = hit.depth;
          const Eigen::Vector3d dc((j + 0.5 - cam.cx) / cam.fx, (i + 0.5 - cam.cy) / cam.fy, 1.0);
          out.hits.row(k) = (cam.cam_to_ego.rotation * (hit.depth * dc) + cam.cam_to_ego.translation).transpose();
        }
      }
    }
    const CameraModel big = cam.upsampled(factor);
    for (Index i = 0; i < image_h; ++i) {
      for (Index j = 0; j < image_w; ++j) {
        const auto [o, d] = world_ray(big, j + 0.5, i + 0.5);
        const Hit hit = cast(scene, time, o, d);
        Rgb c = hit.lane_edge ? Rgb{235, 235, 235} : class_color(hit.cls);
        const double shade = hit.depth > 0 ? 0.35 + 0.65 * std::exp(-hit.depth / 40.0) : 1.0;
        const std::size_t px = static_cast<std::size_t>(((m * image_h + i) * image_w + j) * 3);
        out.images[px] = static_cast<std::uint8_t>(std::lround(c.r * shade));
        out.images[px + 1] = static_cast<std::uint8_t>(std::lround(c.g * shade));
        out.images[px + 2] = static_cast<std::uint8_t>(std::lround(c.b * shade));
      }
    }
  }
  return out;
}

double waypoint_heading(const Trajectory& traj, Index i) {
  const Index S = traj.rows();
  if (S < 2) return 0.0;
  // Forward difference; the last waypoint reuses the previous segment. A
  // standstill segment falls back to the one before it, then to heading 0.
  for (Index a = std::min(i, S - 2); a >= 0; --a) {
    const Eigen::Vector2d seg = traj.row(a + 1) - traj.row(a);
    if (seg.norm() > 1e-6) return std::atan2(seg.y(), seg.x());
  }
  return 0.0;
}

namespace {

constexpr double kClearance = 0.8;  // extra margin around the scripted ego footprint

Trajectory expert_at(const EgoScript& script, double dt, Index t, int S) {
  const Pose2 now = script.pose_at(t * dt);
  Trajectory traj(S, 2);
  for (int i = 0; i < S; ++i) {
    const Pose2 p = script.pose_at((t + i + 1) * dt);
    traj.row(i) = now.to_local({p.x, p.y}).transpose();
  }
  return traj;
}

// True when the obstacle touches the ego during the episode, either the
// inflated true footprint at half-tick resolution or the rectangle used by
// evaluate_plan at any expert waypoint.
bool conflicts(const Obstacle& ob, const EgoScript& script, const GenConfig& cfg) {
  const int last = cfg.frames - 1 + cfg.waypoints;
  for (int k = 0; k <= 2 * last; ++k) {
    const double time = k * cfg.dt / 2;
    const Pose2 p = script.pose_at(time);
    const OrientedRect ego =
        ego_footprint({p.x, p.y}, p.yaw, cfg.ego_length + 2 * kClearance, cfg.ego_width + 2 * kClearance);
    if (overlaps(ego, ob.footprint_at(time))) return true;
  }
  for (int t = 0; t < cfg.frames; ++t) {
    const Pose2 now = script.pose_at(t * cfg.dt);
    const Trajectory traj = expert_at(script, cfg.dt, t, cfg.waypoints);
    for (Index i = 0; i < traj.rows(); ++i) {
      const Eigen::Vector2d c = now.to_world(traj.row(i).transpose());
      const OrientedRect ego = ego_footprint(c, now.yaw + waypoint_heading(traj, i), cfg.ego_length, cfg.ego_width);
      if (overlaps(ego, ob.footprint_at((t + i + 1) * cfg.dt))) return true;
    }
  }
  return false;
}

Command pick_command(const GenConfig& cfg, std::mt19937_64& rng) {
  std::discrete_distribution<int> mix(cfg.maneuver_mix.begin(), cfg.maneuver_mix.end());
  return geometry::kCommands[static_cast<std::size_t>(mix(rng))];
}

}  // namespace

std::vector<std::uint64_t> episode_seeds(std::uint64_t corpus_seed, int count) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < count; ++i) seeds.push_back(splitmix64(corpus_seed * 0x100000001b3ULL + static_cast<std::uint64_t>(i)));
  return seeds;
}

Episode generate_episode(const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };

  Episode ep;
  ep.id = "seed_" + std::to_string(seed);
  ep.seed = seed;
  ep.dt = cfg.dt;
  ep.maneuver = pick_command(cfg, rng);
  const double horizon = cfg.waypoints * cfg.dt;

  EgoScript& script = ep.script;
  if (cfg.align_to) {
    const auto& set = *cfg.align_to;
    const Index idx = std::uniform_int_distribution<Index>(0, set.k - 1)(rng);
    const Eigen::Vector2d e = set.at(ep.maneuver, idx);
    if (std::abs(e.y()) < 1e-9) {
      script.curvature = 0;
      script.speed = e.x() / horizon;
    } else {
      // Circular arc from the origin, tangent to +x, through the endpoint.
      const double theta = 2 * std::atan2(e.y(), e.x());
      script.curvature = 2 * e.y() / e.squaredNorm();
      script.speed = theta / script.curvature / horizon;
    }
    if (!(script.speed > 0)) throw ValueError("intention endpoint is not reachable driving forward");
  } else {
    script.speed = uni(cfg.min_speed, cfg.max_speed);
    if (ep.maneuver != Command::straight) {
      // Yaw rate large enough that the horizon endpoint clears the lateral
      // threshold that defines the command.
      const double sign = ep.maneuver == Command::left ? 1.0 : -1.0;
      double omega = cfg.max_yaw_rate;
      for (int tries = 0; tries < 64; ++tries) {
        const double cand = uni(0.1 * cfg.max_yaw_rate, cfg.max_yaw_rate);
        const double kappa = cand / script.speed;
        if ((1 - std::cos(kappa * script.speed * horizon)) / kappa > cfg.lateral_threshold + 0.25) {
          omega = cand;
          break;
        }
      }
      script.curvature = sign * omega / script.speed;
    }
  }
  ep.scene.road = Road{script.curvature, cfg.road_width};

  const double episode_time = (cfg.frames - 1) * cfg.dt;
  if (!cfg.align_to && ep.maneuver == Command::straight && uni(0, 1) < cfg.slowdown_probability) {
    // Barrier across the lane; the ego brakes to a stop in front of it.
    script.deceleration = uni(1.5, 3.0);
    script.brake_time = uni(0.2, 0.6) * episode_time;
    const double stop = script.speed * *script.brake_time + script.speed * script.speed / (2 * script.deceleration);
    Obstacle barrier;
    barrier.cls = SemanticClass::barrier;
    barrier.length = 0.6;
    barrier.width = 3.5;
    barrier.height = 1.0;
    barrier.center = {stop + cfg.ego_length / 2 + 3.0 + barrier.length / 2, 0.0};
    ep.scene.obstacles.push_back(barrier);
  }

  const double s_end = script.distance_at(episode_time + horizon);
  const int count = std::uniform_int_distribution<int>(cfg.min_obstacles, cfg.max_obstacles)(rng);
  for (int n = 0; n < count; ++n) {
    for (int tries = 0; tries < 100; ++tries) {
      Obstacle ob;
      const double u = uni(0, 1);
      double lat_lo = 2.5, lat_hi = 6.5;
      if (u < 0.5) {
        ob.cls = SemanticClass::vehicle;
        ob.length = uni(3.8, 4.8);
        ob.width = uni(1.7, 2.0);
        ob.height = 1.5;
      } else if (u < 0.75) {
        ob.cls = SemanticClass::pedestrian;
        ob.length = ob.width = 0.5;
        ob.height = 1.75;
        lat_lo = 3.0;
        lat_hi = 7.0;
      } else {
        ob.cls = SemanticClass::barrier;
        ob.length = uni(1.5, 3.0);
        ob.width = 0.4;
        ob.height = 1.0;
        lat_hi = 5.0;
      }
      const double s = uni(5.0, s_end + 25.0);
      const double side = uni(0, 1) < 0.5 ? -1.0 : 1.0;
      const Pose2 base = path_pose(script.curvature, s);
      const Eigen::Vector2d normal(-std::sin(base.yaw), std::cos(base.yaw));
      ob.center = Eigen::Vector2d(base.x, base.y) + side * uni(lat_lo, lat_hi) * normal;
      ob.heading = base.yaw;
      if (ob.cls == SemanticClass::vehicle) {
        if (uni(0, 1) < 0.5) ob.heading += std::numbers::pi;
        if (uni(0, 1) < 0.4) ob.velocity = uni(1.0, 5.0) * Eigen::Vector2d(std::cos(ob.heading), std::sin(ob.heading));
      } else if (ob.cls == SemanticClass::pedestrian) {
        ob.heading = uni(-std::numbers::pi, std::numbers::pi);
        if (uni(0, 1) < 0.5) ob.velocity = uni(0.3, 1.2) * Eigen::Vector2d(std::cos(ob.heading), std::sin(ob.heading));
      }
      bool ok = !conflicts(ob, script, cfg);
      for (const auto& other : ep.scene.obstacles) {
        if (ok && overlaps(ob.footprint_at(0), other.footprint_at(0))) ok = false;
      }
      if (ok) {
        ep.scene.obstacles.push_back(ob);
        break;
      }
    }
  }
  ep.scene.world_radius = s_end + 60.0;

  ep.rig = make_rig(cfg.rig);
  for (const auto& ob : ep.scene.obstacles) {
    if (conflicts(ob, script, cfg)) throw std::logic_error("scripted expert collides with an obstacle");
  }
  for (int t = 0; t < cfg.frames; ++t) {
    FrameObservation f;
    f.t = t;
    f.ego_pose = script.pose_at(t * cfg.dt);
    RenderOutput r = render_frame(ep.scene, t * cfg.dt, f.ego_pose, ep.rig, cfg.rig.image_h, cfg.rig.image_w);
    f.views = cfg.rig.views;
    f.image_h = cfg.rig.image_h;
    f.image_w = cfg.rig.image_w;
    f.channels = 3;
    f.h = cfg.rig.feat_h;
    f.w = cfg.rig.feat_w;
    f.images = std::move(r.images);
    f.depth = std::move(r.depth);
    f.semantics = std::move(r.semantics);
    f.command = ep.maneuver;
    f.expert = expert_at(script, cfg.dt, t, cfg.waypoints);
    ep.frames.push_back(std::move(f));
  }
  return ep;
}

}  // namespace iwm::sim

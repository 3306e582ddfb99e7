#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "iwm/binary_io.hpp"
#include "iwm/simworld.hpp"

namespace iwm::sim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFrameMagic[9] = "IWMFRAME";
constexpr char kFrameFooter[9] = "IWMFEND\0";
constexpr char kIndexFormat[] = "iwm-corpus";
constexpr int kIndexVersion = 1;

template <typename T>
void write_array(BinaryWriter& w, const Shape& shape, const T* data) {
  w.pod(static_cast<std::uint8_t>(dtype_of<T>()));
  w.pod(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.pod(static_cast<std::uint32_t>(d));
  w.bytes(data, static_cast<std::size_t>(numel(shape)) * sizeof(T));
}

template <typename T>
std::vector<T> read_array(BinaryReader<DatasetError>& r, Shape& shape, const std::string& what) {
  const auto tag = r.pod<std::uint8_t>();
  if (tag != static_cast<std::uint8_t>(dtype_of<T>())) throw DatasetError("corrupt", what + " has the wrong dtype");
  const auto rank = r.pod<std::uint32_t>();
  if (rank < 1 || rank > 8) throw DatasetError("corrupt", what + " has implausible rank");
  shape.clear();
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = r.pod<std::uint32_t>();
    n *= d;
    shape.push_back(d);
  }
  if (n > (1ull << 28)) throw DatasetError("corrupt", what + " is implausibly large");
  std::vector<T> out(static_cast<std::size_t>(n));
  r.read(out.data(), out.size() * sizeof(T));
  return out;
}

json camera_json(const CameraModel& c) {
  const auto& R = c.cam_to_ego.rotation;
  const auto& t = c.cam_to_ego.translation;
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"h", c.h}, {"w", c.w},
          {"rotation", {R(0, 0), R(0, 1), R(0, 2), R(1, 0), R(1, 1), R(1, 2), R(2, 0), R(2, 1), R(2, 2)}},
          {"translation", {t.x(), t.y(), t.z()}}};
}

CameraModel camera_from(const json& j) {
  CameraModel c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.h = j.at("h");
  c.w = j.at("w");
  const auto& R = j.at("rotation");
  for (int i = 0; i < 9; ++i) c.cam_to_ego.rotation(i / 3, i % 3) = R.at(static_cast<std::size_t>(i));
  const auto& t = j.at("translation");
  for (int i = 0; i < 3; ++i) c.cam_to_ego.translation[i] = t.at(static_cast<std::size_t>(i));
  return c;
}

json gen_config_json(const GenConfig& c) {
  json j = {{"dt", c.dt},
            {"frames", c.frames},
            {"waypoints", c.waypoints},
            {"min_obstacles", c.min_obstacles},
            {"max_obstacles", c.max_obstacles},
            {"road_width", c.road_width},
            {"ego_length", c.ego_length},
            {"ego_width", c.ego_width},
            {"min_speed", c.min_speed},
            {"max_speed", c.max_speed},
            {"max_yaw_rate", c.max_yaw_rate},
            {"lateral_threshold", c.lateral_threshold},
            {"slowdown_probability", c.slowdown_probability},
            {"maneuver_mix", c.maneuver_mix},
            {"rig",
             {{"views", c.rig.views},
              {"image_h", c.rig.image_h},
              {"image_w", c.rig.image_w},
              {"feat_h", c.rig.feat_h},
              {"feat_w", c.rig.feat_w},
              {"side_yaw_deg", c.rig.side_yaw_deg},
              {"pitch_deg", c.rig.pitch_deg},
              {"hfov_deg", c.rig.hfov_deg},
              {"mount_x", c.rig.mount_x},
              {"mount_z", c.rig.mount_z}}}};
  if (c.align_to) {
    json pts = json::array();
    for (const auto& p : c.align_to->points) pts.push_back({p.x(), p.y()});
    j["align_to"] = {{"k", c.align_to->k}, {"points", pts}};
  } else {
    j["align_to"] = nullptr;
  }
  return j;
}

GenConfig gen_config_from(const json& j) {
  GenConfig c;
  c.dt = j.at("dt");
  c.frames = j.at("frames");
  c.waypoints = j.at("waypoints");
  c.min_obstacles = j.at("min_obstacles");
  c.max_obstacles = j.at("max_obstacles");
  c.road_width = j.at("road_width");
  c.ego_length = j.at("ego_length");
  c.ego_width = j.at("ego_width");
  c.min_speed = j.at("min_speed");
  c.max_speed = j.at("max_speed");
  c.max_yaw_rate = j.at("max_yaw_rate");
  c.lateral_threshold = j.at("lateral_threshold");
  c.slowdown_probability = j.at("slowdown_probability");
  c.maneuver_mix = j.at("maneuver_mix").get<std::array<double, 3>>();
  const auto& r = j.at("rig");
  c.rig.views = r.at("views");
  c.rig.image_h = r.at("image_h");
  c.rig.image_w = r.at("image_w");
  c.rig.feat_h = r.at("feat_h");
  c.rig.feat_w = r.at("feat_w");
  c.rig.side_yaw_deg = r.at("side_yaw_deg");
  c.rig.pitch_deg = r.at("pitch_deg");
  c.rig.hfov_deg = r.at("hfov_deg");
  c.rig.mount_x = r.at("mount_x");
  c.rig.mount_z = r.at("mount_z");
  if (j.contains("align_to") && !j.at("align_to").is_null()) {
    geometry::IntentionPointSet set;
    set.k = j.at("align_to").at("k");
    for (const auto& p : j.at("align_to").at("points")) set.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    c.align_to = std::move(set);
  }
  return c;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("missing_file", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError("corrupt", path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text << "\n";
  if (!out) throw DatasetError("io_error", "cannot write " + path.string());
}

std::string frame_name(Index t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04lld.bin", static_cast<long long>(t));
  return buf;
}

}  // namespace

std::map<Command, int> CorpusIndex::maneuver_counts() const {
  std::map<Command, int> out{{Command::left, 0}, {Command::straight, 0}, {Command::right, 0}};
  for (const auto& e : episodes) ++out[e.maneuver];
  return out;
}

void write_frame(const fs::path& path, const FrameObservation& f) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("io_error", "cannot write " + path.string());
  BinaryWriter w(out);
  w.bytes(kFrameMagic, 8);
  w.pod(kFrameFormatVersion);
  w.pod(static_cast<std::uint32_t>(f.t));
  w.pod(static_cast<std::uint8_t>(f.command));
  w.pod(f.ego_pose.x);
  w.pod(f.ego_pose.y);
  w.pod(f.ego_pose.yaw);
  write_array(w, {f.views, f.image_h, f.image_w, f.channels}, f.images.data());
  write_array(w, {f.views, f.h, f.w}, f.depth.data());
  write_array(w, {f.views, f.h, f.w}, f.semantics.data());
  write_array(w, {f.expert.rows(), 2}, f.expert.data());
  w.bytes(kFrameFooter, 8);
  if (!out) throw DatasetError("io_error", "failed writing " + path.string());
}

FrameObservation read_frame(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("missing_file", "cannot open " + path.string());
  const std::string what = "frame " + path.string();
  BinaryReader<DatasetError> r(in, what);
  r.expect_magic(kFrameMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kFrameFormatVersion) {
    throw DatasetError("version_mismatch", what + " has version " + std::to_string(version) + ", expected " +
                                               std::to_string(kFrameFormatVersion));
  }
  FrameObservation f;
  f.t = r.pod<std::uint32_t>();
  const auto cmd = r.pod<std::uint8_t>();
  if (cmd > 2) throw DatasetError("corrupt", what + " has an unknown command");
  f.command = static_cast<Command>(cmd);
  f.ego_pose.x = r.pod<double>();
  f.ego_pose.y = r.pod<double>();
  f.ego_pose.yaw = r.pod<double>();
  Shape s;
  f.images = read_array<std::uint8_t>(r, s, what + " images");
  if (s.size() != 4) throw DatasetError("corrupt", what + " images must be rank 4");
  f.views = s[0];
  f.image_h = s[1];
  f.image_w = s[2];
  f.channels = s[3];
  f.depth = read_array<double>(r, s, what + " depth");
  if (s.size() != 3 || s[0] != f.views) throw DatasetError("corrupt", what + " depth shape disagrees with images");
  f.h = s[1];
  f.w = s[2];
  f.semantics = read_array<std::uint8_t>(r, s, what + " semantics");
  if (s != Shape{f.views, f.h, f.w}) throw DatasetError("corrupt", what + " semantics shape disagrees with depth");
  const auto expert = read_array<double>(r, s, what + " expert");
  if (s.size() != 2 || s[1] != 2) throw DatasetError("corrupt", what + " expert must be [S, 2]");
  f.expert = Eigen::Map<const Trajectory>(expert.data(), s[0], 2);
  char footer[8];
  r.read(footer, 8);
  if (std::memcmp(footer, kFrameFooter, 8) != 0) throw DatasetError("corrupt", what + " has a bad footer");
  if (!r.at_end()) throw DatasetError("corrupt", what + " has trailing bytes");
  return f;
}

void write_episode(const fs::path& dir, const Episode& ep) {
  fs::create_directories(dir);
  json obstacles = json::array();
  for (const auto& o : ep.scene.obstacles) {
    obstacles.push_back({{"center", {o.center.x(), o.center.y()}},
                         {"length", o.length},
                         {"width", o.width},
                         {"height", o.height},
                         {"heading", o.heading},
                         {"velocity", {o.velocity.x(), o.velocity.y()}},
                         {"class", static_cast<int>(o.cls)}});
  }
  json rig = json::array();
  for (const auto& c : ep.rig) rig.push_back(camera_json(c));
  json j = {{"id", ep.id},
            {"seed", ep.seed},
            {"dt", ep.dt},
            {"maneuver", geometry::to_string(ep.maneuver)},
            {"frames", ep.frames.size()},
            {"road", {{"curvature", ep.scene.road.curvature}, {"width", ep.scene.road.width}}},
            {"world_radius", ep.scene.world_radius},
            {"obstacles", obstacles},
            {"script",
             {{"speed", ep.script.speed},
              {"curvature", ep.script.curvature},
              {"brake_time", ep.script.brake_time ? json(*ep.script.brake_time) : json(nullptr)},
              {"deceleration", ep.script.deceleration}}},
            {"rig", rig}};
  write_text(dir / "episode.json", j.dump(1));
  for (const auto& f : ep.frames) write_frame(dir / frame_name(f.t), f);
}

Episode read_episode(const fs::path& dir) {
  const json j = read_json(dir / "episode.json");
  Episode ep;
  try {
    ep.id = j.at("id");
    ep.seed = j.at("seed");
    ep.dt = j.at("dt");
    ep.maneuver = geometry::command_from_string(j.at("maneuver"));
    ep.scene.road.curvature = j.at("road").at("curvature");
    ep.scene.road.width = j.at("road").at("width");
    ep.scene.world_radius = j.at("world_radius");
    for (const auto& o : j.at("obstacles")) {
      Obstacle ob;
      ob.center = Eigen::Vector2d(o.at("center").at(0).get<double>(), o.at("center").at(1).get<double>());
      ob.length = o.at("length");
      ob.width = o.at("width");
      ob.height = o.at("height");
      ob.heading = o.at("heading");
      ob.velocity = Eigen::Vector2d(o.at("velocity").at(0).get<double>(), o.at("velocity").at(1).get<double>());
      const int cls = o.at("class");
      if (cls < 0 || cls >= kNumClasses) throw DatasetError("corrupt", "unknown obstacle class");
      ob.cls = static_cast<SemanticClass>(cls);
      ep.scene.obstacles.push_back(ob);
    }
    const auto& s = j.at("script");
    ep.script.speed = s.at("speed");
    ep.script.curvature = s.at("curvature");
    if (!s.at("brake_time").is_null()) ep.script.brake_time = s.at("brake_time").get<double>();
    ep.script.deceleration = s.at("deceleration");
    for (const auto& c : j.at("rig")) ep.rig.push_back(camera_from(c));
    const int frames = j.at("frames");
    for (int t = 0; t < frames; ++t) ep.frames.push_back(read_frame(dir / frame_name(t)));
  } catch (const json::exception& e) {
    throw DatasetError("corrupt", (dir / "episode.json").string() + ": " + e.what());
  } catch (const ValueError& e) {
    throw DatasetError("corrupt", (dir / "episode.json").string() + ": " + e.what());
  }
  for (std::size_t t = 0; t < ep.frames.size(); ++t) {
    if (ep.frames[t].t != static_cast<Index>(t)) throw DatasetError("corrupt", ep.id + " frames are out of order");
  }
  return ep;
}

CorpusIndex write_corpus(const fs::path& root, const GenConfig& config, std::uint64_t corpus_seed, int count) {
  fs::create_directories(root);
  CorpusIndex index;
  index.corpus_seed = corpus_seed;
  index.config = config;
  const auto seeds = episode_seeds(corpus_seed, count);
  json list = json::array();
  for (int i = 0; i < count; ++i) {
    Episode ep = generate_episode(config, seeds[static_cast<std::size_t>(i)]);
    char id[32];
    std::snprintf(id, sizeof(id), "ep_%05d", i);
    ep.id = id;
    write_episode(root / ep.id, ep);
    index.episodes.push_back({ep.id, ep.seed, ep.maneuver, static_cast<int>(ep.frames.size())});
    list.push_back({{"id", ep.id},
                    {"seed", ep.seed},
                    {"maneuver", geometry::to_string(ep.maneuver)},
                    {"frames", ep.frames.size()}});
  }
  json j = {{"format", kIndexFormat},
            {"version", kIndexVersion},
            {"corpus_seed", corpus_seed},
            {"generator", gen_config_json(config)},
            {"episodes", list}};
  write_text(root / "index.json", j.dump(1));
  return index;
}

CorpusIndex read_index(const fs::path& root) {
  const json j = read_json(root / "index.json");
  CorpusIndex index;
  try {
    if (j.at("format") != kIndexFormat) throw DatasetError("bad_magic", root.string() + " is not a corpus index");
    const int version = j.at("version");
    if (version != kIndexVersion) {
      throw DatasetError("version_mismatch", "corpus index version " + std::to_string(version));
    }
    index.corpus_seed = j.at("corpus_seed");
    index.config = gen_config_from(j.at("generator"));
    for (const auto& e : j.at("episodes")) {
      index.episodes.push_back(
          {e.at("id"), e.at("seed"), geometry::command_from_string(e.at("maneuver")), e.at("frames")});
    }
  } catch (const json::exception& e) {
    throw DatasetError("corrupt", (root / "index.json").string() + ": " + e.what());
  } catch (const ValueError& e) {
    throw DatasetError("corrupt", (root / "index.json").string() + ": " + e.what());
  }
  return index;
}

std::vector<Episode> read_corpus(const fs::path& root) {
  const CorpusIndex index = read_index(root);
  std::vector<Episode> out;
  for (const auto& e : index.episodes) out.push_back(read_episode(root / e.id));
  return out;
}

}  // namespace iwm::sim

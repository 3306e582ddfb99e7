#include <cmath>

#include <json.hpp>

#include "iwm/simworld.hpp"

namespace iwm::sim {

void score_sample(const Episode& episode, Index frame, const Trajectory& prediction, MetricsReport& report) {
  const Index S = prediction.rows();
  const Index last = static_cast<Index>(episode.frames.size()) - 1;
  if (frame < 0 || frame > last || frame + S > last || S == 0) {
    ++report.skipped;
    return;
  }
  const auto& f = episode.frames[static_cast<std::size_t>(frame)];
  if (f.expert.rows() != S) throw ShapeError("evaluate_plan", "prediction and expert horizons differ");

  SampleRecord rec;
  rec.episode = episode.id;
  rec.frame = frame;
  for (std::size_t k = 0; k < kHorizonsSeconds.size(); ++k) {
    const Index idx = std::lround(kHorizonsSeconds[k] / episode.dt) - 1;
    if (idx < 0 || idx >= S) {
      ++report.skipped;
      return;
    }
    rec.l2[k] = (prediction.row(idx) - f.expert.row(idx)).norm();
    const Eigen::Vector2d center = f.ego_pose.to_world(prediction.row(idx).transpose());
    const OrientedRect ego = ego_footprint(center, f.ego_pose.yaw + waypoint_heading(prediction, idx));
    const double time = static_cast<double>(frame + idx + 1) * episode.dt;
    bool hit = false;
    for (const auto& ob : episode.scene.obstacles) {
      if (overlaps(ego, ob.footprint_at(time))) {
        hit = true;
        break;
      }
    }
    rec.collision[k] = hit;
  }
  report.records.push_back(std::move(rec));
}

MetricsReport evaluate_plan(const Episode& episode, const std::map<Index, Trajectory>& predictions) {
  MetricsReport report;
  for (const auto& [frame, traj] : predictions) score_sample(episode, frame, traj, report);
  report.aggregate();
  return report;
}

void MetricsReport::aggregate() {
  samples = static_cast<Index>(records.size());
  std::array<double, 3> l2{}, cr{};
  for (const auto& r : records) {
    for (std::size_t k = 0; k < 3; ++k) {
      l2[k] += r.l2[k];
      cr[k] += r.collision[k] ? 1.0 : 0.0;
    }
  }
  const double n = samples > 0 ? static_cast<double>(samples) : 1.0;
  l2_1s = l2[0] / n;
  l2_2s = l2[1] / n;
  l2_3s = l2[2] / n;
  cr_1s = 100.0 * cr[0] / n;
  cr_2s = 100.0 * cr[1] / n;
  cr_3s = 100.0 * cr[2] / n;
  l2_avg = (l2_1s + l2_2s + l2_3s) / 3;
  cr_avg = (cr_1s + cr_2s + cr_3s) / 3;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["l2_1s"] = l2_1s;
  j["l2_2s"] = l2_2s;
  j["l2_3s"] = l2_3s;
  j["l2_avg"] = l2_avg;
  j["cr_1s"] = cr_1s;
  j["cr_2s"] = cr_2s;
  j["cr_3s"] = cr_3s;
  j["cr_avg"] = cr_avg;
  j["samples"] = samples;
  j["skipped"] = skipped;
  auto& recs = j["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"episode", r.episode},
                    {"frame", r.frame},
                    {"l2", r.l2},
                    {"collision", r.collision}});
  }
  return j.dump();
}

MetricsReport merge_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport out;
  for (const auto& r : reports) {
    out.records.insert(out.records.end(), r.records.begin(), r.records.end());
    out.skipped += r.skipped;
  }
  out.aggregate();
  return out;
}

}  // namespace iwm::sim

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "iwm/harness.hpp"

namespace iwm::harness {

namespace {

// Top-down view in the ego frame: forward is up, left is left.
struct View {
  double px_per_m = 10, back = 10, ahead = 40, half_width = 25;
  double width() const { return 2 * half_width * px_per_m; }
  double height() const { return (back + ahead) * px_per_m; }
  Eigen::Vector2d map(const Eigen::Vector2d& p) const {
    return {(half_width - p.y()) * px_per_m, (ahead - p.x()) * px_per_m};
  }
};

std::string num(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::fixed << v;
  return s.str();
}

std::string polyline(const View& v, const std::vector<Eigen::Vector2d>& pts, const std::string& style) {
  std::string out = "<polyline fill=\"none\" " + style + " points=\"";
  for (const auto& p : pts) {
    const auto q = v.map(p);
    out += num(q.x()) + "," + num(q.y()) + " ";
  }
  return out + "\"/>\n";
}

std::vector<Eigen::Vector2d> with_origin(const sim::Trajectory& t) {
  std::vector<Eigen::Vector2d> pts{Eigen::Vector2d::Zero()};
  for (Index i = 0; i < t.rows(); ++i) pts.emplace_back(t(i, 0), t(i, 1));
  return pts;
}

const char* class_color(sim::SemanticClass c) {
  switch (c) {
    case sim::SemanticClass::vehicle: return "#2f6db5";
    case sim::SemanticClass::pedestrian: return "#d9822b";
    case sim::SemanticClass::barrier: return "#8c2d2d";
    default: return "#555555";
  }
}

}  // namespace

std::string plan_svg(const wm::PlanResult& plan, const sim::Episode* episode) {
  const View v;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << v.width() << "\" height=\"" << v.height()
      << "\" viewBox=\"0 0 " << v.width() << " " << v.height() << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"#e8efe3\"/>\n";

  const sim::FrameObservation* frame = nullptr;
  if (episode && plan.frame_id >= 0 && plan.frame_id < static_cast<Index>(episode->frames.size())) {
    frame = &episode->frames[static_cast<std::size_t>(plan.frame_id)];
  }
  if (frame) {
    const auto& road = episode->scene.road;
    std::vector<Eigen::Vector2d> center;
    for (double s = -60; s <= 300; s += 1.0) {
      const double c = road.curvature;
      const Eigen::Vector2d w = std::abs(c) < 1e-9 ? Eigen::Vector2d(s, 0)
                                                   : Eigen::Vector2d(std::sin(c * s) / c, (1 - std::cos(c * s)) / c);
      center.push_back(frame->ego_pose.to_local(w));
    }
    svg << polyline(v, center,
                    "stroke=\"#b9b9b9\" stroke-linejoin=\"round\" stroke-width=\"" + num(road.width * v.px_per_m) + "\"");
    const double time = static_cast<double>(plan.frame_id) * episode->dt;
    for (const auto& ob : episode->scene.obstacles) {
      const auto fp = ob.footprint_at(time);
      const Eigen::Vector2d c = frame->ego_pose.to_local(fp.center);
      const double heading = fp.heading - frame->ego_pose.yaw;
      const Eigen::Vector2d f(std::cos(heading), std::sin(heading)), l(-f.y(), f.x());
      std::vector<Eigen::Vector2d> corners;
      for (auto [a, b] : {std::pair{1, 1}, {1, -1}, {-1, -1}, {-1, 1}, {1, 1}}) {
        corners.push_back(c + 0.5 * a * fp.length * f + 0.5 * b * fp.width * l);
      }
      svg << polyline(v, corners, std::string("stroke=\"") + class_color(ob.cls) + "\" stroke-width=\"2\"");
    }
    svg << polyline(v, with_origin(frame->expert), "stroke=\"#1a7f37\" stroke-width=\"3\" stroke-dasharray=\"6 4\"");
  }
  for (const auto& c : plan.candidates) svg << polyline(v, with_origin(c), "stroke=\"#777\" stroke-width=\"1.5\"");
  if (plan.trajectory.rows() > 0) svg << polyline(v, with_origin(plan.trajectory), "stroke=\"#c0392b\" stroke-width=\"3\"");

  // Ego footprint at the origin.
  const auto o = v.map({2.0, 0.925});
  svg << "<rect x=\"" << num(o.x()) << "\" y=\"" << num(o.y()) << "\" width=\"" << num(1.85 * v.px_per_m)
      << "\" height=\"" << num(4.0 * v.px_per_m) << "\" fill=\"#222\"/>\n";
  svg << "<text x=\"8\" y=\"18\" font-family=\"monospace\" font-size=\"13\">frame " << plan.frame_id << "  "
      << geometry::to_string(plan.command) << "  selected " << plan.selected << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::vector<StepRecord> read_metrics_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot read " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StepRecord r;
    r.step = j.at("step").get<Index>();
    r.total = j.at("loss").get<double>();
    r.semantic = j.value("semantic", 0.0);
    r.recon = j.value("recon", 0.0);
    r.score = j.value("score", 0.0);
    r.traj = j.value("traj", 0.0);
    r.grad_norm = j.value("grad_norm", 0.0);
    out.push_back(r);
  }
  return out;
}

std::string metrics_svg(const std::vector<StepRecord>& records) {
  const double W = 640, H = 360, pad = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!records.empty()) {
    double top = 0;
    for (const auto& r : records) top = std::max(top, r.total);
    top = top > 0 ? top : 1;
    const double last = static_cast<double>(std::max<Index>(records.back().step, 1));
    auto series = [&](auto field, const char* color, const char* name, int row) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& r : records) {
        const double x = pad + (W - 2 * pad) * static_cast<double>(r.step) / last;
        const double y = H - pad - (H - 2 * pad) * std::min(field(r) / top, 1.0);
        svg << num(x) << "," << num(y) << " ";
      }
      svg << "\"/>\n<text x=\"" << W - 150 << "\" y=\"" << 20 + 16 * row << "\" fill=\"" << color
          << "\" font-family=\"monospace\" font-size=\"12\">" << name << "</text>\n";
    };
    series([](const StepRecord& r) { return r.total; }, "#000", "total", 0);
    series([](const StepRecord& r) { return r.traj; }, "#c0392b", "trajectory", 1);
    series([](const StepRecord& r) { return r.semantic; }, "#2f6db5", "semantic", 2);
    series([](const StepRecord& r) { return r.recon; }, "#1a7f37", "reconstruction", 3);
    series([](const StepRecord& r) { return r.score; }, "#d9822b", "score", 4);
    svg << "<text x=\"" << pad << "\" y=\"" << H - 10 << "\" font-family=\"monospace\" font-size=\"12\">step 0 .. "
        << records.back().step << ", loss 0 .. " << num(top) << "</text>\n";
  }
  svg << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
      << "\" stroke=\"#999\"/>\n</svg>\n";
  return svg.str();
}

}  // namespace iwm::harness

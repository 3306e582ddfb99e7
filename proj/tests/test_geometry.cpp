#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "doctest.h"
#include "iwm/geometry.hpp"
#include "oracles.hpp"

using namespace iwm;
using namespace iwm::geometry;
using iwm::testing::brute_force_sse;

namespace {

CameraModel test_camera(double yaw, double pitch, Eigen::Vector3d t = {1.5, 0.0, 1.6}) {
  CameraModel cam;
  cam.fx = 5.7;
  cam.fy = 5.9;
  cam.cx = 4.0;
  cam.cy = 3.8;
  cam.h = 8;
  cam.w = 8;
  cam.cam_to_ego.rotation = camera_rotation(yaw, pitch);
  cam.cam_to_ego.translation = t;
  return cam;
}

}  // namespace

TEST_CASE("camera rotation follows the documented frame conventions") {
  const Eigen::Matrix3d R = camera_rotation(0, 0);
  CHECK((R * Eigen::Vector3d::UnitZ() - Eigen::Vector3d::UnitX()).norm() < 1e-15);   // optical axis -> forward
  CHECK((R * Eigen::Vector3d::UnitX() + Eigen::Vector3d::UnitY()).norm() < 1e-15);   // right -> -left
  CHECK((R * Eigen::Vector3d::UnitY() + Eigen::Vector3d::UnitZ()).norm() < 1e-15);   // down -> -up
  const Eigen::Vector3d pitched = camera_rotation(0, 0.2) * Eigen::Vector3d::UnitZ();
  CHECK(pitched.z() < 0);
  const Eigen::Vector3d yawed = camera_rotation(0.5, 0) * Eigen::Vector3d::UnitZ();
  CHECK(yawed.y() > 0);
  CHECK_NOTHROW(test_camera(0.9, 0.3).validate());
  CameraModel bad = test_camera(0, 0);
  bad.cam_to_ego.rotation(0, 0) = 1.1;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = test_camera(0, 0);
  bad.fx = 0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("pixel_to_ego principal ray and translation") {
  CameraModel cam = test_camera(0, 0, Eigen::Vector3d::Zero());
  cam.cam_to_ego.rotation.setIdentity();
  CHECK((pixel_to_ego(cam.cx, cam.cy, 7.0, cam) - Eigen::Vector3d(0, 0, 7)).norm() == 0);

  // With the ego convention the principal ray points forward.
  cam.cam_to_ego.rotation = camera_rotation(0, 0);
  CHECK((pixel_to_ego(cam.cx, cam.cy, 7.0, cam) - Eigen::Vector3d(7, 0, 0)).norm() < 1e-15);

  cam.cam_to_ego.rotation.setIdentity();
  const Eigen::Vector3d base = pixel_to_ego(2.0, 6.5, 3.0, cam);
  cam.cam_to_ego.translation = {0.3, -1.2, 2.0};
  CHECK((pixel_to_ego(2.0, 6.5, 3.0, cam) - (base + cam.cam_to_ego.translation)).norm() < 1e-15);

  CHECK_THROWS_AS(pixel_to_ego(1, 1, 0.0, cam), ValueError);
  CHECK_THROWS_AS(pixel_to_ego(1, 1, -2.0, cam), ValueError);
}

TEST_CASE("projection round trip on random in-frustum points") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0, 1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const CameraModel cam = test_camera(unit(rng) * 2 - 1, unit(rng) * 0.4, {unit(rng) * 2, unit(rng) - 0.5, 1 + unit(rng)});
    const double u = unit(rng) * cam.w, v = unit(rng) * cam.h, d = 0.5 + unit(rng) * 80;
    const Eigen::Vector3d p = pixel_to_ego(u, v, d, cam);
    const auto px = ego_to_pixel(p, cam);
    REQUIRE(px.has_value());
    worst = std::max(worst, (pixel_to_ego(px->u, px->v, px->depth, cam) - p).norm());
  }
  CHECK(worst < 1e-9);
  CHECK_FALSE(ego_to_pixel(Eigen::Vector3d(-10, 0, 1), test_camera(0, 0)).has_value());
}

TEST_CASE("position maps") {
  CameraModel cam = test_camera(0, 0, Eigen::Vector3d::Zero());
  cam.cam_to_ego.rotation.setIdentity();
  const std::vector<double> depth(64, 5.0);
  const PositionMap map = position_maps(depth, std::span(&cam, 1));
  CHECK(map.points.rows() == 64);
  // Constant depth, identity extrinsics: x grows linearly with u, y with v.
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j + 2 < 8; ++j) {
      const auto a = map.points.row(i * 8 + j), b = map.points.row(i * 8 + j + 1), c = map.points.row(i * 8 + j + 2);
      CHECK(std::abs((b.x() - a.x()) - (c.x() - b.x())) < 1e-12);
      CHECK(std::abs(b.x() - a.x() - 5.0 / cam.fx) < 1e-12);
      CHECK(a.y() == b.y());
    }

  std::vector<CameraModel> rig{test_camera(0.9, 0.2), test_camera(-0.9, 0.2)};
  std::vector<double> depths(2 * 64);
  std::mt19937_64 rng(4);
  for (auto& d : depths) d = std::uniform_real_distribution<double>(1, 40)(rng);
  depths[70] = 0.0;  // invalid -> sky sentinel
  const PositionMap rig_map = position_maps(depths, rig);
  // view 1, row 2, col 3
  const Index idx = (1 * 8 + 2) * 8 + 3;
  CHECK((rig_map.points.row(idx).transpose() - pixel_to_ego(3.5, 2.5, depths[idx], rig[1])).norm() == 0);
  const auto [origin, dir] = pixel_ray(6.5, 0.5, rig[1]);
  CHECK((rig_map.points.row(70).transpose() - (origin + kSkyDistance * dir)).norm() < 1e-12);
  CHECK((rig_map.points.row(70).transpose() - origin).norm() == doctest::Approx(kSkyDistance));

  CHECK_THROWS_AS(position_maps(std::span(depths).subspan(0, 64), rig), ShapeError);
}

TEST_CASE("kmeans edge cases") {
  const std::vector<Eigen::Vector2d> same(5, Eigen::Vector2d(2.5, -1.0));
  const auto one = kmeans(same, 1, 0);
  CHECK((one.centroids[0] - Eigen::Vector2d(2.5, -1.0)).norm() == 0);

  const std::vector<Eigen::Vector2d> sym{{0, 0}, {0, 1}, {10, 0}, {10, 1}};
  const auto two = kmeans(sym, 2, 1);
  CHECK((two.centroids[0] - Eigen::Vector2d(0, 0.5)).norm() < 1e-15);
  CHECK((two.centroids[1] - Eigen::Vector2d(10, 0.5)).norm() < 1e-15);

  CHECK_THROWS_AS(kmeans(sym, 5, 0), ValueError);

  // Duplicate points with more clusters than distinct locations still return K centroids.
  const std::vector<Eigen::Vector2d> dup{{0, 0}, {0, 0}, {0, 0}, {1, 1}};
  CHECK(kmeans(dup, 3, 2).centroids.size() == 3);
}

TEST_CASE("kmeans reaches the exhaustive-partition optimum on small instances") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0, 3);
  for (int trial = 0; trial < 120; ++trial) {
    const int n = 4 + trial % 7;  // 4..10 points
    const int k = 1 + trial % 3;  // 1..3 clusters
    std::vector<Eigen::Vector2d> pts;
    for (int i = 0; i < n; ++i) pts.emplace_back(g(rng), g(rng));
    const auto r = kmeans(pts, k, static_cast<std::uint64_t>(trial));
    CHECK(r.sse == doctest::Approx(brute_force_sse(pts, k)).epsilon(1e-12));
    CHECK(std::abs(r.sse - sum_squared_error(pts, r.assignment, r.centroids)) < 1e-9);
    for (std::size_t i = 1; i < r.sse_history.size(); ++i) CHECK(r.sse_history[i] <= r.sse_history[i - 1] + 1e-12);
    for (std::size_t i = 1; i < r.centroids.size(); ++i) {
      const auto& a = r.centroids[i - 1];
      const auto& b = r.centroids[i];
      CHECK((a.x() < b.x() || (a.x() == b.x() && a.y() <= b.y())));
    }
  }
}

TEST_CASE("kmeans: no single reassignment improves the SSE, and reruns are identical") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0, 5);
  std::vector<Eigen::Vector2d> pts;
  for (int i = 0; i < 200; ++i) pts.emplace_back(g(rng), g(rng));
  const auto r = kmeans(pts, 6, 77);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int j = 0; j < 6; ++j) {
      if (j == r.assignment[i]) continue;
      std::vector<int> moved = r.assignment;
      moved[i] = j;
      std::vector<Eigen::Vector2d> sums(6, Eigen::Vector2d::Zero());
      std::vector<int> counts(6, 0);
      for (std::size_t p = 0; p < pts.size(); ++p) {
        sums[static_cast<std::size_t>(moved[p])] += pts[p];
        ++counts[static_cast<std::size_t>(moved[p])];
      }
      if (counts[static_cast<std::size_t>(r.assignment[i])] == 0) continue;
      std::vector<Eigen::Vector2d> means;
      for (int c = 0; c < 6; ++c) means.push_back(sums[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)]);
      CHECK(sum_squared_error(pts, moved, means) >= r.sse - 1e-9);
    }
  }
  const auto again = kmeans(pts, 6, 77);
  for (int j = 0; j < 6; ++j) CHECK(again.centroids[static_cast<std::size_t>(j)] == r.centroids[static_cast<std::size_t>(j)]);
}

TEST_CASE("sinusoidal encoding") {
  const Tensor<double> zero = Tensor<double>::zeros({2, 3});
  const Tensor<double> enc = sinusoidal_pe(zero, 24);
  REQUIRE(enc.shape() == Shape{2, 24});
  for (Index i = 0; i < enc.size(); ++i) CHECK(enc[i] == (i % 2 == 0 ? 0.0 : 1.0));

  const Tensor<double> maps = Tensor<double>::zeros({3, 8, 8, 3});
  CHECK(sinusoidal_pe(maps, 24).shape() == Shape{3, 8, 8, 24});
  CHECK_THROWS_AS(sinusoidal_pe(maps, 64), ShapeError);
  CHECK_THROWS_AS(sinusoidal_pe(maps, 21), ShapeError);

  // 32 distinct grid positions inside one period of the fastest frequency.
  Vec<double> grid(64);
  for (int i = 0; i < 32; ++i) {
    grid[2 * i] = (i % 8) * 0.7;
    grid[2 * i + 1] = (i / 8) * 0.7;
  }
  const Tensor<double> ge = sinusoidal_pe(Tensor<double>({32, 2}, grid), 16);
  double closest = 1e9;
  for (Index a = 0; a < 32; ++a)
    for (Index b = a + 1; b < 32; ++b) closest = std::min(closest, (ge.matrix().row(a) - ge.matrix().row(b)).norm());
  CHECK(closest > 1e-3);
  CHECK(ge.values().cwiseAbs().maxCoeff() <= 1.0);

  std::mt19937_64 rng(2);
  Vec<double> big(30);
  for (auto& x : big) x = std::uniform_real_distribution<double>(-500, 500)(rng);
  const Tensor<float> fe = sinusoidal_pe(Tensor<float>({10, 3}, big.cast<float>()), 48);
  CHECK(fe.values().cwiseAbs().maxCoeff() <= 1.0f);
  const Tensor<double> de1 = sinusoidal_pe(Tensor<double>({10, 3}, big), 48);
  const Tensor<double> de2 = sinusoidal_pe(Tensor<double>({10, 3}, big), 48);
  CHECK(de1.values() == de2.values());
}

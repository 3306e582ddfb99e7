#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "iwm/diffcore/optim.hpp"
#include "support.hpp"

using namespace iwm;
using namespace iwm::testing;
using geometry::Command;

namespace {

enc::TrajectoryVocabulary vocabulary_from(const std::vector<Eigen::Vector2d>& endpoints) {
  enc::TrajectoryVocabulary v;
  v.waypoints = 1;
  v.data.resize(static_cast<Index>(endpoints.size()), 2);
  for (std::size_t i = 0; i < endpoints.size(); ++i) v.data.row(static_cast<Index>(i)) = endpoints[i].transpose();
  return v;
}

void zero(Tensor<double> t) { t.mutable_values().setZero(); }

}  // namespace

TEST_CASE("vocabulary samples constant speed and yaw rate within bounds") {
  enc::VocabularyConfig cfg;
  cfg.size = 200;
  const auto v = enc::make_vocabulary(cfg);
  CHECK(v.size() == 200);
  CHECK(v.data.cols() == 12);
  for (Index i = 0; i < v.size(); ++i) {
    // Equal arc lengths between waypoints imply constant speed.
    const double first = v.waypoint(i, 0).norm();
    CHECK(first >= cfg.min_speed * cfg.dt * 0.99);
    CHECK(first <= cfg.max_speed * cfg.dt * 1.0001);
    for (Index s = 1; s < 6; ++s) CHECK((v.waypoint(i, s) - v.waypoint(i, s - 1)).norm() == doctest::Approx(first).epsilon(0.01));
  }
  CHECK(enc::make_vocabulary(cfg).data == v.data);
  cfg.max_speed = 0.5;
  CHECK_THROWS_AS(enc::make_vocabulary(cfg), ValueError);
}

TEST_CASE("intention points: single cluster is the mean endpoint") {
  // Three straight endpoints plus one per turn, so every partition is non-empty.
  const std::vector<Eigen::Vector2d> ends{{10, 0.2}, {14, -0.4}, {6, 0.5}, {8, 4}, {8, -4}};
  const auto set = enc::build_intention_points(vocabulary_from(ends), 1, 0, 1.5);
  REQUIRE(set.points.size() == 3);
  CHECK((set.at(Command::straight, 0) - Eigen::Vector2d(10, 0.1)).norm() < 1e-12);
  CHECK((set.at(Command::left, 0) - Eigen::Vector2d(8, 4)).norm() < 1e-12);

  // A straight-only vocabulary leaves the turn partitions empty.
  CHECK_THROWS_AS(enc::build_intention_points(vocabulary_from({{10, 0}, {12, 0}, {8, 0}}), 1, 0, 1.5), ValueError);
}

TEST_CASE("intention points: default vocabulary gives 3 x 6 x 2") {
  const enc::VocabularyConfig cfg;
  CHECK(cfg.size == 8192);
  const auto set = enc::build_intention_points(enc::make_vocabulary(cfg), 6, 5, cfg.lateral_threshold);
  CHECK(set.k == 6);
  CHECK(set.points.size() == 18);
  for (Command c : geometry::kCommands) {
    for (Index i = 0; i < 6; ++i) CHECK(geometry::command_of_endpoint(set.at(c, i), cfg.lateral_threshold) == c);
  }
}

TEST_CASE("intention points match per-command clustering and are Lloyd fixed points") {
  enc::VocabularyConfig cfg;
  cfg.size = 400;
  const auto vocab = enc::make_vocabulary(cfg);
  const auto set = enc::build_intention_points(vocab, 4, 21, cfg.lateral_threshold);
  for (Command c : geometry::kCommands) {
    // Partition independently by the endpoint's lateral offset.
    std::vector<Eigen::Vector2d> ends;
    for (Index i = 0; i < vocab.size(); ++i) {
      const Eigen::Vector2d e = vocab.endpoint(i);
      const Command mine = e.y() > 1.5 ? Command::left : (e.y() < -1.5 ? Command::right : Command::straight);
      if (mine == c) ends.push_back(e);
    }
    const auto km = geometry::kmeans(ends, 4, 21 + static_cast<std::uint64_t>(c));
    for (Index k = 0; k < 4; ++k) {
      CHECK((set.at(c, k) - km.centroids[static_cast<std::size_t>(k)]).norm() == 0.0);
      // Each centroid is the mean of the endpoints closest to it.
      Eigen::Vector2d sum = Eigen::Vector2d::Zero();
      int n = 0;
      for (const auto& e : ends) {
        Index best = 0;
        for (Index j = 1; j < 4; ++j)
          if ((e - set.at(c, j)).squaredNorm() < (e - set.at(c, best)).squaredNorm()) best = j;
        if (best == k) {
          sum += e;
          ++n;
        }
      }
      REQUIRE(n > 0);
      CHECK((sum / n - set.at(c, k)).norm() < 1e-9);
    }
  }
}

TEST_CASE("intention encoding: shape, single token and permutation equivariance") {
  enc::ModelConfig cfg;
  ParameterRegistry<double> reg(1);
  const enc::EncoderParams<double> p(reg, cfg);
  geometry::IntentionPointSet six{6, {}};
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-10, 20);
  for (int i = 0; i < 18; ++i) six.points.emplace_back(u(rng), u(rng));
  const auto q = enc::intention_encode(p.q_ego, six, Command::straight, p.intention_mlp, p.intention_attention);
  CHECK(q.shape() == Shape{6, 256});

  // One intention: attention over a single token is output(value(x)).
  geometry::IntentionPointSet one{1, {{3, 1}, {12, 0}, {3, -1}}};
  const auto q1 = enc::intention_encode(p.q_ego, one, Command::straight, p.intention_mlp, p.intention_attention);
  const std::vector<Eigen::Vector2d> pt{{12, 0}};
  const auto x = add(enc::intention_queries<double>(pt, p.intention_mlp, 256), p.q_ego);
  CHECK((q1.values() - p.intention_attention.output(p.intention_attention.value(x)).values()).norm() < 1e-12);

  // Mirror-symmetric pair: swapping the points swaps the rows.
  geometry::IntentionPointSet pair{2, {{5, 3}, {5, -3}, {9, 1}, {9, -1}, {5, 3}, {5, -3}}};
  geometry::IntentionPointSet swapped{2, {{5, 3}, {5, -3}, {9, -1}, {9, 1}, {5, 3}, {5, -3}}};
  const auto a = enc::intention_encode(p.q_ego, pair, Command::straight, p.intention_mlp, p.intention_attention);
  const auto b = enc::intention_encode(p.q_ego, swapped, Command::straight, p.intention_mlp, p.intention_attention);
  CHECK((a.matrix().row(0) - b.matrix().row(1)).norm() < 1e-12);
  CHECK((a.matrix().row(1) - b.matrix().row(0)).norm() < 1e-12);

  // Random permutation of six points.
  std::vector<Index> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permuted = six;
  for (Index i = 0; i < 6; ++i) permuted.points[static_cast<std::size_t>(6 + i)] = six.at(Command::straight, perm[i]);
  const auto qp = enc::intention_encode(p.q_ego, permuted, Command::straight, p.intention_mlp, p.intention_attention);
  for (Index i = 0; i < 6; ++i) CHECK((qp.matrix().row(i) - q.matrix().row(perm[i])).norm() < 1e-10);
}

TEST_CASE("context encoder: annihilation, view sharing, gradients, shape errors") {
  ParameterRegistry<double> reg(3);
  const enc::Backbone<double> bb(reg, "bb", 3, 2, 4);
  for (const auto& b : bb.biases) zero(b);
  const auto f0 = enc::context_encode(T64::zeros({2, 16, 16, 3}), bb);
  CHECK(f0.shape() == Shape{2, 2, 2, 4});
  CHECK(f0.values().cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(4);
  const T64 view = random_tensor({1, 16, 16, 3}, rng, false);
  const auto f = enc::context_encode(concat<double>({view, view}, 0), bb);
  CHECK((select(f, 0).values() - select(f, 1).values()).cwiseAbs().maxCoeff() == 0.0);

  ParameterRegistry<double> reg2(5);
  const enc::Backbone<double> bb2(reg2, "bb", 3, 2, 4);
  T64 img = random_tensor({2, 8, 8, 3}, rng);
  const double err = gradcheck({img}, [&] { return sum(enc::context_encode(img, bb2)); });
  CHECK(err < 1e-3);
  CHECK(img.grad().norm() > 0);

  CHECK_THROWS_AS(enc::context_encode(T64::zeros({1, 12, 16, 3}), bb2), ShapeError);
  CHECK_THROWS_AS(enc::context_encode(T64::zeros({16, 16, 3}), bb2), ShapeError);
}

TEST_CASE("semantic loss cases") {
  ParameterRegistry<double> reg(6);
  Linear<double> head(reg, "sem", 4, 4);
  std::vector<std::uint8_t> targets{0, 1, 2, 3, 1, 2};

  // Identity head over large-margin one-hot features.
  zero(head.weight);
  zero(head.bias);
  for (int c = 0; c < 4; ++c) head.weight.mutable_values()[c * 4 + c] = 1.0;
  Vec<double> onehot = Vec<double>::Zero(24);
  for (int i = 0; i < 6; ++i) onehot[i * 4 + targets[static_cast<std::size_t>(i)]] = 60.0;
  const auto perfect = enc::semantic_loss(T64({1, 2, 3, 4}, onehot), head, targets);
  CHECK(perfect.loss.item() < 1e-20);
  CHECK_FALSE(perfect.warning);

  // A zero head gives uniform logits.
  zero(head.weight);
  std::mt19937_64 rng(7);
  const T64 feats = random_tensor({1, 2, 3, 4}, rng, false);
  CHECK(enc::semantic_loss(feats, head, targets).loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  // Random head against a direct -log p mean, with two ignored pixels.
  Linear<double> rnd(reg, "rnd", 4, 4);
  std::vector<std::uint8_t> partial{0, 255, 2, 3, 255, 1};
  const auto out = enc::semantic_loss(feats, rnd, partial);
  const RowMat<double> logits = reshape(out.logits, {6, 4}).matrix();
  double acc = 0;
  int n = 0;
  for (Index r = 0; r < 6; ++r) {
    if (partial[static_cast<std::size_t>(r)] == 255) continue;
    double z = 0;
    for (Index c = 0; c < 4; ++c) z += std::exp(logits(r, c));
    acc -= std::log(std::exp(logits(r, partial[static_cast<std::size_t>(r)])) / z);
    ++n;
  }
  CHECK(std::abs(out.loss.item() - acc / n) < 1e-10);

  const auto ignored = enc::semantic_loss(feats, rnd, std::vector<std::uint8_t>(6, 255));
  CHECK(ignored.loss.item() == 0.0);
  REQUIRE(ignored.warning);
}

TEST_CASE("spatial fusion: identity, determinism, depth sensitivity") {
  const auto g = tiny_world();
  const auto rig = sim::make_rig(g.rig);
  ParameterRegistry<double> reg(8);
  Mlp<double> mlp(reg, "pe", {6, 8, 8});
  std::vector<double> depth(12);
  for (std::size_t i = 0; i < depth.size(); ++i) depth[i] = 3.0 + static_cast<double>(i);
  std::mt19937_64 rng(9);
  const T64 feats = random_tensor({3, 2, 2, 8}, rng, false);

  const T64 e = enc::spatial_embedding<double>(depth, rig, mlp, 6);
  CHECK((enc::fuse_spatial<double>(feats, depth, rig, mlp, 6).values() - (feats.values() + e.values())).norm() < 1e-15);

  Mlp<double> zeroed(reg, "pe0", {6, 8, 8});
  zero(zeroed.layers.back().weight);
  zero(zeroed.layers.back().bias);
  CHECK(enc::fuse_spatial<double>(feats, depth, rig, zeroed, 6).values() == feats.values());

  // Two views sharing one camera and one depth map see identical positions.
  const std::vector<geometry::CameraModel> twin{rig[0], rig[0]};
  const std::vector<double> twin_depth{4, 5, 6, 7, 4, 5, 6, 7};
  const T64 te = enc::spatial_embedding<double>(twin_depth, twin, mlp, 6);
  CHECK((select(te, 0).values() - select(te, 1).values()).norm() == 0.0);

  std::vector<double> doubled = depth;
  for (auto& d : doubled) d *= 2;
  const T64 e2 = enc::spatial_embedding<double>(doubled, rig, mlp, 6);
  // Probe: view 1, cell (0, 1), away from any principal point.
  const Index probe_cell = (1 * 4 + 1) * 8;
  CHECK((e2.values().segment(probe_cell, 8) - e.values().segment(probe_cell, 8)).norm() > 1e-6);

  CHECK_THROWS_AS(enc::fuse_spatial<double>(random_tensor({3, 2, 2, 4}, rng, false), depth, rig, mlp, 6), ShapeError);
}

TEST_CASE("temporal aggregation: oracle, constant context, bootstrap, shape drift") {
  ParameterRegistry<double> reg(10);
  AttentionParams<double> attn(reg, "temporal", 8, 8, 2);
  std::mt19937_64 rng(11);
  const T64 cur = random_tensor({2, 4, 4, 8}, rng, false), prev = random_tensor({2, 4, 4, 8}, rng, false);

  const RowMat<double> expected = attention_oracle(reshape(cur, {32, 8}).matrix(), reshape(prev, {32, 8}).matrix(), attn);
  const T64 plain = enc::temporal_aggregate(cur, prev, attn, false);
  CHECK(plain.shape() == cur.shape());
  CHECK((reshape(plain, {32, 8}).matrix() - expected).cwiseAbs().maxCoeff() < 1e-10);
  const T64 res = enc::temporal_aggregate(cur, prev, attn, true);
  CHECK((reshape(res, {32, 8}).matrix() - (expected + reshape(cur, {32, 8}).matrix())).cwiseAbs().maxCoeff() < 1e-10);

  // Constant context: every token receives output(value(c)) on top of its query path.
  const T64 c = random_tensor({1, 8}, rng, false);
  std::vector<T64> rows(32, c);
  const T64 constant = reshape(concat(rows, 0), {2, 4, 4, 8});
  const RowMat<double> direct = attn.output(attn.value(c)).matrix();
  const RowMat<double> out = reshape(enc::temporal_aggregate(cur, constant, attn, true), {32, 8}).matrix();
  for (Index r = 0; r < 32; ++r) {
    CHECK((out.row(r) - reshape(cur, {32, 8}).matrix().row(r) - direct.row(0)).norm() < 1e-12);
  }

  // First frame: the current features stand in for the previous ones.
  CHECK(enc::temporal_aggregate(cur, cur, attn, true).values() == enc::temporal_aggregate(cur, cur, attn, true).values());
  CHECK_THROWS_AS(enc::temporal_aggregate(cur, random_tensor({2, 4, 2, 8}, rng, false), attn, true), ShapeError);
}

TEST_CASE("encode_frame checks frame dimensions against the model") {
  const auto ep = sim::generate_episode(tiny_world(), 1);
  const sim::SimulatorPriors priors;
  const auto cfg = tiny_model();
  ParameterRegistry<double> reg(12);
  const enc::EncoderParams<double> p(reg, cfg);
  const auto f = enc::encode_frame(ep.frames[0], priors, ep.rig, p, cfg);
  CHECK(f.features.shape() == Shape{3, 2, 2, 8});
  CHECK(f.fused.shape() == Shape{3, 2, 2, 8});
  auto wrong = cfg;
  wrong.image_h = wrong.image_w = 64;
  wrong.feat_h = wrong.feat_w = 8;
  CHECK_THROWS_AS(enc::encode_frame(ep.frames[0], priors, ep.rig, p, wrong), ShapeError);
}

TEST_CASE("semantic loss trained alone on one frame decreases every step") {
  const auto ep = sim::generate_episode(tiny_world(), 2);
  const sim::SimulatorPriors priors;
  const auto cfg = tiny_model();
  ParameterRegistry<double> reg(13);
  const enc::EncoderParams<double> p(reg, cfg);
  OptimizerConfig oc;
  oc.kind = OptimizerKind::sgd;
  oc.lr = 0.05;
  Optimizer<double> opt(oc, reg);
  const auto images = enc::image_tensor<double>(ep.frames[3]);
  const auto labels = priors.semantics_of(ep.frames[3]);
  double last = INFINITY;
  int decreases = 0;
  for (int step = 0; step < 50; ++step) {
    reg.zero_grad();
    const auto out = enc::semantic_loss(enc::context_encode(images, p.backbone), p.semantic_head, labels);
    const double loss = out.loss.item();
    decreases += loss < last;
    last = loss;
    out.loss.backward();
    opt.step(reg);
  }
  CHECK(decreases == 50);
}

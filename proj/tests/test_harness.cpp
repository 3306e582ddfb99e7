#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "fixtures.hpp"
#include "iwm/harness.hpp"

using namespace iwm;
using namespace iwm::testing;
using harness::RunConfig;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("iwm_harness_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig cfg;
  cfg.model = tiny_model(2);
  cfg.vocab.size = 600;
  cfg.cluster_seed = 3;
  cfg.optim.lr = 1e-3;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.seed = 4;
  cfg.precision = harness::Precision::f64;
  cfg.out = out.string();
  return cfg;
}

std::vector<sim::Episode> tiny_corpus(int count = 2) {
  std::vector<sim::Episode> eps;
  for (int i = 0; i < count; ++i) eps.push_back(sim::generate_episode(tiny_world(), 40 + static_cast<std::uint64_t>(i)));
  return eps;
}

template <typename S>
Vec<S> flat_params(const wm::WorldModel<S>& m) {
  std::vector<S> all;
  for (const auto& p : m.registry().entries()) all.insert(all.end(), p.tensor.values().begin(), p.tensor.values().end());
  return Eigen::Map<Vec<S>>(all.data(), static_cast<Index>(all.size()));
}

}  // namespace

TEST_CASE("default run config carries the reference hyperparameters") {
  const RunConfig cfg;
  CHECK(cfg.model.intentions == 6);
  CHECK(cfg.model.dim == 256);
  CHECK(cfg.model.horizon == 3);
  CHECK(cfg.vocab.size == 8192);
  CHECK(cfg.loss.semantic == 0.2);
  CHECK(cfg.loss.recon == 0.2);
  CHECK(cfg.loss.score == 0.5);
  CHECK(cfg.loss.traj == 1.0);
  CHECK(cfg.optim.lr == 5e-5);
  CHECK(cfg.optim.kind == OptimizerKind::adam);
  CHECK(cfg.precision == harness::Precision::f32);
}

TEST_CASE("config text round trip and named errors") {
  RunConfig cfg = tiny_run("/tmp/somewhere");
  cfg.loss.recon = 0.1 + 0.2;  // not exactly representable in short decimal
  cfg.precision = harness::Precision::f64;
  cfg.optim.kind = OptimizerKind::sgd;
  cfg.model.temporal_residual = false;
  const std::string text = harness::to_text(cfg);
  const RunConfig back = harness::parse_config(text);
  CHECK(harness::to_text(back) == text);
  CHECK(back.loss.recon == cfg.loss.recon);
  CHECK(back.model.hash() == cfg.model.hash());
  CHECK(back.out == "/tmp/somewhere");
  CHECK(harness::config_keys().size() == static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));

  const RunConfig commented = harness::parse_config("# a comment\n\n  model.dim = 32  \ntrain.steps=7\n");
  CHECK(commented.model.dim == 32);
  CHECK(commented.steps == 7);

  auto kind_of = [](const std::string& t) {
    try {
      harness::parse_config(t);
    } catch (const ConfigError& e) {
      return e.kind();
    }
    return std::string("accepted");
  };
  CHECK(kind_of("model.dimm = 3\n") == "unknown_key");
  CHECK(kind_of("model.dim = three\n") == "bad_value");
  CHECK(kind_of("model.dim = 3.5\n") == "bad_value");
  CHECK(kind_of("train.precision = f16\n") == "bad_value");
  CHECK(kind_of("model.dim\n") == "syntax_error");
  CHECK(kind_of("model.dim = 30\nmodel.heads = 4\n") != "accepted");  // 30 is not divisible by 4
  CHECK_THROWS_AS(harness::load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("training samples leave room for the future frame and the expert horizon") {
  const auto eps = tiny_corpus(1);
  auto model = tiny_model(2);
  const auto s = harness::training_samples(eps, model);
  REQUIRE(s.size() == 6);  // 12 frames, reach 6
  CHECK(s.back().second == 5);
  model.horizon = 8;
  CHECK(harness::training_samples(eps, model).size() == 4);
}

TEST_CASE("training is deterministic, logs every step and resumes bit-exactly") {
  const fs::path root = scratch_dir("resume");
  const auto eps = tiny_corpus();

  RunConfig cfg = tiny_run(root / "a");
  harness::Trainer<double> a(cfg, &eps);
  a.run();
  const auto log = harness::read_metrics_log(root / "a" / "metrics.jsonl");
  REQUIRE(log.size() == 6);
  CHECK(log.front().step == 1);
  CHECK(std::isfinite(log.back().total));
  CHECK(log.back().grad_norm > 0);

  // Checkpoints embed the config, output path included, so reruns share it.
  const std::string first = read_bytes(root / "a" / "checkpoint.bin");
  const std::string first_log = read_bytes(root / "a" / "metrics.jsonl");
  fs::remove_all(root / "a");
  harness::Trainer<double> b(cfg, &eps);
  b.run();
  CHECK(read_bytes(root / "a" / "checkpoint.bin") == first);
  CHECK(read_bytes(root / "a" / "metrics.jsonl") == first_log);

  // Three steps, save, fresh trainer, load, three more.
  fs::remove_all(root / "a");
  cfg.steps = 3;
  harness::Trainer<double> c1(cfg, &eps);
  c1.run();
  cfg.steps = 6;
  harness::Trainer<double> c2(cfg, &eps);
  c2.load_checkpoint(root / "a" / "checkpoint.bin");
  CHECK(c2.steps_done() == 3);
  c2.run();
  CHECK((flat_params(c2.model()) - flat_params(a.model())).cwiseAbs().maxCoeff() == 0.0);
  CHECK(read_bytes(root / "a" / "checkpoint.bin") == first);

  // A model loaded from the checkpoint plans identically.
  wm::WorldModel<double> loaded(cfg.model, harness::intention_points(cfg), 999);
  harness::load_model(root / "a" / "checkpoint.bin", cfg, loaded);
  const std::span<const sim::FrameObservation> past(eps[0].frames.data(), 4);
  CHECK(loaded.infer(past, eps[0].rig, sim::SimulatorPriors()).to_json() ==
        a.model().infer(past, eps[0].rig, sim::SimulatorPriors()).to_json());
  CHECK(harness::to_text(harness::checkpoint_config(root / "a" / "checkpoint.bin")) == harness::to_text(tiny_run(root / "a")));
  fs::remove_all(root);
}

TEST_CASE("float training runs and checkpoints refuse a different model") {
  const fs::path root = scratch_dir("mismatch");
  const auto eps = tiny_corpus();
  RunConfig cfg = tiny_run(root);
  cfg.precision = harness::Precision::f32;
  cfg.steps = 2;
  harness::Trainer<float> t(cfg, &eps);
  t.run();
  CHECK(flat_params(t.model()).allFinite());
  const fs::path ckpt = root / "checkpoint.bin";

  RunConfig other = cfg;
  other.model.dim = 12;
  other.model.heads = 2;
  harness::Trainer<float> wrong(other, &eps);
  try {
    wrong.load_checkpoint(ckpt);
    FAIL("loaded a mismatched checkpoint");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == "config_mismatch");
  }
  RunConfig as_double = cfg;
  as_double.precision = harness::Precision::f64;
  wm::WorldModel<double> dm(as_double.model, harness::intention_points(as_double), 0);
  CHECK_THROWS_AS(harness::load_model(ckpt, as_double, dm), CheckpointError);
  CHECK_THROWS_AS(harness::Trainer<double>(cfg, &eps), ConfigError);

  std::ofstream(root / "junk.bin") << "not an archive";
  CHECK_THROWS_AS(harness::checkpoint_config(root / "junk.bin"), CheckpointError);
  fs::remove_all(root);
}

TEST_CASE("a non-finite loss aborts and leaves the last checkpoint intact") {
  const fs::path root = scratch_dir("nan");
  const auto eps = tiny_corpus();
  RunConfig cfg = tiny_run(root);
  cfg.steps = 2;
  harness::Trainer<double> t(cfg, &eps);
  t.run();
  const std::string before = read_bytes(root / "checkpoint.bin");

  Tensor<double> w = t.model().registry().entries().front().tensor;
  w.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  t.save_checkpoint(root / "poisoned.bin");
  harness::Trainer<double> resumed(tiny_run(root), &eps);
  resumed.load_checkpoint(root / "poisoned.bin");
  try {
    resumed.run();
    FAIL("trained through a NaN");
  } catch (const harness::TrainingError& e) {
    CHECK(e.kind() == "nan_loss");
  }
  CHECK(resumed.steps_done() == 2);
  CHECK(read_bytes(root / "checkpoint.bin") == before);
  fs::remove_all(root);
}

TEST_CASE("construction rejects corpora without usable frames") {
  const auto eps = tiny_corpus(2);
  RunConfig cfg = tiny_run("");
  cfg.holdout = 2;
  CHECK_THROWS_AS(harness::Trainer<double>(cfg, &eps), ConfigError);
  cfg.holdout = 0;
  cfg.model.horizon = 12;  // no frame has a future frame that far ahead
  CHECK_THROWS_AS(harness::Trainer<double>(cfg, &eps), DatasetError);
}

TEST_CASE("evaluation only feeds the model past frames") {
  const auto eps = tiny_corpus(1);
  RunConfig cfg = tiny_run("");
  wm::WorldModel<double> model(cfg.model, harness::intention_points(cfg), 8);
  const auto base = harness::evaluate(model, eps);
  CHECK(base.samples == 6);
  CHECK(base.skipped == 6);

  // Scramble the camera images from frame 3 on: plans at frames 0..2 cannot change.
  auto corrupted = eps;
  for (std::size_t t = 3; t < corrupted[0].frames.size(); ++t)
    for (auto& px : corrupted[0].frames[t].images) px = static_cast<std::uint8_t>(255 - px);
  const auto after = harness::evaluate(model, corrupted);
  REQUIRE(after.records.size() == base.records.size());
  bool later_changed = false;
  for (std::size_t i = 0; i < base.records.size(); ++i) {
    const auto& r0 = base.records[i];
    const auto& r1 = after.records[i];
    REQUIRE(r0.frame == r1.frame);
    if (r0.frame < 3) CHECK(r0.l2 == r1.l2);
    else later_changed = later_changed || r0.l2 != r1.l2;
  }
  CHECK(later_changed);
}

TEST_CASE("selector statistics are well-formed fractions") {
  const auto eps = tiny_corpus(2);
  RunConfig cfg = tiny_run("");
  wm::WorldModel<double> model(cfg.model, harness::intention_points(cfg), 8);
  const auto st = harness::selector_stats(model, eps, cfg.loss);
  CHECK(st.frames == 12);
  for (double f : {st.agreement, st.expert_match, st.scored_match}) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  CHECK(st.distinct_selected >= 1);
  CHECK(st.distinct_selected <= 2);
  CHECK(st.to_json().find("\"agreement\"") != std::string::npos);
}

TEST_CASE("tail keeps the trailing episodes") {
  const auto eps = tiny_corpus(3);
  CHECK(harness::tail(eps, 1).size() == 1);
  CHECK(harness::tail(eps, 1)[0].id == eps[2].id);
  CHECK(harness::tail(eps, 0).size() == 3);
  CHECK(harness::tail(eps, 7).size() == 3);
}

TEST_CASE("plots are well-formed SVG") {
  const auto eps = tiny_corpus(1);
  RunConfig cfg = tiny_run("");
  wm::WorldModel<double> model(cfg.model, harness::intention_points(cfg), 8);
  const std::span<const sim::FrameObservation> past(eps[0].frames.data(), 3);
  const auto plan = model.infer(past, eps[0].rig, sim::SimulatorPriors());
  for (const std::string& svg : {harness::plan_svg(plan, &eps[0]), harness::plan_svg(plan, nullptr)}) {
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    CHECK(svg.find("nan") == std::string::npos);
  }
  std::vector<harness::StepRecord> recs(3);
  for (int i = 0; i < 3; ++i) recs[static_cast<std::size_t>(i)].step = i + 1, recs[static_cast<std::size_t>(i)].total = 3.0 - i;
  const std::string curves = harness::metrics_svg(recs);
  CHECK(curves.rfind("<svg", 0) == 0);
  CHECK(curves.find("</svg>") != std::string::npos);
  CHECK(harness::metrics_svg({}).find("</svg>") != std::string::npos);
}

// Command-line front end: data generation, training, evaluation, planning
// and plots.
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "iwm/harness.hpp"

namespace fs = std::filesystem;
using namespace iwm;
using harness::LogLevel;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing_file", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

harness::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? harness::RunConfig() : harness::load_config(path);
}

template <typename S>
int train(harness::RunConfig cfg, const std::string& resume) {
  const auto episodes = sim::read_corpus(cfg.corpus);
  harness::log(LogLevel::info, "loaded " + std::to_string(episodes.size()) + " episodes from " + cfg.corpus);
  harness::Trainer<S> trainer(cfg, &episodes);
  if (!resume.empty()) trainer.load_checkpoint(resume);
  trainer.run();
  std::cout << "trained " << trainer.steps_done() << " steps; checkpoint " << (fs::path(cfg.out) / "checkpoint.bin").string()
            << "\n";
  return 0;
}

template <typename S>
int eval(const harness::RunConfig& cfg, const std::string& ckpt, const std::string& corpus, Index holdout,
         const std::string& out, bool agreement) {
  wm::WorldModel<S> model(cfg.model, harness::intention_points(cfg), cfg.seed);
  harness::load_model(ckpt, cfg, model);
  const auto episodes = harness::tail(sim::read_corpus(corpus), holdout);
  const auto report = harness::evaluate(model, episodes);
  auto j = nlohmann::json::parse(report.to_json());
  std::optional<harness::SelectorStats> stats;
  if (agreement) {
    stats = harness::selector_stats(model, episodes, cfg.loss);
    j["selector"] = nlohmann::json::parse(stats->to_json());
  }
  if (!out.empty()) write_text(out, j.dump(2) + "\n");
  std::cout << "samples " << report.samples << " skipped " << report.skipped << "\n"
            << "L2 (m)  1s " << report.l2_1s << "  2s " << report.l2_2s << "  3s " << report.l2_3s << "  avg "
            << report.l2_avg << "\n"
            << "CR (%)  1s " << report.cr_1s << "  2s " << report.cr_2s << "  3s " << report.cr_3s << "  avg "
            << report.cr_avg << "\n";
  if (stats) {
    std::cout << "selector agreement " << stats->agreement << "  expert match " << stats->expert_match
              << "  scored match " << stats->scored_match << "  distinct " << stats->distinct_selected << "\n";
  }
  return 0;
}

template <typename S>
int plan(const harness::RunConfig& cfg, const std::string& ckpt, const std::string& episode_dir, Index frame,
         const std::string& out) {
  wm::WorldModel<S> model(cfg.model, harness::intention_points(cfg), cfg.seed);
  harness::load_model(ckpt, cfg, model);
  const auto ep = sim::read_episode(episode_dir);
  if (frame < 0 || frame >= static_cast<Index>(ep.frames.size())) {
    throw ValueError("frame " + std::to_string(frame) + " is outside the episode");
  }
  const std::span<const sim::FrameObservation> past(ep.frames.data(), static_cast<std::size_t>(frame + 1));
  const auto result = model.infer(past, ep.rig, sim::SimulatorPriors());
  if (out.empty()) std::cout << result.to_json() << "\n";
  else write_text(out, result.to_json() + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intention-aware world model planner"};
  app.require_subcommand(1);

  std::string out, config_path, corpus, checkpoint, episode_dir, input, resume;
  std::uint64_t seed = 0;
  int episodes = 64, frames = 40;
  Index holdout = 0, frame = 0, steps = -1;
  bool aligned = false, agreement = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--out", out, "corpus directory")->required();
  gen->add_option("--seed", seed, "corpus seed");
  gen->add_option("--episodes", episodes, "episode count")->check(CLI::PositiveNumber);
  gen->add_option("--frames", frames, "frames per episode")->check(CLI::PositiveNumber);
  gen->add_flag("--aligned", aligned, "end every episode on an intention endpoint of its command");
  gen->add_option("--config", config_path, "run config supplying the intention vocabulary for --aligned");

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "run config")->required();
  tr->add_option("--corpus", corpus, "override data.corpus");
  tr->add_option("--out", out, "override data.out");
  tr->add_option("--steps", steps, "override train.steps");
  tr->add_option("--resume", resume, "continue from a checkpoint");

  auto* ev = app.add_subcommand("eval", "open-loop metrics on a corpus");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--corpus", corpus, "corpus directory")->required();
  ev->add_option("--holdout", holdout, "evaluate only the last N episodes");
  ev->add_option("--out", out, "metrics JSON output");
  ev->add_flag("--agreement", agreement, "also report selector statistics");

  auto* pl = app.add_subcommand("plan", "plan for one frame");
  pl->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  pl->add_option("--episode", episode_dir, "episode directory")->required();
  pl->add_option("--frame", frame, "frame index")->required();
  pl->add_option("--out", out, "plan JSON output (stdout when omitted)");

  auto* pt = app.add_subcommand("plot", "SVG of a plan or a training log");
  pt->add_option("--input", input, "plan JSON or metrics.jsonl")->required();
  pt->add_option("--episode", episode_dir, "episode directory for the scene behind a plan");
  pt->add_option("--out", out, "SVG output")->required();

  auto* cf = app.add_subcommand("config", "print the default config with every key");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      sim::GenConfig g;
      g.frames = frames;
      if (aligned) g.align_to = harness::intention_points(config_or_default(config_path));
      const auto index = sim::write_corpus(out, g, seed, episodes);
      std::cout << "wrote " << index.episodes.size() << " episodes to " << out << " (";
      for (const auto& [c, n] : index.maneuver_counts()) std::cout << " " << geometry::to_string(c) << " " << n;
      std::cout << " )\n";
      return 0;
    }
    if (*tr) {
      auto cfg = harness::load_config(config_path);
      if (!corpus.empty()) cfg.corpus = corpus;
      if (!out.empty()) cfg.out = out;
      if (steps >= 0) cfg.steps = steps;
      if (cfg.corpus.empty() || cfg.out.empty()) throw ConfigError("bad_value", "data.corpus and data.out are required");
      return cfg.precision == harness::Precision::f64 ? train<double>(cfg, resume) : train<float>(cfg, resume);
    }
    if (*ev) {
      const auto cfg = harness::checkpoint_config(checkpoint);
      return cfg.precision == harness::Precision::f64 ? eval<double>(cfg, checkpoint, corpus, holdout, out, agreement)
                                                      : eval<float>(cfg, checkpoint, corpus, holdout, out, agreement);
    }
    if (*pl) {
      const auto cfg = harness::checkpoint_config(checkpoint);
      return cfg.precision == harness::Precision::f64 ? plan<double>(cfg, checkpoint, episode_dir, frame, out)
                                                      : plan<float>(cfg, checkpoint, episode_dir, frame, out);
    }
    if (*pt) {
      std::string svg;
      if (fs::path(input).extension() == ".jsonl") {
        svg = harness::metrics_svg(harness::read_metrics_log(input));
      } else {
        const auto result = wm::PlanResult::from_json(read_text(input));
        std::optional<sim::Episode> ep;
        if (!episode_dir.empty()) ep = sim::read_episode(episode_dir);
        svg = harness::plan_svg(result, ep ? &*ep : nullptr);
      }
      write_text(out, svg);
      return 0;
    }
    if (*cf) {
      const harness::RunConfig defaults;
      const std::string text = harness::to_text(defaults);
      std::istringstream lines(text);
      std::string line;
      for (const auto& [key, help] : harness::config_keys()) {
        std::getline(lines, line);
        std::cout << "# " << help << "\n" << line << "\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "iwm/diffcore/optim.hpp"
#include "iwm/worldmodel.hpp"

/// Training loop, configuration, checkpoints, evaluation and plots.
namespace iwm::harness {

namespace fs = std::filesystem;

enum class Precision { f32, f64 };

struct RunConfig {
  enc::ModelConfig model;
  enc::VocabularyConfig vocab;
  std::uint64_t cluster_seed = 5;
  wm::LossWeights loss;
  OptimizerConfig optim;  // lr defaults to 5e-5
  Index steps = 1000;
  Index batch_size = 4;
  Index holdout = 0;  // trailing corpus episodes excluded from training
  Index checkpoint_every = 0;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::string corpus;
  std::string out;

  RunConfig();
};

/// Flat `key = value` text, one entry per line, dotted keys, `#` comments.
/// Unknown keys and malformed values throw ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const fs::path& path);
std::string to_text(const RunConfig& cfg);
/// Every recognised key with a one-line description.
std::vector<std::pair<std::string, std::string>> config_keys();

/// Intention points implied by the vocabulary settings of a run.
geometry::IntentionPointSet intention_points(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Logging.

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

/// Threshold from IWM_LOG_LEVEL (error|warn|info|debug), default warn.
LogLevel log_level();
void log(LogLevel level, const std::string& message);

/// Append-only JSON-lines sink; appends are serialized.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(fs::path path) : path_(std::move(path)) {}
  void append(const std::string& json_line);
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Training.

class TrainingError : public Error {
 public:
  TrainingError(const std::string& kind, const std::string& message) : Error(kind, message) {}
};

struct StepRecord {
  Index step = 0;
  double total = 0, semantic = 0, recon = 0, score = 0, traj = 0;
  double grad_norm = 0;
  std::string to_json() const;
};

/// (episode, frame) pairs usable for training: a future frame n ahead and a
/// full expert horizon inside the episode.
std::vector<std::pair<std::size_t, Index>> training_samples(const std::vector<sim::Episode>& episodes,
                                                            const enc::ModelConfig& model);

template <typename S>
class Trainer {
 public:
  Trainer(RunConfig cfg, const std::vector<sim::Episode>* episodes);

  /// Runs until `config().steps` total steps. Checkpoints land in
  /// `<out>/checkpoint.bin`; each step appends to `<out>/metrics.jsonl`.
  /// A non-finite loss aborts with TrainingError("nan_loss") and leaves the
  /// last checkpoint in place.
  void run(const std::function<void(const StepRecord&)>& on_step = {});
  StepRecord step();

  void save_checkpoint(const fs::path& path) const;
  void load_checkpoint(const fs::path& path);

  const RunConfig& config() const { return cfg_; }
  wm::WorldModel<S>& model() { return model_; }
  const wm::WorldModel<S>& model() const { return model_; }
  Index steps_done() const { return step_; }

 private:
  RunConfig cfg_;
  const std::vector<sim::Episode>* episodes_;
  std::vector<std::pair<std::size_t, Index>> samples_;
  wm::WorldModel<S> model_;
  Optimizer<S> optim_;
  std::mt19937_64 rng_;
  Index step_ = 0;
  std::optional<MetricsLog> log_;
  sim::SimulatorPriors priors_;
};

// ---------------------------------------------------------------------------
// Checkpoints and evaluation.

inline constexpr char kCheckpointFormat[] = "iwm-checkpoint";

/// Hash of the model dimensions plus precision, stored in checkpoints.
std::uint64_t checkpoint_hash(const RunConfig& cfg);

/// Config stored inside a checkpoint; throws CheckpointError when missing.
RunConfig checkpoint_config(const fs::path& path);

/// Loads the parameters of a checkpoint into a model built from `cfg`;
/// throws CheckpointError("config_mismatch") on dimension disagreement.
template <typename S>
void load_model(const fs::path& path, const RunConfig& cfg, wm::WorldModel<S>& model);

/// Runs inference on every frame with a full expert horizon, feeding the
/// model only frames 0..t, and scores the result.
template <typename S>
sim::MetricsReport evaluate(const wm::WorldModel<S>& model, const std::vector<sim::Episode>& episodes);

/// Selector behaviour over every frame with a future frame and a full
/// expert horizon. The expert's intention is the command's intention point
/// nearest to the expert endpoint.
struct SelectorStats {
  Index frames = 0;
  double agreement = 0;     // argmax(scores) == argmin(latent distances)
  double expert_match = 0;  // argmin(latent distances) == expert's intention
  double scored_match = 0;  // argmax(scores) == expert's intention
  Index distinct_selected = 0;
  std::string to_json() const;
};

template <typename S>
SelectorStats selector_stats(const wm::WorldModel<S>& model, const std::vector<sim::Episode>& episodes,
                             const wm::LossWeights& weights);

/// Trailing `holdout` episodes (all when holdout is 0 or too large).
std::vector<sim::Episode> tail(const std::vector<sim::Episode>& episodes, Index holdout);

// ---------------------------------------------------------------------------
// Plots (SVG).

/// Top-down scene at the plan's frame: road, obstacles, expert, all
/// candidates and the selected trajectory.
std::string plan_svg(const wm::PlanResult& plan, const sim::Episode* episode);

/// Loss curves from a metrics log.
std::string metrics_svg(const std::vector<StepRecord>& records);
std::vector<StepRecord> read_metrics_log(const fs::path& path);

}  // namespace iwm::harness

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iwm/diffcore/archive.hpp"
#include "iwm/encoders.hpp"

/// Multi-modal planning, intention-conditioned future prediction and the
/// latent-alignment selector.
namespace iwm::wm {

using enc::ModelConfig;
using geometry::Command;
using geometry::IntentionPointSet;
using sim::Trajectory;

template <typename S>
struct PlannerParams {
  AttentionParams<S> plan_attention;
  Mlp<S> trajectory_head;  // D -> D -> S*2
  Mlp<S> action_encoder;   // S*2 -> D -> D
  Tensor<S> q_future;      // [M*h*w, D]
  Linear<S> context_latent, context_action;
  std::vector<AttentionParams<S>> dream;
  Mlp<S> score_net;  // D -> D -> 1

  PlannerParams() = default;
  PlannerParams(ParameterRegistry<S>& reg, const ModelConfig& cfg);
};

struct LossWeights {
  double semantic = 0.2;
  double recon = 0.2;
  double score = 0.5;
  double traj = 1.0;
  double focal_gamma = 2.0;
};

/// Lowest index among the minima / maxima.
Index argmin_lowest(std::span<const double> values);
Index argmax_lowest(std::span<const double> values);

/// T[K, S, 2] in meters: queries attend over the latent's tokens, then a
/// per-intention head maps D -> S*2.
template <typename S>
Tensor<S> plan_trajectories(const Tensor<S>& q_plan, const Tensor<S>& latent, const PlannerParams<S>& p,
                            const ModelConfig& cfg);

/// A[K, D] from the flattened trajectories (divided by traj_scale).
template <typename S>
Tensor<S> action_encode(const Tensor<S>& trajectories, const Mlp<S>& encoder, double traj_scale);

/// K predicted latents [K, M, h, w, D]. For intention k the context is
/// latent W_L + (A[k] W_A + b) on every token, which equals a linear
/// projection of the channel-wise concatenation [latent, A[k]]; the shared
/// future queries pass through `dream` cross-attention layers with residuals.
template <typename S>
Tensor<S> dream_future(const Tensor<S>& actions, const Tensor<S>& latent, const PlannerParams<S>& p);

struct Selection {
  Index index = 0;
  std::vector<double> distances;
};

/// distances[k] = mse(predicted[k], actual); argmin with lowest-index ties.
template <typename S>
Selection select_modality(const Tensor<S>& predicted, const Tensor<S>& actual);

/// ScoreNet logits [K]: mean-pool each predicted latent, then the MLP.
template <typename S>
Tensor<S> score_logits(const Tensor<S>& predicted, const Mlp<S>& score_net);

/// softmax(score_logits).
template <typename S>
Tensor<S> score_latents(const Tensor<S>& predicted, const Mlp<S>& score_net);

/// alpha L_sem + beta L_recon + gamma L_score + eta L_traj. Terms with zero
/// weight are left out of the graph.
template <typename S>
Tensor<S> composite_loss(const Tensor<S>& sem, const Tensor<S>& recon, const Tensor<S>& score, const Tensor<S>& traj,
                         const LossWeights& w);
double composite_loss(double sem, double recon, double score, double traj, const LossWeights& w);

struct PlanResult {
  Index frame_id = 0;
  Command command = Command::straight;
  Index selected = 0;
  std::vector<double> scores;
  Trajectory trajectory;
  std::optional<std::vector<double>> distances;  // training-time diagnostics only
  std::vector<Trajectory> candidates;            // all K trajectories

  std::string to_json() const;
  static PlanResult from_json(const std::string& text);
};

/// Inference-time selection: scores = softmax(logits), j = argmax with the
/// lowest index on ties, trajectory = T[j].
template <typename S>
PlanResult make_plan(Index frame_id, Command command, const Tensor<S>& trajectories, const Tensor<S>& logits);

template <typename S>
struct TrainOutput {
  Tensor<S> loss;
  double semantic = 0, recon = 0, score = 0, traj = 0, total = 0;
  Index selected = 0;     // argmin of latent distances
  Index best_scored = 0;  // argmax of scores
  std::vector<double> distances, scores;
  std::optional<std::string> warning;
};

/// Owns the parameter registry, the encoder and planner parameters, and the
/// intention points the queries were built from.
template <typename S>
class WorldModel {
 public:
  WorldModel(const ModelConfig& cfg, IntentionPointSet intents, std::uint64_t seed);

  WorldModel(const WorldModel&) = delete;
  WorldModel& operator=(const WorldModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const IntentionPointSet& intentions() const { return intents_; }
  ParameterRegistry<S>& registry() { return reg_; }
  const ParameterRegistry<S>& registry() const { return reg_; }
  const enc::EncoderParams<S>& encoder() const { return enc_; }
  const PlannerParams<S>& planner() const { return plan_; }

  /// L_t from the current frame and, when given, the previous one (the
  /// current frame stands in for it otherwise).
  Tensor<S> latent(const sim::FrameObservation& current, const sim::FrameObservation* previous,
                   std::span<const geometry::CameraModel> rig, const sim::PriorProvider& priors,
                   enc::FrameFeatures<S>* current_features = nullptr) const;

  /// Alignment target for frame t: the latent of frame t + n, detached.
  Tensor<S> future_target(const sim::Episode& episode, Index t, const sim::PriorProvider& priors) const;

  /// Full training objective for frame t of an episode. The alignment
  /// target carries no gradient; `target` overrides the one computed from
  /// frame t + n.
  TrainOutput<S> training_loss(const sim::Episode& episode, Index t, const LossWeights& weights,
                               const sim::PriorProvider& priors, const Tensor<S>* target = nullptr) const;

  /// Inference on past-and-present frames only; history.back() is current.
  PlanResult infer(std::span<const sim::FrameObservation> history, std::span<const geometry::CameraModel> rig,
                   const sim::PriorProvider& priors) const;

  /// Parameters and intention points into / out of a checkpoint archive.
  void save_to(Archive& archive) const;
  void load_from(const Archive& archive);

 private:
  struct Heads {
    Tensor<S> trajectories, predicted, logits;
  };
  Heads run_heads(const Tensor<S>& latent, Command command) const;

  ModelConfig cfg_;
  IntentionPointSet intents_;
  ParameterRegistry<S> reg_;
  enc::EncoderParams<S> enc_;
  PlannerParams<S> plan_;
};

}  // namespace iwm::wm

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iwm/diffcore/losses.hpp"
#include "iwm/diffcore/nn.hpp"
#include "iwm/geometry.hpp"
#include "iwm/simworld.hpp"

/// Intention encoder and physical world latent encoder.
namespace iwm::enc {

using geometry::CameraModel;
using geometry::Command;
using geometry::IntentionPointSet;

// ---------------------------------------------------------------------------
// Trajectory vocabulary and intention points.

struct VocabularyConfig {
  Index size = 8192;
  Index waypoints = 6;
  double dt = 0.5;
  double min_speed = 1.0, max_speed = 6.0;  // m/s
  double max_yaw_rate = 0.4;                // rad/s
  // Endpoint lateral offset (m) separating left / straight / right.
  double lateral_threshold = 1.5;
  std::uint64_t seed = 11;
};

/// N constant-speed, constant-yaw-rate trajectories in the ego frame.
struct TrajectoryVocabulary {
  Index waypoints = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> data;  // [N, S*2]

  Index size() const { return data.rows(); }
  Eigen::Vector2d waypoint(Index i, Index s) const { return {data(i, 2 * s), data(i, 2 * s + 1)}; }
  Eigen::Vector2d endpoint(Index i) const { return waypoint(i, waypoints - 1); }
};

TrajectoryVocabulary make_vocabulary(const VocabularyConfig& config);

/// Per command, k-means over the endpoints of that command's trajectories.
/// Throws ValueError when a partition holds fewer than K trajectories.
IntentionPointSet build_intention_points(const TrajectoryVocabulary& vocab, Index k, std::uint64_t seed,
                                         double lateral_threshold);

// ---------------------------------------------------------------------------
// Model dimensions shared by the encoders and the world model.

struct ModelConfig {
  Index views = 3;
  Index image_h = 64, image_w = 64, channels = 3;
  Index feat_h = 8, feat_w = 8;
  Index dim = 256;
  Index intentions = 6;
  Index waypoints = 6;
  Index classes = 5;
  Index heads = 4;
  Index spatial_pe_dim = 96;  // encoding width of 3D cell positions
  Index backbone_width = 16;  // channels of the first conv; doubled by the second
  Index dream_layers = 2;
  Index horizon = 3;          // future frame gap n
  double traj_scale = 10.0;   // meters per unit of planner output
  bool temporal_residual = true;
  bool planner_residual = true;

  Index tokens() const { return views * feat_h * feat_w; }
  Index downsample() const { return image_h / feat_h; }
  void validate() const;
  /// Stable hash of every field; stored in checkpoints.
  std::uint64_t hash() const;
};

// ---------------------------------------------------------------------------
// Parameters.

/// Three 3x3 stride-2 convolutions with GELU between them.
template <typename S>
struct Backbone {
  std::vector<Tensor<S>> weights, biases;

  Backbone() = default;
  Backbone(ParameterRegistry<S>& reg, const std::string& name, Index in_channels, Index width, Index dim);
};

template <typename S>
struct EncoderParams {
  Backbone<S> backbone;
  Linear<S> semantic_head;
  Mlp<S> spatial_mlp;
  AttentionParams<S> temporal;
  Tensor<S> q_ego;
  Mlp<S> intention_mlp;
  AttentionParams<S> intention_attention;

  EncoderParams() = default;
  EncoderParams(ParameterRegistry<S>& reg, const ModelConfig& cfg);
};

// ---------------------------------------------------------------------------
// Operations.

/// uint8 frame images [M, H, W, ch] scaled to [0, 1].
template <typename S>
Tensor<S> image_tensor(const sim::FrameObservation& frame);

/// images[M, H, W, ch] -> F[M, H/8, W/8, D]; the same weights for every view.
template <typename S>
Tensor<S> context_encode(const Tensor<S>& images, const Backbone<S>& backbone);

template <typename S>
struct SemanticOutput {
  Tensor<S> logits;  // [M, h, w, C]
  Tensor<S> loss;    // [1]
  std::optional<std::string> warning;
};

/// 1x1 classification head over F; mean cross-entropy over pixels whose
/// target is not the ignore label.
template <typename S>
SemanticOutput<S> semantic_loss(const Tensor<S>& features, const Linear<S>& head,
                                std::span<const std::uint8_t> targets);

/// E = mlp(sinusoidal_pe(position_maps(depth, rig))), shaped like F.
template <typename S>
Tensor<S> spatial_embedding(std::span<const double> depth, std::span<const CameraModel> rig, const Mlp<S>& mlp,
                            Index pe_dim);

/// F + spatial_embedding(depth).
template <typename S>
Tensor<S> fuse_spatial(const Tensor<S>& features, std::span<const double> depth, std::span<const CameraModel> rig,
                       const Mlp<S>& mlp, Index pe_dim);

/// Current tokens attend over the previous frame's tokens; with `residual`
/// the current features are added back. Output shaped like `current`.
template <typename S>
Tensor<S> temporal_aggregate(const Tensor<S>& current, const Tensor<S>& previous, const AttentionParams<S>& attn,
                             bool residual);

/// Intention queries from raw endpoints[K, 2]: mlp(sinusoidal_pe(points)).
template <typename S>
Tensor<S> intention_queries(std::span<const Eigen::Vector2d> points, const Mlp<S>& mlp, Index dim);

/// Q_plan[K, D] = self_attention(q_ego + intention_queries(command's points)).
template <typename S>
Tensor<S> intention_encode(const Tensor<S>& q_ego, const IntentionPointSet& intents, Command command,
                           const Mlp<S>& mlp, const AttentionParams<S>& attn);

/// Features and fused features of one frame.
template <typename S>
struct FrameFeatures {
  Tensor<S> features;  // F
  Tensor<S> fused;     // F hat
};

template <typename S>
FrameFeatures<S> encode_frame(const sim::FrameObservation& frame, const sim::PriorProvider& priors,
                              std::span<const CameraModel> rig, const EncoderParams<S>& params, const ModelConfig& cfg);

}  // namespace iwm::enc

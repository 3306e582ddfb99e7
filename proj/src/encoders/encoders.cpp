#include "iwm/encoders.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace iwm::enc {

TrajectoryVocabulary make_vocabulary(const VocabularyConfig& cfg) {
  if (cfg.size < 1 || cfg.waypoints < 1 || !(cfg.dt > 0)) throw ValueError("bad vocabulary configuration");
  if (!(cfg.min_speed > 0) || cfg.max_speed < cfg.min_speed) throw ValueError("bad vocabulary speed range");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> speed(cfg.min_speed, cfg.max_speed);
  std::uniform_real_distribution<double> yaw_rate(-cfg.max_yaw_rate, cfg.max_yaw_rate);
  TrajectoryVocabulary v;
  v.waypoints = cfg.waypoints;
  v.data.resize(cfg.size, 2 * cfg.waypoints);
  for (Index i = 0; i < cfg.size; ++i) {
    const double s = speed(rng), w = yaw_rate(rng);
    for (Index k = 0; k < cfg.waypoints; ++k) {
      const double t = static_cast<double>(k + 1) * cfg.dt;
      if (std::abs(w) < 1e-9) {
        v.data(i, 2 * k) = s * t;
        v.data(i, 2 * k + 1) = 0.0;
      } else {
        v.data(i, 2 * k) = s * std::sin(w * t) / w;
        v.data(i, 2 * k + 1) = s * (1 - std::cos(w * t)) / w;
      }
    }
  }
  return v;
}

IntentionPointSet build_intention_points(const TrajectoryVocabulary& vocab, Index k, std::uint64_t seed,
                                         double lateral_threshold) {
  if (k < 1) throw ValueError("need at least one intention per command");
  IntentionPointSet out;
  out.k = k;
  for (Command c : geometry::kCommands) {
    std::vector<Eigen::Vector2d> ends;
    for (Index i = 0; i < vocab.size(); ++i) {
      const Eigen::Vector2d e = vocab.endpoint(i);
      if (geometry::command_of_endpoint(e, lateral_threshold) == c) ends.push_back(e);
    }
    if (static_cast<Index>(ends.size()) < k) {
      throw ValueError("command " + geometry::to_string(c) + " has " + std::to_string(ends.size()) +
                       " vocabulary trajectories, fewer than " + std::to_string(k) + " intentions");
    }
    const auto km = geometry::kmeans(ends, static_cast<int>(k), seed + static_cast<std::uint64_t>(c));
    out.points.insert(out.points.end(), km.centroids.begin(), km.centroids.end());
  }
  return out;
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v < 1) throw ValueError(std::string(what) + " must be positive");
  };
  positive(views, "views");
  positive(dim, "model width");
  positive(intentions, "intention count");
  positive(waypoints, "waypoint count");
  positive(classes, "class count");
  positive(heads, "attention heads");
  positive(dream_layers, "dream layers");
  positive(horizon, "future horizon");
  positive(backbone_width, "backbone width");
  if (feat_h < 1 || feat_w < 1 || image_h != 8 * feat_h || image_w != 8 * feat_w) {
    throw ShapeError("model", "image extents must be 8x the feature extents");
  }
  if (dim % heads != 0) throw ShapeError("model", "width not divisible by the head count");
  if (dim % 4 != 0) throw ShapeError("model", "width must be divisible by 4 for 2D intention encodings");
  if (spatial_pe_dim < 6 || spatial_pe_dim % 6 != 0) throw ShapeError("model", "spatial encoding width must be divisible by 6");
  if (!(traj_scale > 0)) throw ValueError("trajectory scale must be positive");
}

std::uint64_t ModelConfig::hash() const {
  // FNV-1a over the fields in declaration order.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (Index v : {views, image_h, image_w, channels, feat_h, feat_w, dim, intentions, waypoints, classes, heads,
                  spatial_pe_dim, backbone_width, dream_layers, horizon}) {
    mix(static_cast<std::uint64_t>(v));
  }
  std::uint64_t bits;
  std::memcpy(&bits, &traj_scale, 8);
  mix(bits);
  mix(temporal_residual);
  mix(planner_residual);
  return h;
}

template <typename S>
Backbone<S>::Backbone(ParameterRegistry<S>& reg, const std::string& name, Index in_channels, Index width, Index dim) {
  const Index widths[4] = {in_channels, width, 2 * width, dim};
  for (int i = 0; i < 3; ++i) {
    const Index fan_in = 9 * widths[i];
    const std::string n = name + ".conv" + std::to_string(i);
    weights.push_back(reg.create(n + ".weight", {fan_in, widths[i + 1]}, fan_in));
    biases.push_back(reg.create(n + ".bias", {widths[i + 1]}, fan_in));
  }
}

template <typename S>
EncoderParams<S>::EncoderParams(ParameterRegistry<S>& reg, const ModelConfig& cfg)
    : backbone(reg, "encoder.backbone", cfg.channels, cfg.backbone_width, cfg.dim),
      semantic_head(reg, "encoder.semantic_head", cfg.dim, cfg.classes),
      spatial_mlp(reg, "encoder.spatial_mlp", {cfg.spatial_pe_dim, cfg.dim, cfg.dim}),
      temporal(reg, "encoder.temporal", cfg.dim, cfg.dim, cfg.heads),
      q_ego(reg.create("encoder.q_ego", {cfg.dim}, cfg.dim)),
      intention_mlp(reg, "encoder.intention_mlp", {cfg.dim, cfg.dim, cfg.dim}),
      intention_attention(reg, "encoder.intention_attention", cfg.dim, cfg.dim, cfg.heads) {}

template <typename S>
Tensor<S> image_tensor(const sim::FrameObservation& frame) {
  Vec<S> v(static_cast<Index>(frame.images.size()));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(frame.images[static_cast<std::size_t>(i)]) / S(255);
  return Tensor<S>({frame.views, frame.image_h, frame.image_w, frame.channels}, std::move(v));
}

template <typename S>
Tensor<S> context_encode(const Tensor<S>& images, const Backbone<S>& backbone) {
  if (images.rank() != 4) throw ShapeError("context_encode", "images must be [M,H,W,ch], got " + to_string(images.shape()));
  if (images.dim(1) % 8 != 0 || images.dim(2) % 8 != 0) {
    throw ShapeError("context_encode", "image extents " + to_string(images.shape()) + " not divisible by 8");
  }
  Tensor<S> x = images;
  for (std::size_t i = 0; i < backbone.weights.size(); ++i) {
    x = conv2d(x, backbone.weights[i], backbone.biases[i], 3, 2, 1);
    if (i + 1 < backbone.weights.size()) x = gelu(x);
  }
  return x;
}

template <typename S>
SemanticOutput<S> semantic_loss(const Tensor<S>& features, const Linear<S>& head,
                                std::span<const std::uint8_t> targets) {
  SemanticOutput<S> out;
  out.logits = head(features);
  Index counted = 0;
  for (auto id : targets) counted += id != kIgnoreLabel;
  out.loss = cross_entropy(out.logits, targets);
  if (counted == 0) out.warning = "semantic targets are all ignored; semantic loss is 0";
  return out;
}

template <typename S>
Tensor<S> spatial_embedding(std::span<const double> depth, std::span<const CameraModel> rig, const Mlp<S>& mlp,
                            Index pe_dim) {
  const geometry::PositionMap pm = geometry::position_maps(depth, rig);
  Vec<S> pos(pm.points.size());
  for (Index i = 0; i < pos.size(); ++i) pos[i] = static_cast<S>(pm.points.data()[i]);
  const Tensor<S> positions({pm.views, pm.h, pm.w, 3}, std::move(pos));
  return mlp(geometry::sinusoidal_pe(positions, pe_dim));
}

template <typename S>
Tensor<S> fuse_spatial(const Tensor<S>& features, std::span<const double> depth, std::span<const CameraModel> rig,
                       const Mlp<S>& mlp, Index pe_dim) {
  const Tensor<S> e = spatial_embedding(depth, rig, mlp, pe_dim);
  if (e.shape() != features.shape()) throw ShapeError("fuse_spatial", features.shape(), e.shape());
  return add(features, e);
}

template <typename S>
Tensor<S> temporal_aggregate(const Tensor<S>& current, const Tensor<S>& previous, const AttentionParams<S>& attn,
                             bool residual) {
  if (current.shape() != previous.shape()) throw ShapeError("temporal_aggregate", current.shape(), previous.shape());
  const Index D = current.cols(), T = current.rows();
  const Tensor<S> q = reshape(current, {T, D});
  Tensor<S> out = cross_attention(q, reshape(previous, {T, D}), attn);
  if (residual) out = add(q, out);
  return reshape(out, current.shape());
}

template <typename S>
Tensor<S> intention_queries(std::span<const Eigen::Vector2d> points, const Mlp<S>& mlp, Index dim) {
  const Index K = static_cast<Index>(points.size());
  Vec<S> v(2 * K);
  for (Index k = 0; k < K; ++k) {
    v[2 * k] = static_cast<S>(points[static_cast<std::size_t>(k)].x());
    v[2 * k + 1] = static_cast<S>(points[static_cast<std::size_t>(k)].y());
  }
  return mlp(geometry::sinusoidal_pe(Tensor<S>({K, 2}, std::move(v)), dim));
}

template <typename S>
Tensor<S> intention_encode(const Tensor<S>& q_ego, const IntentionPointSet& intents, Command command,
                           const Mlp<S>& mlp, const AttentionParams<S>& attn) {
  const Index D = q_ego.size();
  const Tensor<S> q_i = intention_queries(intents.of(command), mlp, D);
  return self_attention(add(q_i, q_ego), attn);
}

template <typename S>
FrameFeatures<S> encode_frame(const sim::FrameObservation& frame, const sim::PriorProvider& priors,
                              std::span<const CameraModel> rig, const EncoderParams<S>& params, const ModelConfig& cfg) {
  if (frame.views != cfg.views || frame.image_h != cfg.image_h || frame.image_w != cfg.image_w ||
      frame.h != cfg.feat_h || frame.w != cfg.feat_w) {
    throw ShapeError("encode_frame", Shape{frame.views, frame.image_h, frame.image_w, frame.h, frame.w},
                     Shape{cfg.views, cfg.image_h, cfg.image_w, cfg.feat_h, cfg.feat_w});
  }
  FrameFeatures<S> out;
  out.features = context_encode(image_tensor<S>(frame), params.backbone);
  const std::vector<double> depth = priors.depth_of(frame);
  out.fused = fuse_spatial(out.features, depth, rig, params.spatial_mlp, cfg.spatial_pe_dim);
  return out;
}

#define IWM_INSTANTIATE(S)                                                                                           \
  template struct Backbone<S>;                                                                                       \
  template struct EncoderParams<S>;                                                                                  \
  template Tensor<S> image_tensor<S>(const sim::FrameObservation&);                                                  \
  template Tensor<S> context_encode(const Tensor<S>&, const Backbone<S>&);                                           \
  template SemanticOutput<S> semantic_loss(const Tensor<S>&, const Linear<S>&, std::span<const std::uint8_t>);       \
  template Tensor<S> spatial_embedding(std::span<const double>, std::span<const CameraModel>, const Mlp<S>&, Index); \
  template Tensor<S> fuse_spatial(const Tensor<S>&, std::span<const double>, std::span<const CameraModel>,           \
                                  const Mlp<S>&, Index);                                                             \
  template Tensor<S> temporal_aggregate(const Tensor<S>&, const Tensor<S>&, const AttentionParams<S>&, bool);        \
  template Tensor<S> intention_queries(std::span<const Eigen::Vector2d>, const Mlp<S>&, Index);                      \
  template Tensor<S> intention_encode(const Tensor<S>&, const IntentionPointSet&, Command, const Mlp<S>&,            \
                                      const AttentionParams<S>&);                                                    \
  template FrameFeatures<S> encode_frame(const sim::FrameObservation&, const sim::PriorProvider&,                    \
                                         std::span<const CameraModel>, const EncoderParams<S>&, const ModelConfig&);

IWM_INSTANTIATE(float)
IWM_INSTANTIATE(double)

}  // namespace iwm::enc

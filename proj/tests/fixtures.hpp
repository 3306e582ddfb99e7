#pragma once

#include "iwm/encoders.hpp"
#include "iwm/simworld.hpp"

namespace iwm::testing {

/// Tiny model dimensions that still exercise every code path: 16x16 images,
/// 2x2 feature maps, D = 8.
inline enc::ModelConfig tiny_model(Index intentions = 2) {
  enc::ModelConfig m;
  m.image_h = m.image_w = 16;
  m.feat_h = m.feat_w = 2;
  m.dim = 8;
  m.heads = 2;
  m.intentions = intentions;
  m.spatial_pe_dim = 6;
  m.backbone_width = 2;
  m.dream_layers = 2;
  return m;
}

inline sim::GenConfig tiny_world(int frames = 12) {
  sim::GenConfig g;
  g.frames = frames;
  g.rig.image_h = g.rig.image_w = 16;
  g.rig.feat_h = g.rig.feat_w = 2;
  return g;
}

/// Intention points from a small vocabulary (fast k-means).
inline geometry::IntentionPointSet small_intentions(Index k, Index waypoints = 6) {
  enc::VocabularyConfig v;
  v.size = 600;
  v.waypoints = waypoints;
  return enc::build_intention_points(enc::make_vocabulary(v), k, 3, v.lateral_threshold);
}

}  // namespace iwm::testing

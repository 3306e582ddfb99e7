#include "iwm/worldmodel.hpp"

#include <cmath>

#include <json.hpp>

namespace iwm::wm {

Index argmin_lowest(std::span<const double> values) {
  Index best = 0;
  for (Index k = 1; k < static_cast<Index>(values.size()); ++k) {
    if (values[static_cast<std::size_t>(k)] < values[static_cast<std::size_t>(best)]) best = k;
  }
  return best;
}

Index argmax_lowest(std::span<const double> values) {
  Index best = 0;
  for (Index k = 1; k < static_cast<Index>(values.size()); ++k) {
    if (values[static_cast<std::size_t>(k)] > values[static_cast<std::size_t>(best)]) best = k;
  }
  return best;
}

template <typename S>
PlannerParams<S>::PlannerParams(ParameterRegistry<S>& reg, const ModelConfig& cfg)
    : plan_attention(reg, "planner.attention", cfg.dim, cfg.dim, cfg.heads),
      trajectory_head(reg, "planner.trajectory_head", {cfg.dim, cfg.dim, 2 * cfg.waypoints}),
      action_encoder(reg, "planner.action_encoder", {2 * cfg.waypoints, cfg.dim, cfg.dim}),
      q_future(reg.create("dreamer.q_future", {cfg.tokens(), cfg.dim}, cfg.dim)),
      context_latent(reg, "dreamer.context_latent", cfg.dim, cfg.dim),
      context_action(reg, "dreamer.context_action", cfg.dim, cfg.dim) {
  for (Index l = 0; l < cfg.dream_layers; ++l) {
    dream.emplace_back(reg, "dreamer.layer" + std::to_string(l), cfg.dim, cfg.dim, cfg.heads);
  }
  score_net = Mlp<S>(reg, "scorenet", {cfg.dim, cfg.dim, 1});
}

template <typename S>
Tensor<S> plan_trajectories(const Tensor<S>& q_plan, const Tensor<S>& latent, const PlannerParams<S>& p,
                            const ModelConfig& cfg) {
  const Index K = q_plan.dim(0), D = q_plan.dim(1);
  if (latent.cols() != D) throw ShapeError("plan_trajectories", q_plan.shape(), latent.shape());
  Tensor<S> h = cross_attention(q_plan, reshape(latent, {latent.rows(), D}), p.plan_attention);
  if (cfg.planner_residual) h = add(q_plan, h);
  const Tensor<S> out = p.trajectory_head(h);
  if (out.cols() % 2 != 0) throw ShapeError("plan_trajectories", "trajectory head width must be even");
  return scale(reshape(out, {K, out.cols() / 2, 2}), static_cast<S>(cfg.traj_scale));
}

template <typename S>
Tensor<S> action_encode(const Tensor<S>& trajectories, const Mlp<S>& encoder, double traj_scale) {
  const Index K = trajectories.dim(0);
  const Tensor<S> flat = reshape(trajectories, {K, trajectories.size() / K});
  return encoder(scale(flat, static_cast<S>(1.0 / traj_scale)));
}

template <typename S>
Tensor<S> dream_future(const Tensor<S>& actions, const Tensor<S>& latent, const PlannerParams<S>& p) {
  const Index K = actions.dim(0), D = actions.dim(1), T = p.q_future.dim(0);
  if (latent.cols() != D || latent.rows() != T) throw ShapeError("dream_future", latent.shape(), p.q_future.shape());
  const Tensor<S> lat = p.context_latent(reshape(latent, {T, D}));
  const Tensor<S> act = p.context_action(actions);
  std::vector<Tensor<S>> out;
  out.reserve(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    const Tensor<S> ctx = add(lat, select(act, k));
    Tensor<S> x = p.q_future;
    for (const auto& layer : p.dream) x = add(x, cross_attention(x, ctx, layer));
    out.push_back(x);
  }
  Shape shape = latent.shape();
  shape.insert(shape.begin(), K);
  return reshape(stack(out), shape);
}

template <typename S>
Selection select_modality(const Tensor<S>& predicted, const Tensor<S>& actual) {
  const Index K = predicted.dim(0), n = actual.size();
  if (predicted.size() != K * n) throw ShapeError("select_modality", predicted.shape(), actual.shape());
  Selection sel;
  const auto& a = actual.values();
  for (Index k = 0; k < K; ++k) {
    double acc = 0;
    for (Index i = 0; i < n; ++i) {
      const double d = static_cast<double>(predicted.values()[k * n + i]) - static_cast<double>(a[i]);
      acc += d * d;
    }
    sel.distances.push_back(acc / static_cast<double>(n));
  }
  sel.index = argmin_lowest(sel.distances);
  return sel;
}

template <typename S>
Tensor<S> score_logits(const Tensor<S>& predicted, const Mlp<S>& score_net) {
  const Index K = predicted.dim(0);
  std::vector<Tensor<S>> pooled;
  for (Index k = 0; k < K; ++k) pooled.push_back(mean_rows(select(predicted, k)));
  return reshape(score_net(stack(pooled)), {K});
}

template <typename S>
Tensor<S> score_latents(const Tensor<S>& predicted, const Mlp<S>& score_net) {
  return softmax(score_logits(predicted, score_net));
}

template <typename S>
Tensor<S> composite_loss(const Tensor<S>& sem, const Tensor<S>& recon, const Tensor<S>& score, const Tensor<S>& traj,
                         const LossWeights& w) {
  std::optional<Tensor<S>> total;
  auto term = [&](const Tensor<S>& t, double weight) {
    if (weight == 0) return;
    const Tensor<S> x = scale(t, static_cast<S>(weight));
    total = total ? add(*total, x) : x;
  };
  term(sem, w.semantic);
  term(recon, w.recon);
  term(score, w.score);
  term(traj, w.traj);
  return total ? *total : Tensor<S>::zeros({1});
}

double composite_loss(double sem, double recon, double score, double traj, const LossWeights& w) {
  return w.semantic * sem + w.recon * recon + w.score * score + w.traj * traj;
}

std::string PlanResult::to_json() const {
  using nlohmann::json;
  auto traj_json = [](const Trajectory& t) {
    json a = json::array();
    for (Index i = 0; i < t.rows(); ++i) a.push_back({t(i, 0), t(i, 1)});
    return a;
  };
  json j = {{"frame_id", frame_id},
            {"command", geometry::to_string(command)},
            {"j", selected},
            {"scores", scores},
            {"trajectory", traj_json(trajectory)}};
  if (distances) j["distances"] = *distances;
  json c = json::array();
  for (const auto& t : candidates) c.push_back(traj_json(t));
  j["candidates"] = c;
  return j.dump();
}

PlanResult PlanResult::from_json(const std::string& text) {
  using nlohmann::json;
  PlanResult r;
  try {
    const json j = json::parse(text);
    auto traj_from = [](const json& a) {
      Trajectory t(static_cast<Index>(a.size()), 2);
      for (std::size_t i = 0; i < a.size(); ++i) {
        t(static_cast<Index>(i), 0) = a.at(i).at(0).get<double>();
        t(static_cast<Index>(i), 1) = a.at(i).at(1).get<double>();
      }
      return t;
    };
    r.frame_id = j.at("frame_id");
    r.command = geometry::command_from_string(j.at("command"));
    r.selected = j.at("j");
    r.scores = j.at("scores").get<std::vector<double>>();
    r.trajectory = traj_from(j.at("trajectory"));
    if (j.contains("distances")) r.distances = j.at("distances").get<std::vector<double>>();
    for (const auto& c : j.at("candidates")) r.candidates.push_back(traj_from(c));
  } catch (const json::exception& e) {
    throw ValueError(std::string("malformed plan record: ") + e.what());
  }
  return r;
}

template <typename S>
WorldModel<S>::WorldModel(const ModelConfig& cfg, IntentionPointSet intents, std::uint64_t seed)
    : cfg_(cfg), intents_(std::move(intents)), reg_(seed) {
  cfg_.validate();
  if (intents_.k != cfg_.intentions || static_cast<Index>(intents_.points.size()) != 3 * intents_.k) {
    throw ShapeError("world_model", "intention set does not hold " + std::to_string(cfg_.intentions) + " points per command");
  }
  enc_ = enc::EncoderParams<S>(reg_, cfg_);
  plan_ = PlannerParams<S>(reg_, cfg_);
}

template <typename S>
Tensor<S> WorldModel<S>::latent(const sim::FrameObservation& current, const sim::FrameObservation* previous,
                                std::span<const geometry::CameraModel> rig, const sim::PriorProvider& priors,
                                enc::FrameFeatures<S>* current_features) const {
  enc::FrameFeatures<S> cur = enc::encode_frame(current, priors, rig, enc_, cfg_);
  const Tensor<S> prev = previous ? enc::encode_frame(*previous, priors, rig, enc_, cfg_).fused : cur.fused;
  Tensor<S> out = enc::temporal_aggregate(cur.fused, prev, enc_.temporal, cfg_.temporal_residual);
  if (current_features) *current_features = std::move(cur);
  return out;
}

template <typename S>
typename WorldModel<S>::Heads WorldModel<S>::run_heads(const Tensor<S>& latent, Command command) const {
  Heads h;
  const Tensor<S> q_plan =
      enc::intention_encode(enc_.q_ego, intents_, command, enc_.intention_mlp, enc_.intention_attention);
  h.trajectories = plan_trajectories(q_plan, latent, plan_, cfg_);
  const Tensor<S> actions = action_encode(h.trajectories, plan_.action_encoder, cfg_.traj_scale);
  h.predicted = dream_future(actions, latent, plan_);
  h.logits = score_logits(h.predicted, plan_.score_net);
  return h;
}

namespace {

template <typename S>
Tensor<S> trajectory_tensor(const Trajectory& t) {
  Vec<S> v(t.size());
  for (Index i = 0; i < t.size(); ++i) v[i] = static_cast<S>(t.data()[i]);
  return Tensor<S>({t.rows(), 2}, std::move(v));
}

template <typename S>
std::vector<double> to_doubles(const Tensor<S>& t) {
  std::vector<double> out(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(t.values()[i]);
  return out;
}

}  // namespace

template <typename S>
Tensor<S> WorldModel<S>::future_target(const sim::Episode& ep, Index t, const sim::PriorProvider& priors) const {
  const Index frames = static_cast<Index>(ep.frames.size());
  if (t < 0 || t + cfg_.horizon >= frames) {
    throw ValueError("frame " + std::to_string(t) + " has no future frame " + std::to_string(cfg_.horizon) + " ahead");
  }
  NoGradGuard guard;
  const auto f = static_cast<std::size_t>(t + cfg_.horizon);
  return latent(ep.frames[f], &ep.frames[f - 1], ep.rig, priors).detach();
}

template <typename S>
TrainOutput<S> WorldModel<S>::training_loss(const sim::Episode& ep, Index t, const LossWeights& w,
                                            const sim::PriorProvider& priors, const Tensor<S>* fixed_target) const {
  if (t < 0 || t >= static_cast<Index>(ep.frames.size())) throw ValueError("frame " + std::to_string(t) + " is outside the episode");
  const Tensor<S> target = fixed_target ? fixed_target->detach() : future_target(ep, t, priors);
  const auto& frame = ep.frames[static_cast<std::size_t>(t)];
  if (frame.expert.rows() != cfg_.waypoints) throw ShapeError("training_loss", "expert horizon differs from the model's");

  TrainOutput<S> out;
  enc::FrameFeatures<S> feats;
  const Tensor<S> lat =
      latent(frame, t > 0 ? &ep.frames[static_cast<std::size_t>(t - 1)] : nullptr, ep.rig, priors, &feats);

  const std::vector<std::uint8_t> labels = priors.semantics_of(frame);
  std::optional<NoGradGuard> sem_guard;
  if (w.semantic == 0) sem_guard.emplace();
  auto sem = enc::semantic_loss(feats.features, enc_.semantic_head, labels);
  sem_guard.reset();
  out.warning = sem.warning;

  Heads h;
  {
    // Without world-model losses the dreamer and ScoreNet only feed the
    // selection, so skip their graph.
    std::optional<NoGradGuard> guard;
    const Tensor<S> q_plan =
        enc::intention_encode(enc_.q_ego, intents_, frame.command, enc_.intention_mlp, enc_.intention_attention);
    h.trajectories = plan_trajectories(q_plan, lat, plan_, cfg_);
    if (w.recon == 0 && w.score == 0) guard.emplace();
    const Tensor<S> actions = action_encode(h.trajectories, plan_.action_encoder, cfg_.traj_scale);
    h.predicted = dream_future(actions, lat, plan_);
    h.logits = score_logits(h.predicted, plan_.score_net);
  }

  const Selection sel = select_modality(h.predicted, target);
  out.selected = sel.index;
  out.distances = sel.distances;
  const Tensor<S> probs = softmax(h.logits);
  out.scores = to_doubles(probs);
  out.best_scored = argmax_lowest(out.scores);

  const Tensor<S> recon = mse(select(h.predicted, sel.index), target);
  const Tensor<S> score = focal(probs, sel.index, static_cast<S>(w.focal_gamma));
  const Tensor<S> traj = l1(select(h.trajectories, sel.index), trajectory_tensor<S>(frame.expert));
  out.loss = composite_loss(sem.loss, recon, score, traj, w);
  out.semantic = static_cast<double>(sem.loss.item());
  out.recon = static_cast<double>(recon.item());
  out.score = static_cast<double>(score.item());
  out.traj = static_cast<double>(traj.item());
  out.total = static_cast<double>(out.loss.item());
  return out;
}

template <typename S>
PlanResult WorldModel<S>::infer(std::span<const sim::FrameObservation> history,
                                std::span<const geometry::CameraModel> rig, const sim::PriorProvider& priors) const {
  if (history.empty()) throw ValueError("inference needs at least the current frame");
  NoGradGuard guard;
  const auto& cur = history.back();
  const sim::FrameObservation* prev = history.size() > 1 ? &history[history.size() - 2] : nullptr;
  const Heads h = run_heads(latent(cur, prev, rig, priors), cur.command);
  return make_plan(cur.t, cur.command, h.trajectories, h.logits);
}

template <typename S>
PlanResult make_plan(Index frame_id, Command command, const Tensor<S>& trajectories, const Tensor<S>& logits) {
  const Index K = trajectories.dim(0), S_ = trajectories.dim(1);
  if (logits.size() != K) throw ShapeError("make_plan", trajectories.shape(), logits.shape());
  PlanResult r;
  r.frame_id = frame_id;
  r.command = command;
  r.scores = to_doubles(softmax(reshape(logits, {K})));
  r.selected = argmax_lowest(r.scores);
  for (Index k = 0; k < K; ++k) {
    Trajectory t(S_, 2);
    for (Index i = 0; i < 2 * S_; ++i) t.data()[i] = static_cast<double>(trajectories.values()[k * 2 * S_ + i]);
    r.candidates.push_back(t);
  }
  r.trajectory = r.candidates[static_cast<std::size_t>(r.selected)];
  return r;
}

template <typename S>
void WorldModel<S>::save_to(Archive& archive) const {
  for (const auto& p : reg_.entries()) archive.put_tensor(p.name, p.tensor);
  std::vector<double> pts;
  for (const auto& p : intents_.points) {
    pts.push_back(p.x());
    pts.push_back(p.y());
  }
  archive.put_values("intentions.points", {3, intents_.k, 2}, pts.data());
}

template <typename S>
void WorldModel<S>::load_from(const Archive& archive) {
  for (const auto& p : reg_.entries()) {
    Tensor<S> t = p.tensor;  // shares storage with the registry entry
    archive.load_into(p.name, t);
  }
  std::vector<double> pts(static_cast<std::size_t>(6 * intents_.k));
  archive.get_values("intentions.points", {3, intents_.k, 2}, pts.data());
  for (std::size_t i = 0; i < intents_.points.size(); ++i) intents_.points[i] = {pts[2 * i], pts[2 * i + 1]};
}

#define IWM_INSTANTIATE(S)                                                                                        \
  template struct PlannerParams<S>;                                                                               \
  template Tensor<S> plan_trajectories(const Tensor<S>&, const Tensor<S>&, const PlannerParams<S>&,               \
                                       const ModelConfig&);                                                       \
  template Tensor<S> action_encode(const Tensor<S>&, const Mlp<S>&, double);                                      \
  template Tensor<S> dream_future(const Tensor<S>&, const Tensor<S>&, const PlannerParams<S>&);                   \
  template PlanResult make_plan(Index, Command, const Tensor<S>&, const Tensor<S>&);                              \
  template Selection select_modality(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> score_logits(const Tensor<S>&, const Mlp<S>&);                                               \
  template Tensor<S> score_latents(const Tensor<S>&, const Mlp<S>&);                                              \
  template Tensor<S> composite_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,       \
                                    const LossWeights&);                                                          \
  template class WorldModel<S>;

IWM_INSTANTIATE(float)
IWM_INSTANTIATE(double)

}  // namespace iwm::wm

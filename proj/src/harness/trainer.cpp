#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "iwm/harness.hpp"

namespace iwm::harness {

std::string StepRecord::to_json() const {
  nlohmann::json j{{"step", step},         {"loss", total}, {"semantic", semantic}, {"recon", recon},
                   {"score", score},       {"traj", traj},  {"grad_norm", grad_norm}};
  return j.dump();
}

std::vector<std::pair<std::size_t, Index>> training_samples(const std::vector<sim::Episode>& episodes,
                                                            const enc::ModelConfig& model) {
  std::vector<std::pair<std::size_t, Index>> out;
  const Index reach = std::max(model.horizon, model.waypoints);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Index frames = static_cast<Index>(episodes[e].frames.size());
    for (Index t = 0; t + reach <= frames - 1; ++t) out.emplace_back(e, t);
  }
  return out;
}

std::uint64_t checkpoint_hash(const RunConfig& cfg) {
  return cfg.model.hash() ^ (cfg.precision == Precision::f64 ? 0x9e3779b97f4a7c15ULL : 0ULL);
}

namespace {

template <typename S>
constexpr Precision precision_of() {
  return std::is_same_v<S, double> ? Precision::f64 : Precision::f32;
}

void save_atomically(const Archive& ar, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  ar.save(tmp);
  fs::rename(tmp, path);
}

}  // namespace

template <typename S>
Trainer<S>::Trainer(RunConfig cfg, const std::vector<sim::Episode>* episodes)
    : cfg_(std::move(cfg)),
      episodes_(episodes),
      model_(cfg_.model, intention_points(cfg_), cfg_.seed),
      optim_(cfg_.optim, model_.registry()),
      rng_(cfg_.seed ^ 0x5851f42d4c957f2dULL) {
  if (cfg_.precision != precision_of<S>()) throw ConfigError("bad_value", "trainer precision differs from the config");
  const Index usable = static_cast<Index>(episodes_->size()) - cfg_.holdout;
  if (usable <= 0) throw ConfigError("bad_value", "train.holdout leaves no training episodes");
  for (const auto& s : training_samples(*episodes_, cfg_.model)) {
    if (static_cast<Index>(s.first) < usable) samples_.push_back(s);
  }
  if (samples_.empty()) throw DatasetError("no_samples", "no frame has both a future frame and a full expert horizon");
  if (!cfg_.out.empty()) {
    fs::create_directories(cfg_.out);
    log_.emplace(fs::path(cfg_.out) / "metrics.jsonl");
  }
}

template <typename S>
StepRecord Trainer<S>::step() {
  auto& reg = model_.registry();
  reg.zero_grad();
  StepRecord rec;
  rec.step = step_ + 1;
  std::uniform_int_distribution<std::size_t> pick(0, samples_.size() - 1);
  const S inv = S(1) / static_cast<S>(cfg_.batch_size);
  for (Index b = 0; b < cfg_.batch_size; ++b) {
    const auto [e, t] = samples_[pick(rng_)];
    const auto out = model_.training_loss((*episodes_)[e], t, cfg_.loss, priors_);
    if (out.warning) log(LogLevel::debug, *out.warning);
    if (!std::isfinite(out.total)) {
      throw TrainingError("nan_loss", "non-finite loss at step " + std::to_string(rec.step) + " (episode " +
                                          (*episodes_)[e].id + ", frame " + std::to_string(t) + ")");
    }
    scale(out.loss, inv).backward();
    rec.total += out.total / cfg_.batch_size;
    rec.semantic += out.semantic / cfg_.batch_size;
    rec.recon += out.recon / cfg_.batch_size;
    rec.score += out.score / cfg_.batch_size;
    rec.traj += out.traj / cfg_.batch_size;
  }
  for (const auto& p : reg.entries()) {
    if (p.tensor.has_grad() && !p.tensor.grad().allFinite()) {
      throw TrainingError("nan_loss", "non-finite gradient for " + p.name + " at step " + std::to_string(rec.step));
    }
  }
  rec.grad_norm = optim_.step(reg);
  ++step_;
  if (log_) log_->append(rec.to_json());
  return rec;
}

template <typename S>
void Trainer<S>::run(const std::function<void(const StepRecord&)>& on_step) {
  const fs::path ckpt = cfg_.out.empty() ? fs::path() : fs::path(cfg_.out) / "checkpoint.bin";
  const auto start = std::chrono::steady_clock::now();
  while (step_ < cfg_.steps) {
    const StepRecord rec = step();
    if (on_step) on_step(rec);
    if (step_ % 50 == 0 || step_ == cfg_.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::ostringstream msg;
      msg << "step " << step_ << "/" << cfg_.steps << " loss " << rec.total << " traj " << rec.traj << " ("
          << secs << " s)";
      log(LogLevel::info, msg.str());
    }
    if (!ckpt.empty() && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) save_checkpoint(ckpt);
  }
  if (!ckpt.empty()) save_checkpoint(ckpt);
}

template <typename S>
void Trainer<S>::save_checkpoint(const fs::path& path) const {
  Archive ar;
  ar.metadata.config_hash = checkpoint_hash(cfg_);
  ar.metadata.seed = cfg_.seed;
  ar.metadata.step = step_;
  ar.metadata.extra["format"] = kCheckpointFormat;
  ar.metadata.extra["config"] = to_text(cfg_);
  std::ostringstream rng;
  rng << rng_;
  ar.metadata.extra["rng"] = rng.str();
  ar.metadata.extra["optimizer_steps"] = std::to_string(optim_.steps());
  model_.save_to(ar);
  const auto& entries = model_.registry().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape shape{optim_.first_moments()[i].size()};
    ar.put_values("optim.m/" + entries[i].name, shape, optim_.first_moments()[i].data());
    ar.put_values("optim.v/" + entries[i].name, shape, optim_.second_moments()[i].data());
  }
  save_atomically(ar, path);
}

template <typename S>
void Trainer<S>::load_checkpoint(const fs::path& path) {
  const Archive ar = Archive::load(path);
  if (ar.metadata.config_hash != checkpoint_hash(cfg_)) {
    throw CheckpointError("config_mismatch", path.string() + " was written for a different model configuration");
  }
  model_.load_from(ar);
  const auto& entries = model_.registry().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape shape{optim_.first_moments()[i].size()};
    ar.get_values("optim.m/" + entries[i].name, shape, optim_.first_moments()[i].data());
    ar.get_values("optim.v/" + entries[i].name, shape, optim_.second_moments()[i].data());
  }
  auto extra = [&](const std::string& key) {
    auto it = ar.metadata.extra.find(key);
    if (it == ar.metadata.extra.end()) throw CheckpointError("missing_entry", "checkpoint lacks " + key);
    return it->second;
  };
  std::istringstream rng(extra("rng"));
  rng >> rng_;
  optim_.set_steps(std::stoll(extra("optimizer_steps")));
  step_ = ar.metadata.step;
}

RunConfig checkpoint_config(const fs::path& path) {
  const Archive ar = Archive::load(path);
  auto it = ar.metadata.extra.find("format");
  if (it == ar.metadata.extra.end() || it->second != kCheckpointFormat) {
    throw CheckpointError("bad_format", path.string() + " is not a model checkpoint");
  }
  return parse_config(ar.metadata.extra.at("config"));
}

template <typename S>
void load_model(const fs::path& path, const RunConfig& cfg, wm::WorldModel<S>& model) {
  const Archive ar = Archive::load(path);
  if (ar.metadata.config_hash != checkpoint_hash(cfg) || model.config().hash() != cfg.model.hash()) {
    throw CheckpointError("config_mismatch", path.string() + " was written for a different model configuration");
  }
  model.load_from(ar);
}

std::vector<sim::Episode> tail(const std::vector<sim::Episode>& episodes, Index holdout) {
  if (holdout <= 0 || holdout >= static_cast<Index>(episodes.size())) return episodes;
  return {episodes.end() - holdout, episodes.end()};
}

template <typename S>
sim::MetricsReport evaluate(const wm::WorldModel<S>& model, const std::vector<sim::Episode>& episodes) {
  const sim::SimulatorPriors priors;
  std::vector<sim::MetricsReport> reports;
  for (const auto& ep : episodes) {
    std::map<Index, sim::Trajectory> preds;
    const Index frames = static_cast<Index>(ep.frames.size());
    Index skipped = 0;
    for (Index t = 0; t < frames; ++t) {
      if (t + model.config().waypoints > frames - 1) {
        ++skipped;
        continue;
      }
      const std::span<const sim::FrameObservation> past(ep.frames.data(), static_cast<std::size_t>(t + 1));
      preds[t] = model.infer(past, ep.rig, priors).trajectory;
    }
    auto r = sim::evaluate_plan(ep, preds);
    r.skipped += skipped;
    reports.push_back(std::move(r));
  }
  return sim::merge_reports(reports);
}

std::string SelectorStats::to_json() const {
  return nlohmann::json{{"frames", frames},
                        {"agreement", agreement},
                        {"expert_match", expert_match},
                        {"scored_match", scored_match},
                        {"distinct_selected", distinct_selected}}
      .dump();
}

template <typename S>
SelectorStats selector_stats(const wm::WorldModel<S>& model, const std::vector<sim::Episode>& episodes,
                             const wm::LossWeights& weights) {
  const sim::SimulatorPriors priors;
  NoGradGuard guard;
  SelectorStats st;
  Index agree = 0, expert = 0, scored = 0;
  std::set<Index> seen;
  for (const auto& [e, t] : training_samples(episodes, model.config())) {
    const auto& frame = episodes[e].frames[static_cast<std::size_t>(t)];
    const auto out = model.training_loss(episodes[e], t, weights, priors);
    const Eigen::Vector2d end = frame.expert.row(frame.expert.rows() - 1).transpose();
    const auto points = model.intentions().of(frame.command);
    std::vector<double> gaps;
    for (const auto& p : points) gaps.push_back((p - end).norm());
    const Index truth = wm::argmin_lowest(gaps);
    agree += out.selected == out.best_scored;
    expert += out.selected == truth;
    scored += out.best_scored == truth;
    seen.insert(out.selected);
    ++st.frames;
  }
  if (st.frames > 0) {
    const double n = static_cast<double>(st.frames);
    st.agreement = static_cast<double>(agree) / n;
    st.expert_match = static_cast<double>(expert) / n;
    st.scored_match = static_cast<double>(scored) / n;
  }
  st.distinct_selected = static_cast<Index>(seen.size());
  return st;
}

template class Trainer<float>;
template class Trainer<double>;
template void load_model(const fs::path&, const RunConfig&, wm::WorldModel<float>&);
template void load_model(const fs::path&, const RunConfig&, wm::WorldModel<double>&);
template sim::MetricsReport evaluate(const wm::WorldModel<float>&, const std::vector<sim::Episode>&);
template sim::MetricsReport evaluate(const wm::WorldModel<double>&, const std::vector<sim::Episode>&);
template SelectorStats selector_stats(const wm::WorldModel<float>&, const std::vector<sim::Episode>&,
                                      const wm::LossWeights&);
template SelectorStats selector_stats(const wm::WorldModel<double>&, const std::vector<sim::Episode>&,
                                      const wm::LossWeights&);

}  // namespace iwm::harness

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "iwm/harness.hpp"

namespace iwm::harness {

RunConfig::RunConfig() {
  optim.kind = OptimizerKind::adam;
  optim.lr = 5e-5;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& what) {
  throw ConfigError("bad_value", key + " = '" + value + "': expected " + what);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad(key, v, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "true or false");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Key {
  std::string name, help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define IWM_INDEX_KEY(name, field, help)                                                        \
  Key {                                                                                         \
    name, help, [](RunConfig& c, const std::string& v) { c.field = parse_int<Index>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                              \
  }
#define IWM_U64_KEY(name, field, help)                                                                 \
  Key {                                                                                                \
    name, help, [](RunConfig& c, const std::string& v) { c.field = parse_int<std::uint64_t>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                     \
  }
#define IWM_DOUBLE_KEY(name, field, help)                                                     \
  Key {                                                                                       \
    name, help, [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                       \
  }
#define IWM_BOOL_KEY(name, field, help)                                                     \
  Key {                                                                                     \
    name, help, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }          \
  }
#define IWM_STRING_KEY(name, field, help)                                 \
  Key {                                                                   \
    name, help, [](RunConfig& c, const std::string& v) { c.field = v; }, \
        [](const RunConfig& c) { return c.field; }                        \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      IWM_INDEX_KEY("model.views", model.views, "camera views M"),
      IWM_INDEX_KEY("model.image_h", model.image_h, "image height"),
      IWM_INDEX_KEY("model.image_w", model.image_w, "image width"),
      IWM_INDEX_KEY("model.channels", model.channels, "image channels"),
      IWM_INDEX_KEY("model.feat_h", model.feat_h, "feature map height"),
      IWM_INDEX_KEY("model.feat_w", model.feat_w, "feature map width"),
      IWM_INDEX_KEY("model.dim", model.dim, "latent width D"),
      IWM_INDEX_KEY("model.intentions", model.intentions, "intentions per command K"),
      IWM_INDEX_KEY("model.waypoints", model.waypoints, "planned waypoints S"),
      IWM_INDEX_KEY("model.classes", model.classes, "semantic classes C"),
      IWM_INDEX_KEY("model.heads", model.heads, "attention heads"),
      IWM_INDEX_KEY("model.spatial_pe_dim", model.spatial_pe_dim, "positional encoding width of 3D cell positions"),
      IWM_INDEX_KEY("model.backbone_width", model.backbone_width, "channels of the first backbone conv"),
      IWM_INDEX_KEY("model.dream_layers", model.dream_layers, "cross-attention layers of the future predictor"),
      IWM_INDEX_KEY("model.horizon", model.horizon, "future frame gap n"),
      IWM_DOUBLE_KEY("model.traj_scale", model.traj_scale, "meters per unit of planner output"),
      IWM_BOOL_KEY("model.temporal_residual", model.temporal_residual, "residual around temporal attention"),
      IWM_BOOL_KEY("model.planner_residual", model.planner_residual, "residual around planner attention"),
      IWM_INDEX_KEY("vocab.size", vocab.size, "trajectory vocabulary size N"),
      IWM_DOUBLE_KEY("vocab.dt", vocab.dt, "waypoint spacing in seconds"),
      IWM_DOUBLE_KEY("vocab.min_speed", vocab.min_speed, "slowest vocabulary speed (m/s)"),
      IWM_DOUBLE_KEY("vocab.max_speed", vocab.max_speed, "fastest vocabulary speed (m/s)"),
      IWM_DOUBLE_KEY("vocab.max_yaw_rate", vocab.max_yaw_rate, "largest vocabulary yaw rate (rad/s)"),
      IWM_DOUBLE_KEY("vocab.lateral_threshold", vocab.lateral_threshold, "endpoint offset separating commands (m)"),
      IWM_U64_KEY("vocab.seed", vocab.seed, "vocabulary sampling seed"),
      IWM_U64_KEY("vocab.cluster_seed", cluster_seed, "k-means seed"),
      IWM_DOUBLE_KEY("loss.semantic", loss.semantic, "semantic loss weight"),
      IWM_DOUBLE_KEY("loss.recon", loss.recon, "latent reconstruction weight"),
      IWM_DOUBLE_KEY("loss.score", loss.score, "score (focal) loss weight"),
      IWM_DOUBLE_KEY("loss.traj", loss.traj, "trajectory L1 weight"),
      IWM_DOUBLE_KEY("loss.focal_gamma", loss.focal_gamma, "focal exponent"),
      Key{"optim.kind", "adam or sgd",
          [](RunConfig& c, const std::string& v) {
            if (v == "adam") c.optim.kind = OptimizerKind::adam;
            else if (v == "sgd") c.optim.kind = OptimizerKind::sgd;
            else bad("optim.kind", v, "adam or sgd");
          },
          [](const RunConfig& c) { return to_string(c.optim.kind); }},
      IWM_DOUBLE_KEY("optim.lr", optim.lr, "learning rate"),
      IWM_DOUBLE_KEY("optim.beta1", optim.beta1, "Adam first-moment decay"),
      IWM_DOUBLE_KEY("optim.beta2", optim.beta2, "Adam second-moment decay"),
      IWM_DOUBLE_KEY("optim.eps", optim.eps, "Adam epsilon"),
      IWM_DOUBLE_KEY("optim.clip_norm", optim.clip_norm, "global gradient norm clip, 0 disables"),
      IWM_INDEX_KEY("train.steps", steps, "optimizer steps"),
      IWM_INDEX_KEY("train.batch_size", batch_size, "samples per step"),
      IWM_INDEX_KEY("train.holdout", holdout, "trailing corpus episodes kept out of training"),
      IWM_INDEX_KEY("train.checkpoint_every", checkpoint_every, "steps between checkpoints, 0 for the end only"),
      IWM_U64_KEY("train.seed", seed, "initialization and sampling seed"),
      Key{"train.precision", "f32 or f64",
          [](RunConfig& c, const std::string& v) {
            if (v == "f32") c.precision = Precision::f32;
            else if (v == "f64") c.precision = Precision::f64;
            else bad("train.precision", v, "f32 or f64");
          },
          [](const RunConfig& c) { return std::string(c.precision == Precision::f32 ? "f32" : "f64"); }},
      IWM_STRING_KEY("data.corpus", corpus, "corpus directory"),
      IWM_STRING_KEY("data.out", out, "run output directory"),
  };
  return table;
}

void validate(const RunConfig& c) {
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw ConfigError("bad_value", e.what());
  }
  if (c.vocab.waypoints != c.model.waypoints) throw ConfigError("bad_value", "vocabulary and model waypoints differ");
  if (c.steps < 0 || c.batch_size < 1 || c.holdout < 0 || c.checkpoint_every < 0) {
    throw ConfigError("bad_value", "train.steps, train.holdout and train.checkpoint_every must be >= 0, batch_size >= 1");
  }
  if (c.optim.lr <= 0) throw ConfigError("bad_value", "optim.lr must be positive");
  for (double w : {c.loss.semantic, c.loss.recon, c.loss.score, c.loss.traj, c.loss.focal_gamma}) {
    if (w < 0) throw ConfigError("bad_value", "loss weights must be non-negative");
  }
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("syntax_error", "line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError("unknown_key", "line " + std::to_string(lineno) + ": " + key);
    it->set(cfg, value);
  }
  cfg.vocab.waypoints = cfg.model.waypoints;
  validate(cfg);
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing_file", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> config_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back(k.name, k.help);
  return out;
}

geometry::IntentionPointSet intention_points(const RunConfig& cfg) {
  enc::VocabularyConfig v = cfg.vocab;
  v.waypoints = cfg.model.waypoints;
  return enc::build_intention_points(enc::make_vocabulary(v), cfg.model.intentions, cfg.cluster_seed,
                                     v.lateral_threshold);
}

LogLevel log_level() {
  const char* env = std::getenv("IWM_LOG_LEVEL");
  if (!env) return LogLevel::warn;
  const std::string v = env;
  if (v == "error") return LogLevel::error;
  if (v == "info") return LogLevel::info;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::warn;
}

void log(LogLevel level, const std::string& message) {
  static const LogLevel threshold = log_level();
  if (level > threshold) return;
  static std::mutex mu;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << message << "\n";
}

void MetricsLog::append(const std::string& json_line) {
  std::lock_guard<std::mutex> lock(mu_);
  std::ofstream out(path_, std::ios::app);
  if (!out) throw Error("io_error", "cannot append to " + path_.string());
  out << json_line << "\n";
}

}  // namespace iwm::harness

#pragma once

// Flat run configuration shared by every CLI command. Serialized as one
// JSON object with a fixed key order; unknown keys are rejected on load.

#include <filesystem>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "trackdiff/denoiser.hpp"

namespace trackdiff {

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out;

  // data
  std::string data;
  std::size_t clips = 64;
  std::size_t frames = 8;
  std::size_t width = 32;
  std::size_t height = 32;
  std::size_t instances = 3;
  std::size_t patch = 4;

  // model
  std::size_t dim = 64;
  std::size_t heads = kDefaultHeads;
  std::size_t blocks = 2;
  std::size_t encoder_blocks = 1;
  std::size_t mlp_ratio = 2;
  std::size_t roi_grid = kDefaultRoiGrid;
  std::size_t fourier_freqs = kDefaultFourierFreqs;
  std::size_t max_instances = kDefaultMaxInstances;
  std::size_t categories = kDefaultCategories;
  bool instance_emb = true;
  bool enhancer = true;
  std::string fusion = "cross";
  std::string enhancer_pos = "decoder";
  std::string motion_fusion = "concat";

  // training
  std::string stage = "image";
  std::string init;
  bool allow_cold_start = false;
  std::size_t steps = 2000;
  std::size_t batch = 2;
  std::string optimizer = "momentum";
  double lr = 1e-3;
  double momentum = 0.9;
  double clip_norm = 1.0;
  bool cosine_decay = false;
  double cond_drop = 0.1;
  std::size_t log_every = 10;

  // diffusion and sampling
  std::size_t schedule_steps = kTrainSteps;
  double beta_start = kBetaStart;
  double beta_end = kBetaEnd;
  std::size_t sample_steps = kSampleSteps;
  double cfg = 5.0;
  std::string ckpt;

  void validate() const {
    auto one_of = [](const std::string& v, std::initializer_list<const char*> ok, const char* key) {
      for (const char* o : ok)
        if (v == o) return;
      throw ConfigError(std::string(key) + ": unsupported value '" + v + "'");
    };
    one_of(fusion, {"cross", "self"}, "fusion");
    one_of(enhancer_pos, {"encoder", "decoder"}, "enhancer_pos");
    one_of(motion_fusion, {"concat", "add"}, "motion_fusion");
    one_of(stage, {"image", "video"}, "stage");
    one_of(optimizer, {"momentum", "adam"}, "optimizer");
    if (patch == 0) throw ConfigError("patch must be positive");
    if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) throw ConfigError("cond_drop must lie in [0, 1]");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  }

  DenoiserConfig model(std::size_t latent_frames, std::size_t h, std::size_t w, std::size_t channels) const {
    DenoiserConfig c;
    c.stage = stage == "image" ? Stage::kImage : Stage::kVideo;
    c.frames = c.stage == Stage::kImage ? 1 : latent_frames;
    c.height = h;
    c.width = w;
    c.channels = channels;
    c.dim = dim;
    c.n_heads = heads;
    c.n_blocks = blocks;
    c.encoder_blocks = encoder_blocks;
    c.mlp_ratio = mlp_ratio;
    c.roi_grid = roi_grid;
    c.n_freq = fourier_freqs;
    c.k_max = max_instances;
    c.n_categories = categories;
    c.use_instance_emb = instance_emb;
    c.use_enhancer = enhancer;
    c.instance_fusion = fusion == "self" ? InstanceFusion::kGatedSelf : InstanceFusion::kGatedCross;
    c.enhancer_position = enhancer_pos == "encoder" ? EnhancerPosition::kEncoder : EnhancerPosition::kDecoder;
    c.motion_fusion = motion_fusion == "add" ? MotionFusion::kAdd : MotionFusion::kConcat;
    c.validate();
    return c;
  }

  TrainOptions train_options() const {
    TrainOptions o;
    o.optimizer = optimizer == "adam" ? Optimizer::kAdam : Optimizer::kMomentum;
    o.steps = steps;
    o.batch = batch;
    o.lr = lr;
    o.momentum = momentum;
    o.clip_norm = clip_norm;
    o.cosine_decay = cosine_decay;
    o.cond_drop = cond_drop;
    o.log_every = std::max<std::size_t>(1, log_every);
    o.seed = seed;
    o.schedule_steps = schedule_steps;
    o.beta_start = beta_start;
    o.beta_end = beta_end;
    return o;
  }

  SampleOptions sample_options() const {
    SampleOptions o;
    o.guidance = cfg;
    o.seed = seed;
    o.steps = sample_steps;
    o.schedule_steps = schedule_steps;
    o.beta_start = beta_start;
    o.beta_end = beta_end;
    return o;
  }

  /// Every key in serialization order; works on const and mutable configs.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("command", self.command);
    fn("seed", self.seed);
    fn("out", self.out);
    fn("data", self.data);
    fn("clips", self.clips);
    fn("frames", self.frames);
    fn("width", self.width);
    fn("height", self.height);
    fn("instances", self.instances);
    fn("patch", self.patch);
    fn("dim", self.dim);
    fn("heads", self.heads);
    fn("blocks", self.blocks);
    fn("encoder_blocks", self.encoder_blocks);
    fn("mlp_ratio", self.mlp_ratio);
    fn("roi_grid", self.roi_grid);
    fn("fourier_freqs", self.fourier_freqs);
    fn("max_instances", self.max_instances);
    fn("categories", self.categories);
    fn("instance_emb", self.instance_emb);
    fn("enhancer", self.enhancer);
    fn("fusion", self.fusion);
    fn("enhancer_pos", self.enhancer_pos);
    fn("motion_fusion", self.motion_fusion);
    fn("stage", self.stage);
    fn("init", self.init);
    fn("allow_cold_start", self.allow_cold_start);
    fn("steps", self.steps);
    fn("batch", self.batch);
    fn("optimizer", self.optimizer);
    fn("lr", self.lr);
    fn("momentum", self.momentum);
    fn("clip_norm", self.clip_norm);
    fn("cosine_decay", self.cosine_decay);
    fn("cond_drop", self.cond_drop);
    fn("log_every", self.log_every);
    fn("schedule_steps", self.schedule_steps);
    fn("beta_start", self.beta_start);
    fn("beta_end", self.beta_end);
    fn("sample_steps", self.sample_steps);
    fn("cfg", self.cfg);
    fn("ckpt", self.ckpt);
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  RunConfig::visit(c, [&](const char* key, const auto& v) { j[key] = v; });
  return j;
}

/// Overlays `j` onto `base`. Unknown keys and wrongly typed values are
/// ConfigErrors.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  std::set<std::string> known;
  RunConfig::visit(base, [&](const char* key, auto& v) {
    known.insert(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      v = it->template get<std::decay_t<decltype(v)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("run config key '") + key + "' has the wrong type");
    }
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown run config key '" + it.key() + "'");
  }
  return base;
}

inline void write_run_config(const std::filesystem::path& dir, const RunConfig& c) {
  std::filesystem::create_directories(dir);
  write_text_file((dir / "config.json").string(), to_json(c).dump(2) + "\n");
}

}  // namespace trackdiff

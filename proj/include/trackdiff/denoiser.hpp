#pragma once

// Noise-prediction network: a flat stack of transformer blocks over
// patchified latents. Each block runs per-frame spatial attention, gated
// self-attention with the frame's location tokens, temporal attention and
// gated fusion of enhanced instance features (video stage), and an MLP.

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "trackdiff/attention.hpp"
#include "trackdiff/checkpoint.hpp"
#include "trackdiff/conditioning.hpp"
#include "trackdiff/diffusion.hpp"
#include "trackdiff/enhancer.hpp"
#include "trackdiff/trackdata.hpp"

namespace trackdiff {

enum class Stage { kImage, kVideo };
enum class InstanceFusion { kGatedCross, kGatedSelf };
enum class EnhancerPosition { kEncoder, kDecoder };

struct DenoiserConfig {
  std::size_t frames = 8;
  std::size_t height = 8;  // latent extents
  std::size_t width = 8;
  std::size_t channels = 48;
  std::size_t dim = 64;
  std::size_t n_heads = kDefaultHeads;
  std::size_t n_blocks = 2;
  std::size_t encoder_blocks = 1;  // blocks [0, encoder_blocks) form the encoder half
  std::size_t mlp_ratio = 2;
  std::size_t roi_grid = kDefaultRoiGrid;
  std::size_t n_freq = kDefaultFourierFreqs;
  std::size_t k_max = kDefaultMaxInstances;
  std::size_t n_categories = kDefaultCategories;
  Stage stage = Stage::kVideo;
  EnhancerPosition enhancer_position = EnhancerPosition::kDecoder;
  InstanceFusion instance_fusion = InstanceFusion::kGatedCross;
  MotionFusion motion_fusion = MotionFusion::kConcat;
  bool use_enhancer = true;
  bool use_instance_emb = true;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("denoiser config: " + what);
    };
    need(frames >= 1 && height >= 1 && width >= 1 && channels >= 1, "latent extents must be positive");
    need(dim >= 2 && dim % 2 == 0, "dim must be even");
    need(n_heads >= 1 && dim % n_heads == 0, "dim must be divisible by heads");
    need(n_blocks >= 1, "at least one block");
    need(encoder_blocks <= n_blocks, "encoder_blocks exceeds n_blocks");
    need(mlp_ratio >= 1 && roi_grid >= 1 && n_freq >= 1, "mlp_ratio, roi_grid and n_freq must be positive");
    need(k_max >= 1 && n_categories >= 1, "k_max and n_categories must be positive");
    need(stage == Stage::kVideo || frames == 1, "image stage runs on single frames");
  }

  bool block_is_encoder(std::size_t b) const { return b < encoder_blocks; }

  bool block_has_enhancer(std::size_t b) const {
    if (stage != Stage::kVideo || !use_enhancer) return false;
    return block_is_encoder(b) == (enhancer_position == EnhancerPosition::kEncoder);
  }
};

inline const char* to_string(Stage s) { return s == Stage::kImage ? "image" : "video"; }
inline const char* to_string(InstanceFusion f) { return f == InstanceFusion::kGatedCross ? "cross" : "self"; }
inline const char* to_string(EnhancerPosition p) { return p == EnhancerPosition::kEncoder ? "encoder" : "decoder"; }
inline const char* to_string(MotionFusion m) { return m == MotionFusion::kConcat ? "concat" : "add"; }

/// Flat string map stored in checkpoint metadata.
inline Metadata config_to_metadata(const DenoiserConfig& c) {
  return {
      {"frames", std::to_string(c.frames)},
      {"height", std::to_string(c.height)},
      {"width", std::to_string(c.width)},
      {"channels", std::to_string(c.channels)},
      {"dim", std::to_string(c.dim)},
      {"heads", std::to_string(c.n_heads)},
      {"blocks", std::to_string(c.n_blocks)},
      {"encoder_blocks", std::to_string(c.encoder_blocks)},
      {"mlp_ratio", std::to_string(c.mlp_ratio)},
      {"roi_grid", std::to_string(c.roi_grid)},
      {"fourier_freqs", std::to_string(c.n_freq)},
      {"max_instances", std::to_string(c.k_max)},
      {"categories", std::to_string(c.n_categories)},
      {"stage", to_string(c.stage)},
      {"enhancer_pos", to_string(c.enhancer_position)},
      {"fusion", to_string(c.instance_fusion)},
      {"motion_fusion", to_string(c.motion_fusion)},
      {"enhancer", c.use_enhancer ? "1" : "0"},
      {"instance_emb", c.use_instance_emb ? "1" : "0"},
  };
}

inline DenoiserConfig config_from_metadata(const Metadata& m) {
  auto get = [&](const char* k) -> const std::string& {
    auto it = m.find(k);
    if (it == m.end()) throw ConfigError(std::string("checkpoint metadata lacks '") + k + "'");
    return it->second;
  };
  auto num = [&](const char* k) { return static_cast<std::size_t>(std::stoull(get(k))); };
  DenoiserConfig c;
  c.frames = num("frames");
  c.height = num("height");
  c.width = num("width");
  c.channels = num("channels");
  c.dim = num("dim");
  c.n_heads = num("heads");
  c.n_blocks = num("blocks");
  c.encoder_blocks = num("encoder_blocks");
  c.mlp_ratio = num("mlp_ratio");
  c.roi_grid = num("roi_grid");
  c.n_freq = num("fourier_freqs");
  c.k_max = num("max_instances");
  c.n_categories = num("categories");
  c.stage = get("stage") == "image" ? Stage::kImage : Stage::kVideo;
  c.enhancer_position = get("enhancer_pos") == "encoder" ? EnhancerPosition::kEncoder : EnhancerPosition::kDecoder;
  c.instance_fusion = get("fusion") == "self" ? InstanceFusion::kGatedSelf : InstanceFusion::kGatedCross;
  c.motion_fusion = get("motion_fusion") == "add" ? MotionFusion::kAdd : MotionFusion::kConcat;
  c.use_enhancer = get("enhancer") == "1";
  c.use_instance_emb = get("instance_emb") == "1";
  c.validate();
  return c;
}

struct BlockParams {
  bool has_temporal = false;
  bool has_enhancer = false;
  AttentionParams spatial;
  AttentionParams gated_self;
  GateParam gate_self;
  AttentionParams temporal;
  EnhancerParams enhancer;
  AttentionParams fusion;
  GateParam gate_fusion;
  LayerNormParams mlp_norm;
  Linear mlp1, mlp2;

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    spatial.visit(fn, join_name(prefix, "spatial"));
    gated_self.visit(fn, join_name(prefix, "gated_self"));
    gate_self.visit(fn, join_name(prefix, "gate_self"));
    mlp_norm.visit(fn, join_name(prefix, "mlp_norm"));
    mlp1.visit(fn, join_name(prefix, "mlp1"));
    mlp2.visit(fn, join_name(prefix, "mlp2"));
    if (has_temporal) temporal.visit(fn, join_name(prefix, "temporal"));
    if (has_enhancer) {
      enhancer.visit(fn, join_name(prefix, "enhancer"));
      fusion.visit(fn, join_name(prefix, "fusion"));
      gate_fusion.visit(fn, join_name(prefix, "gate_fusion"));
    }
  }
};

struct DenoiserParams {
  DenoiserConfig cfg;
  Linear in_proj;     // C -> dim
  Linear pos_proj;    // fourier(patch cell) -> dim
  Linear time1, time2;
  Tensor caption;     // [dim]
  ConditioningParams cond;
  std::vector<BlockParams> blocks;
  LayerNormParams out_norm;
  Linear out_proj;    // dim -> C
  Tensor skip;        // [C, C], latent straight to output

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix = "") {
    in_proj.visit(fn, join_name(prefix, "in_proj"));
    pos_proj.visit(fn, join_name(prefix, "pos_proj"));
    time1.visit(fn, join_name(prefix, "time1"));
    time2.visit(fn, join_name(prefix, "time2"));
    fn(join_name(prefix, "caption"), caption);
    cond.visit(fn, join_name(prefix, "cond"));
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].visit(fn, join_name(prefix, "block" + std::to_string(b)));
    out_norm.visit(fn, join_name(prefix, "out_norm"));
    out_proj.visit(fn, join_name(prefix, "out_proj"));
    fn(join_name(prefix, "skip"), skip);
  }

  /// Every gate of the network, in visit order.
  std::vector<GateParam*> gates() {
    std::vector<GateParam*> out;
    for (auto& b : blocks) {
      out.push_back(&b.gate_self);
      if (b.has_enhancer) out.push_back(&b.gate_fusion);
    }
    return out;
  }
};

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = cfg.dim;
  DenoiserParams p;
  p.cfg = cfg;
  p.in_proj = Linear::init(cfg.channels, d, rng);
  p.pos_proj = Linear::init(8 * cfg.n_freq, d, rng);
  p.time1 = Linear::init(d, d, rng);
  p.time2 = Linear::init(d, d, rng);
  p.caption = init_zeros({d});
  p.cond = ConditioningParams::init(d, rng, cfg.n_categories, cfg.k_max, cfg.n_freq);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    BlockParams bp;
    bp.spatial = AttentionParams::init(d, cfg.n_heads, rng);
    bp.gated_self = AttentionParams::init(d, cfg.n_heads, rng);
    bp.gate_self = GateParam::closed();
    bp.mlp_norm = LayerNormParams::init(d);
    bp.mlp1 = Linear::init(d, cfg.mlp_ratio * d, rng);
    bp.mlp2 = Linear::init(cfg.mlp_ratio * d, d, rng);
    p.blocks.push_back(std::move(bp));
  }
  p.out_norm = LayerNormParams::init(d);
  p.out_proj = Linear::init(d, cfg.channels, rng);
  p.skip = init_zeros({cfg.channels, cfg.channels});
  // Video-only parameters come last so the image-stage draws above are
  // identical for both stages.
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    auto& bp = p.blocks[b];
    if (cfg.stage == Stage::kVideo) {
      bp.has_temporal = true;
      bp.temporal = AttentionParams::init(d, cfg.n_heads, rng, false, /*zero_output=*/true);
    }
    if (cfg.block_has_enhancer(b)) {
      bp.has_enhancer = true;
      bp.enhancer = EnhancerParams::init(d, d, cfg.n_heads, rng, cfg.roi_grid, cfg.n_freq);
      bp.enhancer.motion_fusion = cfg.motion_fusion;
      bp.fusion = AttentionParams::init(d, cfg.n_heads, rng, cfg.instance_fusion == InstanceFusion::kGatedCross);
      bp.gate_fusion = GateParam::closed();
    }
  }
  return p;
}

inline ParamSet denoiser_params(DenoiserParams& p) { return collect_params(p); }

/// sin/cos features of the step index, width `dim`.
inline std::vector<double> timestep_features(std::size_t t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(t) * freq);
    out[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return out;
}

inline Tensor timestep_embedding(std::size_t t, const DenoiserParams& p) {
  Tensor f = Tensor::from({1, p.cfg.dim}, timestep_features(t, p.cfg.dim));
  return reshape(p.time2(silu(p.time1(f))), {p.cfg.dim});
}

/// Fourier features of each latent cell's own box, [H*W, 8 n_freq].
inline Tensor cell_features(std::size_t H, std::size_t W, std::size_t n_freq) {
  std::vector<double> out;
  out.reserve(H * W * 8 * n_freq);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const Box b{static_cast<double>(x) / static_cast<double>(W), static_cast<double>(y) / static_cast<double>(H),
                  static_cast<double>(x + 1) / static_cast<double>(W),
                  static_cast<double>(y + 1) / static_cast<double>(H)};
      auto f = fourier_embed(b, n_freq);
      out.insert(out.end(), f.begin(), f.end());
    }
  return Tensor::from({H * W, 8 * n_freq}, std::move(out));
}

struct ForwardOptions {
  /// false: the unconditional branch (no location or instance tokens).
  bool conditional = true;
  /// Explicit slot per tracklet; empty means first-appearance order.
  std::vector<std::size_t> slots;
};

/// eps prediction for z_t [T, H, W, C] at training-schedule step t.
inline Tensor denoiser_forward(const Tensor& zt, std::size_t t, const ClipAnnotation& clip, const DenoiserParams& p,
                               const ForwardOptions& opt = {}) {
  const auto& cfg = p.cfg;
  if (zt.rank() != 4 || zt.dim(0) != cfg.frames || zt.dim(1) != cfg.height || zt.dim(2) != cfg.width ||
      zt.dim(3) != cfg.channels) {
    throw ContractError("denoiser: latent " + shape_str(zt.shape()) + " does not match config [" +
                        std::to_string(cfg.frames) + "," + std::to_string(cfg.height) + "," +
                        std::to_string(cfg.width) + "," + std::to_string(cfg.channels) + "]");
  }
  const auto T = cfg.frames, H = cfg.height, W = cfg.width, C = cfg.channels, d = cfg.dim, HW = H * W;
  const bool use_cond = opt.conditional;
  if (use_cond && clip.frames != T) {
    throw ContractError("denoiser: clip has " + std::to_string(clip.frames) + " frames, latent has " +
                        std::to_string(T));
  }

  Tensor x = p.in_proj(reshape(zt, {T * HW, C}));
  x = add(x, tile_rows(p.pos_proj(cell_features(H, W, cfg.n_freq)), T));
  x = add_bias(x, timestep_embedding(t, p));
  if (clip.caption) x = add_bias(x, p.caption);
  x = reshape(x, {T, HW, d});

  std::vector<std::size_t> slots;
  LocationBatch loc;
  if (use_cond) {
    slots = opt.slots.empty() ? assign_slots(clip, cfg.k_max) : opt.slots;
    loc = location_batch(clip, p.cond, slots, cfg.use_instance_emb);
  }

  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& bp = p.blocks[b];
    x = self_attention(x, bp.spatial);
    x = gated_self_attention(x, loc.tokens, bp.gated_self, bp.gate_self, loc.present);
    if (bp.has_temporal) x = swap_leading(self_attention(swap_leading(x), bp.temporal));
    if (bp.has_enhancer && use_cond) {
      auto sets = enhance_all(reshape(x, {T, H, W, d}), clip, bp.enhancer, slots);
      Tensor ctx = concat(sets);
      Tensor ctx3 = reshape(ctx, {1, ctx.dim(0), d});
      Tensor flat = reshape(x, {1, T * HW, d});
      flat = cfg.instance_fusion == InstanceFusion::kGatedCross
                 ? gated_cross_attention(flat, ctx3, bp.fusion, bp.gate_fusion)
                 : gated_self_attention(flat, ctx3, bp.fusion, bp.gate_fusion);
      x = reshape(flat, {T, HW, d});
    }
    Tensor h = bp.mlp2(silu(bp.mlp1(bp.mlp_norm(x))));
    x = add(x, h);
  }
  Tensor out = add(reshape(p.out_proj(p.out_norm(x)), {T * HW, C}), matmul(reshape(zt, {T * HW, C}), p.skip));
  return reshape(out, {T, H, W, C});
}

// ---------------------------------------------------------------------------
// Training

struct TrainExample {
  Tensor latent;  // [T, H, W, C]
  ClipAnnotation clip;
};

enum class Optimizer { kMomentum, kAdam };

struct TrainOptions {
  Optimizer optimizer = Optimizer::kMomentum;
  std::size_t steps = 2000;
  std::size_t batch = 2;
  double lr = 1e-3;
  double momentum = 0.9;  // Adam: first-moment decay
  double beta2 = 0.999;   // Adam only
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables
  bool cosine_decay = false;  // lr follows a half cosine down to 0 over `steps`
  double cond_drop = 0.1;
  std::size_t log_every = 10;
  std::uint64_t seed = 0;
  std::size_t schedule_steps = kTrainSteps;
  double beta_start = kBetaStart;
  double beta_end = kBetaEnd;
};

struct TrainLog {
  std::vector<std::pair<std::size_t, double>> loss;  // (step, mean loss since last entry)
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frame t of an example as a one-frame clip: boxes of that frame only,
/// tracklets absent there dropped.
inline TrainExample single_frame(const TrainExample& ex, std::size_t t) {
  const auto& z = ex.latent;
  TrainExample out;
  out.latent = reshape(slice_rows(z, t, t + 1), {1, z.dim(1), z.dim(2), z.dim(3)});
  out.clip = ex.clip;
  out.clip.frames = 1;
  out.clip.tracklets.clear();
  for (const auto& tr : ex.clip.tracklets) {
    if (!tr.present(t)) continue;
    Tracklet one = tr;
    one.boxes = {tr.boxes[t]};
    out.clip.tracklets.push_back(std::move(one));
  }
  return out;
}

/// Minimises the noise-prediction loss with momentum SGD or Adam.
/// Deterministic for a fixed seed.
/// `on_log(step, loss)` is called every log_every steps.
inline TrainLog train_stage(DenoiserParams& p, const std::vector<TrainExample>& data, const TrainOptions& opt,
                            const std::function<void(std::size_t, double)>& on_log = {}) {
  TrainLog log;
  if (opt.steps == 0) return log;
  if (data.empty()) throw ConfigError("training needs at least one example");
  if (opt.batch == 0) throw ConfigError("batch must be positive");
  const auto sched = make_schedule(opt.schedule_steps, opt.beta_start, opt.beta_end);
  auto params = collect_params(p).tensors();
  std::vector<std::vector<double>> velocity, second;
  for (const auto& t : params) {
    velocity.emplace_back(t.size(), 0.0);
    if (opt.optimizer == Optimizer::kAdam) second.emplace_back(t.size(), 0.0);
  }
  Rng rng(opt.seed);
  const bool image = p.cfg.stage == Stage::kImage;
  double acc = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    for (auto& t : params) t.zero_grad();
    Tensor total;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const auto& src = data[rng.below(data.size())];
      TrainExample ex = image ? single_frame(src, rng.below(src.latent.dim(0))) : src;
      ForwardOptions fo;
      fo.conditional = !(rng.uniform() < opt.cond_drop);
      auto model = [&](const Tensor& zt, std::size_t ts) { return denoiser_forward(zt, ts, ex.clip, p, fo); };
      Tensor l = training_loss(model, ex.latent, sched, rng);
      total = total.defined() ? add(total, l) : l;
    }
    total = scale(total, 1.0 / static_cast<double>(opt.batch));
    const double value = total.item();
    if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(step));
    total.backward();

    double sq = 0.0;
    for (const auto& t : params)
      if (t.has_grad())
        for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double factor = (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
    const bool adam = opt.optimizer == Optimizer::kAdam;
    const double lr = opt.cosine_decay ? 0.5 * opt.lr *
                                             (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) /
                                                             static_cast<double>(opt.steps)))
                                       : opt.lr;
    const double bc1 = 1.0 - std::pow(opt.momentum, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& t = params[k];
      auto& v = velocity[k];
      auto w = t.mutable_values();
      const bool has = t.has_grad();
      const auto g = has ? t.grad() : std::span<const double>{};
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = has ? factor * g[i] : 0.0;
        if (adam) {
          v[i] = opt.momentum * v[i] + (1.0 - opt.momentum) * gi;
          auto& m2 = second[k][i];
          m2 = opt.beta2 * m2 + (1.0 - opt.beta2) * gi * gi;
          w[i] -= lr * (v[i] / bc1) / (std::sqrt(m2 / bc2) + opt.adam_eps);
        } else {
          v[i] = opt.momentum * v[i] + gi;
          w[i] -= lr * v[i];
        }
      }
    }

    acc += value;
    ++acc_n;
    if (step % opt.log_every == 0 || step == opt.steps) {
      log.loss.emplace_back(step, acc / static_cast<double>(acc_n));
      if (on_log) on_log(step, acc / static_cast<double>(acc_n));
      acc = 0.0;
      acc_n = 0;
    }
  }
  for (auto& t : params) t.zero_grad();
  return log;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleOptions {
  double guidance = 5.0;
  std::uint64_t seed = 0;
  std::size_t steps = kSampleSteps;
  std::size_t schedule_steps = kTrainSteps;
  double beta_start = kBetaStart;
  double beta_end = kBetaEnd;
};

/// Ancestral sampling from a seeded Gaussian latent with classifier-free
/// guidance. The unconditional pass is skipped at scale 1 and the
/// conditional pass at scale 0.
inline Tensor sample_latent(const ClipAnnotation& clip, const DenoiserParams& p, const SampleOptions& opt) {
  NoGradGuard no_grad;
  const auto sched = respace(make_schedule(opt.schedule_steps, opt.beta_start, opt.beta_end), opt.steps);
  Rng rng(opt.seed);
  const auto& c = p.cfg;
  Tensor z = Tensor::randn({c.frames, c.height, c.width, c.channels}, rng);
  ForwardOptions cond, uncond;
  uncond.conditional = false;
  for (std::size_t k = sched.n_steps(); k-- > 0;) {
    const auto ts = sched.timestep[k];
    Tensor eps;
    if (opt.guidance == 1.0) {
      eps = denoiser_forward(z, ts, clip, p, cond);
    } else if (opt.guidance == 0.0) {
      eps = denoiser_forward(z, ts, clip, p, uncond);
    } else {
      eps = cfg_combine(denoiser_forward(z, ts, clip, p, cond), denoiser_forward(z, ts, clip, p, uncond),
                        opt.guidance);
    }
    z = ddpm_step(z, k, eps, sched, rng);
  }
  return z;
}

struct SampledClip {
  Tensor latent;
  FrameBuffer frames;
};

inline SampledClip sample_clip(const ClipAnnotation& clip, const DenoiserParams& p, const SampleOptions& opt) {
  SampledClip out;
  out.latent = sample_latent(clip, p, opt);
  out.frames = decode_latent(out.latent, DecodeMode::kDisplay);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_denoiser(const std::string& path, DenoiserParams& p) {
  save_checkpoint(path, collect_params(p), config_to_metadata(p.cfg));
}

/// Rebuilds the model described by the checkpoint metadata and loads every
/// parameter strictly.
inline DenoiserParams load_denoiser(const std::string& path) {
  auto ck = load_checkpoint(path);
  auto p = init_denoiser(config_from_metadata(ck.metadata), 0);
  load_params(p, ck.params, true);
  return p;
}

/// Copies stage-image parameters into a video-stage model; every source
/// parameter must exist with the same shape. Returns the count loaded.
inline std::size_t load_stage_init(DenoiserParams& p, const ParamSet& src) {
  auto dst = collect_params(p);
  for (const auto& [name, t] : src.items()) {
    if (!dst.contains(name)) throw ConfigError("init checkpoint parameter '" + name + "' has no counterpart");
  }
  return load_params(p, src, false);
}

}  // namespace trackdiff

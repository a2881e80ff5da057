#pragma once

// Finite-difference checks of every differentiable operation, from tensor
// primitives up to the miniature denoiser loss.

#include <functional>
#include <string>
#include <vector>

#include "trackdiff/denoiser.hpp"
#include "trackdiff/gradcheck.hpp"

namespace trackdiff {

inline constexpr double kGradTolerance = 1e-4;

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  bool pass() const { return max_error < kGradTolerance; }
};

struct GradSuiteOptions {
  double h = 1e-5;
  /// Coordinates sampled per parameter tensor of the full model.
  std::size_t model_coords = 16;
};

namespace detail {

inline Tensor leaf(const Shape& shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::parameter(shape, std::move(v));
}

/// sum(y * r) for a fixed random r, so every output coordinate matters.
inline std::function<Tensor(const Tensor&)> projector(const Shape& shape, Rng& rng) {
  Tensor r = Tensor::randn(shape, rng);
  return [r](const Tensor& y) { return sum(mul(y, r)); };
}

template <class Module>
std::vector<Tensor> leaves_of(Module& m) {
  return collect_params(m).tensors();
}

inline void open_gate(GateParam& g, double beta) { g.beta.mutable_values()[0] = beta; }

inline ClipAnnotation grad_clip(std::size_t T) {
  ClipAnnotation clip;
  clip.frames = T;
  clip.width = 16;
  clip.height = 16;
  Tracklet a;
  a.instance_id = 3;
  a.category_id = 1;
  Tracklet b;
  b.instance_id = 5;
  b.category_id = 4;
  for (std::size_t t = 0; t < T; ++t) {
    const double s = 0.1 * static_cast<double>(t);
    a.boxes.push_back(Box{0.05 + s, 0.1, 0.45 + s, 0.5});
    b.boxes.push_back(t == 1 ? std::nullopt : std::optional<Box>(Box{0.5, 0.55 - s / 2, 0.9, 0.95 - s / 2}));
  }
  clip.tracklets = {a, b};
  return clip;
}

}  // namespace detail

/// One full pass over all checks for `seed`.
inline std::vector<GradCheckResult> run_grad_suite(std::uint64_t seed, const GradSuiteOptions& opt = {}) {
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  ParamCheckOptions full{opt.h, 0, seed};
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                 const ParamCheckOptions& o) { out.push_back({name, grad_check_params(f, params, o)}); };

  // Tensor primitives.
  {
    Tensor a = detail::leaf({4, 5}, rng), b = detail::leaf({5, 3}, rng);
    auto pr = detail::projector({4, 3}, rng);
    run("matmul", [&] { return pr(matmul(a, b)); }, {a, b}, full);
  }
  {
    Tensor a = detail::leaf({3, 4}, rng), b = detail::leaf({3, 4}, rng), bias = detail::leaf({4}, rng);
    auto pr = detail::projector({3, 4}, rng);
    run("elementwise", [&] { return pr(add_bias(sub(mul(a, b), tanh(add(a, b))), bias)); }, {a, b, bias}, full);
    Tensor s = detail::leaf({1}, rng);
    run("silu_scale", [&] { return pr(mul_scalar(silu(scale(a, 1.7)), tanh(s))); }, {a, s}, full);
  }
  {
    Tensor x = detail::leaf({3, 5}, rng, 2.0);
    auto pr = detail::projector({3, 5}, rng);
    run("softmax", [&] { return pr(softmax_lastdim(x)); }, {x}, full);
    Tensor g = detail::leaf({5}, rng), bb = detail::leaf({5}, rng);
    run("layer_norm", [&] { return pr(layer_norm(x, g, bb)); }, {x, g, bb}, full);
  }
  {
    Tensor x = detail::leaf({2, 3, 2}, rng), y = detail::leaf({1, 3, 2}, rng);
    auto pr = detail::projector({3, 2, 2}, rng);
    run("reshape_gather", [&] {
      Tensor c = concat({x, y});                       // [3,3,2]
      Tensor s = slice_rows(swap_leading(c), 1, 3);   // [2,3,2]
      return pr(reshape(swap_leading(s), {3, 2, 2}));
    }, {x, y}, full);
    Tensor z = detail::leaf({3, 4}, rng), w = detail::leaf({3, 4}, rng);
    run("reductions", [&] { return add(mse(z, w), mean(mul(z, z))); }, {z, w}, full);
  }
  {
    Tensor q = detail::leaf({2, 3, 8}, rng), k = detail::leaf({2, 5, 8}, rng), v = detail::leaf({2, 5, 8}, rng);
    Mask km = {1, 0, 1, 1, 1, 1, 1, 0, 0, 1};
    Mask qm = {1, 1, 0, 1, 1, 1};
    auto pr = detail::projector({2, 3, 8}, rng);
    run("attention_core", [&] { return pr(attention_core(q, k, v, 2, km, qm)); }, {q, k, v}, full);
    Tensor x = detail::leaf({4, 6}, rng), w = detail::leaf({6, 3}, rng), b = detail::leaf({3}, rng);
    auto pl = detail::projector({4, 3}, rng);
    run("linear", [&] { return pl(linear(x, w, &b)); }, {x, w, b}, full);
  }

  // Geometry.
  {
    Tensor feat = detail::leaf({6, 7, 3}, rng);
    const Box box{rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)};
    auto pr = detail::projector({4, 4, 3}, rng);
    run("roi_align", [&] { return pr(roi_align(feat, box, 4)); }, {feat}, full);
  }

  // Conditioning.
  {
    const std::size_t dim = 8;
    auto cp = ConditioningParams::init(dim, rng, 5, 4, 3);
    cp.instances.weights = detail::leaf({4, dim}, rng, 0.5);
    auto pr = detail::projector({dim}, rng);
    const Box box{0.2, 0.1, 0.7, 0.6};
    run("location_token", [&] { return pr(add_instance_token(location_token(box, 3, cp), 2, cp.instances)); },
        detail::leaves_of(cp), full);
    auto clip = detail::grad_clip(3);
    for (auto& tr : clip.tracklets) tr.category_id %= 5;
    auto pb = detail::projector({3, 2, dim}, rng);
    run("location_batch", [&] { return pb(location_batch(clip, cp, {1, 0}).tokens); }, detail::leaves_of(cp), full);
  }

  // Attention.
  {
    const std::size_t dim = 8;
    auto sp = AttentionParams::init(dim, 2, rng);
    auto cp = AttentionParams::init(dim, 2, rng, true);
    GateParam gate = GateParam::with(0.6);
    Tensor v = detail::leaf({2, 5, dim}, rng), loc = detail::leaf({2, 3, dim}, rng);
    Mask lm = {1, 0, 1, 1, 1, 0};
    auto pr = detail::projector({2, 5, dim}, rng);
    auto with = [](std::vector<Tensor> a, const std::vector<Tensor>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    run("self_attention", [&] { return pr(self_attention(v, sp, {1, 1, 0, 1, 1, 1, 1, 1, 1, 0})); },
        with({v}, detail::leaves_of(sp)), full);
    run("cross_attention", [&] { return pr(cross_attention(v, loc, cp, lm)); }, with({v, loc}, detail::leaves_of(cp)),
        full);
    run("gated_self_attention", [&] { return pr(gated_self_attention(v, loc, sp, gate, lm)); },
        with({v, loc, gate.beta}, detail::leaves_of(sp)), full);
    run("gated_cross_attention", [&] { return pr(gated_cross_attention(v, loc, cp, gate)); },
        with({v, loc, gate.beta}, detail::leaves_of(cp)), full);
    Tensor lat = detail::leaf({3, 2, 2, dim}, rng);
    auto pt = detail::projector({3, 2, 2, dim}, rng);
    run("temporal_attention", [&] { return pt(temporal_attention(lat, sp)); }, with({lat}, detail::leaves_of(sp)), full);
  }

  // Enhancer.
  {
    const std::size_t T = 3, C = 4, dim = 8, r = 2;
    auto ep = EnhancerParams::init(C, dim, 2, rng, r, 2);
    ep.absent_feature = detail::leaf({C}, rng);
    Tensor lat = detail::leaf({T, 4, 4, C}, rng);
    auto clip = detail::grad_clip(T);
    auto pm = detail::projector({T, dim}, rng);
    auto leaves = detail::leaves_of(ep);
    run("motion_extract", [&] { return pm(motion_extract(clip.tracklets[1].boxes, ep)); }, leaves, full);
    auto pe = detail::projector({T * r * r + T, dim}, rng);
    leaves.push_back(lat);
    run("enhance_instance", [&] {
      auto cube = extract_instance_cube(lat, clip.tracklets[1], r, ep.absent_feature);
      return pe(enhance_instance(cube, motion_extract(clip.tracklets[1].boxes, ep), ep));
    }, leaves, full);
    auto pa = detail::projector({3 * (T * r * r + T), dim}, rng);
    run("enhance_all", [&] { return pa(concat(enhance_all(lat, clip, ep, {0, 1}))); }, leaves, full);
    ep.motion_fusion = MotionFusion::kAdd;
    auto pd = detail::projector({T * r * r, dim}, rng);
    run("enhance_instance_add", [&] {
      auto cube = extract_instance_cube(lat, clip.tracklets[0], r, ep.absent_feature);
      return pd(enhance_instance(cube, motion_extract(clip.tracklets[0].boxes, ep), ep));
    }, leaves, full);
  }

  // Miniature denoiser through the training loss.
  {
    DenoiserConfig cfg;
    cfg.frames = 2;
    cfg.height = cfg.width = 4;
    cfg.channels = 4;
    cfg.dim = 16;
    cfg.n_blocks = 1;
    cfg.encoder_blocks = 0;
    cfg.roi_grid = 2;
    cfg.n_freq = 2;
    auto p = init_denoiser(cfg, seed);
    for (auto* g : p.gates()) detail::open_gate(*g, 0.5 + 0.1 * rng.normal());
    p.cond.instances.weights.mutable_values()[0] = 0.3;
    auto clip = detail::grad_clip(cfg.frames);
    clip.caption = "two shapes";
    Tensor z0 = Tensor::randn({2, 4, 4, 4}, rng);
    const auto sched = make_schedule(100);
    const auto loss_seed = rng.next_u64();
    auto loss = [&] {
      Rng lr(loss_seed);
      auto model = [&](const Tensor& zt, std::size_t t) { return denoiser_forward(zt, t, clip, p); };
      return training_loss(model, z0, sched, lr);
    };
    ParamCheckOptions sampled{opt.h, opt.model_coords, seed};
    run("denoiser_loss", loss, collect_params(p).tensors(), sampled);
  }
  return out;
}

}  // namespace trackdiff

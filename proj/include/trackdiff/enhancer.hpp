#pragma once

// Temporal instance enhancer: ROI-aligned per-instance feature cubes fused
// with box-trajectory motion tokens and self-attended along the instance's
// own timeline.

#include <string>
#include <vector>

#include "trackdiff/attention.hpp"
#include "trackdiff/conditioning.hpp"
#include "trackdiff/geometry.hpp"
#include "trackdiff/trackdata.hpp"

namespace trackdiff {

enum class MotionFusion { kConcat, kAdd };

struct InstanceFeatureCube {
  Tensor values;  // [T, r, r, C]
  std::vector<bool> presence;

  std::size_t frames() const { return values.dim(0); }
  std::size_t grid() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(3); }
};

struct EnhancerParams {
  std::size_t r = kDefaultRoiGrid;
  std::size_t n_freq = kDefaultFourierFreqs;
  MotionFusion motion_fusion = MotionFusion::kConcat;
  Tensor absent_feature;  // [C]
  Linear cube_proj;       // C -> dim
  Linear box_proj;        // 8 n_freq -> dim
  AttentionParams motion_attn;
  AttentionParams enhance_attn;

  static EnhancerParams init(std::size_t channels, std::size_t dim, std::size_t n_heads, Rng& rng,
                             std::size_t r = kDefaultRoiGrid, std::size_t n_freq = kDefaultFourierFreqs) {
    EnhancerParams p;
    p.r = r;
    p.n_freq = n_freq;
    p.absent_feature = init_zeros({channels});
    p.cube_proj = Linear::init(channels, dim, rng);
    p.box_proj = Linear::init(8 * n_freq, dim, rng);
    p.motion_attn = AttentionParams::init(dim, n_heads, rng);
    p.enhance_attn = AttentionParams::init(dim, n_heads, rng);
    return p;
  }

  std::size_t dim() const { return cube_proj.weight.dim(1); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "absent_feature"), absent_feature);
    cube_proj.visit(fn, join_name(prefix, "cube_proj"));
    box_proj.visit(fn, join_name(prefix, "box_proj"));
    motion_attn.visit(fn, join_name(prefix, "motion_attn"));
    enhance_attn.visit(fn, join_name(prefix, "enhance_attn"));
  }
};

namespace detail {

inline Tensor frame_of(const Tensor& latent, std::size_t t) {
  return reshape(slice_rows(latent, t, t + 1), {latent.dim(1), latent.dim(2), latent.dim(3)});
}

}  // namespace detail

/// Per-frame roi_align along the tracklet, stacked to [T, r, r, C]. Absent
/// frames hold `absent_feature` (zeros when undefined).
inline InstanceFeatureCube extract_instance_cube(const Tensor& latent, const Tracklet& tracklet, std::size_t r,
                                                 const Tensor& absent_feature = {}) {
  if (latent.rank() != 4) throw DimensionError("extract_instance_cube: latent must be [T,H,W,C], got " + shape_str(latent.shape()));
  const auto T = latent.dim(0), C = latent.dim(3);
  if (tracklet.boxes.size() != T) {
    throw ContractError("extract_instance_cube: tracklet has " + std::to_string(tracklet.boxes.size()) +
                        " frames, latent has " + std::to_string(T));
  }
  InstanceFeatureCube cube;
  std::vector<Tensor> parts;
  for (std::size_t t = 0; t < T; ++t) {
    cube.presence.push_back(tracklet.present(t));
    if (tracklet.present(t)) {
      parts.push_back(roi_align(detail::frame_of(latent, t), *tracklet.boxes[t], r));
    } else {
      Tensor fill = absent_feature.defined() ? absent_feature : Tensor::zeros({C});
      parts.push_back(reshape(tile_rows(reshape(fill, {1, C}), r * r), {r, r, C}));
    }
  }
  cube.values = reshape(concat(parts), {T, r, r, C});
  return cube;
}

inline InstanceFeatureCube extract_background_cube(const Tensor& latent, std::size_t r) {
  Tracklet full;
  full.boxes.assign(latent.dim(0), full_frame_box());
  return extract_instance_cube(latent, full, r);
}

/// Self-attention over the projected fourier embeddings of one instance's
/// boxes, masked on absence. Absent rows of the result are zero. [T, dim]
inline Tensor motion_extract(const std::vector<std::optional<Box>>& boxes, const EnhancerParams& p) {
  const auto T = boxes.size(), nf = 8 * p.n_freq;
  std::vector<double> four(T * nf, 0.0);
  Mask mask(T, 0);
  for (std::size_t t = 0; t < T; ++t) {
    if (!boxes[t]) continue;
    mask[t] = 1;
    auto f = fourier_embed(*boxes[t], p.n_freq);
    std::copy(f.begin(), f.end(), four.begin() + static_cast<long>(t * nf));
  }
  Tensor tokens = p.box_proj(Tensor::from({T, nf}, std::move(four)));
  Tensor out = self_attention(tokens, p.motion_attn, mask);
  const auto dim = p.dim();
  std::vector<double> keep(T * dim);
  for (std::size_t t = 0; t < T; ++t) std::fill_n(keep.begin() + static_cast<long>(t * dim), dim, mask[t] ? 1.0 : 0.0);
  return mul(out, Tensor::from({T, dim}, std::move(keep)));
}

/// Projects the cube to dim, fuses the motion tokens (token-axis
/// concatenation, or per-frame addition) and self-attends. Returns
/// [T r^2 + T, dim] for concat, [T r^2, dim] for add.
inline Tensor enhance_instance(const InstanceFeatureCube& cube, const Tensor& motion, const EnhancerParams& p) {
  const auto T = cube.frames(), r = cube.grid(), C = cube.channels(), dim = p.dim();
  if (motion.rank() != 2 || motion.dim(0) != T || motion.dim(1) != dim) {
    throw ContractError("enhance_instance: motion " + shape_str(motion.shape()) + " does not match cube " +
                        shape_str(cube.values.shape()) + " at width " + std::to_string(dim));
  }
  if (C != p.cube_proj.weight.dim(0)) {
    throw ContractError("enhance_instance: cube has " + std::to_string(C) + " channels, projection expects " +
                        std::to_string(p.cube_proj.weight.dim(0)));
  }
  Tensor feats = p.cube_proj(reshape(cube.values, {T * r * r, C}));
  Tensor fused;
  if (p.motion_fusion == MotionFusion::kConcat) {
    fused = concat({feats, motion});
  } else {
    std::vector<std::size_t> idx(T * r * r * dim);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < r * r; ++k)
        for (std::size_t c = 0; c < dim; ++c) idx[((t * r * r) + k) * dim + c] = t * dim + c;
    fused = add(feats, gather(motion, std::move(idx), {T * r * r, dim}));
  }
  return self_attention(fused, p.enhance_attn);
}

/// Enhanced token sets for every tracklet in slot order, then the background.
inline std::vector<Tensor> enhance_all(const Tensor& latent, const ClipAnnotation& clip, const EnhancerParams& p,
                                       const std::vector<std::size_t>& slots) {
  if (slots.size() != clip.tracklets.size()) throw ContractError("enhance_all: one slot per tracklet required");
  const auto T = latent.dim(0);
  std::vector<std::size_t> by_slot(slots.size(), slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] >= slots.size() || by_slot[slots[i]] != slots.size()) {
      throw ContractError("enhance_all: slots must be a permutation of 0..n-1");
    }
    by_slot[slots[i]] = i;
  }
  std::vector<Tensor> out;
  for (auto i : by_slot) {
    const auto& tr = clip.tracklets[i];
    auto cube = extract_instance_cube(latent, tr, p.r, p.absent_feature);
    out.push_back(enhance_instance(cube, motion_extract(tr.boxes, p), p));
  }
  auto bg = extract_background_cube(latent, p.r);
  out.push_back(enhance_instance(bg, Tensor::zeros({T, p.dim()}), p));
  return out;
}

inline std::vector<Tensor> enhance_all(const Tensor& latent, const ClipAnnotation& clip, const EnhancerParams& p) {
  return enhance_all(latent, clip, p, assign_slots(clip, kDefaultMaxInstances));
}

}  // namespace trackdiff

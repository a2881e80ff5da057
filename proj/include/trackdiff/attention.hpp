#pragma once

// Residual attention blocks over token sets. All functions accept either a
// single sequence [n, dim] or a batch of independent sequences [B, n, dim].

#include <cmath>
#include <string>

#include "trackdiff/layers.hpp"

namespace trackdiff {

inline constexpr std::size_t kDefaultHeads = 4;

struct AttentionParams {
  std::size_t n_heads = kDefaultHeads;
  bool cross = false;
  LayerNormParams norm;          // queries; also keys/values for self-attention
  LayerNormParams context_norm;  // keys/values for cross-attention only
  Tensor w_q, w_k, w_v, w_o;     // [dim, dim]

  static AttentionParams init(std::size_t dim, std::size_t n_heads, Rng& rng, bool cross = false,
                              bool zero_output = false) {
    if (n_heads == 0 || dim % n_heads != 0) {
      throw ConfigError("attention width " + std::to_string(dim) + " is not divisible by " + std::to_string(n_heads) +
                        " heads");
    }
    AttentionParams p;
    p.n_heads = n_heads;
    p.cross = cross;
    p.norm = LayerNormParams::init(dim);
    if (cross) p.context_norm = LayerNormParams::init(dim);
    p.w_q = init_weight(dim, dim, rng);
    p.w_k = init_weight(dim, dim, rng);
    p.w_v = init_weight(dim, dim, rng);
    p.w_o = zero_output ? init_zeros({dim, dim}) : init_weight(dim, dim, rng);
    return p;
  }

  std::size_t dim() const { return w_q.dim(0); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    norm.visit(fn, join_name(prefix, "norm"));
    if (cross) context_norm.visit(fn, join_name(prefix, "context_norm"));
    fn(join_name(prefix, "w_q"), w_q);
    fn(join_name(prefix, "w_k"), w_k);
    fn(join_name(prefix, "w_v"), w_v);
    fn(join_name(prefix, "w_o"), w_o);
  }
};

/// Residual gate; the branch is scaled by tanh(beta). Starts closed.
struct GateParam {
  Tensor beta;

  static GateParam closed() { return {init_zeros({1})}; }
  static GateParam with(double b) { return {Tensor::parameter({1}, {b})}; }
  double value() const { return std::tanh(beta.item()); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "beta"), beta);
  }
};

namespace detail {

inline Tensor to_batched(const Tensor& x) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  throw DimensionError("attention: tokens must be [n,d] or [B,n,d], got " + shape_str(x.shape()));
}

inline Tensor like_input(const Tensor& y, const Tensor& input) {
  return input.rank() == 2 ? reshape(y, input.shape()) : y;
}

/// [B, M, d] ++ [B, N, d] -> [B, M+N, d] along the token axis.
inline Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  const auto B = a.dim(0), M = a.dim(1), N = b.dim(1), d = a.dim(2);
  if (b.dim(0) != B || b.dim(2) != d) {
    throw DimensionError("concat_tokens: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor flat = concat({reshape(a, {B * M * d}), reshape(b, {B * N * d})});
  std::vector<std::size_t> idx;
  idx.reserve(B * (M + N) * d);
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t i = 0; i < M * d; ++i) idx.push_back(s * M * d + i);
    for (std::size_t i = 0; i < N * d; ++i) idx.push_back(B * M * d + s * N * d + i);
  }
  return gather(flat, std::move(idx), {B, M + N, d});
}

/// Tokens [begin, end) of every sequence in a batch.
inline Tensor take_tokens(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto B = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (begin == 0 && end == n) return x;
  std::vector<std::size_t> idx;
  idx.reserve(B * (end - begin) * d);
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t c = 0; c < d; ++c) idx.push_back((s * n + i) * d + c);
  return gather(x, std::move(idx), {B, end - begin, d});
}

inline void require_some_active(const Mask& mask, std::size_t B, std::size_t n, const char* op) {
  if (mask.empty()) return;
  for (std::size_t s = 0; s < B; ++s) {
    bool any = false;
    for (std::size_t j = 0; j < n && !any; ++j) any = mask[s * n + j] != 0;
    if (!any) throw ContractError(std::string(op) + ": every token of a sequence is masked");
  }
}

/// Joint-attention branch restricted to the first `n_query` positions:
/// W_o * MHA(LN(x)[:n_query], LN(x), LN(x)) with no residual.
inline Tensor self_branch(const Tensor& x, const AttentionParams& p, const Mask& mask, std::size_t n_query) {
  Tensor h = p.norm(x);
  Tensor hq = take_tokens(h, 0, n_query);
  Mask qmask;
  if (!mask.empty()) {
    const auto B = x.dim(0), n = x.dim(1);
    qmask.reserve(B * n_query);
    for (std::size_t s = 0; s < B; ++s)
      for (std::size_t i = 0; i < n_query; ++i) qmask.push_back(mask[s * n + i]);
  }
  Tensor o = attention_core(linear(hq, p.w_q), linear(h, p.w_k), linear(h, p.w_v), p.n_heads, mask, qmask);
  return linear(o, p.w_o);
}

inline Tensor cross_branch(const Tensor& q, const Tensor& ctx, const AttentionParams& p, const Mask& key_mask) {
  if (!p.cross) throw ContractError("cross-attention requires parameters built with cross=true");
  Tensor hq = p.norm(q);
  Tensor hc = p.context_norm(ctx);
  Tensor o = attention_core(linear(hq, p.w_q), linear(hc, p.w_k), linear(hc, p.w_v), p.n_heads, key_mask);
  return linear(o, p.w_o);
}

}  // namespace detail

/// tokens + W_o * MHA(LN(tokens)). Masked tokens neither attend nor are
/// attended to, so their rows pass through unchanged.
inline Tensor self_attention(const Tensor& tokens, const AttentionParams& p, const Mask& mask = {}) {
  Tensor x = detail::to_batched(tokens);
  detail::require_some_active(mask, x.dim(0), x.dim(1), "self_attention");
  Tensor y = add(x, detail::self_branch(x, p, mask, x.dim(1)));
  return detail::like_input(y, tokens);
}

/// queries + W_o * MHA(LN(queries), LN'(context)). `context` must be defined.
inline Tensor cross_attention(const Tensor& queries, const Tensor& context, const AttentionParams& p,
                              const Mask& key_mask = {}) {
  if (!context.defined()) throw ContractError("cross_attention: empty context");
  Tensor q = detail::to_batched(queries);
  Tensor c = detail::to_batched(context);
  detail::require_some_active(key_mask, c.dim(0), c.dim(1), "cross_attention");
  Tensor y = add(q, detail::cross_branch(q, c, p, key_mask));
  return detail::like_input(y, queries);
}

/// v + tanh(beta) * TS(SelfAttn([v, loc])): joint attention over visual and
/// location tokens, keeping only the visual outputs. `loc` may be undefined
/// (no location tokens); `loc_mask` has one flag per location token.
inline Tensor gated_self_attention(const Tensor& visual, const Tensor& loc, const AttentionParams& p,
                                   const GateParam& gate, const Mask& loc_mask = {}) {
  Tensor v = detail::to_batched(visual);
  const auto B = v.dim(0), M = v.dim(1);
  Tensor joint = v;
  Mask mask;
  if (loc.defined()) {
    Tensor l = detail::to_batched(loc);
    joint = detail::concat_tokens(v, l);
    const auto N = l.dim(1);
    if (!loc_mask.empty()) {
      if (loc_mask.size() != B * N) throw DimensionError("gated_self_attention: location mask size");
      mask.reserve(B * (M + N));
      for (std::size_t s = 0; s < B; ++s) {
        mask.insert(mask.end(), M, 1);
        mask.insert(mask.end(), loc_mask.begin() + s * N, loc_mask.begin() + (s + 1) * N);
      }
    }
  }
  Tensor branch = detail::self_branch(joint, p, mask, M);
  Tensor y = add(v, mul_scalar(branch, tanh(gate.beta)));
  return detail::like_input(y, visual);
}

/// v + tanh(gamma) * CrossAttn(v -> instance tokens). Undefined `inst`
/// (no instance tokens) returns v.
inline Tensor gated_cross_attention(const Tensor& visual, const Tensor& inst, const AttentionParams& p,
                                    const GateParam& gate, const Mask& mask = {}) {
  if (!inst.defined()) return visual;
  Tensor v = detail::to_batched(visual);
  Tensor c = detail::to_batched(inst);
  detail::require_some_active(mask, c.dim(0), c.dim(1), "gated_cross_attention");
  Tensor y = add(v, mul_scalar(detail::cross_branch(v, c, p, mask), tanh(gate.beta)));
  return detail::like_input(y, visual);
}

/// Self-attention along time, independently at each spatial position of a
/// [T, H, W, C] latent.
inline Tensor temporal_attention(const Tensor& latent, const AttentionParams& p) {
  if (latent.rank() != 4) throw DimensionError("temporal_attention: latent must be [T,H,W,C], got " + shape_str(latent.shape()));
  const auto T = latent.dim(0), H = latent.dim(1), W = latent.dim(2), C = latent.dim(3);
  Tensor per_position = swap_leading(reshape(latent, {T, H * W, C}));
  Tensor mixed = self_attention(per_position, p);
  return reshape(swap_leading(mixed), {T, H, W, C});
}

}  // namespace trackdiff

#pragma once

// Instance-aware location tokens: MLP(category embedding ++ fourier(box))
// plus a learned per-slot instance token.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "trackdiff/geometry.hpp"
#include "trackdiff/layers.hpp"
#include "trackdiff/trackdata.hpp"

namespace trackdiff {

inline constexpr std::size_t kDefaultCategories = kPaletteSize;

struct CategoryTable {
  Tensor weights;  // [n_categories, dim]

  static CategoryTable init(std::size_t n_categories, std::size_t dim, Rng& rng) {
    return {init_normal({n_categories, dim}, rng, 1.0)};
  }
  std::size_t n_categories() const { return weights.dim(0); }
  std::size_t dim() const { return weights.dim(1); }

  Tensor row(std::size_t cat) const {
    if (cat >= n_categories()) {
      throw IndexError("category " + std::to_string(cat) + " outside table of " + std::to_string(n_categories()));
    }
    return slice_rows(weights, cat, cat + 1);
  }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "weights"), weights);
  }
};

struct InstanceTokenTable {
  Tensor weights;  // [k_max, dim], zero at init

  static InstanceTokenTable init(std::size_t k_max, std::size_t dim) { return {init_zeros({k_max, dim})}; }
  std::size_t k_max() const { return weights.dim(0); }
  std::size_t dim() const { return weights.dim(1); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    fn(join_name(prefix, "weights"), weights);
  }
};

/// Linear -> SiLU -> Linear from (dim + 8 n_freq) to dim.
struct LocationMlp {
  Linear l1, l2;

  static LocationMlp init(std::size_t dim, std::size_t n_freq, Rng& rng) {
    return {Linear::init(dim + 8 * n_freq, dim, rng), Linear::init(dim, dim, rng)};
  }

  Tensor operator()(const Tensor& x) const { return l2(silu(l1(x))); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    l1.visit(fn, join_name(prefix, "l1"));
    l2.visit(fn, join_name(prefix, "l2"));
  }
};

struct ConditioningParams {
  std::size_t n_freq = kDefaultFourierFreqs;
  CategoryTable categories;
  InstanceTokenTable instances;
  LocationMlp mlp;
  Tensor absent;  // [dim]

  static ConditioningParams init(std::size_t dim, Rng& rng, std::size_t n_categories = kDefaultCategories,
                                 std::size_t k_max = kDefaultMaxInstances, std::size_t n_freq = kDefaultFourierFreqs) {
    ConditioningParams p;
    p.n_freq = n_freq;
    p.categories = CategoryTable::init(n_categories, dim, rng);
    p.instances = InstanceTokenTable::init(k_max, dim);
    p.mlp = LocationMlp::init(dim, n_freq, rng);
    p.absent = init_normal({dim}, rng, 1.0);
    return p;
  }

  std::size_t dim() const { return categories.dim(); }

  template <class Fn>
  void visit(Fn&& fn, const std::string& prefix) {
    categories.visit(fn, join_name(prefix, "categories"));
    instances.visit(fn, join_name(prefix, "instances"));
    mlp.visit(fn, join_name(prefix, "mlp"));
    fn(join_name(prefix, "absent"), absent);
  }
};

/// H = MLP(category_embedding ++ fourier_embed(b)), shape [dim].
inline Tensor location_token(const Box& b, std::size_t cat, const CategoryTable& table, const LocationMlp& mlp,
                             std::size_t n_freq = kDefaultFourierFreqs) {
  Tensor emb = reshape(table.row(cat), {table.dim()});
  Tensor four = Tensor::from({8 * n_freq}, fourier_embed(b, n_freq));
  Tensor x = reshape(concat({emb, four}), {1, table.dim() + 8 * n_freq});
  return reshape(mlp(x), {mlp.l2.weight.dim(1)});
}

inline Tensor location_token(const Box& b, std::size_t cat, const ConditioningParams& p) {
  return location_token(b, cat, p.categories, p.mlp, p.n_freq);
}

/// h + e_slot.
inline Tensor add_instance_token(const Tensor& h, std::size_t slot, const InstanceTokenTable& table) {
  if (slot >= table.k_max()) {
    throw CapacityError("instance slot " + std::to_string(slot) + " exceeds capacity " + std::to_string(table.k_max()));
  }
  return add(h, reshape(slice_rows(table.weights, slot, slot + 1), {table.dim()}));
}

/// Slot per tracklet, numbered by first present frame; ties keep input order.
inline std::vector<std::size_t> assign_slots(const ClipAnnotation& clip, std::size_t k_max = kDefaultMaxInstances) {
  const auto n = clip.tracklets.size();
  if (n > k_max) {
    throw CapacityError(std::to_string(n) + " tracklets exceed capacity " + std::to_string(k_max));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto first = [&](std::size_t i) { return clip.tracklets[i].first_present().value_or(clip.frames); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return first(a) < first(b); });
  std::vector<std::size_t> slots(n);
  for (std::size_t s = 0; s < n; ++s) slots[order[s]] = s;
  return slots;
}

struct LocationToken {
  Tensor values;  // [dim]
  std::size_t instance_slot = 0;
  std::size_t frame = 0;
  bool present = false;
};

/// Tokens indexed [instance, frame] in tracklet input order.
struct LocationGrid {
  std::size_t n_instances = 0;
  std::size_t frames = 0;
  std::vector<LocationToken> tokens;

  const LocationToken& at(std::size_t i, std::size_t t) const { return tokens.at(i * frames + t); }
  std::size_t size() const { return tokens.size(); }
};

inline LocationGrid clip_location_tokens(const ClipAnnotation& clip, const ConditioningParams& p,
                                         const std::vector<std::size_t>& slots, bool instance_emb = true) {
  if (clip.tracklets.size() > p.instances.k_max()) {
    throw CapacityError(std::to_string(clip.tracklets.size()) + " tracklets exceed capacity " +
                        std::to_string(p.instances.k_max()));
  }
  if (slots.size() != clip.tracklets.size()) throw ContractError("clip_location_tokens: one slot per tracklet required");
  LocationGrid grid{clip.tracklets.size(), clip.frames, {}};
  grid.tokens.reserve(grid.n_instances * grid.frames);
  for (std::size_t i = 0; i < clip.tracklets.size(); ++i) {
    const auto& tr = clip.tracklets[i];
    for (std::size_t t = 0; t < clip.frames; ++t) {
      LocationToken tok{p.absent, slots[i], t, tr.present(t)};
      if (tok.present) {
        tok.values = location_token(*tr.boxes[t], tr.category_id, p);
        if (instance_emb) tok.values = add_instance_token(tok.values, slots[i], p.instances);
      }
      grid.tokens.push_back(std::move(tok));
    }
  }
  return grid;
}

inline LocationGrid clip_location_tokens(const ClipAnnotation& clip, const ConditioningParams& p,
                                         bool instance_emb = true) {
  return clip_location_tokens(clip, p, assign_slots(clip, p.instances.k_max()), instance_emb);
}

/// Frame-major batch of location tokens for the denoiser.
struct LocationBatch {
  Tensor tokens;  // [T, N, dim]; undefined when N == 0
  Mask present;   // T * N flags
};

/// Same values as clip_location_tokens, laid out [frame, instance] and built
/// with one batched MLP evaluation over all present boxes.
inline LocationBatch location_batch(const ClipAnnotation& clip, const ConditioningParams& p,
                                    const std::vector<std::size_t>& slots, bool instance_emb = true) {
  const auto N = clip.tracklets.size(), T = clip.frames, dim = p.dim(), nf = 8 * p.n_freq;
  if (N > p.instances.k_max()) {
    throw CapacityError(std::to_string(N) + " tracklets exceed capacity " + std::to_string(p.instances.k_max()));
  }
  if (slots.size() != N) throw ContractError("location_batch: one slot per tracklet required");
  LocationBatch out;
  if (N == 0) return out;
  out.present.assign(T * N, 0);

  std::vector<std::size_t> cat_idx, slot_idx, where;
  std::vector<double> four;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& tr = clip.tracklets[i];
      if (!tr.present(t)) continue;
      if (tr.category_id >= p.categories.n_categories()) {
        throw IndexError("category " + std::to_string(tr.category_id) + " outside table");
      }
      if (slots[i] >= p.instances.k_max()) throw CapacityError("instance slot exceeds capacity");
      out.present[t * N + i] = 1;
      where.push_back(t * N + i);
      for (std::size_t c = 0; c < dim; ++c) {
        cat_idx.push_back(tr.category_id * dim + c);
        slot_idx.push_back(slots[i] * dim + c);
      }
      auto f = fourier_embed(*tr.boxes[t], p.n_freq);
      four.insert(four.end(), f.begin(), f.end());
    }
  }
  const auto P = where.size();
  std::vector<Tensor> parts;
  if (P > 0) {
    // W1 split by input rows: [emb ++ four] W1 = emb W1[:dim] + four W1[dim:].
    Tensor emb = gather(p.categories.weights, cat_idx, {P, dim});
    Tensor w_emb = slice_rows(p.mlp.l1.weight, 0, dim);
    Tensor w_four = slice_rows(p.mlp.l1.weight, dim, dim + nf);
    Tensor h = add(matmul(emb, w_emb), matmul(Tensor::from({P, nf}, std::move(four)), w_four));
    h = p.mlp.l2(silu(add_bias(h, p.mlp.l1.bias)));
    if (instance_emb) h = add(h, gather(p.instances.weights, slot_idx, {P, dim}));
    parts.push_back(h);
  }
  parts.push_back(reshape(p.absent, {1, dim}));
  Tensor pool = concat(parts);
  std::vector<std::size_t> idx(T * N * dim);
  std::vector<std::size_t> row(T * N, P);  // default: absent row
  for (std::size_t r = 0; r < P; ++r) row[where[r]] = r;
  for (std::size_t k = 0; k < T * N; ++k)
    for (std::size_t c = 0; c < dim; ++c) idx[k * dim + c] = row[k] * dim + c;
  out.tokens = gather(pool, std::move(idx), {T, N, dim});
  return out;
}

}  // namespace trackdiff

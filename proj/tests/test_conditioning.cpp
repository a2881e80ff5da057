#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace trackdiff;

namespace {

ClipAnnotation three_tracks() {
  ClipAnnotation c;
  c.frames = 3;
  c.width = c.height = 32;
  Tracklet a{10, 2, {std::nullopt, Box{0.1, 0.1, 0.3, 0.4}, Box{0.2, 0.1, 0.4, 0.4}}};
  Tracklet b{11, 5, {Box{0.5, 0.5, 0.9, 0.8}, Box{0.5, 0.5, 0.9, 0.8}, std::nullopt}};
  Tracklet d{12, 0, {std::nullopt, Box{0.0, 0.6, 0.2, 1.0}, Box{0.0, 0.6, 0.2, 1.0}}};
  c.tracklets = {a, b, d};
  return c;
}

// MLP(emb ++ fourier) by hand.
std::vector<double> token_oracle(const Box& b, std::size_t cat, const ConditioningParams& p) {
  const auto d = p.dim();
  const auto w = oracle::vals(p.categories.weights);
  std::vector<double> x(w.begin() + static_cast<long>(cat * d), w.begin() + static_cast<long>((cat + 1) * d));
  const auto f = fourier_embed(b, p.n_freq);
  x.insert(x.end(), f.begin(), f.end());
  auto h = oracle::matmul(x, oracle::vals(p.mlp.l1.weight), 1, x.size(), d);
  const auto b1 = oracle::vals(p.mlp.l1.bias);
  for (std::size_t i = 0; i < d; ++i) {
    h[i] += b1[i];
    h[i] = h[i] / (1.0 + std::exp(-h[i]));
  }
  auto y = oracle::matmul(h, oracle::vals(p.mlp.l2.weight), 1, d, d);
  const auto b2 = oracle::vals(p.mlp.l2.bias);
  for (std::size_t i = 0; i < d; ++i) y[i] += b2[i];
  return y;
}

}  // namespace

TEST(LocationToken, MatchesHandMlp) {
  Rng rng(1);
  auto p = ConditioningParams::init(16, rng);
  const Box b{0.1, 0.25, 0.6, 0.7};
  auto h = location_token(b, 3, p);
  EXPECT_EQ(h.shape(), (Shape{16}));
  EXPECT_LT(oracle::max_abs_diff(h, token_oracle(b, 3, p)), 1e-12);
}

TEST(LocationToken, UnknownCategoryIsIndexError) {
  Rng rng(2);
  auto p = ConditioningParams::init(8, rng);
  EXPECT_THROW(location_token(Box{0, 0, 1, 1}, 8, p), IndexError);
}

TEST(LocationToken, DependsOnBoxAndCategory) {
  Rng rng(3);
  auto p = ConditioningParams::init(8, rng);
  auto a = oracle::vals(location_token(Box{0.1, 0.1, 0.5, 0.5}, 1, p));
  EXPECT_GT(oracle::max_abs_diff(a, oracle::vals(location_token(Box{0.11, 0.1, 0.5, 0.5}, 1, p))), 1e-6);
  EXPECT_GT(oracle::max_abs_diff(a, oracle::vals(location_token(Box{0.1, 0.1, 0.5, 0.5}, 2, p))), 1e-6);
}

TEST(InstanceToken, ZeroAtInitAndCapacityChecked) {
  Rng rng(4);
  auto p = ConditioningParams::init(8, rng, 8, 4);
  auto h = location_token(Box{0.1, 0.1, 0.5, 0.5}, 1, p);
  EXPECT_EQ(oracle::vals(add_instance_token(h, 3, p.instances)), oracle::vals(h));
  EXPECT_THROW(add_instance_token(h, 4, p.instances), CapacityError);
  p.instances.weights.mutable_values()[2 * 8 + 5] = 0.5;
  auto g = add_instance_token(h, 2, p.instances);
  EXPECT_DOUBLE_EQ(g[5], h[5] + 0.5);
}

TEST(Slots, OrderedByFirstAppearanceThenInput) {
  auto c = three_tracks();
  EXPECT_EQ(assign_slots(c), (std::vector<std::size_t>{1, 0, 2}));
  c.tracklets[1].boxes[0] = std::nullopt;
  EXPECT_EQ(assign_slots(c), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(assign_slots(c, 2), CapacityError);
}

TEST(Slots, InvariantToTrackletPermutation) {
  // Slots follow the content, not the input position, as long as first frames differ.
  auto c = three_tracks();
  c.tracklets[2].boxes[0] = std::nullopt;
  c.tracklets[2].boxes[1] = std::nullopt;
  const auto s = assign_slots(c);
  auto r = c;
  std::swap(r.tracklets[0], r.tracklets[2]);
  const auto t = assign_slots(r);
  EXPECT_EQ(s[0], t[2]);
  EXPECT_EQ(s[2], t[0]);
  EXPECT_EQ(s[1], t[1]);
}

TEST(LocationGrid, AbsentFramesUseSharedToken) {
  Rng rng(5);
  auto p = ConditioningParams::init(8, rng);
  auto c = three_tracks();
  auto g = clip_location_tokens(c, p);
  EXPECT_EQ(g.size(), 9u);
  EXPECT_FALSE(g.at(0, 0).present);
  EXPECT_EQ(oracle::vals(g.at(0, 0).values), oracle::vals(p.absent));
  EXPECT_EQ(oracle::vals(g.at(1, 2).values), oracle::vals(p.absent));
  EXPECT_TRUE(g.at(1, 0).present);
  EXPECT_EQ(g.at(1, 0).instance_slot, 0u);
  EXPECT_LT(oracle::max_abs_diff(g.at(2, 1).values, token_oracle(*c.tracklets[2].boxes[1], 0, p)), 1e-12);
}

TEST(LocationGrid, TooManyTrackletsIsCapacityError) {
  Rng rng(6);
  auto p = ConditioningParams::init(8, rng, 8, 2);
  EXPECT_THROW(clip_location_tokens(three_tracks(), p), CapacityError);
  EXPECT_THROW(location_batch(three_tracks(), p, {0, 1, 2}), CapacityError);
}

TEST(LocationBatch, MatchesPerTokenGrid) {
  Rng rng(7);
  auto p = ConditioningParams::init(12, rng);
  for (auto& v : p.instances.weights.mutable_values()) v = rng.normal();
  auto c = three_tracks();
  const auto slots = assign_slots(c);
  for (bool emb : {true, false}) {
    auto g = clip_location_tokens(c, p, slots, emb);
    auto b = location_batch(c, p, slots, emb);
    ASSERT_EQ(b.tokens.shape(), (Shape{3, 3, 12}));
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(b.present[t * 3 + i] != 0, g.at(i, t).present);
        std::vector<double> row(b.tokens.values().begin() + static_cast<long>((t * 3 + i) * 12),
                                b.tokens.values().begin() + static_cast<long>((t * 3 + i + 1) * 12));
        EXPECT_LT(oracle::max_abs_diff(row, oracle::vals(g.at(i, t).values)), 1e-12);
      }
  }
}

TEST(LocationBatch, EmptyClipGivesUndefinedTokens) {
  Rng rng(8);
  auto p = ConditioningParams::init(8, rng);
  ClipAnnotation c;
  c.frames = 4;
  c.width = c.height = 8;
  auto b = location_batch(c, p, {});
  EXPECT_FALSE(b.tokens.defined());
  EXPECT_TRUE(b.present.empty());
}

TEST(LocationBatch, GradientsReachEveryTable) {
  Rng rng(9);
  auto p = ConditioningParams::init(6, rng, 8, 4, 2);
  for (auto& v : p.instances.weights.mutable_values()) v = rng.normal();
  auto c = three_tracks();
  const auto slots = assign_slots(c);
  Tensor r = Tensor::randn({3, 3, 6}, rng);
  auto f = [&] { return sum(mul(location_batch(c, p, slots).tokens, r)); };
  EXPECT_LT(grad_check_params(f, collect_params(p).tensors()), 1e-4);
}

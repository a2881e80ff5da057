#include <gtest/gtest.h>

#include <numbers>
#include <set>

#include "oracles.hpp"

using namespace trackdiff;

namespace {

Box random_box(Rng& rng) {
  double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
  return {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
}

}  // namespace

TEST(Iou, IdenticalDisjointAndOverlapping) {
  Box a{0.1, 0.2, 0.5, 0.6};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{0.6, 0.6, 0.9, 0.9}), 0.0);
  EXPECT_NEAR(iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0.25, 0.75, 0.75}), 0.0625 / 0.4375, 1e-15);
  EXPECT_NEAR(iou(Box{0, 0, 0.5, 0.5}, Box{0.25, 0.25, 0.75, 0.75}), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(Box{0.3, 0.3, 0.3, 0.3}, Box{0.3, 0.3, 0.3, 0.3}), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(Box, FullFrame) {
  EXPECT_EQ(full_frame_box(), (Box{0, 0, 1, 1}));
  EXPECT_EQ(full_frame_box().area(), 1.0);
  EXPECT_TRUE(full_frame_box().valid());
  EXPECT_FALSE((Box{0.5, 0, 0.4, 1}).valid());
}

TEST(Fourier, ZeroBoxAlternates) {
  for (std::size_t nf : {1u, 3u, 8u}) {
    auto f = fourier_embed(Box{0, 0, 0, 0}, nf);
    ASSERT_EQ(f.size(), 8 * nf);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i], i % 2 == 0 ? 0.0 : 1.0);
  }
}

TEST(Fourier, UnitBoxFirstOctave) {
  auto f = fourier_embed(Box{1, 1, 1, 1}, 2);
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(f[c * 4 + 0], 0.0, 1e-15);
    EXPECT_EQ(f[c * 4 + 1], -1.0);
  }
}

TEST(Fourier, MatchesDirectTrig) {
  const Box b{0.25, 0.5, 0.75, 1.0};
  auto f = fourier_embed(b, 3);
  const double u[4] = {0.25, 0.5, 0.75, 1.0};
  std::vector<double> want;
  for (double x : u)
    for (int k = 0; k < 3; ++k) {
      want.push_back(std::sin(std::pow(2.0, k) * std::numbers::pi * x));
      want.push_back(std::cos(std::pow(2.0, k) * std::numbers::pi * x));
    }
  EXPECT_LT(oracle::max_abs_diff(f, want), 1e-12);
}

TEST(Fourier, InjectiveOnCentiLattice) {
  // Every coordinate is embedded independently, so injectivity on boxes
  // reduces to injectivity on the 101 lattice values per coordinate.
  for (std::size_t nf : {4u, 8u}) {
    std::vector<std::vector<double>> emb;
    for (int i = 0; i <= 100; ++i) {
      auto f = fourier_embed(Box{i / 100.0, 0, i / 100.0, 0}, nf);
      emb.emplace_back(f.begin(), f.begin() + 2 * nf);
    }
    for (std::size_t a = 0; a < emb.size(); ++a)
      for (std::size_t b = a + 1; b < emb.size(); ++b) EXPECT_GT(oracle::max_abs_diff(emb[a], emb[b]), 1e-9) << a << " " << b;
  }
}

TEST(RoiAlign, FullFrameIsIdentity) {
  Rng rng(2);
  Tensor feat = Tensor::randn({5, 5, 3}, rng);
  EXPECT_EQ(oracle::vals(roi_align(feat, full_frame_box(), 5)), oracle::vals(feat));
}

TEST(RoiAlign, ConstantMap) {
  Rng rng(3);
  Tensor feat = Tensor::full({6, 7, 2}, 0.37);
  for (int i = 0; i < 20; ++i) {
    auto y = roi_align(feat, random_box(rng), 1 + rng.below(5));
    for (double v : y.values()) EXPECT_NEAR(v, 0.37, 1e-15);
  }
}

TEST(RoiAlign, MatchesDenseBilinearOracle) {
  Rng rng(4);
  Tensor feat = Tensor::randn({6, 6, 2}, rng);
  const Box b{0.1, 0.2, 0.6, 0.9};
  EXPECT_LT(oracle::max_abs_diff(roi_align(feat, b, 4), oracle::roi_align(oracle::vals(feat), 6, 6, 2, b, 4)), 1e-12);
}

TEST(RoiAlign, RandomCasesMatchOracle) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const std::size_t H = 1 + rng.below(9), W = 1 + rng.below(9), C = 1 + rng.below(3), r = 1 + rng.below(5);
    Tensor feat = Tensor::randn({H, W, C}, rng);
    const Box b = random_box(rng);
    EXPECT_LT(oracle::max_abs_diff(roi_align(feat, b, r), oracle::roi_align(oracle::vals(feat), H, W, C, b, r)), 1e-12);
  }
}

TEST(RoiAlign, DegenerateBoxReplicatesOnePoint) {
  Rng rng(6);
  Tensor feat = Tensor::randn({4, 4, 2}, rng);
  auto y = roi_align(feat, Box{0.4, 0.4, 0.4, 0.4}, 3);
  for (std::size_t p = 1; p < 9; ++p)
    for (int c = 0; c < 2; ++c) EXPECT_EQ(y[p * 2 + c], y[c]);
}

TEST(RoiAlign, WholePixelTranslationInvariance) {
  // A patch and its box shifted together by whole pixels, away from edges.
  const std::size_t H = 12, W = 12;
  Rng rng(7);
  std::vector<double> patch(16);
  for (auto& v : patch) v = rng.normal();
  auto make = [&](std::size_t oy, std::size_t ox) {
    std::vector<double> f(H * W, 0.0);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) f[(oy + y) * W + ox + x] = patch[y * 4 + x];
    return Tensor::from({H, W, 1}, f);
  };
  auto box_at = [&](std::size_t oy, std::size_t ox) {
    return Box{(ox + 0.5) / W, (oy + 0.5) / H, (ox + 3.5) / W, (oy + 3.5) / H};
  };
  auto a = roi_align(make(2, 3), box_at(2, 3), 3);
  auto b = roi_align(make(6, 5), box_at(6, 5), 3);
  EXPECT_LT(oracle::max_abs_diff(oracle::vals(a), oracle::vals(b)), 1e-14);
}

TEST(RoiAlign, GradientPassesFiniteDifferences) {
  Rng rng(8);
  Tensor feat = Tensor::randn({5, 6, 2}, rng);
  Tensor r = Tensor::randn({3, 3, 2}, rng);
  const Box b{0.15, 0.05, 0.8, 0.7};
  EXPECT_LT(grad_check([&](const Tensor& f) { return sum(mul(roi_align(f, b, 3), r)); }, feat), 1e-4);
}

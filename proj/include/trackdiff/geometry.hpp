#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "trackdiff/tensor.hpp"

namespace trackdiff {

/// Axis-aligned box in frame-relative coordinates, all in [0, 1].
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  bool valid() const {
    return 0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box full_frame_box() { return {0.0, 0.0, 1.0, 1.0}; }

inline double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline constexpr std::size_t kDefaultFourierFreqs = 8;

/// [sin(2^k pi u), cos(2^k pi u)] for u in (x1, y1, x2, y2), k < n_freq,
/// coordinate-major. Length 8 * n_freq.
inline std::vector<double> fourier_embed(const Box& b, std::size_t n_freq = kDefaultFourierFreqs) {
  const double coords[4] = {b.x1, b.y1, b.x2, b.y2};
  std::vector<double> out;
  out.reserve(8 * n_freq);
  for (double u : coords) {
    double freq = std::numbers::pi;
    for (std::size_t k = 0; k < n_freq; ++k, freq *= 2.0) {
      out.push_back(std::sin(freq * u));
      out.push_back(std::cos(freq * u));
    }
  }
  return out;
}

inline constexpr std::size_t kDefaultRoiGrid = 4;

namespace detail {

struct BilinearTap {
  std::size_t offset[4];
  double weight[4];
};

/// One bilinear sample per bin centre; box edges map to x * W - 0.5.
inline std::vector<BilinearTap> roi_taps(std::size_t H, std::size_t W, const Box& b, std::size_t r) {
  std::vector<BilinearTap> taps(r * r);
  const double x0 = b.x1 * static_cast<double>(W) - 0.5;
  const double y0 = b.y1 * static_cast<double>(H) - 0.5;
  const double bw = b.width() * static_cast<double>(W) / static_cast<double>(r);
  const double bh = b.height() * static_cast<double>(H) / static_cast<double>(r);
  const double xmax = static_cast<double>(W - 1);
  const double ymax = static_cast<double>(H - 1);
  for (std::size_t i = 0; i < r; ++i) {
    const double sy = std::clamp(y0 + (static_cast<double>(i) + 0.5) * bh, 0.0, ymax);
    const auto ylo = static_cast<std::size_t>(std::floor(sy));
    const auto yhi = std::min(ylo + 1, H - 1);
    const double ay = sy - static_cast<double>(ylo);
    for (std::size_t j = 0; j < r; ++j) {
      const double sx = std::clamp(x0 + (static_cast<double>(j) + 0.5) * bw, 0.0, xmax);
      const auto xlo = static_cast<std::size_t>(std::floor(sx));
      const auto xhi = std::min(xlo + 1, W - 1);
      const double ax = sx - static_cast<double>(xlo);
      auto& t = taps[i * r + j];
      t.offset[0] = ylo * W + xlo;
      t.offset[1] = ylo * W + xhi;
      t.offset[2] = yhi * W + xlo;
      t.offset[3] = yhi * W + xhi;
      t.weight[0] = (1.0 - ay) * (1.0 - ax);
      t.weight[1] = (1.0 - ay) * ax;
      t.weight[2] = ay * (1.0 - ax);
      t.weight[3] = ay * ax;
    }
  }
  return taps;
}

}  // namespace detail

/// Bilinear ROI pooling of feat [H, W, C] into an r x r grid; differentiable
/// with respect to feat.
inline Tensor roi_align(const Tensor& feat, const Box& b, std::size_t r = kDefaultRoiGrid) {
  if (feat.rank() != 3) throw DimensionError("roi_align: feature map must be [H,W,C], got " + shape_str(feat.shape()));
  if (r == 0) throw ContractError("roi_align: grid size must be positive");
  const auto H = feat.dim(0), W = feat.dim(1), C = feat.dim(2);
  auto taps = detail::roi_taps(H, W, b, r);
  std::vector<double> out(r * r * C, 0.0);
  for (std::size_t p = 0; p < taps.size(); ++p) {
    const auto& t = taps[p];
    for (int q = 0; q < 4; ++q) {
      const double* src = feat.data() + t.offset[q] * C;
      for (std::size_t c = 0; c < C; ++c) out[p * C + c] += t.weight[q] * src[c];
    }
  }
  return detail::make_op({r, r, C}, std::move(out), {feat}, [taps = std::move(taps), C](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < taps.size(); ++p) {
      const auto& t = taps[p];
      for (int q = 0; q < 4; ++q) {
        double* dst = g.data() + t.offset[q] * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += t.weight[q] * self.grad[p * C + c];
      }
    }
  });
}

}  // namespace trackdiff

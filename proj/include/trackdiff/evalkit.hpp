#pragma once

// Grounding evaluation on generated frames: colour-blob detection, greedy
// IoU matching against requested boxes, identity consistency, and a
// Frechet distance between Gaussian fits of simple per-clip features.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "trackdiff/geometry.hpp"
#include "trackdiff/trackdata.hpp"

namespace trackdiff {

inline constexpr double kBackgroundTolerance = 0.2;
inline constexpr double kBlobColorTolerance = 0.3;
inline constexpr std::size_t kMinBlobPixels = 4;

struct Blob {
  Box box;
  std::array<double, 3> color{};
  std::size_t pixels = 0;
};

namespace detail {

class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void join(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

inline double channel_distance(const double* a, const double* b) {
  return std::max({std::abs(a[0] - b[0]), std::abs(a[1] - b[1]), std::abs(a[2] - b[2])});
}

}  // namespace detail

/// Pixels further than `bg_tol` (max channel) from the gray background are
/// foreground; 4-neighbours join when their colours are within `color_tol`.
/// Components under kMinBlobPixels are dropped; largest first.
inline std::vector<Blob> detect_blobs(const double* rgb, std::size_t H, std::size_t W,
                                      double bg_tol = kBackgroundTolerance, double color_tol = kBlobColorTolerance) {
  const double bg[3] = {kBackgroundLevel, kBackgroundLevel, kBackgroundLevel};
  std::vector<unsigned char> fg(H * W);
  for (std::size_t i = 0; i < H * W; ++i) fg[i] = detail::channel_distance(rgb + 3 * i, bg) > bg_tol;
  detail::DisjointSet ds(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto i = y * W + x;
      if (!fg[i]) continue;
      if (x + 1 < W && fg[i + 1] && detail::channel_distance(rgb + 3 * i, rgb + 3 * (i + 1)) < color_tol) ds.join(i, i + 1);
      if (y + 1 < H && fg[i + W] && detail::channel_distance(rgb + 3 * i, rgb + 3 * (i + W)) < color_tol) ds.join(i, i + W);
    }
  struct Acc {
    std::size_t x1, y1, x2, y2, n = 0;
    double c[3] = {0, 0, 0};
  };
  std::vector<Acc> acc;
  std::vector<std::size_t> label(H * W, std::numeric_limits<std::size_t>::max());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto i = y * W + x;
      if (!fg[i]) continue;
      const auto root = ds.find(i);
      if (label[root] == std::numeric_limits<std::size_t>::max()) {
        label[root] = acc.size();
        acc.push_back({x, y, x, y});
      }
      auto& a = acc[label[root]];
      a.x1 = std::min(a.x1, x);
      a.x2 = std::max(a.x2, x);
      a.y1 = std::min(a.y1, y);
      a.y2 = std::max(a.y2, y);
      ++a.n;
      for (int c = 0; c < 3; ++c) a.c[c] += rgb[3 * i + c];
    }
  std::vector<Blob> out;
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  for (const auto& a : acc) {
    if (a.n < kMinBlobPixels) continue;
    Blob b;
    b.box = {static_cast<double>(a.x1) / Wd, static_cast<double>(a.y1) / Hd, static_cast<double>(a.x2 + 1) / Wd,
             static_cast<double>(a.y2 + 1) / Hd};
    for (int c = 0; c < 3; ++c) b.color[c] = a.c[c] / static_cast<double>(a.n);
    b.pixels = a.n;
    out.push_back(b);
  }
  std::stable_sort(out.begin(), out.end(), [](const Blob& a, const Blob& b) { return a.pixels > b.pixels; });
  return out;
}

inline std::vector<Blob> detect_blobs(const FrameBuffer& fb, std::size_t t, double bg_tol = kBackgroundTolerance,
                                      double color_tol = kBlobColorTolerance) {
  const auto H = fb.height(), W = fb.width();
  return detect_blobs(fb.pixels.data() + t * H * W * 3, H, W, bg_tol, color_tol);
}

struct GroundingReport {
  /// iou[t][i]: IoU of tracklet i at frame t; nullopt where absent.
  std::vector<std::vector<std::optional<double>>> iou;
  double mean_iou = 1.0;
  double detection_rate = 1.0;
  double identity_consistency = 1.0;
};

/// Per frame, greedily pairs detected blobs with present boxes by highest
/// IoU. Unmatched boxes score 0. Identity consistency averages, over
/// instances, 1 - mean channel variance / 0.25 of the matched blob colours;
/// an instance never matched scores 0. Empty clips score 1 everywhere.
inline GroundingReport grounding_miou(const ClipAnnotation& clip, const FrameBuffer& frames) {
  if (frames.frames() != clip.frames || frames.height() != clip.height || frames.width() != clip.width) {
    throw ContractError("grounding_miou: frames " + shape_str(frames.pixels.shape()) + " do not match the annotation");
  }
  const auto T = clip.frames, N = clip.tracklets.size();
  GroundingReport rep;
  rep.iou.assign(T, std::vector<std::optional<double>>(N));
  std::vector<std::vector<std::array<double, 3>>> colors(N);
  double iou_sum = 0.0;
  std::size_t present = 0, detected = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto blobs = detect_blobs(frames, t);
    struct Pair {
      double iou;
      std::size_t inst, blob;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& b = clip.tracklets[i].boxes[t];
      if (!b) continue;
      rep.iou[t][i] = 0.0;
      ++present;
      for (std::size_t j = 0; j < blobs.size(); ++j) {
        const double v = iou(*b, blobs[j].box);
        if (v > 0.0) pairs.push_back({v, i, j});
      }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::vector<bool> inst_used(N, false), blob_used(blobs.size(), false);
    for (const auto& pr : pairs) {
      if (inst_used[pr.inst] || blob_used[pr.blob]) continue;
      inst_used[pr.inst] = blob_used[pr.blob] = true;
      rep.iou[t][pr.inst] = pr.iou;
      colors[pr.inst].push_back(blobs[pr.blob].color);
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (!rep.iou[t][i]) continue;
      iou_sum += *rep.iou[t][i];
      if (*rep.iou[t][i] >= 0.5) ++detected;
    }
  }
  if (present > 0) {
    rep.mean_iou = iou_sum / static_cast<double>(present);
    rep.detection_rate = static_cast<double>(detected) / static_cast<double>(present);
  }
  if (N > 0) {
    double total = 0.0;
    for (const auto& cs : colors) {
      if (cs.empty()) continue;
      double var = 0.0;
      for (int c = 0; c < 3; ++c) {
        double m = 0.0;
        for (const auto& col : cs) m += col[c];
        m /= static_cast<double>(cs.size());
        double v = 0.0;
        for (const auto& col : cs) v += (col[c] - m) * (col[c] - m);
        var += v / static_cast<double>(cs.size());
      }
      total += std::clamp(1.0 - (var / 3.0) / 0.25, 0.0, 1.0);
    }
    rep.identity_consistency = total / static_cast<double>(N);
  }
  return rep;
}

/// Mean of the three aggregate scores over several clips.
inline GroundingReport average_reports(const std::vector<GroundingReport>& reps) {
  GroundingReport out;
  if (reps.empty()) return out;
  out.mean_iou = out.detection_rate = out.identity_consistency = 0.0;
  for (const auto& r : reps) {
    out.mean_iou += r.mean_iou;
    out.detection_rate += r.detection_rate;
    out.identity_consistency += r.identity_consistency;
  }
  const auto n = static_cast<double>(reps.size());
  out.mean_iou /= n;
  out.detection_rate /= n;
  out.identity_consistency /= n;
  return out;
}

inline nlohmann::ordered_json report_json(const GroundingReport& r, const std::map<std::string, std::string>& config = {}) {
  nlohmann::ordered_json j;
  j["mean_iou"] = r.mean_iou;
  j["detection_rate"] = r.detection_rate;
  j["identity_consistency"] = r.identity_consistency;
  auto frames = nlohmann::ordered_json::array();
  for (const auto& row : r.iou) {
    auto jr = nlohmann::ordered_json::array();
    for (const auto& v : row) jr.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
    frames.push_back(jr);
  }
  j["per_frame_iou"] = frames;
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config) cfg[k] = v;
  j["config"] = cfg;
  return j;
}

// ---------------------------------------------------------------------------
// Frechet distance on clip features

inline constexpr std::size_t kClipFeatures = 4;

/// Mean R, G, B over the clip, then mean squared frame-to-frame difference.
inline std::array<double, kClipFeatures> clip_features(const FrameBuffer& fb) {
  std::array<double, kClipFeatures> f{};
  const auto n = fb.pixels.size();
  const double* px = fb.pixels.data();
  for (std::size_t i = 0; i < n; ++i) f[i % 3] += px[i];
  for (int c = 0; c < 3; ++c) f[c] /= static_cast<double>(n / 3);
  const auto frame = n / fb.frames();
  if (fb.frames() > 1) {
    double e = 0.0;
    for (std::size_t i = frame; i < n; ++i) e += (px[i] - px[i - frame]) * (px[i] - px[i - frame]);
    f[3] = e / static_cast<double>(n - frame);
  }
  return f;
}

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline GaussianFit fit_gaussian(const std::vector<std::array<double, kClipFeatures>>& feats) {
  const auto n = feats.size();
  GaussianFit g{Eigen::VectorXd::Zero(kClipFeatures), Eigen::MatrixXd::Zero(kClipFeatures, kClipFeatures)};
  for (const auto& f : feats) g.mean += Eigen::Map<const Eigen::VectorXd>(f.data(), kClipFeatures);
  g.mean /= static_cast<double>(n);
  for (const auto& f : feats) {
    Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(f.data(), kClipFeatures) - g.mean;
    g.cov += d * d.transpose();
  }
  g.cov /= static_cast<double>(n - 1);
  return g;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// |m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  const Eigen::MatrixXd s1 = psd_sqrt(a.cov);
  const Eigen::MatrixXd cross = psd_sqrt(s1 * b.cov * s1);
  const double d = (a.mean - b.mean).squaredNorm() + (a.cov + b.cov - 2.0 * cross).trace();
  return std::max(0.0, d);
}

inline double fvd_stub(const std::vector<FrameBuffer>& a, const std::vector<FrameBuffer>& b) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("fvd_stub: need at least 2 clips per side");
  std::vector<std::array<double, kClipFeatures>> fa, fb;
  for (const auto& c : a) fa.push_back(clip_features(c));
  for (const auto& c : b) fb.push_back(clip_features(c));
  return frechet_distance(fit_gaussian(fa), fit_gaussian(fb));
}

}  // namespace trackdiff

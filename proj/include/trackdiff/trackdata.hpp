#pragma once

// Tracklet annotations, the annotation document format, the synthetic
// moving-rectangles world and the lossless patchify frame <-> latent codec.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trackdiff/geometry.hpp"

namespace trackdiff {

inline constexpr std::size_t kDefaultMaxInstances = 8;

struct Tracklet {
  std::int64_t instance_id = 0;
  std::size_t category_id = 0;
  /// One entry per frame; nullopt where the instance is absent.
  std::vector<std::optional<Box>> boxes;

  bool present(std::size_t t) const { return boxes.at(t).has_value(); }
  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count_if(boxes.begin(), boxes.end(), [](const auto& b) { return b.has_value(); }));
  }
  std::optional<std::size_t> first_present() const {
    for (std::size_t t = 0; t < boxes.size(); ++t)
      if (boxes[t]) return t;
    return std::nullopt;
  }

  friend bool operator==(const Tracklet&, const Tracklet&) = default;
};

struct ClipAnnotation {
  std::size_t frames = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Tracklet> tracklets;
  std::optional<std::string> caption;
  std::optional<double> fps;

  friend bool operator==(const ClipAnnotation&, const ClipAnnotation&) = default;
};

/// Pixels [T, height, width, 3] with values in [0, 1].
struct FrameBuffer {
  Tensor pixels;

  std::size_t frames() const { return pixels.dim(0); }
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
  double at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[((t * height() + y) * width() + x) * 3 + c];
  }
};

// ---------------------------------------------------------------------------
// Annotation document

enum class AnnotationErrorCode {
  kSyntax,
  kMissingField,
  kWrongType,
  kBadExtent,
  kRaggedFrames,
  kBoxOrder,
  kCoordinateRange,
  kDuplicateId,
  kNoPresentFrame,
  kCapacity,
};

inline const char* to_string(AnnotationErrorCode c) {
  switch (c) {
    case AnnotationErrorCode::kSyntax: return "syntax";
    case AnnotationErrorCode::kMissingField: return "missing-field";
    case AnnotationErrorCode::kWrongType: return "wrong-type";
    case AnnotationErrorCode::kBadExtent: return "bad-extent";
    case AnnotationErrorCode::kRaggedFrames: return "ragged-frames";
    case AnnotationErrorCode::kBoxOrder: return "box-order";
    case AnnotationErrorCode::kCoordinateRange: return "coordinate-range";
    case AnnotationErrorCode::kDuplicateId: return "duplicate-id";
    case AnnotationErrorCode::kNoPresentFrame: return "no-present-frame";
    case AnnotationErrorCode::kCapacity: return "capacity";
  }
  return "unknown";
}

class AnnotationError : public std::runtime_error {
 public:
  AnnotationError(AnnotationErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code) {}
  AnnotationErrorCode code() const { return code_; }

 private:
  AnnotationErrorCode code_;
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw AnnotationError(AnnotationErrorCode::kMissingField, where + " lacks \"" + key + "\"");
  return *it;
}

inline std::size_t positive_int(const nlohmann::json& v, const std::string& what) {
  if (!v.is_number_integer()) throw AnnotationError(AnnotationErrorCode::kWrongType, what + " must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x <= 0) throw AnnotationError(AnnotationErrorCode::kBadExtent, what + " must be positive, got " + std::to_string(x));
  return static_cast<std::size_t>(x);
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

/// Parses and validates an annotation document. Pixel boxes are normalized
/// by the frame extents.
inline ClipAnnotation parse_annotations(const std::string& text, std::size_t k_max = kDefaultMaxInstances) {
  using detail::require_field;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw AnnotationError(AnnotationErrorCode::kSyntax, "at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object()) throw AnnotationError(AnnotationErrorCode::kWrongType, "document must be an object");

  ClipAnnotation clip;
  clip.width = detail::positive_int(require_field(doc, "width", "document"), "width");
  clip.height = detail::positive_int(require_field(doc, "height", "document"), "height");
  clip.frames = detail::positive_int(require_field(doc, "frames", "document"), "frames");
  if (auto it = doc.find("fps"); it != doc.end()) {
    if (!it->is_number()) throw AnnotationError(AnnotationErrorCode::kWrongType, "fps must be a number");
    clip.fps = it->get<double>();
  }
  if (auto it = doc.find("caption"); it != doc.end()) {
    if (!it->is_string()) throw AnnotationError(AnnotationErrorCode::kWrongType, "caption must be a string");
    clip.caption = it->get<std::string>();
  }
  const auto& tracks = require_field(doc, "tracklets", "document");
  if (!tracks.is_array()) throw AnnotationError(AnnotationErrorCode::kWrongType, "tracklets must be an array");
  if (tracks.size() > k_max) {
    throw AnnotationError(AnnotationErrorCode::kCapacity, std::to_string(tracks.size()) + " tracklets exceed capacity " + std::to_string(k_max));
  }

  const double W = static_cast<double>(clip.width), H = static_cast<double>(clip.height);
  std::set<std::int64_t> ids;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto& tj = tracks[i];
    const std::string where = "tracklet " + std::to_string(i);
    if (!tj.is_object()) throw AnnotationError(AnnotationErrorCode::kWrongType, where + " must be an object");
    Tracklet tr;
    const auto& id = require_field(tj, "id", where);
    if (!id.is_number_integer()) throw AnnotationError(AnnotationErrorCode::kWrongType, where + " id must be an integer");
    tr.instance_id = id.get<std::int64_t>();
    if (!ids.insert(tr.instance_id).second) {
      throw AnnotationError(AnnotationErrorCode::kDuplicateId, "instance id " + std::to_string(tr.instance_id) + " appears twice");
    }
    const auto& cat = require_field(tj, "category", where);
    if (!cat.is_number_integer() || cat.get<std::int64_t>() < 0) {
      throw AnnotationError(AnnotationErrorCode::kWrongType, where + " category must be a non-negative integer");
    }
    tr.category_id = cat.get<std::size_t>();
    const auto& boxes = require_field(tj, "boxes", where);
    if (!boxes.is_array()) throw AnnotationError(AnnotationErrorCode::kWrongType, where + " boxes must be an array");
    if (boxes.size() != clip.frames) {
      throw AnnotationError(AnnotationErrorCode::kRaggedFrames, where + " has " + std::to_string(boxes.size()) +
                                                                   " boxes for " + std::to_string(clip.frames) + " frames");
    }
    for (std::size_t t = 0; t < boxes.size(); ++t) {
      const auto& bj = boxes[t];
      const std::string bw = where + " frame " + std::to_string(t);
      if (bj.is_null()) {
        tr.boxes.emplace_back(std::nullopt);
        continue;
      }
      if (!bj.is_array() || bj.size() != 4 || !std::all_of(bj.begin(), bj.end(), [](const auto& v) { return v.is_number(); })) {
        throw AnnotationError(AnnotationErrorCode::kWrongType, bw + " box must be null or four numbers");
      }
      const double x1 = bj[0].get<double>(), y1 = bj[1].get<double>(), x2 = bj[2].get<double>(), y2 = bj[3].get<double>();
      if (x2 < x1 || y2 < y1) throw AnnotationError(AnnotationErrorCode::kBoxOrder, bw + " has x2 < x1 or y2 < y1");
      if (x1 < 0.0 || y1 < 0.0 || x2 > W || y2 > H) {
        throw AnnotationError(AnnotationErrorCode::kCoordinateRange, bw + " lies outside the " +
                                                                         std::to_string(clip.width) + "x" + std::to_string(clip.height) + " frame");
      }
      tr.boxes.emplace_back(Box{x1 / W, y1 / H, x2 / W, y2 / H});
    }
    if (tr.present_count() == 0) throw AnnotationError(AnnotationErrorCode::kNoPresentFrame, where + " is never present");
    clip.tracklets.push_back(std::move(tr));
  }
  return clip;
}

/// Canonical document text: keys in fixed order, coordinates in pixels with
/// six decimals.
inline std::string serialize_annotations(const ClipAnnotation& clip) {
  using detail::fixed6;
  const double W = static_cast<double>(clip.width), H = static_cast<double>(clip.height);
  std::ostringstream os;
  os << '{';
  if (clip.fps) os << "\"fps\": " << fixed6(*clip.fps) << ", ";
  os << "\"width\": " << clip.width << ", \"height\": " << clip.height << ", \"frames\": " << clip.frames
     << ", \"tracklets\": [";
  for (std::size_t i = 0; i < clip.tracklets.size(); ++i) {
    const auto& tr = clip.tracklets[i];
    os << (i ? ",\n  " : "\n  ") << "{\"id\": " << tr.instance_id << ", \"category\": " << tr.category_id
       << ", \"boxes\": [";
    for (std::size_t t = 0; t < tr.boxes.size(); ++t) {
      if (t) os << ", ";
      if (!tr.boxes[t]) {
        os << "null";
        continue;
      }
      const auto& b = *tr.boxes[t];
      os << '[' << fixed6(b.x1 * W) << ", " << fixed6(b.y1 * H) << ", " << fixed6(b.x2 * W) << ", "
         << fixed6(b.y2 * H) << ']';
    }
    os << "]}";
  }
  os << (clip.tracklets.empty() ? "]" : "\n]");
  if (clip.caption) os << ", \"caption\": " << nlohmann::json(*clip.caption).dump();
  os << "}\n";
  return os.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << text;
}

// ---------------------------------------------------------------------------
// Synthetic world

inline constexpr double kBackgroundLevel = 0.5;
inline constexpr std::size_t kPaletteSize = 8;

/// Category colours; all channels lie on the 1/8 lattice.
inline std::array<double, 3> category_color(std::size_t category) {
  static constexpr double kPalette[kPaletteSize][3] = {
      {0.875, 0.125, 0.125}, {0.125, 0.875, 0.125}, {0.125, 0.125, 0.875}, {0.875, 0.875, 0.125},
      {0.875, 0.125, 0.875}, {0.125, 0.875, 0.875}, {0.875, 0.5, 0.125},   {0.5, 0.125, 0.875},
  };
  const auto& c = kPalette[category % kPaletteSize];
  return {c[0], c[1], c[2]};
}

struct SyntheticOptions {
  std::size_t k_max = kDefaultMaxInstances;
  std::size_t n_categories = kPaletteSize;
  /// Rectangle side range as a fraction of the frame side.
  double min_size = 0.25;
  double max_size = 0.4;
  /// Maximum speed in pixels per frame.
  double max_speed = 3.0;
  double disappear_prob = 0.2;
  double scale_ramp_prob = 0.3;
  /// Resample trajectories (bounded attempts) so rectangles never touch.
  bool avoid_contact = true;
};

struct SyntheticClip {
  ClipAnnotation annotation;
  FrameBuffer frames;
};

namespace detail {

struct PixelRect {
  long x1, y1, x2, y2;  // half-open
};

inline bool rects_touch(const PixelRect& a, const PixelRect& b) {
  return a.x1 <= b.x2 && b.x1 <= a.x2 && a.y1 <= b.y2 && b.y1 <= a.y2;
}

/// 1-D constant-velocity motion reflected inside [0, limit].
inline double reflect(double pos, double& vel, double limit) {
  pos += vel;
  for (int guard = 0; guard < 8 && (pos < 0.0 || pos > limit); ++guard) {
    if (pos < 0.0) {
      pos = -pos;
      vel = -vel;
    }
    if (pos > limit) {
      pos = 2.0 * limit - pos;
      vel = -vel;
    }
  }
  return std::clamp(pos, 0.0, limit);
}

}  // namespace detail

/// Renders rectangles of one colour per category over a gray background.
/// Pixel rectangles are listed per instance per frame (absent = nullopt).
inline FrameBuffer render_rectangles(const ClipAnnotation& clip) {
  const auto T = clip.frames, H = clip.height, W = clip.width;
  std::vector<double> px(T * H * W * 3, kBackgroundLevel);
  for (const auto& tr : clip.tracklets) {
    const auto color = category_color(tr.category_id);
    for (std::size_t t = 0; t < T; ++t) {
      if (!tr.boxes[t]) continue;
      const auto& b = *tr.boxes[t];
      const auto x1 = static_cast<std::size_t>(std::lround(b.x1 * static_cast<double>(W)));
      const auto x2 = static_cast<std::size_t>(std::lround(b.x2 * static_cast<double>(W)));
      const auto y1 = static_cast<std::size_t>(std::lround(b.y1 * static_cast<double>(H)));
      const auto y2 = static_cast<std::size_t>(std::lround(b.y2 * static_cast<double>(H)));
      for (std::size_t y = y1; y < std::min(y2, H); ++y)
        for (std::size_t x = x1; x < std::min(x2, W); ++x)
          for (std::size_t c = 0; c < 3; ++c) px[((t * H + y) * W + x) * 3 + c] = color[c];
    }
  }
  return FrameBuffer{Tensor::from({T, H, W, 3}, std::move(px))};
}

/// Deterministic per seed. Categories are distinct within a clip, so every
/// instance also has its own colour.
inline SyntheticClip gen_synthetic(std::uint64_t seed, std::size_t n_instances, std::size_t T, std::size_t width,
                                   std::size_t height, const SyntheticOptions& opt = {}) {
  if (n_instances > opt.k_max) {
    throw CapacityError(std::to_string(n_instances) + " instances exceed capacity " + std::to_string(opt.k_max));
  }
  if (n_instances > opt.n_categories) {
    throw CapacityError(std::to_string(n_instances) + " instances need distinct categories, only " +
                        std::to_string(opt.n_categories) + " exist");
  }
  if (T == 0 || width == 0 || height == 0) throw ConfigError("synthetic clip extents must be positive");
  Rng rng(seed);

  std::vector<std::size_t> cats(opt.n_categories);
  std::iota(cats.begin(), cats.end(), std::size_t{0});
  for (std::size_t i = cats.size(); i > 1; --i) std::swap(cats[i - 1], cats[rng.below(i)]);

  const double Wd = static_cast<double>(width), Hd = static_cast<double>(height);
  ClipAnnotation best;
  for (int attempt = 0; attempt < 64; ++attempt) {
    ClipAnnotation clip;
    clip.frames = T;
    clip.width = width;
    clip.height = height;
    std::vector<std::vector<std::optional<detail::PixelRect>>> rects;
    for (std::size_t i = 0; i < n_instances; ++i) {
      auto side = [&](double extent) {
        const double lo = std::max(1.0, std::round(opt.min_size * extent));
        const double hi = std::max(lo, std::round(opt.max_size * extent));
        return lo + std::floor(rng.uniform() * (hi - lo + 1.0));
      };
      const double w0 = side(Wd), h0 = side(Hd);
      double w1 = w0, h1 = h0;
      if (rng.uniform() < opt.scale_ramp_prob) {
        w1 = side(Wd);
        h1 = side(Hd);
      }
      double x = rng.uniform(0.0, Wd - std::max(w0, w1));
      double y = rng.uniform(0.0, Hd - std::max(h0, h1));
      double vx = rng.uniform(-opt.max_speed, opt.max_speed);
      double vy = rng.uniform(-opt.max_speed, opt.max_speed);
      std::size_t gone_begin = T, gone_end = T;
      if (T > 2 && rng.uniform() < opt.disappear_prob) {
        gone_begin = 1 + rng.below(T - 2);
        gone_end = std::min(T - 1, gone_begin + 1 + rng.below(2));
      }
      Tracklet tr;
      tr.instance_id = static_cast<std::int64_t>(i);
      tr.category_id = cats[i];
      std::vector<std::optional<detail::PixelRect>> inst_rects;
      for (std::size_t t = 0; t < T; ++t) {
        const double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
        const double w = std::round(w0 + (w1 - w0) * frac);
        const double h = std::round(h0 + (h1 - h0) * frac);
        if (t > 0) {
          x = detail::reflect(x, vx, Wd - w);
          y = detail::reflect(y, vy, Hd - h);
        }
        x = std::clamp(x, 0.0, Wd - w);
        y = std::clamp(y, 0.0, Hd - h);
        if (t >= gone_begin && t < gone_end) {
          tr.boxes.emplace_back(std::nullopt);
          inst_rects.emplace_back(std::nullopt);
          continue;
        }
        const double px1 = std::round(x), py1 = std::round(y);
        const detail::PixelRect r{static_cast<long>(px1), static_cast<long>(py1), static_cast<long>(px1 + w),
                                  static_cast<long>(py1 + h)};
        inst_rects.emplace_back(r);
        tr.boxes.emplace_back(Box{px1 / Wd, py1 / Hd, (px1 + w) / Wd, (py1 + h) / Hd});
      }
      clip.tracklets.push_back(std::move(tr));
      rects.push_back(std::move(inst_rects));
    }
    bool contact = false;
    for (std::size_t t = 0; t < T && !contact; ++t)
      for (std::size_t a = 0; a < n_instances && !contact; ++a)
        for (std::size_t b = a + 1; b < n_instances && !contact; ++b)
          contact = rects[a][t] && rects[b][t] && detail::rects_touch(*rects[a][t], *rects[b][t]);
    best = std::move(clip);
    if (!contact || !opt.avoid_contact) break;
  }
  SyntheticClip out;
  out.frames = render_rectangles(best);
  out.annotation = std::move(best);
  return out;
}

// ---------------------------------------------------------------------------
// Patchify codec

inline constexpr double kLatentOffset = 0.5;
inline constexpr double kLatentScale = 2.0;

/// Space-to-depth by `patch`, then (x - 0.5) * 2. Channel order inside a
/// patch is (dy, dx, rgb).
inline Tensor encode_frames(const FrameBuffer& frames, std::size_t patch) {
  const auto T = frames.frames(), H = frames.height(), W = frames.width();
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("frame extents " + std::to_string(W) + "x" + std::to_string(H) + " are not divisible by patch " +
                      std::to_string(patch));
  }
  const auto h = H / patch, w = W / patch, C = 3 * patch * patch;
  std::vector<double> out(T * h * w * C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t c = 0; c < 3; ++c) {
              const double v = frames.at(t, i * patch + dy, j * patch + dx, c);
              out[((t * h + i) * w + j) * C + (dy * patch + dx) * 3 + c] = (v - kLatentOffset) * kLatentScale;
            }
  return Tensor::from({T, h, w, C}, std::move(out));
}

enum class DecodeMode { kExact, kDisplay };

/// Inverse of encode_frames; kDisplay additionally clamps to [0, 1].
inline FrameBuffer decode_latent(const Tensor& latent, DecodeMode mode = DecodeMode::kExact) {
  if (latent.rank() != 4) throw ContractError("decode_latent: latent must be [T,h,w,C], got " + shape_str(latent.shape()));
  const auto T = latent.dim(0), h = latent.dim(1), w = latent.dim(2), C = latent.dim(3);
  const auto patch = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(C) / 3.0)));
  if (patch == 0 || 3 * patch * patch != C) {
    throw ContractError("decode_latent: channel count " + std::to_string(C) + " is not 3*p^2");
  }
  const auto H = h * patch, W = w * patch;
  std::vector<double> px(T * H * W * 3);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t c = 0; c < 3; ++c) {
              double v = latent[((t * h + i) * w + j) * C + (dy * patch + dx) * 3 + c] / kLatentScale + kLatentOffset;
              if (mode == DecodeMode::kDisplay) v = std::clamp(v, 0.0, 1.0);
              px[((t * H + i * patch + dy) * W + j * patch + dx) * 3 + c] = v;
            }
  return FrameBuffer{Tensor::from({T, H, W, 3}, std::move(px))};
}

// ---------------------------------------------------------------------------
// PPM frame sequences

inline void write_ppm(const std::string& path, const FrameBuffer& fb, std::size_t t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << "P6\n" << fb.width() << ' ' << fb.height() << "\n255\n";
  for (std::size_t y = 0; y < fb.height(); ++y)
    for (std::size_t x = 0; x < fb.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(fb.at(t, y, x, c), 0.0, 1.0);
        f.put(static_cast<char>(std::lround(v * 255.0)));
      }
}

/// Reads one binary P6 image with maxval 255 into [1, H, W, 3].
inline FrameBuffer read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  f.get();
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw std::runtime_error("'" + path + "' is not an 8-bit P6 image");
  std::vector<double> px(h * w * 3);
  for (auto& v : px) {
    const int byte = f.get();
    if (byte == EOF) throw std::runtime_error("'" + path + "' is truncated");
    v = static_cast<double>(byte) / 255.0;
  }
  return FrameBuffer{Tensor::from({1, h, w, 3}, std::move(px))};
}

/// Writes frame_XXX.ppm files plus index.txt (one relative path per line).
inline void write_frame_sequence(const std::filesystem::path& dir, const FrameBuffer& fb) {
  std::filesystem::create_directories(dir);
  std::ostringstream index;
  for (std::size_t t = 0; t < fb.frames(); ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.ppm", t);
    write_ppm((dir / name).string(), fb, t);
    index << name << '\n';
  }
  write_text_file((dir / "index.txt").string(), index.str());
}

inline FrameBuffer read_frame_sequence(const std::filesystem::path& dir) {
  std::istringstream index(read_text_file((dir / "index.txt").string()));
  std::vector<double> all;
  std::size_t T = 0, H = 0, W = 0;
  for (std::string line; std::getline(index, line);) {
    if (line.empty()) continue;
    auto fb = read_ppm((dir / line).string());
    if (T == 0) {
      H = fb.height();
      W = fb.width();
    } else if (fb.height() != H || fb.width() != W) {
      throw std::runtime_error("frame '" + line + "' has different extents");
    }
    all.insert(all.end(), fb.pixels.values().begin(), fb.pixels.values().end());
    ++T;
  }
  if (T == 0) throw std::runtime_error("empty frame index in '" + dir.string() + "'");
  return FrameBuffer{Tensor::from({T, H, W, 3}, std::move(all))};
}

}  // namespace trackdiff

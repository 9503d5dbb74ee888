#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmvod/boxes.hpp"
#include "tmvod/rng.hpp"
#include "tmvod/tensor.hpp"

namespace tmvod {

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct GroundTruthObject {
  int track_id = 0;
  int class_id = 0;
  Box bbox;
  bool occluded = false;
  double blur_level = 0;  // motion-blur kernel length in pixels, 0 when sharp

  friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

struct VideoSample {
  std::string video_id;
  std::vector<Image> frames;
  std::vector<std::vector<GroundTruthObject>> annotations;  // one list per frame

  int num_frames() const { return static_cast<int>(frames.size()); }
  friend bool operator==(const VideoSample&, const VideoSample&) = default;
};

enum class ShapeKind : int { kDisc = 0, kSquare = 1, kTriangle = 2, kDiamond = 3, kRing = 4, kCross = 5 };
inline constexpr int kMaxShapeClasses = 6;

struct SceneConfig {
  int width = 96;
  int height = 96;
  int num_classes = 2;
  double min_size = 16;  // object extent in pixels
  double max_size = 32;
  // Per-axis velocity ranges in pixels per frame.
  double min_vx = -4, max_vx = 4;
  double min_vy = -4, max_vy = 4;
  // Share of objects whose velocity draws are scaled down to near-still.
  double slow_object_prob = 0.25;
  double slow_speed_scale = 0.05;
  double velocity_change_prob = 0.1;  // chance per frame to draw a new velocity
  double blur_prob = 0.3;
  double blur_strength = 1.0;  // kernel length = strength * speed
  double occlusion_prob = 0.3;
  int occlusion_duration = 2;
  int min_objects = 1;
  int max_objects = 3;
  int num_frames = 10;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("SceneConfig: " + m); };
    if (width <= 0 || height <= 0) fail("image size must be positive");
    if (num_classes < 2 || num_classes > kMaxShapeClasses) fail("num_classes must be in [2, 6]");
    if (!(min_size > 0 && min_size <= max_size)) fail("size range must be non-empty and positive");
    if (max_size > std::min(width, height)) fail("objects of max_size cannot fit the image");
    if (min_vx > max_vx || min_vy > max_vy) fail("velocity range must be non-empty");
    auto prob = [&](double p, const char* n) {
      if (!(p >= 0 && p <= 1)) fail(std::string(n) + " must be in [0, 1]");
    };
    prob(velocity_change_prob, "velocity_change_prob");
    prob(slow_object_prob, "slow_object_prob");
    if (slow_speed_scale < 0) fail("slow_speed_scale must be >= 0");
    prob(blur_prob, "blur_prob");
    prob(occlusion_prob, "occlusion_prob");
    if (blur_strength < 0) fail("blur_strength must be >= 0");
    if (occlusion_duration < 1) fail("occlusion_duration must be >= 1");
    if (min_objects < 1 || min_objects > max_objects) fail("objects-per-video range must be non-empty");
    if (num_frames < 1) fail("num_frames must be >= 1");
  }
};

namespace detail {

inline bool shape_contains(ShapeKind kind, double u, double v) {
  // (u, v) in the object's unit square [0, 1]^2.
  const double du = u - 0.5, dv = v - 0.5;
  switch (kind) {
    case ShapeKind::kDisc:
      return du * du + dv * dv <= 0.25;
    case ShapeKind::kSquare:
      return u >= 0 && u <= 1 && v >= 0 && v <= 1;
    case ShapeKind::kTriangle:  // apex at top center, base at bottom
      return v >= 0 && v <= 1 && std::abs(du) <= 0.5 * v;
    case ShapeKind::kDiamond:
      return std::abs(du) + std::abs(dv) <= 0.5;
    case ShapeKind::kRing: {
      const double r2 = du * du + dv * dv;
      return r2 <= 0.25 && r2 >= 0.09;
    }
    case ShapeKind::kCross:
      return (std::abs(du) <= 0.5 && std::abs(dv) <= 0.16) || (std::abs(dv) <= 0.5 && std::abs(du) <= 0.16);
  }
  return false;
}

struct Track {
  ShapeKind kind;
  std::array<std::uint8_t, 3> color;
  double size;
  std::vector<double> xs, ys, vxs, vys;
  int occlusion_start = -1;
};

inline std::array<std::uint8_t, 3> random_color(Rng& rng) {
  // Saturated colors keep objects distinguishable from the gray background.
  std::uniform_int_distribution<int> pick(0, 5);
  std::uniform_int_distribution<int> hi(170, 255), lo(0, 70);
  std::array<std::uint8_t, 3> c{};
  const int p = pick(rng);
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(lo(rng));
  c[p % 3] = static_cast<std::uint8_t>(hi(rng));
  if (p >= 3) c[(p + 1) % 3] = static_cast<std::uint8_t>(hi(rng));
  return c;
}

inline void render_background(Image& img, Rng& rng) {
  // Smooth low-frequency pattern plus per-pixel noise.
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves(4);
  for (auto& w : waves) {
    w = {u01(rng) * 0.15, u01(rng) * 0.15, u01(rng) * 6.283185307179586, 12 + 18 * u01(rng)};
  }
  const double base = 90 + 50 * u01(rng);
  std::normal_distribution<double> noise(0.0, 10.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double v = base;
      for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      std::uint8_t* p = img.at(x, y);
      for (int k = 0; k < 3; ++k) {
        p[k] = static_cast<std::uint8_t>(std::clamp(v + noise(rng), 0.0, 255.0));
      }
    }
}

}  // namespace detail

// Deterministic clip of moving shapes over textured noise.
inline VideoSample generate_video(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const int frames = cfg.num_frames;
  const int n_objects = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);

  std::vector<int> classes(n_objects);
  std::vector<detail::Track> tracks(n_objects);
  for (int k = 0; k < n_objects; ++k) {
    auto& tr = tracks[k];
    classes[k] = std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng);
    tr.kind = static_cast<ShapeKind>(classes[k]);
    tr.color = detail::random_color(rng);
    tr.size = uniform(cfg.min_size, cfg.max_size);
    const double vscale = u01(rng) < cfg.slow_object_prob ? cfg.slow_speed_scale : 1.0;
    double vx = vscale * uniform(cfg.min_vx, cfg.max_vx), vy = vscale * uniform(cfg.min_vy, cfg.max_vy);
    const double span_x = cfg.width - tr.size, span_y = cfg.height - tr.size;
    // Prefer a start from which the initial velocity never hits a wall.
    auto start = [&](double v, double span) {
      const double travel = v * (frames - 1);
      const double lo = std::max(0.0, -travel), hi = span - std::max(0.0, travel);
      return lo <= hi ? uniform(lo, hi) : uniform(0.0, span);
    };
    double x = start(vx, span_x), y = start(vy, span_y);
    for (int f = 0; f < frames; ++f) {
      if (f > 0) {
        if (u01(rng) < cfg.velocity_change_prob) {
          vx = vscale * uniform(cfg.min_vx, cfg.max_vx);
          vy = vscale * uniform(cfg.min_vy, cfg.max_vy);
        }
        x += vx;
        y += vy;
        // Reflect off the image border; displacement never exceeds |v|.
        if (x < 0) { x = -x; vx = -vx; }
        if (x > span_x) { x = 2 * span_x - x; vx = -vx; }
        if (y < 0) { y = -y; vy = -vy; }
        if (y > span_y) { y = 2 * span_y - y; vy = -vy; }
        x = std::clamp(x, 0.0, span_x);
        y = std::clamp(y, 0.0, span_y);
      }
      tr.xs.push_back(x);
      tr.ys.push_back(y);
      tr.vxs.push_back(vx);
      tr.vys.push_back(vy);
    }
    if (u01(rng) < cfg.occlusion_prob && cfg.occlusion_duration <= frames) {
      tr.occlusion_start = std::uniform_int_distribution<int>(0, frames - cfg.occlusion_duration)(rng);
    }
  }

  VideoSample sample;
  sample.video_id = "video_" + std::to_string(seed);
  sample.frames.reserve(frames);
  sample.annotations.resize(frames);
  for (int f = 0; f < frames; ++f) {
    Image img(cfg.width, cfg.height);
    detail::render_background(img, rng);
    for (int k = 0; k < n_objects; ++k) {
      const auto& tr = tracks[k];
      GroundTruthObject gt;
      gt.track_id = k;
      gt.class_id = classes[k];
      gt.bbox = {tr.xs[f], tr.ys[f], tr.xs[f] + tr.size, tr.ys[f] + tr.size};
      gt.occluded = tr.occlusion_start >= 0 && f >= tr.occlusion_start &&
                    f < tr.occlusion_start + cfg.occlusion_duration;
      const double speed = std::hypot(tr.vxs[f], tr.vys[f]);
      if (speed > 0 && u01(rng) < cfg.blur_prob) gt.blur_level = cfg.blur_strength * speed;
      sample.annotations[f].push_back(gt);
      if (gt.occluded) continue;

      // Linear motion blur: average the shape mask over positions spread
      // along the velocity direction.
      const int taps = gt.blur_level >= 1 ? std::min(9, 1 + static_cast<int>(std::ceil(gt.blur_level))) : 1;
      const double ux = speed > 0 ? tr.vxs[f] / speed : 0, uy = speed > 0 ? tr.vys[f] / speed : 0;
      const double reach = 0.5 * gt.blur_level + 1;
      const int x0 = std::max(0, static_cast<int>(std::floor(gt.bbox.x1 - reach)));
      const int x1 = std::min(cfg.width - 1, static_cast<int>(std::ceil(gt.bbox.x2 + reach)));
      const int y0 = std::max(0, static_cast<int>(std::floor(gt.bbox.y1 - reach)));
      const int y1 = std::min(cfg.height - 1, static_cast<int>(std::ceil(gt.bbox.y2 + reach)));
      for (int py = y0; py <= y1; ++py)
        for (int px = x0; px <= x1; ++px) {
          int hits = 0;
          for (int s = 0; s < taps; ++s) {
            const double off = taps > 1 ? gt.blur_level * (static_cast<double>(s) / (taps - 1) - 0.5) : 0.0;
            const double u = (px + 0.5 - off * ux - gt.bbox.x1) / tr.size;
            const double v = (py + 0.5 - off * uy - gt.bbox.y1) / tr.size;
            hits += detail::shape_contains(tr.kind, u, v);
          }
          if (!hits) continue;
          const double cov = static_cast<double>(hits) / taps;
          std::uint8_t* p = img.at(px, py);
          for (int c = 0; c < 3; ++c) {
            p[c] = static_cast<std::uint8_t>(std::lround(cov * tr.color[c] + (1 - cov) * p[c]));
          }
        }
    }
    sample.frames.push_back(std::move(img));
  }
  return sample;
}

// Ordered (M + N + 1)-frame slice around a reference frame. Positions near
// the video ends are clamped to the nearest interior frame.
struct FrameWindow {
  const VideoSample* sample = nullptr;
  int center = 0;              // reference frame index t in the video
  int reference_position = 0;  // position of t inside the window (= M)
  std::vector<int> frame_indices;

  int length() const { return static_cast<int>(frame_indices.size()); }
  const Image& frame(int pos) const { return sample->frames[frame_indices[pos]]; }
  const std::vector<GroundTruthObject>& annotations(int pos) const {
    return sample->annotations[frame_indices[pos]];
  }
};

class WindowError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline FrameWindow window_at(const VideoSample& sample, int t, int m, int n) {
  if (m < 0 || n < 0) throw WindowError("window_at: negative window half-width");
  const int len = m + n + 1;
  if (sample.num_frames() < len) {
    throw WindowError("window_at: video '" + sample.video_id + "' has " + std::to_string(sample.num_frames()) +
                      " frames, shorter than window length " + std::to_string(len));
  }
  FrameWindow w;
  w.sample = &sample;
  w.center = std::clamp(t, m, sample.num_frames() - 1 - n);
  w.reference_position = m;
  for (int i = -m; i <= n; ++i) w.frame_indices.push_back(w.center + i);
  return w;
}

// [3, H, W] tensor, each channel standardized to zero mean and unit variance.
template <typename T>
Tensor<T> image_to_tensor(const Image& img, bool hflip = false) {
  Tensor<T> out({3, img.height, img.width});
  for (int c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    const double n = static_cast<double>(img.width) * img.height;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double v = img.at(x, y)[c] / 255.0;
        mean += v;
        sq += v * v;
      }
    mean /= n;
    const double sd = std::sqrt(std::max(sq / n - mean * mean, 0.0)) + 1e-3;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const int sx = hflip ? img.width - 1 - x : x;
        out.at(c, y, x) = static_cast<T>((img.at(sx, y)[c] / 255.0 - mean) / sd);
      }
  }
  return out;
}

}  // namespace tmvod

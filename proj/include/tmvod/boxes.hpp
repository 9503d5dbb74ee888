#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace tmvod {

// Axis-aligned box in pixel units, corner format.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }
  bool finite() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
  }

  friend bool operator==(const Box&, const Box&) = default;
};

// Regression offsets relative to an anchor: center shift over anchor size,
// log size ratios.
struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

struct ImageSize {
  int width = 0;
  int height = 0;
};

// log(1000 / 16): the usual overflow guard before exponentiation.
inline const double kMaxLogScale = std::log(1000.0 / 16.0);

class BoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline double iou(const Box& a, const Box& b) {
  if (a.degenerate() || b.degenerate()) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_box(const Box& b, ImageSize size) {
  const double w = size.width, h = size.height;
  return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
          std::clamp(b.y2, 0.0, h)};
}

inline BoxDelta encode_delta(const Box& anchor, const Box& target) {
  if (anchor.degenerate()) throw BoxError("encode_delta: anchor has zero width or height");
  const double aw = anchor.width(), ah = anchor.height();
  const double tw = std::max(target.width(), 1e-6), th = std::max(target.height(), 1e-6);
  return {(target.cx() - anchor.cx()) / aw, (target.cy() - anchor.cy()) / ah, std::log(tw / aw),
          std::log(th / ah)};
}

inline Box decode_delta(const Box& anchor, const BoxDelta& d,
                        std::optional<ImageSize> clip_to = std::nullopt) {
  if (anchor.degenerate()) throw BoxError("decode_delta: anchor has zero width or height");
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.cx() + d.dx * aw;
  const double cy = anchor.cy() + d.dy * ah;
  const double w = aw * std::exp(std::min(d.dw, kMaxLogScale));
  const double h = ah * std::exp(std::min(d.dh, kMaxLogScale));
  Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return clip_to ? clip_box(out, *clip_to) : out;
}

struct ScoredBox {
  Box box;
  double score = 0;
};

// Indices sorted by descending score; equal scores keep ascending index.
inline std::vector<int> score_order(std::span<const double> scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy NMS. Kept indices are returned in visiting order (score desc, then
// lower index first).
inline std::vector<int> nms(std::span<const ScoredBox> boxes, double iou_threshold,
                            std::size_t max_keep = SIZE_MAX) {
  std::vector<double> scores(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) scores[i] = boxes[i].score;
  const std::vector<int> order = score_order(scores);
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<int> keep;
  for (std::size_t oi = 0; oi < order.size() && keep.size() < max_keep; ++oi) {
    const int i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (!suppressed[j] && iou(boxes[i].box, boxes[j].box) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

enum class AssignLabel : std::int8_t { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct AssignmentResult {
  std::vector<AssignLabel> labels;
  std::vector<int> matched_gt;    // -1 when no ground truth overlaps
  std::vector<double> max_iou;
  std::vector<BoxDelta> targets;  // meaningful for positives only

  std::size_t num_positive() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AssignLabel::kPositive));
  }
};

// Max-IoU assignment with argmax forcing: a candidate that attains some
// ground truth's highest IoU (> 0) becomes positive even below pos_iou.
inline AssignmentResult assign_targets(std::span<const Box> candidates, std::span<const Box> gts,
                                       double pos_iou, double neg_iou) {
  if (!(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0)) {
    throw std::invalid_argument("assign_targets: need 0 <= neg_iou <= pos_iou <= 1");
  }
  const std::size_t n = candidates.size(), m = gts.size();
  AssignmentResult r;
  r.labels.assign(n, AssignLabel::kNegative);
  r.matched_gt.assign(n, -1);
  r.max_iou.assign(n, 0.0);
  r.targets.assign(n, BoxDelta{});
  if (m == 0) return r;

  std::vector<double> table(n * m);
  std::vector<double> gt_best(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double v = iou(candidates[i], gts[j]);
      table[i * m + j] = v;
      if (v > r.max_iou[i]) {
        r.max_iou[i] = v;
        r.matched_gt[i] = static_cast<int>(j);
      }
      gt_best[j] = std::max(gt_best[j], v);
    }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = r.max_iou[i];
    if (v >= pos_iou && r.matched_gt[i] >= 0) {
      r.labels[i] = AssignLabel::kPositive;
    } else if (v < neg_iou) {
      r.labels[i] = AssignLabel::kNegative;
    } else {
      r.labels[i] = AssignLabel::kIgnore;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (gt_best[j] <= 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (table[i * m + j] == gt_best[j]) r.labels[i] = AssignLabel::kPositive;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (r.labels[i] == AssignLabel::kPositive && !candidates[i].degenerate()) {
      r.targets[i] = encode_delta(candidates[i], gts[r.matched_gt[i]]);
    }
  }
  return r;
}

// Anchor grid in (anchor-kind, y, x) order, matching a [A, H, W] head layout.
// Anchor kinds enumerate scales outer, ratios inner; ratio = height / width.
inline std::vector<Box> make_anchors(int feat_h, int feat_w, int stride, std::span<const double> scales,
                                     std::span<const double> ratios) {
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(feat_h) * feat_w * scales.size() * ratios.size());
  for (double s : scales)
    for (double r : ratios) {
      const double w = s / std::sqrt(r);
      const double h = s * std::sqrt(r);
      for (int y = 0; y < feat_h; ++y)
        for (int x = 0; x < feat_w; ++x) {
          const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
          out.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
    }
  return out;
}

}  // namespace tmvod

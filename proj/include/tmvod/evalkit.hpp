#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmvod/boxes.hpp"
#include "tmvod/datagen.hpp"

namespace tmvod {

struct DetectionRecord {
  std::string video_id;
  int frame = 0;
  int class_id = 0;
  double score = 0;
  Box bbox;

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct GroundTruthRecord {
  std::string video_id;
  int frame = 0;
  int class_id = 0;
  int track_id = 0;
  Box bbox;
  bool ignore = false;  // matched detections are neither true nor false positives
};

enum class MotionBucket { kSlow = 0, kMedium = 1, kFast = 2 };

inline const char* bucket_name(MotionBucket b) {
  switch (b) {
    case MotionBucket::kSlow: return "slow";
    case MotionBucket::kMedium: return "medium";
    case MotionBucket::kFast: return "fast";
  }
  return "?";
}

// Occluded objects are kept but flagged ignore, since nothing of them is visible.
inline std::vector<GroundTruthRecord> ground_truth_records(const VideoSample& v) {
  std::vector<GroundTruthRecord> out;
  for (int f = 0; f < v.num_frames(); ++f) {
    for (const auto& g : v.annotations.at(f)) {
      out.push_back({v.video_id, f, g.class_id, g.track_id, g.bbox, g.occluded});
    }
  }
  return out;
}

// ------------------------------------------------------------------ AP

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

// All-point interpolated area under the precision envelope.
inline double area_under_pr(const std::vector<PrPoint>& curve) {
  std::vector<double> rec{0.0}, prec{0.0};
  for (const auto& p : curve) {
    rec.push_back(p.recall);
    prec.push_back(p.precision);
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0;
  for (std::size_t i = 1; i < rec.size(); ++i) ap += (rec[i] - rec[i - 1]) * prec[i];
  return ap;
}

// Greedy VOC matching in descending score order. Returns std::nullopt when
// the class has no non-ignored ground truth.
inline std::optional<double> average_precision(const std::vector<DetectionRecord>& dets,
                                               const std::vector<GroundTruthRecord>& gts, int class_id,
                                               double iou_threshold = 0.5) {
  using Key = std::pair<std::string, int>;
  std::map<Key, std::vector<int>> by_frame;
  int npos = 0;
  for (int i = 0; i < static_cast<int>(gts.size()); ++i) {
    if (gts[i].class_id != class_id) continue;
    by_frame[{gts[i].video_id, gts[i].frame}].push_back(i);
    if (!gts[i].ignore) ++npos;
  }
  if (npos == 0) return std::nullopt;

  std::vector<int> cls;
  std::vector<double> scores;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i) {
    if (dets[i].class_id != class_id) continue;
    cls.push_back(i);
    scores.push_back(dets[i].score);
  }
  const std::vector<int> order = score_order(scores);
  std::vector<bool> used(gts.size(), false);
  std::vector<PrPoint> curve;
  int tp = 0, fp = 0;
  for (int o : order) {
    const DetectionRecord& d = dets[cls[o]];
    double best = -1;
    int best_gt = -1;
    if (auto it = by_frame.find({d.video_id, d.frame}); it != by_frame.end()) {
      for (int g : it->second) {
        const double v = iou(d.bbox, gts[g].bbox);
        if (v > best) {
          best = v;
          best_gt = g;
        }
      }
    }
    if (best_gt >= 0 && best >= iou_threshold) {
      if (gts[best_gt].ignore) continue;
      if (!used[best_gt]) {
        used[best_gt] = true;
        ++tp;
      } else {
        ++fp;
      }
    } else {
      ++fp;
    }
    curve.push_back({static_cast<double>(tp) / npos, static_cast<double>(tp) / (tp + fp)});
  }
  return area_under_pr(curve);
}

// ------------------------------------------------------------------ motion split

// Mean IoU of each instance against the same track within +-radius frames.
// Instances with no neighbour count as slow.
inline std::vector<MotionBucket> motion_split(const std::vector<GroundTruthRecord>& gts, int radius = 2,
                                              double slow_above = 0.9, double fast_below = 0.7) {
  using Key = std::tuple<std::string, int, int>;  // video, track, frame
  std::map<Key, int> index;
  for (int i = 0; i < static_cast<int>(gts.size()); ++i) index[{gts[i].video_id, gts[i].track_id, gts[i].frame}] = i;
  std::vector<MotionBucket> out(gts.size(), MotionBucket::kSlow);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    double sum = 0;
    int n = 0;
    for (int d = -radius; d <= radius; ++d) {
      if (d == 0) continue;
      auto it = index.find({gts[i].video_id, gts[i].track_id, gts[i].frame + d});
      if (it == index.end()) continue;
      sum += iou(gts[i].bbox, gts[it->second].bbox);
      ++n;
    }
    if (n == 0) continue;
    const double mean = sum / n;
    out[i] = mean > slow_above ? MotionBucket::kSlow : mean < fast_below ? MotionBucket::kFast : MotionBucket::kMedium;
  }
  return out;
}

// ------------------------------------------------------------------ Seq-NMS

struct SeqNmsConfig {
  double link_iou = 0.5;
  double suppress_iou = 0.5;
};

struct SeqNmsPath {
  std::vector<int> frames;
  std::vector<int> members;  // indices into the input list, one per frame
  double total = 0;
};

namespace detail {

// Best path (by total score) over detections of one class, restricted to
// `alive`. A path spans consecutive frames and needs at least two nodes.
inline std::optional<SeqNmsPath> best_seq_path(const std::vector<DetectionRecord>& dets,
                                               const std::vector<std::vector<int>>& per_frame,
                                               const std::vector<bool>& alive, double link_iou) {
  const int nf = static_cast<int>(per_frame.size());
  std::vector<double> best(dets.size(), 0);
  std::vector<int> prev(dets.size(), -1);
  std::optional<SeqNmsPath> result;
  int end_node = -1;
  double end_score = -1;
  for (int f = 0; f < nf; ++f) {
    for (int i : per_frame[f]) {
      if (!alive[i]) continue;
      best[i] = dets[i].score;
      prev[i] = -1;
      if (f == 0) continue;
      for (int j : per_frame[f - 1]) {
        if (!alive[j] || iou(dets[i].bbox, dets[j].bbox) < link_iou) continue;
        const double s = dets[i].score + best[j];
        if (prev[i] < 0 || s > best[i]) {
          best[i] = s;
          prev[i] = j;
        }
      }
      if (prev[i] >= 0 && best[i] > end_score) {
        end_score = best[i];
        end_node = i;
      }
    }
  }
  if (end_node < 0) return std::nullopt;
  SeqNmsPath p;
  p.total = end_score;
  for (int i = end_node; i >= 0; i = prev[i]) {
    p.members.push_back(i);
    p.frames.push_back(dets[i].frame);
  }
  std::reverse(p.members.begin(), p.members.end());
  std::reverse(p.frames.begin(), p.frames.end());
  return p;
}

}  // namespace detail

// Detections of one video. Per class: repeatedly take the best linked path,
// give its members the path mean score, drop same-frame overlaps of each
// member. Boxes and class ids pass through untouched; only scores and the
// kept set change.
inline std::vector<DetectionRecord> seq_nms(const std::vector<DetectionRecord>& dets, const SeqNmsConfig& cfg = {}) {
  std::vector<DetectionRecord> out = dets;
  std::vector<bool> keep(dets.size(), true);
  int max_frame = -1;
  std::map<int, std::vector<int>> classes;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i) {
    classes[dets[i].class_id].push_back(i);
    max_frame = std::max(max_frame, dets[i].frame);
  }
  for (const auto& [cls, members] : classes) {
    std::vector<std::vector<int>> per_frame(max_frame + 1);
    for (int i : members) per_frame[dets[i].frame].push_back(i);
    std::vector<bool> alive(dets.size(), false);
    for (int i : members) alive[i] = true;
    while (auto path = detail::best_seq_path(dets, per_frame, alive, cfg.link_iou)) {
      const double mean = path->total / static_cast<double>(path->members.size());
      for (int m : path->members) {
        out[m].score = mean;
        alive[m] = false;
        for (int j : per_frame[dets[m].frame]) {
          if (alive[j] && iou(dets[j].bbox, dets[m].bbox) >= cfg.suppress_iou) {
            alive[j] = false;
            keep[j] = false;
          }
        }
      }
    }
  }
  std::vector<DetectionRecord> kept;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (keep[i]) kept.push_back(out[i]);
  return kept;
}

// Applies seq_nms video by video, preserving first-appearance video order.
inline std::vector<DetectionRecord> seq_nms_all(const std::vector<DetectionRecord>& dets,
                                                const SeqNmsConfig& cfg = {}) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<DetectionRecord>> by_video;
  for (const auto& d : dets) {
    auto [it, fresh] = by_video.try_emplace(d.video_id);
    if (fresh) order.push_back(d.video_id);
    it->second.push_back(d);
  }
  std::vector<DetectionRecord> out;
  for (const auto& v : order) {
    auto r = seq_nms(by_video[v], cfg);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

// ------------------------------------------------------------------ report

struct EvalConfig {
  int num_classes = 2;
  double iou_threshold = 0.5;
  int motion_radius = 2;
};

struct EvalReport {
  double map = 0;
  std::vector<std::optional<double>> per_class_ap;
  double map_slow = 0, map_medium = 0, map_fast = 0;
  int gt_slow = 0, gt_medium = 0, gt_fast = 0;
  int num_detections = 0;
  bool seq_nms_applied = false;
};

namespace detail {

inline double mean_ap(const std::vector<DetectionRecord>& dets, const std::vector<GroundTruthRecord>& gts,
                      const EvalConfig& cfg, std::vector<std::optional<double>>* per_class = nullptr) {
  double sum = 0;
  int n = 0;
  for (int c = 0; c < cfg.num_classes; ++c) {
    auto ap = average_precision(dets, gts, c, cfg.iou_threshold);
    if (per_class) per_class->push_back(ap);
    if (ap) {
      sum += *ap;
      ++n;
    }
  }
  return n ? sum / n : 0.0;
}

}  // namespace detail

// Split mAPs restrict the ground truth to one bucket; instances outside
// it become ignore so detections on them are not counted as false.
inline EvalReport evaluate(const std::vector<DetectionRecord>& dets, const std::vector<GroundTruthRecord>& gts,
                           const EvalConfig& cfg = {}) {
  EvalReport r;
  r.num_detections = static_cast<int>(dets.size());
  r.map = detail::mean_ap(dets, gts, cfg, &r.per_class_ap);
  const std::vector<MotionBucket> buckets = motion_split(gts, cfg.motion_radius);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].ignore) continue;
    (buckets[i] == MotionBucket::kSlow ? r.gt_slow : buckets[i] == MotionBucket::kFast ? r.gt_fast : r.gt_medium)++;
  }
  for (MotionBucket b : {MotionBucket::kSlow, MotionBucket::kMedium, MotionBucket::kFast}) {
    std::vector<GroundTruthRecord> masked = gts;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (buckets[i] != b) masked[i].ignore = true;
    const double m = detail::mean_ap(dets, masked, cfg);
    (b == MotionBucket::kSlow ? r.map_slow : b == MotionBucket::kFast ? r.map_fast : r.map_medium) = m;
  }
  return r;
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& ap : r.per_class_ap) per_class.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
  return {{"mAP", r.map},
          {"per_class_ap", per_class},
          {"mAP_slow", r.map_slow},
          {"mAP_medium", r.map_medium},
          {"mAP_fast", r.map_fast},
          {"gt_counts", {{"slow", r.gt_slow}, {"medium", r.gt_medium}, {"fast", r.gt_fast}}},
          {"num_detections", r.num_detections},
          {"seq_nms_applied", r.seq_nms_applied}};
}

// ------------------------------------------------------------------ dump I/O

class DetectionDumpError : public std::runtime_error {
 public:
  DetectionDumpError(int line, const std::string& what)
      : std::runtime_error("detection dump line " + std::to_string(line) + ": " + what) {}
};

inline void write_detections(std::ostream& os, const std::vector<DetectionRecord>& dets) {
  for (const auto& d : dets) {
    nlohmann::json j = {{"video_id", d.video_id},
                        {"frame", d.frame},
                        {"class_id", d.class_id},
                        {"score", d.score},
                        {"bbox", {d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2}}};
    os << j.dump() << '\n';
  }
}

inline std::vector<DetectionRecord> read_detections(std::istream& is) {
  std::vector<DetectionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DetectionRecord d;
      d.video_id = j.at("video_id").get<std::string>();
      d.frame = j.at("frame").get<int>();
      d.class_id = j.at("class_id").get<int>();
      d.score = j.at("score").get<double>();
      const auto& b = j.at("bbox");
      if (!b.is_array() || b.size() != 4) throw DetectionDumpError(lineno, "bbox must hold 4 numbers");
      d.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      if (!std::isfinite(d.score)) throw DetectionDumpError(lineno, "score is not finite");
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw DetectionDumpError(lineno, e.what());
    }
  }
  return out;
}

}  // namespace tmvod

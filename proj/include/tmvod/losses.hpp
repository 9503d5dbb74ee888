#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmvod/boxes.hpp"
#include "tmvod/datagen.hpp"
#include "tmvod/mtbr.hpp"
#include "tmvod/ops.hpp"
#include "tmvod/rng.hpp"
#include "tmvod/tg_rpn.hpp"

namespace tmvod {

struct SamplingConfig {
  int batch = 256;
  double positive_fraction = 0.5;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
};

inline SamplingConfig rpn_sampling_defaults() { return {256, 0.5, 0.7, 0.3}; }
inline SamplingConfig second_stage_sampling_defaults() { return {128, 0.25, 0.5, 0.5}; }

class LossDivergenceError : public std::runtime_error {
 public:
  LossDivergenceError(const std::string& component, double value)
      : std::runtime_error("loss component " + component + " is not finite (" + std::to_string(value) + ")"),
        component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

namespace detail {

// Random subset of at most `count` indices, returned in ascending order.
inline std::vector<int> random_subset(std::vector<int> pool, std::size_t count, Rng& rng) {
  if (pool.size() > count) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(count);
  }
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace detail

// ------------------------------------------------------------------ RPN

template <typename T>
struct RpnTargets {
  std::vector<T> labels;       // 1 positive, 0 otherwise
  std::vector<T> cls_weights;  // 1 / sampled for sampled anchors, else 0
  std::vector<T> reg_weights;  // 1 / sampled for sampled positives, else 0
  Tensor<T> reg_targets;       // [A, 4]
  int num_positive = 0;
  int num_negative = 0;
};

template <typename T>
RpnTargets<T> sample_rpn_targets(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                 const SamplingConfig& cfg, Rng& rng) {
  const AssignmentResult a = assign_targets(anchors, gts, cfg.pos_iou, cfg.neg_iou);
  std::vector<int> pos, neg;
  for (int i = 0; i < static_cast<int>(anchors.size()); ++i) {
    if (a.labels[i] == AssignLabel::kPositive) pos.push_back(i);
    if (a.labels[i] == AssignLabel::kNegative) neg.push_back(i);
  }
  const auto max_pos = static_cast<std::size_t>(std::floor(cfg.batch * cfg.positive_fraction));
  pos = detail::random_subset(std::move(pos), max_pos, rng);
  neg = detail::random_subset(std::move(neg), static_cast<std::size_t>(cfg.batch) - pos.size(), rng);

  RpnTargets<T> t;
  const std::size_t n = anchors.size();
  t.labels.assign(n, T(0));
  t.cls_weights.assign(n, T(0));
  t.reg_weights.assign(n, T(0));
  t.reg_targets = Tensor<T>({static_cast<int>(n), 4});
  t.num_positive = static_cast<int>(pos.size());
  t.num_negative = static_cast<int>(neg.size());
  const std::size_t sampled = pos.size() + neg.size();
  if (sampled == 0) return t;
  const T w = T(1) / static_cast<T>(sampled);
  for (int i : pos) {
    t.labels[i] = T(1);
    t.cls_weights[i] = w;
    t.reg_weights[i] = w;
    const BoxDelta& d = a.targets[i];
    t.reg_targets.at(i, 0) = static_cast<T>(d.dx);
    t.reg_targets.at(i, 1) = static_cast<T>(d.dy);
    t.reg_targets.at(i, 2) = static_cast<T>(d.dw);
    t.reg_targets.at(i, 3) = static_cast<T>(d.dh);
  }
  for (int i : neg) t.cls_weights[i] = w;
  return t;
}

template <typename T>
struct RpnLoss {
  ag::Var<T> cls;
  ag::Var<T> reg;
};

// Binary cross-entropy over the sampled anchors plus smooth-L1 over sampled
// positives, both normalized by the sample count.
template <typename T>
RpnLoss<T> rpn_loss(const ag::Var<T>& objectness, const ag::Var<T>& deltas, const RpnTargets<T>& t) {
  return {ag::binary_cross_entropy_with_logits(objectness, t.labels, t.cls_weights),
          ag::smooth_l1(deltas, t.reg_targets, t.reg_weights)};
}

template <typename T>
RpnLoss<T> rpn_loss(const RpnOutput<T>& out, const std::vector<Box>& gts, const SamplingConfig& cfg, Rng& rng) {
  return rpn_loss(out.objectness, out.deltas, sample_rpn_targets<T>(out.anchors, gts, cfg, rng));
}

// ------------------------------------------------------------------ second stage

// Proposals chosen for the second stage together with their labels at the
// reference frame. Labels: 0 background, c + 1 for foreground class c.
struct ProposalSample {
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<int> matched_gt;  // index into the reference-frame ground truth, -1 for background
};

inline ProposalSample sample_proposals(const std::vector<Box>& proposals,
                                       const std::vector<GroundTruthObject>& gts, const SamplingConfig& cfg,
                                       Rng& rng, bool append_gt = true) {
  std::vector<Box> cand = proposals;
  std::vector<Box> gt_boxes;
  for (const auto& g : gts) gt_boxes.push_back(g.bbox);
  if (append_gt) cand.insert(cand.end(), gt_boxes.begin(), gt_boxes.end());
  const AssignmentResult a = assign_targets(cand, gt_boxes, cfg.pos_iou, cfg.neg_iou);
  std::vector<int> pos, neg;
  for (int i = 0; i < static_cast<int>(cand.size()); ++i) {
    if (cand[i].degenerate()) continue;
    if (a.labels[i] == AssignLabel::kPositive) pos.push_back(i);
    if (a.labels[i] == AssignLabel::kNegative) neg.push_back(i);
  }
  const auto max_pos = static_cast<std::size_t>(std::floor(cfg.batch * cfg.positive_fraction));
  pos = detail::random_subset(std::move(pos), max_pos, rng);
  neg = detail::random_subset(std::move(neg), static_cast<std::size_t>(cfg.batch) - pos.size(), rng);
  ProposalSample s;
  for (int i : pos) {
    s.boxes.push_back(cand[i]);
    s.matched_gt.push_back(a.matched_gt[i]);
    s.labels.push_back(gts[a.matched_gt[i]].class_id + 1);
  }
  for (int i : neg) {
    s.boxes.push_back(cand[i]);
    s.matched_gt.push_back(-1);
    s.labels.push_back(0);
  }
  return s;
}

// Targets for the temporal box-offset loss. Regression rows are frame-major
// (k * R + r) like the offset head output.
template <typename T>
struct RefTargets {
  std::vector<int> labels;  // [R]
  Tensor<T> reg_targets;    // [K * R, 4]
  std::vector<T> reg_mask;  // 1 where a (frame, positive proposal) pair is supervised
  std::vector<int> positives_per_frame;  // N_pos|ref^j
  int total_positive_pairs() const {
    return std::accumulate(positives_per_frame.begin(), positives_per_frame.end(), 0);
  }
};

// A positive proposal follows its matched track: at every frame j where
// that track has a box, the target is the offset from the anchor to it.
template <typename T>
RefTargets<T> build_ref_targets(const std::vector<Box>& anchors, const std::vector<int>& labels,
                                const std::vector<int>& matched_gt,
                                const std::vector<std::vector<GroundTruthObject>>& frame_gts, int reference_index) {
  const int r = static_cast<int>(anchors.size());
  const int k = static_cast<int>(frame_gts.size());
  RefTargets<T> t;
  t.labels = labels;
  t.reg_targets = Tensor<T>({k * r, 4});
  t.reg_mask.assign(static_cast<std::size_t>(k) * r, T(0));
  t.positives_per_frame.assign(k, 0);
  const auto& ref_gts = frame_gts.at(reference_index);
  for (int i = 0; i < r; ++i) {
    if (labels[i] <= 0 || matched_gt[i] < 0) continue;
    const int track = ref_gts.at(matched_gt[i]).track_id;
    for (int j = 0; j < k; ++j) {
      const auto it = std::find_if(frame_gts[j].begin(), frame_gts[j].end(),
                                   [&](const GroundTruthObject& g) { return g.track_id == track; });
      if (it == frame_gts[j].end()) continue;
      const BoxDelta d = encode_delta(anchors[i], it->bbox);
      const std::size_t row = static_cast<std::size_t>(j) * r + i;
      t.reg_targets.at(row, 0) = static_cast<T>(d.dx);
      t.reg_targets.at(row, 1) = static_cast<T>(d.dy);
      t.reg_targets.at(row, 2) = static_cast<T>(d.dw);
      t.reg_targets.at(row, 3) = static_cast<T>(d.dh);
      t.reg_mask[row] = T(1);
      ++t.positives_per_frame[j];
    }
  }
  return t;
}

// L_ref = (1 / N_ref) sum_i CE_i + (1 / sum_j N_pos^j) sum_j sum_i smoothL1(i, j).
template <typename T>
ag::Var<T> ref_loss(const ag::Var<T>& class_logits, const ag::Var<T>& deltas, const RefTargets<T>& t) {
  const int r = static_cast<int>(t.labels.size());
  if (r == 0) return ag::constant(Tensor<T>::scalar(T(0)));
  auto cls = ag::softmax_cross_entropy(class_logits, t.labels, std::vector<T>(r, T(1) / static_cast<T>(r)));
  const int pairs = t.total_positive_pairs();
  if (pairs == 0) return cls;
  std::vector<T> w = t.reg_mask;
  for (auto& v : w) v /= static_cast<T>(pairs);
  return ag::add(cls, ag::smooth_l1(deltas, t.reg_targets, w));
}

template <typename T>
struct DetTargets {
  std::vector<int> labels;
  Tensor<T> reg_targets;  // [R, 4] relative to the reference box
  std::vector<T> cls_weights;
  std::vector<T> reg_weights;
};

template <typename T>
DetTargets<T> build_det_targets(const std::vector<Box>& reference_boxes, const std::vector<int>& labels,
                                const std::vector<int>& matched_gt, const std::vector<GroundTruthObject>& gts) {
  const int r = static_cast<int>(reference_boxes.size());
  DetTargets<T> t;
  t.labels = labels;
  t.reg_targets = Tensor<T>({r, 4});
  t.cls_weights.assign(r, r ? T(1) / static_cast<T>(r) : T(0));
  t.reg_weights.assign(r, T(0));
  for (int i = 0; i < r; ++i) {
    if (labels[i] <= 0 || matched_gt[i] < 0) continue;
    const BoxDelta d = encode_delta(reference_boxes[i], gts.at(matched_gt[i]).bbox);
    t.reg_targets.at(i, 0) = static_cast<T>(d.dx);
    t.reg_targets.at(i, 1) = static_cast<T>(d.dy);
    t.reg_targets.at(i, 2) = static_cast<T>(d.dw);
    t.reg_targets.at(i, 3) = static_cast<T>(d.dh);
    t.reg_weights[i] = T(1) / static_cast<T>(r);
  }
  return t;
}

// Class cross-entropy over every sampled proposal plus class-agnostic
// smooth-L1 over positives.
template <typename T>
ag::Var<T> det_loss(const ag::Var<T>& class_logits, const ag::Var<T>& deltas, const DetTargets<T>& t) {
  if (t.labels.empty()) return ag::constant(Tensor<T>::scalar(T(0)));
  return ag::add(ag::softmax_cross_entropy(class_logits, t.labels, t.cls_weights),
                 ag::smooth_l1(deltas, t.reg_targets, t.reg_weights));
}

// ------------------------------------------------------------------ total

struct LossWeights {
  double rpn = 1.0;
  double ref = 1.0;
  double det = 1.0;
};

template <typename T>
ag::Var<T> total_loss(const ag::Var<T>& l_rpn, const ag::Var<T>& l_ref, const ag::Var<T>& l_det,
                      const LossWeights& w = {}) {
  const std::pair<const char*, const ag::Var<T>*> parts[] = {{"L_rpn", &l_rpn}, {"L_ref", &l_ref}, {"L_det", &l_det}};
  for (const auto& [name, v] : parts) {
    const double x = static_cast<double>((*v)->value[0]);
    if (!std::isfinite(x)) throw LossDivergenceError(name, x);
  }
  return ag::add(ag::add(ag::scale(l_rpn, static_cast<T>(w.rpn)), ag::scale(l_ref, static_cast<T>(w.ref))),
                 ag::scale(l_det, static_cast<T>(w.det)));
}

struct LossReport {
  double rpn_cls = 0, rpn_reg = 0;
  double ref = 0;
  double det = 0;
  double rpn() const { return rpn_cls + rpn_reg; }
  double total = 0;
  int n_ref = 0;
  std::vector<int> positives_per_frame;
};

}  // namespace tmvod

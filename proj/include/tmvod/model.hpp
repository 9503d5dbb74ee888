#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmvod/backbone.hpp"
#include "tmvod/evalkit.hpp"
#include "tmvod/jtmg.hpp"
#include "tmvod/losses.hpp"
#include "tmvod/mtbr.hpp"
#include "tmvod/tg_rpn.hpp"

namespace tmvod {

// Ablation ladder. Each step adds modules on top of the previous one; f is e
// with Seq-NMS applied to the detections.
enum class Variant { kA = 0, kB, kC, kD, kE, kF };

inline char variant_letter(Variant v) { return static_cast<char>('a' + static_cast<int>(v)); }

inline Variant parse_variant(const std::string& s) {
  if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'f') return static_cast<Variant>(s[0] - 'a');
  throw std::invalid_argument("unknown variant '" + s + "' (expected one of a..f)");
}

struct DetectorConfig {
  Variant variant = Variant::kE;
  int m = 2, n = 2;
  int num_classes = 2;
  int roi_size = 7;
  BackboneConfig backbone;
  TgRpnConfig tg;
  RpnConfig rpn;
  MtbrConfig mtbr;
  JtmgConfig jtmg;
  SamplingConfig rpn_sampling = rpn_sampling_defaults();
  SamplingConfig det_sampling = second_stage_sampling_defaults();
  double score_threshold = 0.01;
  double det_nms_iou = 0.5;
  int max_detections = 100;

  bool uses_gate() const { return variant >= Variant::kB; }
  bool uses_motion() const { return variant >= Variant::kC; }
  bool uses_box_aggregation() const { return variant >= Variant::kD; }
  bool uses_displacement() const { return variant >= Variant::kE; }
  bool uses_seq_nms() const { return variant == Variant::kF; }
  int window_length() const { return uses_gate() ? m + n + 1 : 1; }
  int head_input_dim() const { return uses_box_aggregation() ? jtmg.head_input_dim() : backbone.out_channels(); }

  // Copies the shared sizes into every sub-config.
  void sync() {
    const int c = backbone.out_channels();
    tg.channels = rpn.channels = mtbr.channels = jtmg.channels = c;
    mtbr.num_classes = jtmg.num_classes = num_classes;
    mtbr.roi_size = roi_size;
  }
};

// Window frames and annotations prepared for one forward pass. Occluded
// objects are dropped from the targets.
struct WindowInput {
  std::vector<const Image*> frames;
  std::vector<std::vector<GroundTruthObject>> gts;  // per window position, visible objects only
  int reference = 0;
  ImageSize image;
  bool hflip = false;
  std::string video_id;
  int frame_index = 0;
};

inline Box flip_box(const Box& b, int width) { return {width - b.x2, b.y1, width - b.x1, b.y2}; }

inline WindowInput make_window_input(const FrameWindow& w, bool single_frame, bool hflip = false) {
  WindowInput in;
  in.hflip = hflip;
  in.video_id = w.sample->video_id;
  in.frame_index = w.center;
  const Image& ref = w.frame(w.reference_position);
  in.image = {ref.width, ref.height};
  for (int p = 0; p < w.length(); ++p) {
    if (single_frame && p != w.reference_position) continue;
    in.frames.push_back(&w.frame(p));
    std::vector<GroundTruthObject> visible;
    for (auto g : w.annotations(p)) {
      if (g.occluded) continue;
      if (hflip) g.bbox = flip_box(g.bbox, ref.width);
      visible.push_back(g);
    }
    in.gts.push_back(std::move(visible));
  }
  in.reference = single_frame ? 0 : w.reference_position;
  return in;
}

// Every intermediate of one forward pass.
template <typename T>
struct ForwardTrace {
  FeatureMapSet<T> features;   // F     [K, C, H', W']
  TgRpnOutput<T> tg;           // gates, F^G, F^A, motion M
  ag::Var<T> rpn_map;          // map fed to the RPN and to r^(A) pooling  [1, C, H', W']
  RpnOutput<T> rpn;
  ag::Var<T> motion_aware;     // F^(M) [K, C, H', W']
  std::vector<Box> anchors;    // second-stage proposals b_t^(A)
  TbocOutput<T> tboc;
  std::vector<Box> reference_boxes;  // b_t per proposal
  RoIFeatureBundle<T> bundle;
  ag::Var<T> reference_pooled;  // r^(A) without temporal modules [R, C, P, P]
  ag::Var<T> cos_weights;       // [K * R]
  ag::Var<T> g_visual, g_disp, g_motion;
  ag::Var<T> head_input;        // [R, head_input_dim]
  HeadOutput<T> head;
};

template <typename T>
struct TrainStep {
  ForwardTrace<T> trace;
  RpnLoss<T> rpn;
  ag::Var<T> l_rpn, l_ref, l_det, l_total;
  LossReport report;
};

// Fixed values for discrete choices, so finite differences see the same
// proposals and pooling boxes as the analytic pass.
struct ForwardOverrides {
  std::optional<std::vector<Box>> proposals;
  std::optional<std::vector<LinkedProposal>> linked;
};

template <typename T>
class Detector {
 public:
  Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.sync();
    Rng rng(seed);
    create(rng);
  }

  Detector(DetectorConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.sync();
  }

  const DetectorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  ForwardTrace<T> forward(const WindowInput& in, bool training, const ForwardOverrides& ov = {}) const {
    ForwardTrace<T> tr = first_stage(in, training, ov);
    second_stage(tr, in, tr.rpn.proposals, ov);
    return tr;
  }

  // Backbone, temporal gating and RPN.
  ForwardTrace<T> first_stage(const WindowInput& in, bool training, const ForwardOverrides& ov = {}) const {
    ForwardTrace<T> tr;
    const Backbone<T> net{cfg_.backbone};
    tr.features.maps = net.forward(params_, ag::constant(stack_frames<T>(in.frames, in.hflip)));
    tr.features.stride = net.cfg.total_stride();
    tr.features.reference_index = in.reference;
    const int stride = tr.features.stride;
    auto f_ref = ag::slice(tr.features.maps, 0, in.reference, 1);

    if (cfg_.uses_gate()) {
      tr.tg = tg_rpn_forward(params_, cfg_.tg, tr.features, cfg_.uses_motion());
      tr.rpn_map = tr.tg.aggregated;
    } else {
      tr.rpn_map = f_ref;
    }
    tr.rpn = rpn_forward(params_, cfg_.rpn, tr.rpn_map, stride, in.image, training);
    if (ov.proposals) tr.rpn.proposals = *ov.proposals;
    return tr;
  }

  // Box refinement, RoI pooling, feature generation and the final head.
  void second_stage(ForwardTrace<T>& tr, const WindowInput& in, const std::vector<Box>& anchors,
                    const ForwardOverrides& ov = {}) const {
    const int stride = tr.features.stride;
    tr.anchors = anchors;
    const int r = static_cast<int>(tr.anchors.size());
    if (r == 0) return;

    if (cfg_.uses_motion()) {
      tr.motion_aware = motion_aware_maps(tr.features.maps, tr.tg.motion);
      tr.tboc = tboc_forward(params_, cfg_.mtbr, tr.motion_aware, tr.anchors, stride, in.image);
      if (ov.linked) tr.tboc.linked = *ov.linked;
      for (const auto& lp : tr.tboc.linked) tr.reference_boxes.push_back(lp.boxes.at(in.reference));
      tr.bundle = pool_all(tr.rpn_map, tr.features.maps, tr.tg.motion, tr.tboc.linked, in.reference, stride,
                           cfg_.roi_size);
      auto phi_ref = ag::global_avg_pool(tr.bundle.reference);
      auto phi_vis = ag::global_avg_pool(tr.bundle.visual);
      auto phi_mot = ag::global_avg_pool(tr.bundle.motion);
      const int k = tr.bundle.frames, c = cfg_.backbone.out_channels();
      if (cfg_.uses_box_aggregation()) {
        tr.cos_weights = cosine_weights(phi_ref, phi_vis);
        tr.g_visual = box_level_aggregate(params_, cfg_.jtmg, phi_ref, phi_vis, tr.cos_weights);
        if (cfg_.uses_displacement()) {
          tr.g_disp = box_diff_encode(params_, cfg_.jtmg, tr.tboc.linked, in.reference);
          tr.g_motion = motion_gru(params_, cfg_.jtmg, split_frames(phi_mot, k));
        }
        tr.head_input = joint_features(cfg_.jtmg, tr.g_visual, tr.g_disp, tr.g_motion);
      } else {
        // GAP(r^(A) + sum_i r^(F)_i + sum_i r^(M)_i), using linearity of GAP.
        auto vis = ag::sum_leading(ag::reshape(phi_vis, {k, r, c}));
        auto mot = ag::sum_leading(ag::reshape(phi_mot, {k, r, c}));
        tr.head_input = ag::add(phi_ref, ag::add(vis, mot));
      }
    } else {
      tr.reference_boxes = tr.anchors;
      std::vector<RoI> rois;
      for (const Box& b : tr.anchors) rois.push_back({0, b});
      tr.reference_pooled = roi_align(tr.rpn_map, rois, stride, cfg_.roi_size);
      tr.head_input = ag::global_avg_pool(tr.reference_pooled);
    }
    tr.head = detection_head(params_, tr.head_input);
  }

  TrainStep<T> training_step(const WindowInput& in, Rng& rng, const ForwardOverrides& ov = {}) const {
    const auto& ref_gts = in.gts.at(in.reference);
    std::vector<Box> gt_boxes;
    for (const auto& g : ref_gts) gt_boxes.push_back(g.bbox);

    TrainStep<T> st;
    auto& tr = st.trace;
    tr = first_stage(in, true, ov);
    ProposalSample sample = sample_proposals(tr.rpn.proposals, ref_gts, cfg_.det_sampling, rng);
    second_stage(tr, in, sample.boxes, ov);
    st.rpn = rpn_loss(tr.rpn, gt_boxes, cfg_.rpn_sampling, rng);
    st.l_rpn = ag::add(st.rpn.cls, st.rpn.reg);
    st.l_ref = ag::constant(Tensor<T>::scalar(T(0)));
    st.l_det = ag::constant(Tensor<T>::scalar(T(0)));
    st.report.positives_per_frame.assign(in.gts.size(), 0);
    if (!sample.boxes.empty()) {
      if (cfg_.uses_motion()) {
        auto targets =
            build_ref_targets<T>(sample.boxes, sample.labels, sample.matched_gt, in.gts, in.reference);
        st.l_ref = ref_loss(tr.tboc.class_logits, tr.tboc.deltas, targets);
        st.report.positives_per_frame = targets.positives_per_frame;
      }
      auto det_targets = build_det_targets<T>(tr.reference_boxes, sample.labels, sample.matched_gt, ref_gts);
      st.l_det = det_loss(tr.head.class_logits, tr.head.deltas, det_targets);
    }
    st.report.n_ref = static_cast<int>(sample.boxes.size());
    st.report.rpn_cls = static_cast<double>(st.rpn.cls->value[0]);
    st.report.rpn_reg = static_cast<double>(st.rpn.reg->value[0]);
    st.report.ref = static_cast<double>(st.l_ref->value[0]);
    st.report.det = static_cast<double>(st.l_det->value[0]);
    st.l_total = total_loss(st.l_rpn, st.l_ref, st.l_det);
    st.report.total = static_cast<double>(st.l_total->value[0]);
    return st;
  }

  // Class-wise NMS over softmax scores of the final head.
  std::vector<DetectionRecord> detect(const WindowInput& in) const {
    ag::NoGradGuard ng;
    const ForwardTrace<T> tr = forward(in, false);
    return detections_from(tr, in);
  }

  std::vector<DetectionRecord> detections_from(const ForwardTrace<T>& tr, const WindowInput& in) const {
    std::vector<DetectionRecord> out;
    if (tr.reference_boxes.empty()) return out;
    const auto probs = softmax_rows(tr.head.class_logits->value);
    const Tensor<T>& d = tr.head.deltas->value;
    std::vector<Box> boxes;
    for (std::size_t i = 0; i < tr.reference_boxes.size(); ++i) {
      const BoxDelta delta{static_cast<double>(d.at(i, 0)), static_cast<double>(d.at(i, 1)),
                           static_cast<double>(d.at(i, 2)), static_cast<double>(d.at(i, 3))};
      boxes.push_back(decode_delta(tr.reference_boxes[i], delta, in.image));
    }
    std::vector<ScoredBox> all;
    std::vector<int> all_class;
    for (int c = 0; c < cfg_.num_classes; ++c) {
      std::vector<ScoredBox> cand;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const double s = probs[i][c + 1];
        if (s < cfg_.score_threshold || boxes[i].degenerate()) continue;
        cand.push_back({boxes[i], s});
      }
      std::vector<double> scores;
      for (const auto& sb : cand) scores.push_back(sb.score);
      std::vector<ScoredBox> sorted;
      for (int i : score_order(scores)) sorted.push_back(cand[i]);
      for (int i : nms(sorted, cfg_.det_nms_iou, sorted.size())) {
        all.push_back(sorted[i]);
        all_class.push_back(c);
      }
    }
    std::vector<double> scores;
    for (const auto& sb : all) scores.push_back(sb.score);
    std::vector<int> order = score_order(scores);
    if (static_cast<int>(order.size()) > cfg_.max_detections) order.resize(cfg_.max_detections);
    for (int i : order) {
      Box b = all[i].box;
      if (in.hflip) b = flip_box(b, in.image.width);
      out.push_back({in.video_id, in.frame_index, all_class[i], all[i].score, b});
    }
    return out;
  }

  WindowInput input_for(const FrameWindow& w, bool hflip = false) const {
    return make_window_input(w, !cfg_.uses_gate(), hflip);
  }

 private:
  void create(Rng& rng) {
    Backbone<T>{cfg_.backbone}.create(params_, rng);
    if (cfg_.uses_gate()) create_tg_rpn_gate(params_, rng, cfg_.tg);
    if (cfg_.uses_motion()) {
      create_tg_rpn_motion(params_, rng, cfg_.tg);
      create_tboc(params_, rng, cfg_.mtbr);
    }
    create_rpn(params_, rng, cfg_.rpn);
    if (cfg_.uses_box_aggregation()) {
      LinearSpec<T>{"jtmg.agg.fc", cfg_.jtmg.channels, cfg_.jtmg.aggregate_dim}.create(params_, rng);
    }
    if (cfg_.uses_displacement()) {
      const int k = cfg_.m + cfg_.n + 1;
      LinearSpec<T>{"jtmg.disp.fc1", 4 * k, cfg_.jtmg.displacement_dim}.create(params_, rng);
      LinearSpec<T>{"jtmg.disp.fc2", cfg_.jtmg.displacement_dim, cfg_.jtmg.displacement_dim}.create(params_, rng);
      create_motion_gru(params_, rng, cfg_.jtmg);
    }
    create_detection_head(params_, rng, cfg_.head_input_dim(), cfg_.jtmg.head_hidden, cfg_.num_classes);
  }

  DetectorConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace tmvod

#pragma once

#include <vector>

#include "tmvod/boxes.hpp"
#include "tmvod/nn.hpp"
#include "tmvod/roi_align.hpp"

namespace tmvod {

struct MtbrConfig {
  int channels = 64;
  int roi_size = 7;
  int offset_hidden = 128;
  int num_classes = 2;  // foreground classes; logits carry one more for background
};

// F^M = F + M, frame by frame.
template <typename T>
ag::Var<T> motion_aware_maps(const ag::Var<T>& features, const ag::Var<T>& motion) {
  if (features->value.shape() != motion->value.shape()) {
    throw ShapeError("motion_aware_maps: feature stack " + shape_str(features->value.shape()) +
                     " vs motion stack " + shape_str(motion->value.shape()));
  }
  return ag::add(features, motion);
}

// Keeps a decoded box usable as a pooling region: clipped into the image and
// at least one pixel wide and tall.
inline Box sanitize_box(const Box& b, ImageSize image) {
  Box c = clip_box(b, image);
  const double w = image.width, h = image.height;
  if (c.x2 - c.x1 < 1) {
    const double cx = std::clamp(c.cx(), 0.5, w - 0.5);
    c.x1 = cx - 0.5;
    c.x2 = cx + 0.5;
  }
  if (c.y2 - c.y1 < 1) {
    const double cy = std::clamp(c.cy(), 0.5, h - 0.5);
    c.y1 = cy - 0.5;
    c.y2 = cy + 0.5;
  }
  return c;
}

// One reference-frame anchor linked to a box in every frame of the window.
struct LinkedProposal {
  Box anchor;
  std::vector<Box> boxes;  // b_{t-M..t+N}
};

template <typename T>
struct TbocOutput {
  ag::Var<T> deltas;        // [K * R, 4], frame-major: row k * R + r
  ag::Var<T> class_logits;  // [R, num_classes + 1], training signal only
  ag::Var<T> pooled;        // f^M [K * R, C, P, P]
  std::vector<LinkedProposal> linked;
};

template <typename T>
void create_tboc(ParamStore<T>& ps, Rng& rng, const MtbrConfig& cfg) {
  LinearSpec<T>{"tboc.offset.fc1", cfg.channels, cfg.offset_hidden}.create(ps, rng);
  LinearSpec<T>{"tboc.offset.fc2", cfg.offset_hidden, 4, 0.001}.create(ps, rng);
  LinearSpec<T>{"tboc.cls.fc1", cfg.channels, cfg.offset_hidden}.create(ps, rng);
  LinearSpec<T>{"tboc.cls.fc2", cfg.offset_hidden, cfg.num_classes + 1, 0.01}.create(ps, rng);
}

template <typename T>
std::vector<RoI> frame_rois(int frames, const std::vector<Box>& boxes) {
  std::vector<RoI> rois;
  rois.reserve(static_cast<std::size_t>(frames) * boxes.size());
  for (int k = 0; k < frames; ++k)
    for (const Box& b : boxes) rois.push_back({k, b});
  return rois;
}

// Shared offset head applied to f^M_{t+i} pooled with the SAME anchor in
// every frame; each frame's delta is decoded against that anchor.
template <typename T>
TbocOutput<T> tboc_forward(const ParamStore<T>& ps, const MtbrConfig& cfg, const ag::Var<T>& motion_aware,
                           const std::vector<Box>& anchors, int stride, ImageSize image) {
  const int k = motion_aware->value.dim(0);
  const int r = static_cast<int>(anchors.size());
  TbocOutput<T> out;
  out.linked.resize(anchors.size());
  if (r == 0) {
    out.deltas = ag::constant(Tensor<T>({0, 4}));
    out.class_logits = ag::constant(Tensor<T>({0, cfg.num_classes + 1}));
    return out;
  }
  out.pooled = roi_align(motion_aware, frame_rois<T>(k, anchors), stride, cfg.roi_size);
  auto v = ag::global_avg_pool(out.pooled);  // [K * R, C]
  auto h = ag::relu(LinearSpec<T>{"tboc.offset.fc1", cfg.channels, cfg.offset_hidden}(ps, v));
  out.deltas = LinearSpec<T>{"tboc.offset.fc2", cfg.offset_hidden, 4}(ps, h);

  // Class head on the temporal mean of the pooled features.
  auto mean = ag::scale(ag::sum_leading(ag::reshape(v, {k, r, cfg.channels})), T(1) / static_cast<T>(k));
  auto c = ag::relu(LinearSpec<T>{"tboc.cls.fc1", cfg.channels, cfg.offset_hidden}(ps, mean));
  out.class_logits = LinearSpec<T>{"tboc.cls.fc2", cfg.offset_hidden, cfg.num_classes + 1}(ps, c);

  const Tensor<T>& d = out.deltas->value;
  for (int i = 0; i < r; ++i) {
    out.linked[i].anchor = anchors[i];
    for (int f = 0; f < k; ++f) {
      const std::size_t row = static_cast<std::size_t>(f) * r + i;
      const BoxDelta delta{static_cast<double>(d.at(row, 0)), static_cast<double>(d.at(row, 1)),
                           static_cast<double>(d.at(row, 2)), static_cast<double>(d.at(row, 3))};
      out.linked[i].boxes.push_back(sanitize_box(decode_delta(anchors[i], delta), image));
    }
  }
  return out;
}

template <typename T>
struct RoIFeatureBundle {
  ag::Var<T> reference;  // r_t^(A)   [R, C, P, P]
  ag::Var<T> visual;     // r^(F)     [K * R, C, P, P], frame-major
  ag::Var<T> motion;     // r^(M)     [K * R, C, P, P], frame-major
  int frames = 0;
  int proposals = 0;
};

// r^(A) from F^A with the refined reference box; r^(F), r^(M) from each
// frame's map with that frame's linked box.
template <typename T>
RoIFeatureBundle<T> pool_all(const ag::Var<T>& aggregated, const ag::Var<T>& features, const ag::Var<T>& motion,
                             const std::vector<LinkedProposal>& linked, int reference_index, int stride,
                             int roi_size) {
  RoIFeatureBundle<T> out;
  out.frames = features->value.dim(0);
  out.proposals = static_cast<int>(linked.size());
  if (linked.empty()) return out;
  std::vector<RoI> ref_rois, frame_rois_list;
  for (const auto& lp : linked) ref_rois.push_back({0, lp.boxes.at(reference_index)});
  for (int f = 0; f < out.frames; ++f)
    for (const auto& lp : linked) frame_rois_list.push_back({f, lp.boxes.at(f)});
  out.reference = roi_align(aggregated, ref_rois, stride, roi_size);
  out.visual = roi_align(features, frame_rois_list, stride, roi_size);
  out.motion = roi_align(motion, frame_rois_list, stride, roi_size);
  return out;
}

}  // namespace tmvod

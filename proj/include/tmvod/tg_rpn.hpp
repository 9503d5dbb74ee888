#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "tmvod/backbone.hpp"
#include "tmvod/boxes.hpp"
#include "tmvod/nn.hpp"

namespace tmvod {

enum class AggregateMode { kSum, kMean };

struct TgRpnConfig {
  int channels = 64;
  int gate_hidden = 16;
  int motion_hidden = 32;
  int se_reduction = 4;
  AggregateMode aggregate = AggregateMode::kSum;
};

struct RpnConfig {
  int channels = 64;
  int hidden = 64;
  std::vector<double> scales{16, 32, 64};
  std::vector<double> ratios{0.5, 1, 2};
  double nms_iou = 0.7;
  int pre_nms_topk = 600;
  int post_nms_topk_train = 300;
  int post_nms_topk_eval = 100;
  double min_box_size = 2;

  int anchors_per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
};

// ------------------------------------------------------------------ gating

// Complementary pixel gates: A_t = sigmoid(conv(conv(F_t ++ F_o))), A_o = 1 - A_t.
template <typename T>
struct GatePair {
  ag::Var<T> reference;  // A_t   [B, 1, H, W]
  ag::Var<T> other;      // A_t-i [B, 1, H, W]
};

template <typename T>
GatePair<T> gam_gate(const ParamStore<T>& ps, const TgRpnConfig& cfg, const ag::Var<T>& f_ref,
                     const ag::Var<T>& f_other) {
  f_ref->value.require_same_shape(f_other->value, "gam_gate");
  auto x = ag::concat<T>({f_ref, f_other}, 1);
  x = ag::relu(ConvSpec<T>{"gam.conv1", 2 * cfg.channels, cfg.gate_hidden}(ps, x));
  x = ConvSpec<T>{"gam.conv2", cfg.gate_hidden, 1}(ps, x);
  GatePair<T> g;
  g.reference = ag::sigmoid(x);
  g.other = ag::one_minus(g.reference);
  return g;
}

// F^G = A_t * F_t + A_o * F_o, gates broadcast over channels.
template <typename T>
ag::Var<T> gated_fuse(const ag::Var<T>& f_ref, const ag::Var<T>& f_other, const GatePair<T>& gates) {
  f_ref->value.require_same_shape(f_other->value, "gated_fuse");
  return ag::add(ag::mul_spatial(gates.reference, f_ref), ag::mul_spatial(gates.other, f_other));
}

// Pixel-wise sum (or mean) of the gated maps stacked as [B, C, H, W] -> [1, C, H, W].
template <typename T>
ag::Var<T> aggregate(const ag::Var<T>& gated, AggregateMode mode) {
  if (gated->value.rank() != 4 || gated->value.dim(0) == 0) {
    throw ShapeError("aggregate: expected a non-empty [B, C, H, W] stack");
  }
  const int b = gated->value.dim(0);
  Shape one = gated->value.shape();
  one[0] = 1;
  auto s = ag::reshape(ag::sum_leading(gated), one);
  return mode == AggregateMode::kMean ? ag::scale(s, T(1) / static_cast<T>(b)) : s;
}

template <typename T>
ag::Var<T> aggregate(const std::vector<ag::Var<T>>& gated, AggregateMode mode) {
  if (gated.empty()) throw ShapeError("aggregate: empty gated map list");
  return aggregate(ag::concat(gated, 0), mode);
}

// ------------------------------------------------------------------ motion

template <typename T>
void create_tg_rpn_gate(ParamStore<T>& ps, Rng& rng, const TgRpnConfig& cfg) {
  ConvSpec<T>{"gam.conv1", 2 * cfg.channels, cfg.gate_hidden}.create(ps, rng);
  ConvSpec<T>{"gam.conv2", cfg.gate_hidden, 1}.create(ps, rng);
}

template <typename T>
void create_tg_rpn_motion(ParamStore<T>& ps, Rng& rng, const TgRpnConfig& cfg) {
  ConvSpec<T>{"mam.conv1", cfg.channels, cfg.motion_hidden, 3, 1, false}.create(ps, rng);
  ConvSpec<T>{"mam.conv2", cfg.motion_hidden, cfg.channels, 3, 1, false}.create(ps, rng);
  const int squeezed = std::max(1, cfg.channels / cfg.se_reduction);
  LinearSpec<T>{"mam.cwa.fc1", cfg.channels, squeezed}.create(ps, rng);
  LinearSpec<T>{"mam.cwa.fc2", squeezed, cfg.channels, 0.01}.create(ps, rng);
}

// Squeeze-excite channel attention weights in (0, 1): [B, C, H, W] -> [B, C].
template <typename T>
ag::Var<T> channel_attention(const ParamStore<T>& ps, const TgRpnConfig& cfg, const ag::Var<T>& x) {
  const int squeezed = std::max(1, cfg.channels / cfg.se_reduction);
  auto s = ag::global_avg_pool(x);
  s = ag::relu(LinearSpec<T>{"mam.cwa.fc1", cfg.channels, squeezed}(ps, s));
  return ag::sigmoid(LinearSpec<T>{"mam.cwa.fc2", squeezed, cfg.channels}(ps, s));
}

// M = CWA(conv(conv(F_o - F_t))). Convolutions are bias-free, so identical
// inputs give an exactly zero motion map.
template <typename T>
ag::Var<T> mam_motion(const ParamStore<T>& ps, const TgRpnConfig& cfg, const ag::Var<T>& f_ref,
                      const ag::Var<T>& f_other) {
  f_ref->value.require_same_shape(f_other->value, "mam_motion");
  auto s = ag::sub(f_other, f_ref);
  auto x = ag::relu(ConvSpec<T>{"mam.conv1", cfg.channels, cfg.motion_hidden, 3, 1, false}(ps, s));
  x = ConvSpec<T>{"mam.conv2", cfg.motion_hidden, cfg.channels, 3, 1, false}(ps, x);
  return ag::mul_channel(x, channel_attention(ps, cfg, x));
}

// ------------------------------------------------------------------ block

template <typename T>
struct TgRpnOutput {
  GatePair<T> gates;        // over the M + N non-reference frames
  ag::Var<T> gated;         // F^G   [K-1, C, H, W]
  ag::Var<T> aggregated;    // F^A   [1, C, H, W]
  ag::Var<T> motion;        // M     [K, C, H, W], zero at the reference
};

// Non-reference frames of a stack, in temporal order.
template <typename T>
ag::Var<T> others_of(const FeatureMapSet<T>& f) {
  const int k = f.length(), ref = f.reference_index;
  std::vector<ag::Var<T>> parts;
  if (ref > 0) parts.push_back(ag::slice(f.maps, 0, 0, ref));
  if (ref + 1 < k) parts.push_back(ag::slice(f.maps, 0, ref + 1, k - ref - 1));
  if (parts.empty()) throw ShapeError("window holds only the reference frame");
  return parts.size() == 1 ? parts.front() : ag::concat(parts, 0);
}

template <typename T>
TgRpnOutput<T> tg_rpn_forward(const ParamStore<T>& ps, const TgRpnConfig& cfg, const FeatureMapSet<T>& f,
                              bool with_motion) {
  const int k = f.length(), ref = f.reference_index;
  TgRpnOutput<T> out;
  auto f_ref = ag::slice(f.maps, 0, ref, 1);
  auto others = others_of(f);
  auto f_ref_tiled = ag::repeat_leading(f_ref, k - 1);
  out.gates = gam_gate(ps, cfg, f_ref_tiled, others);
  out.gated = gated_fuse(f_ref_tiled, others, out.gates);
  out.aggregated = aggregate(out.gated, cfg.aggregate);
  if (with_motion) {
    auto moving = mam_motion(ps, cfg, f_ref_tiled, others);
    Shape zero_shape = f_ref->value.shape();
    auto zero = ag::constant(Tensor<T>(zero_shape));
    std::vector<ag::Var<T>> parts;
    if (ref > 0) parts.push_back(ag::slice(moving, 0, 0, ref));
    parts.push_back(zero);
    if (ref + 1 < k) parts.push_back(ag::slice(moving, 0, ref, k - ref - 1));
    out.motion = ag::concat(parts, 0);
  }
  return out;
}

// ------------------------------------------------------------------ RPN

template <typename T>
struct RpnOutput {
  ag::Var<T> objectness;  // [A * H * W] logits, anchor order (kind, y, x)
  ag::Var<T> deltas;      // [A * H * W, 4]
  std::vector<Box> anchors;
  std::vector<Box> proposals;  // b_t^(A), score-sorted, after NMS
  std::vector<double> proposal_scores;
};

template <typename T>
void create_rpn(ParamStore<T>& ps, Rng& rng, const RpnConfig& cfg) {
  ConvSpec<T>{"rpn.conv", cfg.channels, cfg.hidden}.create(ps, rng);
  const int a = cfg.anchors_per_cell();
  init::normal(ps.create("rpn.cls.weight", {a, cfg.hidden, 1, 1})->value, 0.01, rng);
  ps.create("rpn.cls.bias", {a});
  init::normal(ps.create("rpn.reg.weight", {4 * a, cfg.hidden, 1, 1})->value, 0.01, rng);
  ps.create("rpn.reg.bias", {4 * a});
}

// Decode, clip, drop tiny boxes, keep pre-NMS top-k, NMS, keep post-NMS top-k.
// Equal scores fall back to anchor index order.
inline void select_proposals(const std::vector<Box>& anchors, const std::vector<double>& logits,
                             const std::vector<BoxDelta>& deltas, ImageSize image, const RpnConfig& cfg,
                             int post_topk, std::vector<Box>& boxes_out, std::vector<double>& scores_out) {
  std::vector<ScoredBox> cand;
  cand.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    Box b = decode_delta(anchors[i], deltas[i], image);
    if (b.width() < cfg.min_box_size || b.height() < cfg.min_box_size) continue;
    cand.push_back({b, logits[i]});
  }
  std::vector<double> scores(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) scores[i] = cand[i].score;
  std::vector<int> order = score_order(scores);
  if (static_cast<int>(order.size()) > cfg.pre_nms_topk) order.resize(cfg.pre_nms_topk);
  std::vector<ScoredBox> top;
  top.reserve(order.size());
  for (int i : order) top.push_back(cand[i]);
  const std::vector<int> keep = nms(top, cfg.nms_iou, static_cast<std::size_t>(post_topk));
  boxes_out.clear();
  scores_out.clear();
  for (int i : keep) {
    boxes_out.push_back(top[i].box);
    scores_out.push_back(1.0 / (1.0 + std::exp(-top[i].score)));
  }
}

template <typename T>
RpnOutput<T> rpn_forward(const ParamStore<T>& ps, const RpnConfig& cfg, const ag::Var<T>& feature, int stride,
                         ImageSize image, bool training) {
  const Tensor<T>& fv = feature->value;
  if (fv.rank() != 4 || fv.dim(0) != 1) throw ShapeError("rpn_forward: expected a [1, C, H, W] map");
  const int h = fv.dim(2), w = fv.dim(3), a = cfg.anchors_per_cell();
  auto x = ag::relu(ConvSpec<T>{"rpn.conv", cfg.channels, cfg.hidden}(ps, feature));
  auto cls = ag::conv2d(x, ps.get("rpn.cls.weight"), ps.get("rpn.cls.bias"), 1, 0);
  auto reg = ag::conv2d(x, ps.get("rpn.reg.weight"), ps.get("rpn.reg.bias"), 1, 0);

  RpnOutput<T> out;
  out.objectness = ag::reshape(cls, {a * h * w});
  out.deltas = ag::reshape(ag::transpose_last2(ag::reshape(reg, {a, 4, h * w})), {a * h * w, 4});
  out.anchors = make_anchors(h, w, stride, cfg.scales, cfg.ratios);

  std::vector<double> logits(out.anchors.size());
  std::vector<BoxDelta> deltas(out.anchors.size());
  for (std::size_t i = 0; i < out.anchors.size(); ++i) {
    logits[i] = static_cast<double>(out.objectness->value[i]);
    const T* d = out.deltas->value.data() + 4 * i;
    deltas[i] = {static_cast<double>(d[0]), static_cast<double>(d[1]), static_cast<double>(d[2]),
                 static_cast<double>(d[3])};
  }
  select_proposals(out.anchors, logits, deltas, image, cfg,
                   training ? cfg.post_nms_topk_train : cfg.post_nms_topk_eval, out.proposals,
                   out.proposal_scores);
  return out;
}

}  // namespace tmvod

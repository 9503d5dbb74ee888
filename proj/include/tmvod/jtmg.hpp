#pragma once

#include <string>
#include <vector>

#include "tmvod/mtbr.hpp"
#include "tmvod/nn.hpp"

namespace tmvod {

struct JtmgConfig {
  int channels = 64;
  int aggregate_dim = 256;  // d_F
  int displacement_dim = 64;  // d_D
  int gru_hidden = 64;      // d_M = 2 * gru_hidden
  int head_hidden = 256;
  int num_classes = 2;
  // Uses the forward-direction parameters for both directions. Only the
  // reversal property test needs this.
  bool tied_gru = false;

  int head_input_dim() const { return aggregate_dim + displacement_dim + 2 * gru_hidden; }
};

// ------------------------------------------------------------------ visual

// w'_{t-i} = <phi(r^A), phi(r^F_{t-i})> / (|phi(r^A)| |phi(r^F_{t-i})| + eps)
// for pooled vectors phi_ref [R, C] and phi_frames [K * R, C] (frame-major).
// Returns [K * R] in the same order.
template <typename T>
ag::Var<T> cosine_weights(const ag::Var<T>& phi_ref, const ag::Var<T>& phi_frames, T eps = T(1e-8)) {
  const int r = phi_ref->value.dim(0);
  if (r == 0 || phi_frames->value.dim(0) % r != 0) {
    throw ShapeError("cosine_weights: frame vectors " + shape_str(phi_frames->value.shape()) +
                     " do not tile reference vectors " + shape_str(phi_ref->value.shape()));
  }
  const int k = phi_frames->value.dim(0) / r;
  return ag::cosine_similarity(ag::repeat_leading(phi_ref, k), phi_frames, eps);
}

// fc input of the box-level aggregation: sum_i w'_{t-i} phi(r^F_{t-i}) + phi(r^A),
// with the sum running over every frame including the reference.
template <typename T>
ag::Var<T> weighted_visual_sum(const ag::Var<T>& phi_ref, const ag::Var<T>& phi_frames,
                               const ag::Var<T>& weights) {
  const int r = phi_ref->value.dim(0), c = phi_ref->value.dim(1);
  const int k = phi_frames->value.dim(0) / r;
  auto weighted = ag::reshape(ag::scale_rows(phi_frames, weights), {k, r, c});
  return ag::add(ag::sum_leading(weighted), phi_ref);
}

template <typename T>
ag::Var<T> box_level_aggregate(const ParamStore<T>& ps, const JtmgConfig& cfg, const ag::Var<T>& phi_ref,
                               const ag::Var<T>& phi_frames, const ag::Var<T>& weights) {
  auto x = weighted_visual_sum(phi_ref, phi_frames, weights);
  return ag::relu(LinearSpec<T>{"jtmg.agg.fc", cfg.channels, cfg.aggregate_dim}(ps, x));
}

// ------------------------------------------------------------------ displacement

// p_{t-i} = b_{t-i} - b_t per coordinate, divided by the reference box
// width (x terms) or height (y terms) when normalize is set. [R, 4 K].
template <typename T>
Tensor<T> box_differences(const std::vector<LinkedProposal>& linked, int reference_index, bool normalize = true) {
  const int r = static_cast<int>(linked.size());
  const int k = r ? static_cast<int>(linked.front().boxes.size()) : 0;
  Tensor<T> p({r, 4 * k});
  for (int i = 0; i < r; ++i) {
    const Box& ref = linked[i].boxes.at(reference_index);
    const double sx = normalize ? std::max(ref.width(), 1e-6) : 1.0;
    const double sy = normalize ? std::max(ref.height(), 1e-6) : 1.0;
    for (int f = 0; f < k; ++f) {
      const Box& b = linked[i].boxes.at(f);
      p.at(i, 4 * f + 0) = static_cast<T>((b.x1 - ref.x1) / sx);
      p.at(i, 4 * f + 1) = static_cast<T>((b.y1 - ref.y1) / sy);
      p.at(i, 4 * f + 2) = static_cast<T>((b.x2 - ref.x2) / sx);
      p.at(i, 4 * f + 3) = static_cast<T>((b.y2 - ref.y2) / sy);
    }
  }
  return p;
}

template <typename T>
ag::Var<T> displacement_features(const ParamStore<T>& ps, const JtmgConfig& cfg, const ag::Var<T>& p) {
  const int in = p->value.dim(1);
  auto h = ag::relu(LinearSpec<T>{"jtmg.disp.fc1", in, cfg.displacement_dim}(ps, p));
  return ag::relu(LinearSpec<T>{"jtmg.disp.fc2", cfg.displacement_dim, cfg.displacement_dim}(ps, h));
}

template <typename T>
ag::Var<T> box_diff_encode(const ParamStore<T>& ps, const JtmgConfig& cfg,
                           const std::vector<LinkedProposal>& linked, int reference_index) {
  return displacement_features(ps, cfg, ag::constant(box_differences<T>(linked, reference_index)));
}

// ------------------------------------------------------------------ motion

// Gated recurrent unit, gate order (reset, update, candidate).
template <typename T>
struct GruSpec {
  std::string name;
  int input = 0, hidden = 0;

  void create(ParamStore<T>& ps, Rng& rng) const {
    init::fan_in_uniform(ps.create(name + ".weight_ih", {3 * hidden, input})->value, hidden, rng);
    init::fan_in_uniform(ps.create(name + ".weight_hh", {3 * hidden, hidden})->value, hidden, rng);
    init::fan_in_uniform(ps.create(name + ".bias_ih", {3 * hidden})->value, hidden, rng);
    init::fan_in_uniform(ps.create(name + ".bias_hh", {3 * hidden})->value, hidden, rng);
  }

  ag::Var<T> step(const ParamStore<T>& ps, const ag::Var<T>& x, const ag::Var<T>& h) const {
    auto gx = ag::linear(x, ps.get(name + ".weight_ih"), ps.get(name + ".bias_ih"));
    auto gh = ag::linear(h, ps.get(name + ".weight_hh"), ps.get(name + ".bias_hh"));
    auto reset = ag::sigmoid(ag::add(ag::slice(gx, 1, 0, hidden), ag::slice(gh, 1, 0, hidden)));
    auto update = ag::sigmoid(ag::add(ag::slice(gx, 1, hidden, hidden), ag::slice(gh, 1, hidden, hidden)));
    auto cand = ag::tanh(
        ag::add(ag::slice(gx, 1, 2 * hidden, hidden), ag::mul(reset, ag::slice(gh, 1, 2 * hidden, hidden))));
    return ag::add(ag::mul(ag::one_minus(update), cand), ag::mul(update, h));
  }

  ag::Var<T> run(const ParamStore<T>& ps, const std::vector<ag::Var<T>>& seq, bool reverse) const {
    const int rows = seq.front()->value.dim(0);
    auto h = ag::constant(Tensor<T>({rows, hidden}));
    const int n = static_cast<int>(seq.size());
    for (int s = 0; s < n; ++s) h = step(ps, seq[reverse ? n - 1 - s : s], h);
    return h;
  }
};

template <typename T>
void create_motion_gru(ParamStore<T>& ps, Rng& rng, const JtmgConfig& cfg) {
  GruSpec<T>{"jtmg.gru.fwd", cfg.channels, cfg.gru_hidden}.create(ps, rng);
  if (!cfg.tied_gru) GruSpec<T>{"jtmg.gru.bwd", cfg.channels, cfg.gru_hidden}.create(ps, rng);
}

// Bi-GRU over the temporally ordered pooled motion vectors [R, C] ->
// concat(final forward state, final backward state) [R, 2 * hidden].
template <typename T>
ag::Var<T> motion_gru(const ParamStore<T>& ps, const JtmgConfig& cfg, const std::vector<ag::Var<T>>& seq) {
  if (seq.empty()) throw ShapeError("motion_gru: empty sequence");
  const GruSpec<T> fwd{"jtmg.gru.fwd", cfg.channels, cfg.gru_hidden};
  const GruSpec<T> bwd{cfg.tied_gru ? "jtmg.gru.fwd" : "jtmg.gru.bwd", cfg.channels, cfg.gru_hidden};
  return ag::concat<T>({fwd.run(ps, seq, false), bwd.run(ps, seq, true)}, 1);
}

// Splits frame-major [K * R, C] into K tensors of [R, C].
template <typename T>
std::vector<ag::Var<T>> split_frames(const ag::Var<T>& v, int frames) {
  const int r = v->value.dim(0) / frames;
  std::vector<ag::Var<T>> out;
  for (int f = 0; f < frames; ++f) out.push_back(ag::slice(v, 0, f * r, r));
  return out;
}

// ------------------------------------------------------------------ head

template <typename T>
struct HeadOutput {
  ag::Var<T> class_logits;  // [R, num_classes + 1]
  ag::Var<T> deltas;        // [R, 4], relative to the reference box
};

template <typename T>
void create_detection_head(ParamStore<T>& ps, Rng& rng, int input_dim, int hidden, int num_classes) {
  LinearSpec<T>{"head.fc1", input_dim, hidden}.create(ps, rng);
  LinearSpec<T>{"head.fc2", hidden, hidden}.create(ps, rng);
  LinearSpec<T>{"head.cls", hidden, num_classes + 1, 0.01}.create(ps, rng);
  LinearSpec<T>{"head.reg", hidden, 4, 0.001}.create(ps, rng);
}

template <typename T>
HeadOutput<T> detection_head(const ParamStore<T>& ps, const ag::Var<T>& features) {
  const int in = features->value.dim(1);
  const int hidden = ps.get("head.fc1.weight")->value.dim(0);
  const int classes = ps.get("head.cls.weight")->value.dim(0);
  auto h = ag::relu(LinearSpec<T>{"head.fc1", in, hidden}(ps, features));
  h = ag::relu(LinearSpec<T>{"head.fc2", hidden, hidden}(ps, h));
  return {LinearSpec<T>{"head.cls", hidden, classes}(ps, h), LinearSpec<T>{"head.reg", hidden, 4}(ps, h)};
}

// Joint feature [g^F | g^D | g^M]; missing parts are zero-masked.
template <typename T>
ag::Var<T> joint_features(const JtmgConfig& cfg, const ag::Var<T>& g_visual, const ag::Var<T>& g_disp,
                          const ag::Var<T>& g_motion) {
  const int r = g_visual->value.dim(0);
  auto d = g_disp ? g_disp : ag::constant(Tensor<T>({r, cfg.displacement_dim}));
  auto m = g_motion ? g_motion : ag::constant(Tensor<T>({r, 2 * cfg.gru_hidden}));
  return ag::concat<T>({g_visual, d, m}, 1);
}

template <typename T>
std::vector<std::vector<double>> softmax_rows(const Tensor<T>& logits) {
  const int r = logits.dim(0), k = logits.dim(1);
  std::vector<std::vector<double>> out(r, std::vector<double>(k));
  for (int i = 0; i < r; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    double s = 0;
    for (int j = 0; j < k; ++j) s += out[i][j] = std::exp(static_cast<double>(logits.at(i, j)) - mx);
    for (int j = 0; j < k; ++j) out[i][j] /= s;
  }
  return out;
}

}  // namespace tmvod

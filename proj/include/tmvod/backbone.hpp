#pragma once

#include <array>
#include <string>
#include <vector>

#include "tmvod/datagen.hpp"
#include "tmvod/nn.hpp"

namespace tmvod {

struct BackboneConfig {
  std::array<int, 4> widths{16, 32, 64, 64};
  std::array<int, 4> strides{2, 2, 2, 1};
  int in_channels = 3;

  int out_channels() const { return widths.back(); }
  int total_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
};

// Per-frame visual maps of one window, stacked as [K, C, H', W'].
template <typename T>
struct FeatureMapSet {
  ag::Var<T> maps;
  int stride = 1;
  int reference_index = 0;

  int length() const { return maps->value.dim(0); }
};

// Four conv stages, each conv -> ReLU -> instance norm. The same parameters
// process every frame of the window.
template <typename T>
struct Backbone {
  BackboneConfig cfg;

  std::string stage_name(int i) const { return "backbone.stage" + std::to_string(i + 1); }

  void create(ParamStore<T>& ps, Rng& rng) const {
    int in = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      ConvSpec<T>{stage_name(i) + ".conv", in, cfg.widths[i], 3, cfg.strides[i]}.create(ps, rng);
      NormSpec<T>{stage_name(i) + ".norm", cfg.widths[i]}.create(ps);
      in = cfg.widths[i];
    }
  }

  // frames [K, 3, H, W] -> [K, C, H / stride, W / stride]
  ag::Var<T> forward(const ParamStore<T>& ps, const ag::Var<T>& frames) const {
    ag::Var<T> x = frames;
    int in = cfg.in_channels;
    for (int i = 0; i < 4; ++i) {
      x = ConvSpec<T>{stage_name(i) + ".conv", in, cfg.widths[i], 3, cfg.strides[i]}(ps, x);
      x = ag::relu(x);
      x = NormSpec<T>{stage_name(i) + ".norm", cfg.widths[i]}(ps, x);
      in = cfg.widths[i];
    }
    return x;
  }
};

// Stacks window frames into [K, 3, H, W]; rejects mixed frame sizes.
template <typename T>
Tensor<T> stack_frames(const std::vector<const Image*>& frames, bool hflip = false) {
  if (frames.empty()) throw ShapeError("stack_frames: empty frame list");
  const int h = frames.front()->height, w = frames.front()->width;
  Tensor<T> out({static_cast<int>(frames.size()), 3, h, w});
  const std::size_t per = static_cast<std::size_t>(3) * h * w;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (frames[k]->height != h || frames[k]->width != w) {
      throw ShapeError("stack_frames: frames in a window must share one size");
    }
    Tensor<T> one = image_to_tensor<T>(*frames[k], hflip);
    std::copy(one.values().begin(), one.values().end(), out.data() + k * per);
  }
  return out;
}

template <typename T>
FeatureMapSet<T> backbone_forward(const FrameWindow& window, const ParamStore<T>& ps, const Backbone<T>& net) {
  std::vector<const Image*> frames;
  for (int k = 0; k < window.length(); ++k) frames.push_back(&window.frame(k));
  FeatureMapSet<T> out;
  out.maps = net.forward(ps, ag::constant(stack_frames<T>(frames)));
  out.stride = net.cfg.total_stride();
  out.reference_index = window.reference_position;
  return out;
}

}  // namespace tmvod

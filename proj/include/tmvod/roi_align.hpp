#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "tmvod/autograd.hpp"
#include "tmvod/boxes.hpp"
#include "tmvod/ops.hpp"

namespace tmvod {

// One region: which map of the batch to sample and the box in input pixels.
struct RoI {
  int batch = 0;
  Box box;
};

namespace detail {

struct BilinearTap {
  std::array<int, 4> index{};  // flat y * W + x, -1 when unused
  std::array<double, 4> weight{};
};

// Sampling convention: feature cell (i, j) sits at continuous coordinate
// (i, j) after dividing the pixel position by the stride and shifting by half
// a cell. Samples further than one cell outside the map read zero; samples in
// the half-cell border band are clamped to the edge.
inline BilinearTap bilinear_tap(double y, double x, int h, int w) {
  BilinearTap tap;
  tap.index.fill(-1);
  if (y < -1.0 || y > h || x < -1.0 || x > w) return tap;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  int y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    y = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    x = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - y0, lx = x - x0, hy = 1 - ly, hx = 1 - lx;
  tap.index = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
  tap.weight = {hy * hx, hy * lx, ly * hx, ly * lx};
  return tap;
}

}  // namespace detail

// maps [B, C, H, W] -> [R, C, P, P]. One bilinear sample at each bin center;
// differentiable with respect to the maps, boxes are constants.
template <typename T>
ag::Var<T> roi_align(const ag::Var<T>& maps, const std::vector<RoI>& rois, int stride, int pooled) {
  const Tensor<T>& m = maps->value;
  ag::detail::require(m.rank() == 4, "roi_align: expected [B, C, H, W] maps, got " + shape_str(m.shape()));
  ag::detail::require(stride > 0 && pooled > 0, "roi_align: stride and output size must be positive");
  const int b = m.dim(0), c = m.dim(1), h = m.dim(2), w = m.dim(3);
  const int r = static_cast<int>(rois.size());
  const int pp = pooled * pooled;
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  std::vector<detail::BilinearTap> taps(static_cast<std::size_t>(r) * pp);
  for (int i = 0; i < r; ++i) {
    const Box& box = rois[i].box;
    if (box.degenerate() || !box.finite()) throw BoxError("roi_align: degenerate box");
    if (rois[i].batch < 0 || rois[i].batch >= b) throw ShapeError("roi_align: batch index out of range");
    const double fx1 = box.x1 / stride, fy1 = box.y1 / stride;
    const double bw = (box.x2 - box.x1) / stride / pooled;
    const double bh = (box.y2 - box.y1) / stride / pooled;
    for (int py = 0; py < pooled; ++py)
      for (int px = 0; px < pooled; ++px) {
        const double y = fy1 + (py + 0.5) * bh - 0.5;
        const double x = fx1 + (px + 0.5) * bw - 0.5;
        taps[static_cast<std::size_t>(i) * pp + py * pooled + px] = detail::bilinear_tap(y, x, h, w);
      }
  }

  Tensor<T> out({r, c, pooled, pooled});
  for (int i = 0; i < r; ++i) {
    const detail::BilinearTap* tp = taps.data() + static_cast<std::size_t>(i) * pp;
    for (int k = 0; k < c; ++k) {
      const T* src = m.data() + (static_cast<std::size_t>(rois[i].batch) * c + k) * hw;
      T* dst = out.data() + (static_cast<std::size_t>(i) * c + k) * pp;
      for (int s = 0; s < pp; ++s) {
        T v = 0;
        for (int q = 0; q < 4; ++q) {
          if (tp[s].index[q] >= 0) v += static_cast<T>(tp[s].weight[q]) * src[tp[s].index[q]];
        }
        dst[s] = v;
      }
    }
  }

  std::vector<int> batch_of(r);
  for (int i = 0; i < r; ++i) batch_of[i] = rois[i].batch;
  return ag::make_result<T>(std::move(out), {maps},
                            [maps, taps = std::move(taps), batch_of = std::move(batch_of), r, c, pp,
                             hw](ag::Node<T>& self) {
    Tensor<T>& g = maps->grad_buffer();
    for (int i = 0; i < r; ++i) {
      const detail::BilinearTap* tp = taps.data() + static_cast<std::size_t>(i) * pp;
      for (int k = 0; k < c; ++k) {
        T* dst = g.data() + (static_cast<std::size_t>(batch_of[i]) * c + k) * hw;
        const T* up = self.grad.data() + (static_cast<std::size_t>(i) * c + k) * pp;
        for (int s = 0; s < pp; ++s) {
          for (int q = 0; q < 4; ++q) {
            if (tp[s].index[q] >= 0) dst[tp[s].index[q]] += static_cast<T>(tp[s].weight[q]) * up[s];
          }
        }
      }
    }
  });
}

}  // namespace tmvod

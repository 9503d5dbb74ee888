#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tmvod/autograd.hpp"
#include "tmvod/tensor.hpp"

namespace tmvod::ag {

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void accumulate(const Var<T>& v, const T* src) {
  if (!v->requires_grad) return;
  Tensor<T>& g = v->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a->value.require_same_shape(b->value, "add");
  Tensor<T> out = a->value;
  out += b->value;
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate(a, self.grad.data());
    detail::accumulate(b, self.grad.data());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a->value.require_same_shape(b->value, "sub");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    detail::accumulate(a, self.grad.data());
    if (b->requires_grad) {
      Tensor<T>& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a->value.require_same_shape(b->value, "mul");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      Tensor<T>& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor<T>& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v *= c;
  return make_result<T>(std::move(out), {a}, [a, c](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

// 1 - x
template <typename T>
Var<T> one_minus(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v = T(1) - v;
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a->value[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v = detail::sigmoid(v);
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T s = self.value[i];
      g[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v = std::tanh(v);
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T y = self.value[i];
      g[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

// Elementwise sum of equally shaped inputs.
template <typename T>
Var<T> sum_all_of(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "sum_all_of: empty input list");
  Tensor<T> out = xs.front()->value;
  for (std::size_t k = 1; k < xs.size(); ++k) {
    out.require_same_shape(xs[k]->value, "sum_all_of");
    out += xs[k]->value;
  }
  return make_result<T>(std::move(out), xs, [xs](Node<T>& self) {
    for (const auto& x : xs) detail::accumulate(x, self.grad.data());
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a->value.sum());
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

// Scalar sum(a * weights) with a constant weight tensor; a generic readout.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
  a->value.require_same_shape(weights, "weighted_sum");
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += a->value[i] * weights[i];
  return make_result<T>(Tensor<T>::scalar(s), {a}, [a, weights](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

// [B, ...] -> [...], sum over the leading axis.
template <typename T>
Var<T> sum_leading(const Var<T>& a) {
  const Tensor<T>& x = a->value;
  detail::require(x.rank() >= 1 && x.dim(0) > 0, "sum_leading: empty leading axis");
  const int b = x.dim(0);
  const std::size_t inner = x.size() / static_cast<std::size_t>(b);
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  Tensor<T> out(out_shape);
  for (int n = 0; n < b; ++n) {
    const T* p = x.data() + n * inner;
    for (std::size_t i = 0; i < inner; ++i) out[i] += p[i];
  }
  return make_result<T>(std::move(out), {a}, [a, b, inner](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (int n = 0; n < b; ++n) {
      T* p = g.data() + n * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += self.grad[i];
    }
  });
}

// [B, C, ...spatial] -> [B, C], mean over the trailing dims.
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  const Tensor<T>& x = a->value;
  detail::require(x.rank() >= 3, "global_avg_pool: expected rank >= 3, got " + shape_str(x.shape()));
  const int b = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.size() / (static_cast<std::size_t>(b) * c);
  Tensor<T> out({b, c});
  for (std::size_t r = 0; r < static_cast<std::size_t>(b) * c; ++r) {
    T s = 0;
    const T* p = x.data() + r * hw;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
    out[r] = s / static_cast<T>(hw);
  }
  return make_result<T>(std::move(out), {a}, [a, hw](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      const T gr = self.grad[r] * inv;
      T* p = g.data() + r * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += gr;
    }
  });
}

// ---------------------------------------------------------------- layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a->value.reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
    detail::accumulate(a, self.grad.data());
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  detail::require(!xs.empty(), "concat: empty input list");
  const Shape& s0 = xs.front()->value.shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  detail::require(axis >= 0 && axis < rank, "concat: bad axis");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<int> extents;
  for (const auto& x : xs) {
    const Shape& s = x->value.shape();
    detail::require(static_cast<int>(s.size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) detail::require(s[d] == s0[d], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape);
  const std::size_t total_axis = out_shape[axis];
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xs[k]->value.data() + o * chunk, chunk,
                  out.data() + o * total_axis * inner + offset * inner);
    }
    offset += extents[k];
  }
  return make_result<T>(std::move(out), xs, [xs, extents, outer, inner, total_axis](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const std::size_t chunk = extents[k] * inner;
      if (xs[k]->requires_grad) {
        Tensor<T>& g = xs[k]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * total_axis * inner + off * inner;
          T* dst = g.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off += extents[k];
    }
  });
}

// Stacks `times` copies of x along the leading axis.
template <typename T>
Var<T> repeat_leading(const Var<T>& x, int times) {
  return concat(std::vector<Var<T>>(static_cast<std::size_t>(times), x), 0);
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int start, int length) {
  const Shape& s = a->value.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  detail::require(axis >= 0 && axis < rank, "slice: bad axis");
  detail::require(start >= 0 && length >= 0 && start + length <= s[axis],
                  "slice: range out of bounds for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const std::size_t src_axis = s[axis];
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a->value.data() + (o * src_axis + start) * inner, chunk, out.data() + o * chunk);
  }
  return make_result<T>(std::move(out), {a}, [a, outer, inner, src_axis, start, chunk](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      T* dst = g.data() + (o * src_axis + start) * inner;
      const T* src = self.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

// [..., M, N] -> [..., N, M]
template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  const Shape& s = a->value.shape();
  detail::require(s.size() >= 2, "transpose_last2: rank < 2");
  const int m = s[s.size() - 2], n = s[s.size() - 1];
  const std::size_t batch = a->value.size() / (static_cast<std::size_t>(m) * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = a->value.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return make_result<T>(std::move(out), {a}, [a, batch, m, n](Node<T>& self) {
    Tensor<T>& g = a->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = self.grad.data() + b * m * n;
      T* dst = g.data() + b * m * n;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dst[i * n + j] += src[j * m + i];
    }
  });
}

// ---------------------------------------------------------------- broadcasts

// gate [B, 1, H, W] times x [B, C, H, W]
template <typename T>
Var<T> mul_spatial(const Var<T>& gate, const Var<T>& x) {
  const Tensor<T>& g = gate->value;
  const Tensor<T>& v = x->value;
  detail::require(g.rank() == 4 && v.rank() == 4 && g.dim(1) == 1 && g.dim(0) == v.dim(0) &&
                      g.dim(2) == v.dim(2) && g.dim(3) == v.dim(3),
                  "mul_spatial: gate " + shape_str(g.shape()) + " vs map " + shape_str(v.shape()));
  const int b = v.dim(0), c = v.dim(1);
  const std::size_t hw = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
  Tensor<T> out = v;
  for (int n = 0; n < b; ++n)
    for (int k = 0; k < c; ++k) {
      T* o = out.data() + (static_cast<std::size_t>(n) * c + k) * hw;
      const T* gp = g.data() + n * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] *= gp[i];
    }
  return make_result<T>(std::move(out), {gate, x}, [gate, x, b, c, hw](Node<T>& self) {
    for (int n = 0; n < b; ++n) {
      const T* gp = gate->value.data() + n * hw;
      for (int k = 0; k < c; ++k) {
        const std::size_t base = (static_cast<std::size_t>(n) * c + k) * hw;
        const T* up = self.grad.data() + base;
        if (x->requires_grad) {
          T* dx = x->grad_buffer().data() + base;
          for (std::size_t i = 0; i < hw; ++i) dx[i] += up[i] * gp[i];
        }
        if (gate->requires_grad) {
          T* dg = gate->grad_buffer().data() + n * hw;
          const T* xp = x->value.data() + base;
          for (std::size_t i = 0; i < hw; ++i) dg[i] += up[i] * xp[i];
        }
      }
    }
  });
}

// x [B, C, H, W] times per-channel weights s [B, C]
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& s) {
  const Tensor<T>& v = x->value;
  detail::require(v.rank() == 4 && s->value.rank() == 2 && s->value.dim(0) == v.dim(0) &&
                      s->value.dim(1) == v.dim(1),
                  "mul_channel: map " + shape_str(v.shape()) + " vs weights " + shape_str(s->value.shape()));
  const std::size_t bc = static_cast<std::size_t>(v.dim(0)) * v.dim(1);
  const std::size_t hw = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
  Tensor<T> out = v;
  for (std::size_t r = 0; r < bc; ++r) {
    T* o = out.data() + r * hw;
    for (std::size_t i = 0; i < hw; ++i) o[i] *= s->value[r];
  }
  return make_result<T>(std::move(out), {x, s}, [x, s, bc, hw](Node<T>& self) {
    for (std::size_t r = 0; r < bc; ++r) {
      const T* up = self.grad.data() + r * hw;
      if (x->requires_grad) {
        T* dx = x->grad_buffer().data() + r * hw;
        for (std::size_t i = 0; i < hw; ++i) dx[i] += up[i] * s->value[r];
      }
      if (s->requires_grad) {
        const T* xp = x->value.data() + r * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += up[i] * xp[i];
        s->grad_buffer()[r] += acc;
      }
    }
  });
}

// x [R, D] rows scaled by w [R]
template <typename T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& w) {
  const Tensor<T>& v = x->value;
  detail::require(v.rank() == 2 && w->value.rank() == 1 && w->value.dim(0) == v.dim(0),
                  "scale_rows: " + shape_str(v.shape()) + " vs " + shape_str(w->value.shape()));
  const int r = v.dim(0), d = v.dim(1);
  Tensor<T> out = v;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) *= w->value[i];
  return make_result<T>(std::move(out), {x, w}, [x, w, r, d](Node<T>& self) {
    for (int i = 0; i < r; ++i) {
      T acc = 0;
      for (int j = 0; j < d; ++j) {
        const T up = self.grad.at(i, j);
        if (x->requires_grad) x->grad_buffer().at(i, j) += up * w->value[i];
        acc += up * x->value.at(i, j);
      }
      if (w->requires_grad) w->grad_buffer()[i] += acc;
    }
  });
}

// ---------------------------------------------------------------- dense layers

// x [R, I], w [O, I], b [O] (optional) -> [R, O]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = nullptr) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  detail::require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
                  "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const int rows = xv.dim(0), in = xv.dim(1), outd = wv.dim(0);
  Tensor<T> out({rows, outd});
  {
    detail::CMapR<T> X(xv.data(), rows, in);
    detail::CMapR<T> W(wv.data(), outd, in);
    detail::MapR<T> Y(out.data(), rows, outd);
    Y.noalias() = X * W.transpose();
    if (b) {
      detail::require(b->value.size() == static_cast<std::size_t>(outd), "linear: bias size mismatch");
      for (int r = 0; r < rows; ++r)
        for (int o = 0; o < outd; ++o) Y(r, o) += b->value[o];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(b);
  return make_result<T>(std::move(out), inputs, [x, w, b, rows, in, outd](Node<T>& self) {
    detail::CMapR<T> G(self.grad.data(), rows, outd);
    if (x->requires_grad) {
      detail::MapR<T> DX(x->grad_buffer().data(), rows, in);
      detail::CMapR<T> W(w->value.data(), outd, in);
      DX.noalias() += G * W;
    }
    if (w->requires_grad) {
      detail::MapR<T> DW(w->grad_buffer().data(), outd, in);
      detail::CMapR<T> X(x->value.data(), rows, in);
      DW.noalias() += G.transpose() * X;
    }
    if (b && b->requires_grad) {
      Tensor<T>& db = b->grad_buffer();
      for (int r = 0; r < rows; ++r)
        for (int o = 0; o < outd; ++o) db[o] += G(r, o);
    }
  });
}

// x [B, Ci, H, W], w [Co, Ci, K, K], bias [Co] (optional) -> [B, Co, Ho, Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  detail::require(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(1) && wv.dim(2) == wv.dim(3),
                  "conv2d: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const int batch = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int co = wv.dim(0), k = wv.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  detail::require(ho > 0 && wo > 0, "conv2d: output would be empty");
  const int krows = ci * k * k;
  const int npix = ho * wo;

  auto im2col = [&](int n, T* cols) {
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * npix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[oy * wo + ox] =
                  (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? xv.at(n, c, iy, ix) : T(0);
            }
          }
        }
  };

  Tensor<T> out({batch, co, ho, wo});
  std::vector<T> cols(static_cast<std::size_t>(krows) * npix);
  detail::CMapR<T> W(wv.data(), co, krows);
  for (int n = 0; n < batch; ++n) {
    im2col(n, cols.data());
    detail::CMapR<T> C(cols.data(), krows, npix);
    detail::MapR<T> Y(out.data() + static_cast<std::size_t>(n) * co * npix, co, npix);
    Y.noalias() = W * C;
    if (bias) {
      for (int o = 0; o < co; ++o) Y.row(o).array() += bias->value[o];
    }
  }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& self) {
    std::vector<T> colbuf(static_cast<std::size_t>(krows) * npix);
    std::vector<T> dcols(static_cast<std::size_t>(krows) * npix);
    detail::CMapR<T> Wm(w->value.data(), co, krows);
    for (int n = 0; n < batch; ++n) {
      detail::CMapR<T> G(self.grad.data() + static_cast<std::size_t>(n) * co * npix, co, npix);
      if (w->requires_grad) {
        // rebuild columns from the (unchanged) input value
        const Tensor<T>& xin = x->value;
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              T* row = colbuf.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * npix;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  row[oy * wo + ox] =
                      (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? xin.at(n, c, iy, ix) : T(0);
                }
              }
            }
        detail::CMapR<T> C(colbuf.data(), krows, npix);
        detail::MapR<T> DW(w->grad_buffer().data(), co, krows);
        DW.noalias() += G * C.transpose();
      }
      if (bias && bias->requires_grad) {
        Tensor<T>& db = bias->grad_buffer();
        for (int o = 0; o < co; ++o) {
          const T* g = self.grad.data() + (static_cast<std::size_t>(n) * co + o) * npix;
          db[o] += std::accumulate(g, g + npix, T(0));
        }
      }
      if (x->requires_grad) {
        detail::MapR<T> DC(dcols.data(), krows, npix);
        DC.noalias() = Wm.transpose() * G;
        Tensor<T>& dx = x->grad_buffer();
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const T* row = dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * npix;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  dx.at(n, c, iy, ix) += row[oy * wo + ox];
                }
              }
            }
      }
    }
  });
}

// Per-sample, per-channel normalization over the spatial extent with a
// learned affine transform. Statistics come from the input itself, so the
// same computation runs in training and inference.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Tensor<T>& v = x->value;
  detail::require(v.rank() == 4 && gamma->value.size() == static_cast<std::size_t>(v.dim(1)) &&
                      beta->value.size() == static_cast<std::size_t>(v.dim(1)),
                  "instance_norm: bad shapes " + shape_str(v.shape()));
  const int b = v.dim(0), c = v.dim(1);
  const std::size_t hw = static_cast<std::size_t>(v.dim(2)) * v.dim(3);
  Tensor<T> out(v.shape());
  Tensor<T> xhat(v.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(b) * c);
  for (int n = 0; n < b; ++n)
    for (int k = 0; k < c; ++k) {
      const std::size_t base = (static_cast<std::size_t>(n) * c + k) * hw;
      const T* p = v.data() + base;
      T mean = 0;
      for (std::size_t i = 0; i < hw; ++i) mean += p[i];
      mean /= static_cast<T>(hw);
      T var = 0;
      for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<T>(hw);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[n * c + k] = is;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (p[i] - mean) * is;
        xhat[base + i] = xh;
        out[base + i] = gamma->value[k] * xh + beta->value[k];
      }
    }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), b, c,
                         hw](Node<T>& self) {
    for (int n = 0; n < b; ++n)
      for (int k = 0; k < c; ++k) {
        const std::size_t base = (static_cast<std::size_t>(n) * c + k) * hw;
        const T* up = self.grad.data() + base;
        const T* xh = xhat.data() + base;
        T sum_up = 0, sum_up_xh = 0;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_up += up[i];
          sum_up_xh += up[i] * xh[i];
        }
        if (gamma->requires_grad) gamma->grad_buffer()[k] += sum_up_xh;
        if (beta->requires_grad) beta->grad_buffer()[k] += sum_up;
        if (x->requires_grad) {
          const T g = gamma->value[k];
          const T is = inv_std[n * c + k];
          const T inv_n = T(1) / static_cast<T>(hw);
          T* dx = x->grad_buffer().data() + base;
          for (std::size_t i = 0; i < hw; ++i) {
            dx[i] += g * is * (up[i] - inv_n * sum_up - xh[i] * inv_n * sum_up_xh);
          }
        }
      }
  });
}

// ---------------------------------------------------------------- similarity

// Row-wise cosine similarity of a [R, D] and b [R, D] with an epsilon guard in
// the denominator -> [R]. Zero rows yield 0.
template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b, T eps = T(1e-8)) {
  a->value.require_same_shape(b->value, "cosine_similarity");
  detail::require(a->value.rank() == 2, "cosine_similarity: expected [R, D]");
  const int r = a->value.dim(0), d = a->value.dim(1);
  Tensor<T> out({r});
  std::vector<T> dots(r), na(r), nb(r);
  for (int i = 0; i < r; ++i) {
    T dot = 0, sa = 0, sb = 0;
    for (int j = 0; j < d; ++j) {
      const T x = a->value.at(i, j), y = b->value.at(i, j);
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    dots[i] = dot;
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    out[i] = dot / (na[i] * nb[i] + eps);
  }
  return make_result<T>(std::move(out), {a, b}, [a, b, dots, na, nb, r, d, eps](Node<T>& self) {
    for (int i = 0; i < r; ++i) {
      const T den = na[i] * nb[i] + eps;
      const T up = self.grad[i];
      // d/da = b/den - dot * nb * (a/|a|) / den^2, and symmetrically for b
      const T ca = na[i] > T(0) ? dots[i] * nb[i] / (na[i] * den * den) : T(0);
      const T cb = nb[i] > T(0) ? dots[i] * na[i] / (nb[i] * den * den) : T(0);
      for (int j = 0; j < d; ++j) {
        const T x = a->value.at(i, j), y = b->value.at(i, j);
        if (a->requires_grad) a->grad_buffer().at(i, j) += up * (y / den - ca * x);
        if (b->requires_grad) b->grad_buffer().at(i, j) += up * (x / den - cb * y);
      }
    }
  });
}

// ---------------------------------------------------------------- losses

// Sum over rows of weight[r] * -log softmax(logits[r])[label[r]].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels,
                             const std::vector<T>& weights) {
  const Tensor<T>& z = logits->value;
  detail::require(z.rank() == 2 && static_cast<std::size_t>(z.dim(0)) == labels.size() &&
                      labels.size() == weights.size(),
                  "softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  const int r = z.dim(0), k = z.dim(1);
  Tensor<T> probs(z.shape());
  T loss = 0;
  for (int i = 0; i < r; ++i) {
    detail::require(labels[i] >= 0 && labels[i] < k, "softmax_cross_entropy: label out of range");
    T mx = z.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, z.at(i, j));
    T s = 0;
    for (int j = 0; j < k; ++j) {
      probs.at(i, j) = std::exp(z.at(i, j) - mx);
      s += probs.at(i, j);
    }
    for (int j = 0; j < k; ++j) probs.at(i, j) /= s;
    if (weights[i] != T(0)) loss += weights[i] * (std::log(s) + mx - z.at(i, labels[i]));
  }
  return make_result<T>(Tensor<T>::scalar(loss), {logits},
                        [logits, probs = std::move(probs), labels, weights, r, k](Node<T>& self) {
    Tensor<T>& g = logits->grad_buffer();
    const T up = self.grad[0];
    for (int i = 0; i < r; ++i) {
      if (weights[i] == T(0)) continue;
      for (int j = 0; j < k; ++j) {
        const T onehot = j == labels[i] ? T(1) : T(0);
        g.at(i, j) += up * weights[i] * (probs.at(i, j) - onehot);
      }
    }
  });
}

// Sum of weight[i] * BCE(sigmoid(x[i]), target[i]) over a flat logit vector.
template <typename T>
Var<T> binary_cross_entropy_with_logits(const Var<T>& x, const std::vector<T>& targets,
                                        const std::vector<T>& weights) {
  detail::require(x->value.size() == targets.size() && targets.size() == weights.size(),
                  "binary_cross_entropy_with_logits: size mismatch");
  T loss = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == T(0)) continue;
    const T v = x->value[i];
    loss += weights[i] * (std::max(v, T(0)) - v * targets[i] + std::log1p(std::exp(-std::abs(v))));
  }
  return make_result<T>(Tensor<T>::scalar(loss), {x}, [x, targets, weights](Node<T>& self) {
    Tensor<T>& g = x->grad_buffer();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (weights[i] == T(0)) continue;
      g[i] += self.grad[0] * weights[i] * (detail::sigmoid(x->value[i]) - targets[i]);
    }
  });
}

template <typename T>
T smooth_l1_value(T d, T beta = T(1)) {
  const T a = std::abs(d);
  return a < beta ? T(0.5) * a * a / beta : a - T(0.5) * beta;
}

// Sum over rows of weight[r] * sum_c smoothL1(pred[r, c] - target[r, c]).
template <typename T>
Var<T> smooth_l1(const Var<T>& pred, const Tensor<T>& target, const std::vector<T>& weights) {
  pred->value.require_same_shape(target, "smooth_l1");
  detail::require(pred->value.rank() == 2 && static_cast<std::size_t>(pred->value.dim(0)) == weights.size(),
                  "smooth_l1: weights size mismatch");
  const int r = pred->value.dim(0), c = pred->value.dim(1);
  T loss = 0;
  for (int i = 0; i < r; ++i) {
    if (weights[i] == T(0)) continue;
    T s = 0;
    for (int j = 0; j < c; ++j) s += smooth_l1_value(pred->value.at(i, j) - target.at(i, j));
    loss += weights[i] * s;
  }
  return make_result<T>(Tensor<T>::scalar(loss), {pred}, [pred, target, weights, r, c](Node<T>& self) {
    Tensor<T>& g = pred->grad_buffer();
    for (int i = 0; i < r; ++i) {
      if (weights[i] == T(0)) continue;
      for (int j = 0; j < c; ++j) {
        const T d = pred->value.at(i, j) - target.at(i, j);
        const T dd = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
        g.at(i, j) += self.grad[0] * weights[i] * dd;
      }
    }
  });
}

}  // namespace tmvod::ag

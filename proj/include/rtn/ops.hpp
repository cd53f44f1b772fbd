#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtn/tape.hpp"

// Tape op builders. Shape conventions:
//   feature maps {C,H,W}, token batches {B,N,C}, 3-d stacks {C,T,H,W},
//   flows {H,W,2} with channel 0 = dx (columns), channel 1 = dy (rows),
//   scalars {1}.
namespace rtn::ad {

enum class Pad { kZero, kReplicate, kReflect };

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<MatRM<T>>;
template <class T>
using CMap = Eigen::Map<const MatRM<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// mirror without repeating the edge sample (reflect_101)
inline int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

inline int64_t clamp_index(int64_t i, int64_t n) {
  return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.same_shape(b->val), "add: shape mismatch");
  Tensor<T> out(a->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] + b->val[i];
  return t.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
    a->accumulate(n.grad);
    b->accumulate(n.grad);
  });
}

template <class T>
Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.same_shape(b->val), "sub: shape mismatch");
  Tensor<T> out(a->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] - b->val[i];
  return t.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
    a->accumulate(n.grad);
    if (b->requires_grad) {
      Tensor<T>& gb = b->grad_buffer();
      for (int64_t i = 0; i < n.grad.size(); ++i) gb[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.same_shape(b->val), "mul: shape mismatch");
  Tensor<T> out(a->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * b->val[i];
  return t.make(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      Tensor<T>& ga = a->grad_buffer();
      for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * b->val[i];
    }
    if (b->requires_grad) {
      Tensor<T>& gb = b->grad_buffer();
      for (int64_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i] * a->val[i];
    }
  });
}

// alpha*x + beta
template <class T>
Var<T> affine(Tape<T>& t, Var<T> x, T alpha, T beta) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = alpha * x->val[i] + beta;
  return t.make(std::move(out), {x}, [x, alpha](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i) g[i] += alpha * n.grad[i];
  });
}

template <class T>
Var<T> scale(Tape<T>& t, Var<T> x, T alpha) {
  return affine(t, x, alpha, T(0));
}

template <class T>
Var<T> relu(Tape<T>& t, Var<T> x) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x->val[i] > T(0) ? x->val[i] : T(0);
  return t.make(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i)
      if (x->val[i] > T(0)) g[i] += n.grad[i];
  });
}

template <class T>
Var<T> leaky_relu(Tape<T>& t, Var<T> x, T slope) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = x->val[i] > T(0) ? x->val[i] : slope * x->val[i];
  return t.make(std::move(out), {x}, [x, slope](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i)
      g[i] += (x->val[i] > T(0) ? T(1) : slope) * n.grad[i];
  });
}

template <class T>
Var<T> sigmoid(Tape<T>& t, Var<T> x) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x->val[i]));
  Tensor<T> saved = out;
  return t.make(std::move(out), {x}, [x, saved = std::move(saved)](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i)
      g[i] += saved[i] * (T(1) - saved[i]) * n.grad[i];
  });
}

template <class T>
Var<T> gelu(Tape<T>& t, Var<T> x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(std::numbers::pi));
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    T v = x->val[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return t.make(std::move(out), {x}, [x, inv_sqrt2, inv_sqrt2pi](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      T v = x->val[i];
      T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] += (cdf + v * pdf) * n.grad[i];
    }
  });
}

template <class T>
Var<T> abs_value(Tape<T>& t, Var<T> x) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(x->val[i]);
  return t.make(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i) {
      T v = x->val[i];
      g[i] += (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0))) * n.grad[i];
    }
  });
}

template <class T>
Var<T> square(Tape<T>& t, Var<T> x) {
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x->val[i] * x->val[i];
  return t.make(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i) g[i] += T(2) * x->val[i] * n.grad[i];
  });
}

// x {C,H,W} * m {1,H,W}, mask broadcast over channels
template <class T>
Var<T> mul_channel_mask(Tape<T>& t, Var<T> x, Var<T> m) {
  detail::require(x->val.ndim() == 3 && m->val.ndim() == 3 && m->val.dim(0) == 1 &&
                      m->val.dim(1) == x->val.dim(1) && m->val.dim(2) == x->val.dim(2),
                  "mul_channel_mask: bad shapes");
  int64_t C = x->val.dim(0), HW = x->val.dim(1) * x->val.dim(2);
  Tensor<T> out(x->val.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < HW; ++i) out[c * HW + i] = x->val[c * HW + i] * m->val[i];
  return t.make(std::move(out), {x, m}, [x, m, C, HW](Node<T>& n) {
    if (x->requires_grad) {
      Tensor<T>& g = x->grad_buffer();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) g[c * HW + i] += n.grad[c * HW + i] * m->val[i];
    }
    if (m->requires_grad) {
      Tensor<T>& g = m->grad_buffer();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) g[i] += n.grad[c * HW + i] * x->val[c * HW + i];
    }
  });
}

// ------------------------------------------------------------------reductions

template <class T>
Var<T> sum_all(Tape<T>& t, Var<T> x) {
  T s = 0;
  for (int64_t i = 0; i < x->val.size(); ++i) s += x->val[i];
  return t.make(Tensor<T>({1}, {s}), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

template <class T>
Var<T> mean_all(Tape<T>& t, Var<T> x) {
  T s = 0;
  int64_t cnt = x->val.size();
  for (int64_t i = 0; i < cnt; ++i) s += x->val[i];
  s /= T(cnt);
  return t.make(Tensor<T>({1}, {s}), {x}, [x, cnt](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    T d = n.grad[0] / T(cnt);
    for (int64_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

// -------------------------------------------------------------------- shaping

template <class T>
Var<T> reshape(Tape<T>& t, Var<T> x, std::vector<int64_t> shape) {
  Tensor<T> out = x->val.reshaped(std::move(shape));
  return t.make(std::move(out), {x}, [x](Node<T>& n) {
    if (!x->requires_grad) return;
    x->accumulate(n.grad.reshaped(x->val.shape()));
  });
}

template <class T>
Var<T> concat_c(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.ndim() == 3 && b->val.ndim() == 3 &&
                      a->val.dim(1) == b->val.dim(1) && a->val.dim(2) == b->val.dim(2),
                  "concat_c: bad shapes");
  int64_t Ca = a->val.dim(0), Cb = b->val.dim(0), HW = a->val.dim(1) * a->val.dim(2);
  Tensor<T> out({Ca + Cb, a->val.dim(1), a->val.dim(2)});
  std::copy(a->val.data(), a->val.data() + Ca * HW, out.data());
  std::copy(b->val.data(), b->val.data() + Cb * HW, out.data() + Ca * HW);
  return t.make(std::move(out), {a, b}, [a, b, Ca, Cb, HW](Node<T>& n) {
    if (a->requires_grad) {
      Tensor<T>& g = a->grad_buffer();
      for (int64_t i = 0; i < Ca * HW; ++i) g[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor<T>& g = b->grad_buffer();
      for (int64_t i = 0; i < Cb * HW; ++i) g[i] += n.grad[Ca * HW + i];
    }
  });
}

template <class T>
Var<T> slice_c(Tape<T>& t, Var<T> x, int64_t c0, int64_t c1) {
  detail::require(x->val.ndim() == 3 && 0 <= c0 && c0 < c1 && c1 <= x->val.dim(0),
                  "slice_c: bad range");
  int64_t HW = x->val.dim(1) * x->val.dim(2);
  Tensor<T> out({c1 - c0, x->val.dim(1), x->val.dim(2)});
  std::copy(x->val.data() + c0 * HW, x->val.data() + c1 * HW, out.data());
  return t.make(std::move(out), {x}, [x, c0, HW](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < n.grad.size(); ++i) g[c0 * HW + i] += n.grad[i];
  });
}

// slice of the last dimension, leading dims preserved
template <class T>
Var<T> slice_last(Tape<T>& t, Var<T> x, int64_t c0, int64_t c1) {
  int64_t C = x->val.dim(x->val.ndim() - 1);
  detail::require(0 <= c0 && c0 < c1 && c1 <= C, "slice_last: bad range");
  int64_t rows = x->val.size() / C, W = c1 - c0;
  std::vector<int64_t> shape = x->val.shape();
  shape.back() = W;
  Tensor<T> out(shape);
  for (int64_t r = 0; r < rows; ++r)
    std::copy(x->val.data() + r * C + c0, x->val.data() + r * C + c1, out.data() + r * W);
  return t.make(std::move(out), {x}, [x, c0, C, rows, W](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < W; ++j) g[r * C + c0 + j] += n.grad[r * W + j];
  });
}

template <class T>
Var<T> pad2d(Tape<T>& t, Var<T> x, int64_t top, int64_t bottom, int64_t left,
             int64_t right, Pad mode) {
  detail::require(x->val.ndim() == 3, "pad2d: want {C,H,W}");
  int64_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  int64_t H2 = H + top + bottom, W2 = W + left + right;
  Tensor<T> out({C, H2, W2});
  auto src_index = [&](int64_t y, int64_t x_) -> int64_t {
    int64_t sy = y - top, sx = x_ - left;
    switch (mode) {
      case Pad::kZero:
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) return -1;
        break;
      case Pad::kReplicate:
        sy = detail::clamp_index(sy, H);
        sx = detail::clamp_index(sx, W);
        break;
      case Pad::kReflect:
        sy = detail::reflect_index(sy, H);
        sx = detail::reflect_index(sx, W);
        break;
    }
    return sy * W + sx;
  };
  std::vector<int64_t> idx(size_t(H2 * W2));
  for (int64_t y = 0; y < H2; ++y)
    for (int64_t x_ = 0; x_ < W2; ++x_) idx[size_t(y * W2 + x_)] = src_index(y, x_);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H2 * W2; ++i)
      out[c * H2 * W2 + i] = idx[size_t(i)] < 0 ? T(0) : x->val[c * H * W + idx[size_t(i)]];
  return t.make(std::move(out), {x}, [x, C, H, W, H2, W2, idx = std::move(idx)](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H2 * W2; ++i)
        if (idx[size_t(i)] >= 0) g[c * H * W + idx[size_t(i)]] += n.grad[c * H2 * W2 + i];
  });
}

template <class T>
Var<T> crop2d(Tape<T>& t, Var<T> x, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  detail::require(x->val.ndim() == 3 && y0 >= 0 && x0 >= 0 && y0 + h <= x->val.dim(1) &&
                      x0 + w <= x->val.dim(2),
                  "crop2d: bad window");
  int64_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  Tensor<T> out({C, h, w});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < h; ++y)
      std::copy(x->val.data() + (c * H + y0 + y) * W + x0,
                x->val.data() + (c * H + y0 + y) * W + x0 + w, out.data() + (c * h + y) * w);
  return t.make(std::move(out), {x}, [x, C, H, W, y0, x0, h, w](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t j = 0; j < w; ++j)
          g[(c * H + y0 + y) * W + x0 + j] += n.grad[(c * h + y) * w + j];
  });
}

// cyclic shift: contents move down by sy and right by sx
template <class T>
Var<T> roll2d(Tape<T>& t, Var<T> x, int64_t sy, int64_t sx) {
  detail::require(x->val.ndim() == 3, "roll2d: want {C,H,W}");
  int64_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  auto wrap = [](int64_t i, int64_t n) { return ((i % n) + n) % n; };
  Tensor<T> out(x->val.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y) {
      int64_t ys = wrap(y - sy, H);
      for (int64_t xx = 0; xx < W; ++xx)
        out[(c * H + y) * W + xx] = x->val[(c * H + ys) * W + wrap(xx - sx, W)];
    }
  return t.make(std::move(out), {x}, [x, C, H, W, sy, sx, wrap](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y) {
        int64_t ys = wrap(y - sy, H);
        for (int64_t xx = 0; xx < W; ++xx)
          g[(c * H + ys) * W + wrap(xx - sx, W)] += n.grad[(c * H + y) * W + xx];
      }
  });
}

// {C*r*r, H, W} -> {C, H*r, W*r}; channel layout c*r*r + dy*r + dx
template <class T>
Var<T> pixel_shuffle(Tape<T>& t, Var<T> x, int64_t r) {
  detail::require(x->val.ndim() == 3 && x->val.dim(0) % (r * r) == 0,
                  "pixel_shuffle: channels not divisible by r^2");
  int64_t C = x->val.dim(0) / (r * r), H = x->val.dim(1), W = x->val.dim(2);
  Tensor<T> out({C, H * r, W * r});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t dy = 0; dy < r; ++dy)
      for (int64_t dx = 0; dx < r; ++dx) {
        const T* src = x->val.data() + ((c * r + dy) * r + dx) * H * W;
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx)
            out[(c * H * r + y * r + dy) * W * r + xx * r + dx] = src[y * W + xx];
      }
  return t.make(std::move(out), {x}, [x, C, H, W, r](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < r; ++dy)
        for (int64_t dx = 0; dx < r; ++dx) {
          T* dst = g.data() + ((c * r + dy) * r + dx) * H * W;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx)
              dst[y * W + xx] += n.grad[(c * H * r + y * r + dy) * W * r + xx * r + dx];
        }
  });
}

// {C,H,W} -> {nWin, M*M, C}; H and W must be multiples of M
template <class T>
Var<T> window_partition(Tape<T>& t, Var<T> x, int64_t M) {
  detail::require(x->val.ndim() == 3 && x->val.dim(1) % M == 0 && x->val.dim(2) % M == 0,
                  "window_partition: dims not divisible by window");
  int64_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  int64_t nh = H / M, nw = W / M;
  Tensor<T> out({nh * nw, M * M, C});
  for (int64_t wy = 0; wy < nh; ++wy)
    for (int64_t wx = 0; wx < nw; ++wx)
      for (int64_t iy = 0; iy < M; ++iy)
        for (int64_t ix = 0; ix < M; ++ix) {
          int64_t tok = ((wy * nw + wx) * M * M + iy * M + ix) * C;
          int64_t pix = (wy * M + iy) * W + wx * M + ix;
          for (int64_t c = 0; c < C; ++c) out[tok + c] = x->val[c * H * W + pix];
        }
  return t.make(std::move(out), {x}, [x, C, H, W, M, nh, nw](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t wy = 0; wy < nh; ++wy)
      for (int64_t wx = 0; wx < nw; ++wx)
        for (int64_t iy = 0; iy < M; ++iy)
          for (int64_t ix = 0; ix < M; ++ix) {
            int64_t tok = ((wy * nw + wx) * M * M + iy * M + ix) * C;
            int64_t pix = (wy * M + iy) * W + wx * M + ix;
            for (int64_t c = 0; c < C; ++c) g[c * H * W + pix] += n.grad[tok + c];
          }
  });
}

// inverse of window_partition
template <class T>
Var<T> window_merge(Tape<T>& t, Var<T> x, int64_t M, int64_t H, int64_t W) {
  detail::require(x->val.ndim() == 3 && x->val.dim(1) == M * M &&
                      x->val.dim(0) * M * M == (H / M) * (W / M) * M * M && H % M == 0 &&
                      W % M == 0,
                  "window_merge: bad shapes");
  int64_t C = x->val.dim(2), nw = W / M, nh = H / M;
  Tensor<T> out({C, H, W});
  for (int64_t wy = 0; wy < nh; ++wy)
    for (int64_t wx = 0; wx < nw; ++wx)
      for (int64_t iy = 0; iy < M; ++iy)
        for (int64_t ix = 0; ix < M; ++ix) {
          int64_t tok = ((wy * nw + wx) * M * M + iy * M + ix) * C;
          int64_t pix = (wy * M + iy) * W + wx * M + ix;
          for (int64_t c = 0; c < C; ++c) out[c * H * W + pix] = x->val[tok + c];
        }
  return t.make(std::move(out), {x}, [x, C, H, W, M, nh, nw](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t wy = 0; wy < nh; ++wy)
      for (int64_t wx = 0; wx < nw; ++wx)
        for (int64_t iy = 0; iy < M; ++iy)
          for (int64_t ix = 0; ix < M; ++ix) {
            int64_t tok = ((wy * nw + wx) * M * M + iy * M + ix) * C;
            int64_t pix = (wy * M + iy) * W + wx * M + ix;
            for (int64_t c = 0; c < C; ++c) g[tok + c] += n.grad[c * H * W + pix];
          }
  });
}

// {B,N,h*d} -> {B*h, N, d}
template <class T>
Var<T> split_heads(Tape<T>& t, Var<T> x, int64_t heads) {
  detail::require(x->val.ndim() == 3 && x->val.dim(2) % heads == 0, "split_heads: bad dims");
  int64_t B = x->val.dim(0), N = x->val.dim(1), C = x->val.dim(2), d = C / heads;
  Tensor<T> out({B * heads, N, d});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < N; ++i)
        std::copy(x->val.data() + (b * N + i) * C + h * d,
                  x->val.data() + (b * N + i) * C + h * d + d,
                  out.data() + ((b * heads + h) * N + i) * d);
  return t.make(std::move(out), {x}, [x, B, N, C, d, heads](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t i = 0; i < N; ++i)
          for (int64_t k = 0; k < d; ++k)
            g[(b * N + i) * C + h * d + k] += n.grad[((b * heads + h) * N + i) * d + k];
  });
}

// {B*h, N, d} -> {B, N, h*d}
template <class T>
Var<T> merge_heads(Tape<T>& t, Var<T> x, int64_t heads) {
  detail::require(x->val.ndim() == 3 && x->val.dim(0) % heads == 0, "merge_heads: bad dims");
  int64_t B = x->val.dim(0) / heads, N = x->val.dim(1), d = x->val.dim(2), C = heads * d;
  Tensor<T> out({B, N, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < N; ++i)
        std::copy(x->val.data() + ((b * heads + h) * N + i) * d,
                  x->val.data() + ((b * heads + h) * N + i) * d + d,
                  out.data() + (b * N + i) * C + h * d);
  return t.make(std::move(out), {x}, [x, B, N, d, C, heads](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t i = 0; i < N; ++i)
          for (int64_t k = 0; k < d; ++k)
            g[((b * heads + h) * N + i) * d + k] += n.grad[(b * N + i) * C + h * d + k];
  });
}

// tokens {N,C} -> map {C,H,W} with N == H*W (row-major pixel order)
template <class T>
Var<T> tokens_to_chw(Tape<T>& t, Var<T> x, int64_t H, int64_t W) {
  detail::require(x->val.ndim() == 2 && x->val.dim(0) == H * W, "tokens_to_chw: bad dims");
  int64_t C = x->val.dim(1);
  Tensor<T> out({C, H, W});
  for (int64_t i = 0; i < H * W; ++i)
    for (int64_t c = 0; c < C; ++c) out[c * H * W + i] = x->val[i * C + c];
  return t.make(std::move(out), {x}, [x, C, H, W](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < H * W; ++i)
      for (int64_t c = 0; c < C; ++c) g[i * C + c] += n.grad[c * H * W + i];
  });
}

template <class T>
Var<T> chw_to_tokens(Tape<T>& t, Var<T> x) {
  detail::require(x->val.ndim() == 3, "chw_to_tokens: want {C,H,W}");
  int64_t C = x->val.dim(0), HW = x->val.dim(1) * x->val.dim(2);
  Tensor<T> out({HW, C});
  for (int64_t i = 0; i < HW; ++i)
    for (int64_t c = 0; c < C; ++c) out[i * C + c] = x->val[c * HW + i];
  return t.make(std::move(out), {x}, [x, C, HW](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < HW; ++i)
      for (int64_t c = 0; c < C; ++c) g[c * HW + i] += n.grad[i * C + c];
  });
}

// per-frame {C,H,W} -> {C,T,H,W}
template <class T>
Var<T> stack_frames(Tape<T>& t, const std::vector<Var<T>>& frames) {
  detail::require(!frames.empty(), "stack_frames: empty");
  int64_t C = frames[0]->val.dim(0), H = frames[0]->val.dim(1), W = frames[0]->val.dim(2);
  int64_t Tn = int64_t(frames.size()), HW = H * W;
  for (auto f : frames)
    detail::require(f->val.ndim() == 3 && f->val.dim(0) == C && f->val.dim(1) == H &&
                        f->val.dim(2) == W,
                    "stack_frames: inconsistent frames");
  Tensor<T> out({C, Tn, H, W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t tt = 0; tt < Tn; ++tt)
      std::copy(frames[size_t(tt)]->val.data() + c * HW,
                frames[size_t(tt)]->val.data() + (c + 1) * HW,
                out.data() + (c * Tn + tt) * HW);
  std::vector<Var<T>> parents(frames.begin(), frames.end());
  return t.make(std::move(out), parents, [frames, C, Tn, HW](Node<T>& n) {
    for (int64_t tt = 0; tt < Tn; ++tt) {
      Var<T> f = frames[size_t(tt)];
      if (!f->requires_grad) continue;
      Tensor<T>& g = f->grad_buffer();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) g[c * HW + i] += n.grad[(c * Tn + tt) * HW + i];
    }
  });
}

// ------------------------------------------------------------------- linalg

// x {...,K} @ w {K,M} + b {M}; leading dims preserved
template <class T>
Var<T> linear(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b) {
  int64_t K = w->val.dim(0), M = w->val.dim(1);
  detail::require(x->val.dim(x->val.ndim() - 1) == K, "linear: inner dim mismatch");
  detail::require(!b || b->val.size() == M, "linear: bias size mismatch");
  int64_t N = x->val.size() / K;
  std::vector<int64_t> shape = x->val.shape();
  shape.back() = M;
  Tensor<T> out(shape);
  {
    detail::CMap<T> X(x->val.data(), N, K), W(w->val.data(), K, M);
    detail::Map<T> O(out.data(), N, M);
    O.noalias() = X * W;
    if (b)
      for (int64_t r = 0; r < N; ++r)
        for (int64_t j = 0; j < M; ++j) out[r * M + j] += b->val[j];
  }
  return t.make(std::move(out), {x, w, b}, [x, w, b, N, K, M](Node<T>& n) {
    detail::CMap<T> G(n.grad.data(), N, M);
    if (x->requires_grad) {
      detail::CMap<T> W(w->val.data(), K, M);
      detail::Map<T> GX(x->grad_buffer().data(), N, K);
      GX.noalias() += G * W.transpose();
    }
    if (w->requires_grad) {
      detail::CMap<T> X(x->val.data(), N, K);
      detail::Map<T> GW(w->grad_buffer().data(), K, M);
      GW.noalias() += X.transpose() * G;
    }
    if (b && b->requires_grad) {
      Tensor<T>& gb = b->grad_buffer();
      for (int64_t r = 0; r < N; ++r)
        for (int64_t j = 0; j < M; ++j) gb[j] += n.grad[r * M + j];
    }
  });
}

// a {B,N,K} @ b {B,K,M} -> {B,N,M}
template <class T>
Var<T> bmm(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.ndim() == 3 && b->val.ndim() == 3 && a->val.dim(0) == b->val.dim(0) &&
                      a->val.dim(2) == b->val.dim(1),
                  "bmm: bad shapes");
  int64_t B = a->val.dim(0), N = a->val.dim(1), K = a->val.dim(2), M = b->val.dim(2);
  Tensor<T> out({B, N, M});
  for (int64_t i = 0; i < B; ++i) {
    detail::CMap<T> A(a->val.data() + i * N * K, N, K), Bm(b->val.data() + i * K * M, K, M);
    detail::Map<T> O(out.data() + i * N * M, N, M);
    O.noalias() = A * Bm;
  }
  return t.make(std::move(out), {a, b}, [a, b, B, N, K, M](Node<T>& n) {
    for (int64_t i = 0; i < B; ++i) {
      detail::CMap<T> G(n.grad.data() + i * N * M, N, M);
      if (a->requires_grad) {
        detail::CMap<T> Bm(b->val.data() + i * K * M, K, M);
        detail::Map<T> GA(a->grad_buffer().data() + i * N * K, N, K);
        GA.noalias() += G * Bm.transpose();
      }
      if (b->requires_grad) {
        detail::CMap<T> A(a->val.data() + i * N * K, N, K);
        detail::Map<T> GB(b->grad_buffer().data() + i * K * M, K, M);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// a {B,N,K} @ b^T, b {B,M,K} -> {B,N,M}
template <class T>
Var<T> bmm_nt(Tape<T>& t, Var<T> a, Var<T> b) {
  detail::require(a->val.ndim() == 3 && b->val.ndim() == 3 && a->val.dim(0) == b->val.dim(0) &&
                      a->val.dim(2) == b->val.dim(2),
                  "bmm_nt: bad shapes");
  int64_t B = a->val.dim(0), N = a->val.dim(1), K = a->val.dim(2), M = b->val.dim(1);
  Tensor<T> out({B, N, M});
  for (int64_t i = 0; i < B; ++i) {
    detail::CMap<T> A(a->val.data() + i * N * K, N, K), Bm(b->val.data() + i * M * K, M, K);
    detail::Map<T> O(out.data() + i * N * M, N, M);
    O.noalias() = A * Bm.transpose();
  }
  return t.make(std::move(out), {a, b}, [a, b, B, N, K, M](Node<T>& n) {
    for (int64_t i = 0; i < B; ++i) {
      detail::CMap<T> G(n.grad.data() + i * N * M, N, M);
      if (a->requires_grad) {
        detail::CMap<T> Bm(b->val.data() + i * M * K, M, K);
        detail::Map<T> GA(a->grad_buffer().data() + i * N * K, N, K);
        GA.noalias() += G * Bm;
      }
      if (b->requires_grad) {
        detail::CMap<T> A(a->val.data() + i * N * K, N, K);
        detail::Map<T> GB(b->grad_buffer().data() + i * M * K, M, K);
        GB.noalias() += G.transpose() * A;
      }
    }
  });
}

namespace detail {

struct Conv2dDims {
  int64_t Cin, H, W, Cout, kh, kw, stride, pad, OH, OW;
};

inline Conv2dDims conv2d_dims(const std::vector<int64_t>& xs, const std::vector<int64_t>& ws,
                              int64_t stride, int64_t pad) {
  require(xs.size() == 3 && ws.size() == 4, "conv2d: want x{C,H,W} w{Co,Ci,kh,kw}");
  Conv2dDims d{xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, pad, 0, 0};
  require(ws[1] == d.Cin, "conv2d: channel mismatch");
  require(d.H + 2 * pad >= d.kh && d.W + 2 * pad >= d.kw, "conv2d: kernel larger than input");
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  return d;
}

// zero-padded im2col: out {Cin*kh*kw, OH*OW}
template <class T>
void im2col(const T* x, const Conv2dDims& d, T* cols) {
  int64_t N = d.OH * d.OW;
  for (int64_t c = 0; c < d.Cin; ++c)
    for (int64_t i = 0; i < d.kh; ++i)
      for (int64_t j = 0; j < d.kw; ++j) {
        T* row = cols + ((c * d.kh + i) * d.kw + j) * N;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          int64_t sy = oy * d.stride - d.pad + i;
          if (sy < 0 || sy >= d.H) {
            std::fill(row + oy * d.OW, row + (oy + 1) * d.OW, T(0));
            continue;
          }
          const T* xrow = x + (c * d.H + sy) * d.W;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            int64_t sx = ox * d.stride - d.pad + j;
            row[oy * d.OW + ox] = (sx < 0 || sx >= d.W) ? T(0) : xrow[sx];
          }
        }
      }
}

template <class T>
void col2im_accum(const T* cols, const Conv2dDims& d, T* gx) {
  int64_t N = d.OH * d.OW;
  for (int64_t c = 0; c < d.Cin; ++c)
    for (int64_t i = 0; i < d.kh; ++i)
      for (int64_t j = 0; j < d.kw; ++j) {
        const T* row = cols + ((c * d.kh + i) * d.kw + j) * N;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          int64_t sy = oy * d.stride - d.pad + i;
          if (sy < 0 || sy >= d.H) continue;
          T* xrow = gx + (c * d.H + sy) * d.W;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            int64_t sx = ox * d.stride - d.pad + j;
            if (sx >= 0 && sx < d.W) xrow[sx] += row[oy * d.OW + ox];
          }
        }
      }
}

}  // namespace detail

// x {Cin,H,W}, w {Cout,Cin,kh,kw}, optional b {Cout}; zero padding
template <class T>
Var<T> conv2d(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
  auto d = detail::conv2d_dims(x->val.shape(), w->val.shape(), stride, pad);
  detail::require(!b || b->val.size() == d.Cout, "conv2d: bias size mismatch");
  int64_t K = d.Cin * d.kh * d.kw, N = d.OH * d.OW;
  Tensor<T> cols({K, N});
  detail::im2col(x->val.data(), d, cols.data());
  Tensor<T> out({d.Cout, d.OH, d.OW});
  {
    detail::CMap<T> W(w->val.data(), d.Cout, K), C(cols.data(), K, N);
    detail::Map<T> O(out.data(), d.Cout, N);
    O.noalias() = W * C;
  }
  if (b)
    for (int64_t c = 0; c < d.Cout; ++c)
      for (int64_t i = 0; i < N; ++i) out[c * N + i] += b->val[c];
  // cols are recomputed in backward to keep live memory down
  return t.make(std::move(out), {x, w, b}, [x, w, b, d, K, N](Node<T>& n) {
    detail::CMap<T> G(n.grad.data(), d.Cout, N);
    if (w->requires_grad || x->requires_grad) {
      if (w->requires_grad) {
        Tensor<T> cols({K, N});
        detail::im2col(x->val.data(), d, cols.data());
        detail::CMap<T> C(cols.data(), K, N);
        detail::Map<T> GW(w->grad_buffer().data(), d.Cout, K);
        GW.noalias() += G * C.transpose();
      }
      if (x->requires_grad) {
        Tensor<T> gcols({K, N});
        detail::CMap<T> W(w->val.data(), d.Cout, K);
        detail::Map<T> GC(gcols.data(), K, N);
        GC.noalias() = W.transpose() * G;
        detail::col2im_accum(gcols.data(), d, x->grad_buffer().data());
      }
    }
    if (b && b->requires_grad) {
      Tensor<T>& gb = b->grad_buffer();
      for (int64_t c = 0; c < d.Cout; ++c)
        for (int64_t i = 0; i < N; ++i) gb[c] += n.grad[c * N + i];
    }
  });
}

namespace detail {

struct Conv3dDims {
  int64_t Cin, T_, H, W, Cout, kt, kh, kw, st, sh, sw, pt, ph, pw, OT, OH, OW;
};

inline Conv3dDims conv3d_dims(const std::vector<int64_t>& xs, const std::vector<int64_t>& ws,
                              int64_t st, int64_t sh, int64_t sw, int64_t pt, int64_t ph,
                              int64_t pw) {
  require(xs.size() == 4 && ws.size() == 5, "conv3d: want x{C,T,H,W} w{Co,Ci,kt,kh,kw}");
  Conv3dDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], ws[4],
               st,    sh,    sw,    pt,    ph,    pw,    0,     0,    0};
  require(ws[1] == d.Cin, "conv3d: channel mismatch");
  require(d.T_ + 2 * pt >= d.kt && d.H + 2 * ph >= d.kh && d.W + 2 * pw >= d.kw,
          "conv3d: kernel larger than input");
  d.OT = (d.T_ + 2 * pt - d.kt) / st + 1;
  d.OH = (d.H + 2 * ph - d.kh) / sh + 1;
  d.OW = (d.W + 2 * pw - d.kw) / sw + 1;
  return d;
}

template <class T>
void im2col3d(const T* x, const Conv3dDims& d, T* cols) {
  int64_t N = d.OT * d.OH * d.OW;
  int64_t k = 0;
  for (int64_t c = 0; c < d.Cin; ++c)
    for (int64_t it = 0; it < d.kt; ++it)
      for (int64_t iy = 0; iy < d.kh; ++iy)
        for (int64_t ix = 0; ix < d.kw; ++ix, ++k) {
          T* row = cols + k * N;
          int64_t idx = 0;
          for (int64_t ot = 0; ot < d.OT; ++ot) {
            int64_t stt = ot * d.st - d.pt + it;
            for (int64_t oy = 0; oy < d.OH; ++oy) {
              int64_t sy = oy * d.sh - d.ph + iy;
              for (int64_t ox = 0; ox < d.OW; ++ox, ++idx) {
                int64_t sx = ox * d.sw - d.pw + ix;
                bool in = stt >= 0 && stt < d.T_ && sy >= 0 && sy < d.H && sx >= 0 && sx < d.W;
                row[idx] = in ? x[((c * d.T_ + stt) * d.H + sy) * d.W + sx] : T(0);
              }
            }
          }
        }
}

template <class T>
void col2im3d_accum(const T* cols, const Conv3dDims& d, T* gx) {
  int64_t N = d.OT * d.OH * d.OW;
  int64_t k = 0;
  for (int64_t c = 0; c < d.Cin; ++c)
    for (int64_t it = 0; it < d.kt; ++it)
      for (int64_t iy = 0; iy < d.kh; ++iy)
        for (int64_t ix = 0; ix < d.kw; ++ix, ++k) {
          const T* row = cols + k * N;
          int64_t idx = 0;
          for (int64_t ot = 0; ot < d.OT; ++ot) {
            int64_t stt = ot * d.st - d.pt + it;
            for (int64_t oy = 0; oy < d.OH; ++oy) {
              int64_t sy = oy * d.sh - d.ph + iy;
              for (int64_t ox = 0; ox < d.OW; ++ox, ++idx) {
                int64_t sx = ox * d.sw - d.pw + ix;
                if (stt >= 0 && stt < d.T_ && sy >= 0 && sy < d.H && sx >= 0 && sx < d.W)
                  gx[((c * d.T_ + stt) * d.H + sy) * d.W + sx] += row[idx];
              }
            }
          }
        }
}

}  // namespace detail

template <class T>
Var<T> conv3d(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b, int64_t st, int64_t sh, int64_t sw,
              int64_t pt, int64_t ph, int64_t pw) {
  auto d = detail::conv3d_dims(x->val.shape(), w->val.shape(), st, sh, sw, pt, ph, pw);
  detail::require(!b || b->val.size() == d.Cout, "conv3d: bias size mismatch");
  int64_t K = d.Cin * d.kt * d.kh * d.kw, N = d.OT * d.OH * d.OW;
  Tensor<T> cols({K, N});
  detail::im2col3d(x->val.data(), d, cols.data());
  Tensor<T> out({d.Cout, d.OT, d.OH, d.OW});
  {
    detail::CMap<T> W(w->val.data(), d.Cout, K), C(cols.data(), K, N);
    detail::Map<T> O(out.data(), d.Cout, N);
    O.noalias() = W * C;
  }
  if (b)
    for (int64_t c = 0; c < d.Cout; ++c)
      for (int64_t i = 0; i < N; ++i) out[c * N + i] += b->val[c];
  return t.make(std::move(out), {x, w, b}, [x, w, b, d, K, N](Node<T>& n) {
    detail::CMap<T> G(n.grad.data(), d.Cout, N);
    if (w->requires_grad) {
      Tensor<T> cols({K, N});
      detail::im2col3d(x->val.data(), d, cols.data());
      detail::CMap<T> C(cols.data(), K, N);
      detail::Map<T> GW(w->grad_buffer().data(), d.Cout, K);
      GW.noalias() += G * C.transpose();
    }
    if (x->requires_grad) {
      Tensor<T> gcols({K, N});
      detail::CMap<T> W(w->val.data(), d.Cout, K);
      detail::Map<T> GC(gcols.data(), K, N);
      GC.noalias() = W.transpose() * G;
      detail::col2im3d_accum(gcols.data(), d, x->grad_buffer().data());
    }
    if (b && b->requires_grad) {
      Tensor<T>& gb = b->grad_buffer();
      for (int64_t c = 0; c < d.Cout; ++c)
        for (int64_t i = 0; i < N; ++i) gb[c] += n.grad[c * N + i];
    }
  });
}

// ------------------------------------------------------- softmax / layernorm

template <class T>
Var<T> softmax_last(Tape<T>& t, Var<T> x) {
  int64_t C = x->val.dim(x->val.ndim() - 1);
  int64_t rows = x->val.size() / C;
  Tensor<T> out(x->val.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = x->val.data() + r * C;
    T* o = out.data() + r * C;
    T mx = in[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, in[j]);
    T sum = 0;
    for (int64_t j = 0; j < C; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < C; ++j) o[j] *= inv;
  }
  Tensor<T> saved = out;
  return t.make(std::move(out), {x}, [x, rows, C, saved = std::move(saved)](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = saved.data() + r * C;
      const T* d = n.grad.data() + r * C;
      T dot = 0;
      for (int64_t j = 0; j < C; ++j) dot += d[j] * y[j];
      T* gr = g.data() + r * C;
      for (int64_t j = 0; j < C; ++j) gr[j] += y[j] * (d[j] - dot);
    }
  });
}

// x {...,C}, gamma/beta {C}; normalized over the last dim
template <class T>
Var<T> layernorm(Tape<T>& t, Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  int64_t C = x->val.dim(x->val.ndim() - 1);
  detail::require(gamma->val.size() == C && beta->val.size() == C, "layernorm: affine size");
  int64_t rows = x->val.size() / C;
  Tensor<T> out(x->val.shape());
  Tensor<T> xhat(x->val.shape());
  Tensor<T> inv_std({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = x->val.data() + r * C;
    T mu = 0;
    for (int64_t j = 0; j < C; ++j) mu += in[j];
    mu /= T(C);
    T var = 0;
    for (int64_t j = 0; j < C; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(C);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t j = 0; j < C; ++j) {
      T xh = (in[j] - mu) * is;
      xhat[r * C + j] = xh;
      out[r * C + j] = xh * gamma->val[j] + beta->val[j];
    }
  }
  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, rows, C, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Node<T>& n) {
    if (gamma->requires_grad) {
      Tensor<T>& gg = gamma->grad_buffer();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < C; ++j) gg[j] += n.grad[r * C + j] * xhat[r * C + j];
    }
    if (beta->requires_grad) {
      Tensor<T>& gb = beta->grad_buffer();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < C; ++j) gb[j] += n.grad[r * C + j];
    }
    if (x->requires_grad) {
      Tensor<T>& gx = x->grad_buffer();
      for (int64_t r = 0; r < rows; ++r) {
        const T* d = n.grad.data() + r * C;
        const T* xh = xhat.data() + r * C;
        T m1 = 0, m2 = 0;
        for (int64_t j = 0; j < C; ++j) {
          T dg = d[j] * gamma->val[j];
          m1 += dg;
          m2 += dg * xh[j];
        }
        m1 /= T(C);
        m2 /= T(C);
        for (int64_t j = 0; j < C; ++j) {
          T dg = d[j] * gamma->val[j];
          gx[r * C + j] += (dg - m1 - xh[j] * m2) * inv_std[r];
        }
      }
    }
  });
}

// rows of the last dim scaled to unit L2 norm
template <class T>
Var<T> row_l2_normalize(Tape<T>& t, Var<T> x, T eps = T(1e-12)) {
  int64_t C = x->val.dim(x->val.ndim() - 1);
  int64_t rows = x->val.size() / C;
  Tensor<T> out(x->val.shape());
  Tensor<T> inv_norm({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = x->val.data() + r * C;
    T s = 0;
    for (int64_t j = 0; j < C; ++j) s += in[j] * in[j];
    T inv = T(1) / std::sqrt(s + eps);
    inv_norm[r] = inv;
    for (int64_t j = 0; j < C; ++j) out[r * C + j] = in[j] * inv;
  }
  Tensor<T> saved = out;
  return t.make(std::move(out), {x},
                [x, rows, C, saved = std::move(saved), inv_norm = std::move(inv_norm)](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = saved.data() + r * C;
      const T* d = n.grad.data() + r * C;
      T dot = 0;
      for (int64_t j = 0; j < C; ++j) dot += d[j] * y[j];
      for (int64_t j = 0; j < C; ++j) g[r * C + j] += (d[j] - y[j] * dot) * inv_norm[r];
    }
  });
}

// ------------------------------------------------------- attention utilities

// logits {nW*h, N, N} + bias {h, N, N}, tiled over windows
template <class T>
Var<T> add_rel_bias(Tape<T>& t, Var<T> logits, Var<T> bias, int64_t heads) {
  detail::require(logits->val.ndim() == 3 && bias->val.ndim() == 3 &&
                      logits->val.dim(0) % heads == 0 && bias->val.dim(0) == heads &&
                      bias->val.dim(1) == logits->val.dim(1) &&
                      bias->val.dim(2) == logits->val.dim(2),
                  "add_rel_bias: bad shapes");
  int64_t B = logits->val.dim(0), NN = logits->val.dim(1) * logits->val.dim(2);
  Tensor<T> out(logits->val.shape());
  for (int64_t b = 0; b < B; ++b) {
    const T* bb = bias->val.data() + (b % heads) * NN;
    for (int64_t i = 0; i < NN; ++i) out[b * NN + i] = logits->val[b * NN + i] + bb[i];
  }
  return t.make(std::move(out), {logits, bias}, [logits, bias, B, NN, heads](Node<T>& n) {
    if (logits->requires_grad) logits->accumulate(n.grad);
    if (bias->requires_grad) {
      Tensor<T>& g = bias->grad_buffer();
      for (int64_t b = 0; b < B; ++b) {
        T* gb = g.data() + (b % heads) * NN;
        for (int64_t i = 0; i < NN; ++i) gb[i] += n.grad[b * NN + i];
      }
    }
  });
}

// logits {nW*h, N, N} + mask {nW, N, N} (constant, e.g. -1e9 blocks)
template <class T>
Var<T> add_window_mask(Tape<T>& t, Var<T> logits, const Tensor<T>& mask, int64_t heads) {
  detail::require(logits->val.ndim() == 3 && mask.ndim() == 3 &&
                      logits->val.dim(0) == mask.dim(0) * heads &&
                      mask.dim(1) == logits->val.dim(1) && mask.dim(2) == logits->val.dim(2),
                  "add_window_mask: bad shapes");
  int64_t B = logits->val.dim(0), NN = logits->val.dim(1) * logits->val.dim(2);
  Tensor<T> out(logits->val.shape());
  for (int64_t b = 0; b < B; ++b) {
    const T* mm = mask.data() + (b / heads) * NN;
    for (int64_t i = 0; i < NN; ++i) out[b * NN + i] = logits->val[b * NN + i] + mm[i];
  }
  return t.make(std::move(out), {logits},
                [logits](Node<T>& n) { logits->accumulate(n.grad); });
}

// out[i] = table[idx[i]]; table {R,C}
template <class T>
Var<T> gather_rows(Tape<T>& t, Var<T> table, std::vector<int64_t> idx) {
  detail::require(table->val.ndim() == 2, "gather_rows: want {R,C}");
  int64_t R = table->val.dim(0), C = table->val.dim(1), N = int64_t(idx.size());
  for (int64_t i : idx) detail::require(i >= 0 && i < R, "gather_rows: index out of range");
  Tensor<T> out({N, C});
  for (int64_t i = 0; i < N; ++i)
    std::copy(table->val.data() + idx[size_t(i)] * C, table->val.data() + (idx[size_t(i)] + 1) * C,
              out.data() + i * C);
  return t.make(std::move(out), {table}, [table, C, N, idx = std::move(idx)](Node<T>& n) {
    if (!table->requires_grad) return;
    Tensor<T>& g = table->grad_buffer();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < C; ++j) g[idx[size_t(i)] * C + j] += n.grad[i * C + j];
  });
}

// --------------------------------------------------------------- resampling

// backward bilinear warp with border replication; flow {H,W,2} holds (dx,dy).
// Differentiable in both the feature values and the flow values.
template <class T>
Var<T> warp_bilinear(Tape<T>& t, Var<T> feat, Var<T> flow) {
  detail::require(feat->val.ndim() == 3 && flow->val.ndim() == 3 && flow->val.dim(2) == 2 &&
                      flow->val.dim(0) == feat->val.dim(1) && flow->val.dim(1) == feat->val.dim(2),
                  "warp: dim mismatch");
  int64_t C = feat->val.dim(0), H = feat->val.dim(1), W = feat->val.dim(2);
  Tensor<T> out(feat->val.shape());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      T xs = T(x) + flow->val[(y * W + x) * 2 + 0];
      T ys = T(y) + flow->val[(y * W + x) * 2 + 1];
      xs = std::min(std::max(xs, T(0)), T(W - 1));
      ys = std::min(std::max(ys, T(0)), T(H - 1));
      int64_t x0 = int64_t(std::floor(xs)), y0 = int64_t(std::floor(ys));
      int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      T wx = xs - T(x0), wy = ys - T(y0);
      for (int64_t c = 0; c < C; ++c) {
        const T* f = feat->val.data() + c * H * W;
        T top = f[y0 * W + x0] * (T(1) - wx) + f[y0 * W + x1] * wx;
        T bot = f[y1 * W + x0] * (T(1) - wx) + f[y1 * W + x1] * wx;
        out[(c * H + y) * W + x] = top * (T(1) - wy) + bot * wy;
      }
    }
  return t.make(std::move(out), {feat, flow}, [feat, flow, C, H, W](Node<T>& n) {
    Tensor<T>* gf = feat->requires_grad ? &feat->grad_buffer() : nullptr;
    Tensor<T>* gl = flow->requires_grad ? &flow->grad_buffer() : nullptr;
    if (!gf && !gl) return;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        T fx = flow->val[(y * W + x) * 2 + 0];
        T fy = flow->val[(y * W + x) * 2 + 1];
        T xs = T(x) + fx, ys = T(y) + fy;
        bool clx = xs <= T(0) || xs >= T(W - 1);
        bool cly = ys <= T(0) || ys >= T(H - 1);
        xs = std::min(std::max(xs, T(0)), T(W - 1));
        ys = std::min(std::max(ys, T(0)), T(H - 1));
        int64_t x0 = int64_t(std::floor(xs)), y0 = int64_t(std::floor(ys));
        int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        T wx = xs - T(x0), wy = ys - T(y0);
        T du = 0, dv = 0;
        for (int64_t c = 0; c < C; ++c) {
          const T* f = feat->val.data() + c * H * W;
          T d = n.grad[(c * H + y) * W + x];
          if (gf) {
            T* gfc = gf->data() + c * H * W;
            gfc[y0 * W + x0] += d * (T(1) - wx) * (T(1) - wy);
            gfc[y0 * W + x1] += d * wx * (T(1) - wy);
            gfc[y1 * W + x0] += d * (T(1) - wx) * wy;
            gfc[y1 * W + x1] += d * wx * wy;
          }
          if (gl) {
            du += d * ((T(1) - wy) * (f[y0 * W + x1] - f[y0 * W + x0]) +
                       wy * (f[y1 * W + x1] - f[y1 * W + x0]));
            dv += d * ((T(1) - wx) * (f[y1 * W + x0] - f[y0 * W + x0]) +
                       wx * (f[y1 * W + x1] - f[y0 * W + x1]));
          }
        }
        if (gl) {
          if (!clx) (*gl)[(y * W + x) * 2 + 0] += du;
          if (!cly) (*gl)[(y * W + x) * 2 + 1] += dv;
        }
      }
  });
}

// align_corners=false bilinear resize {C,H,W} -> {C,H2,W2}
template <class T>
Var<T> upsample_bilinear(Tape<T>& t, Var<T> x, int64_t H2, int64_t W2) {
  detail::require(x->val.ndim() == 3 && H2 >= 1 && W2 >= 1, "upsample: bad args");
  int64_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
  // precomputed sample positions
  std::vector<int64_t> y0v(static_cast<size_t>(H2));
  std::vector<int64_t> x0v(static_cast<size_t>(W2));
  std::vector<T> wyv(static_cast<size_t>(H2));
  std::vector<T> wxv(static_cast<size_t>(W2));
  auto prep = [](int64_t n_out, int64_t n_in, std::vector<int64_t>& i0, std::vector<T>& w) {
    for (int64_t i = 0; i < n_out; ++i) {
      T s = (T(i) + T(0.5)) * T(n_in) / T(n_out) - T(0.5);
      s = std::min(std::max(s, T(0)), T(n_in - 1));
      int64_t lo = int64_t(std::floor(s));
      lo = std::min(lo, n_in - 1);
      i0[size_t(i)] = lo;
      w[size_t(i)] = s - T(lo);
    }
  };
  prep(H2, H, y0v, wyv);
  prep(W2, W, x0v, wxv);
  Tensor<T> out({C, H2, W2});
  for (int64_t c = 0; c < C; ++c) {
    const T* f = x->val.data() + c * H * W;
    for (int64_t y = 0; y < H2; ++y) {
      int64_t y0 = y0v[size_t(y)], y1 = std::min(y0 + 1, H - 1);
      T wy = wyv[size_t(y)];
      for (int64_t xx = 0; xx < W2; ++xx) {
        int64_t x0 = x0v[size_t(xx)], x1 = std::min(x0 + 1, W - 1);
        T wx = wxv[size_t(xx)];
        T top = f[y0 * W + x0] * (T(1) - wx) + f[y0 * W + x1] * wx;
        T bot = f[y1 * W + x0] * (T(1) - wx) + f[y1 * W + x1] * wx;
        out[(c * H2 + y) * W2 + xx] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return t.make(std::move(out), {x},
                [x, C, H, W, H2, W2, y0v = std::move(y0v), x0v = std::move(x0v),
                 wyv = std::move(wyv), wxv = std::move(wxv)](Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t c = 0; c < C; ++c) {
      T* gc = g.data() + c * H * W;
      for (int64_t y = 0; y < H2; ++y) {
        int64_t y0 = y0v[size_t(y)], y1 = std::min(y0 + 1, H - 1);
        T wy = wyv[size_t(y)];
        for (int64_t xx = 0; xx < W2; ++xx) {
          int64_t x0 = x0v[size_t(xx)], x1 = std::min(x0 + 1, W - 1);
          T wx = wxv[size_t(xx)];
          T d = n.grad[(c * H2 + y) * W2 + xx];
          gc[y0 * W + x0] += d * (T(1) - wx) * (T(1) - wy);
          gc[y0 * W + x1] += d * wx * (T(1) - wy);
          gc[y1 * W + x0] += d * (T(1) - wx) * wy;
          gc[y1 * W + x1] += d * wx * wy;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------- misc

template <class T>
Var<T> detach(Tape<T>& t, Var<T> x) {
  return t.leaf(x->val, false);
}

}  // namespace rtn::ad

#pragma once

#include <cmath>
#include <cstdint>

#include "rtn/ops.hpp"
#include "rtn/tape.hpp"
#include "rtn/tensor.hpp"

// sRGB <-> CIELAB under D65, with analytic Jacobians so both directions can
// run on the autodiff tape. Standard units: RGB in [0,1], L in [0,100],
// a/b roughly in [-128,127].
namespace rtn::color {

namespace detail {

constexpr double kEps = 216.0 / 24389.0;  // CIE epsilon
constexpr double kKappa = 24389.0 / 27.0;
constexpr double kXn = 0.95047;  // D65 white
constexpr double kYn = 1.0;
constexpr double kZn = 1.08883;

template <class T>
T srgb_to_linear(T u) {
  return u <= T(0.04045) ? u / T(12.92) : std::pow((u + T(0.055)) / T(1.055), T(2.4));
}

template <class T>
T srgb_to_linear_d(T u) {
  return u <= T(0.04045) ? T(1) / T(12.92)
                         : T(2.4) / T(1.055) * std::pow((u + T(0.055)) / T(1.055), T(1.4));
}

template <class T>
T linear_to_srgb(T u) {
  return u <= T(0.0031308) ? T(12.92) * u
                           : T(1.055) * std::pow(u, T(1.0 / 2.4)) - T(0.055);
}

template <class T>
T linear_to_srgb_d(T u) {
  return u <= T(0.0031308) ? T(12.92)
                           : T(1.055 / 2.4) * std::pow(u, T(1.0 / 2.4 - 1.0));
}

template <class T>
T lab_f(T t) {
  return t > T(kEps) ? std::cbrt(t) : (T(kKappa) * t + T(16)) / T(116);
}

template <class T>
T lab_f_d(T t) {
  return t > T(kEps) ? T(1.0 / 3.0) * std::pow(t, T(-2.0 / 3.0)) : T(kKappa) / T(116);
}

// sRGB primaries, D65
constexpr double kM[9] = {0.4124564, 0.3575761, 0.1804375,   // X row
                          0.2126729, 0.7151522, 0.0721750,   // Y row
                          0.0193339, 0.1191920, 0.9503041};  // Z row
constexpr double kMInv[9] = {3.2404542,  -1.5371385, -0.4985314,  //
                             -0.9692660, 1.8760108,  0.0415560,   //
                             0.0556434,  -0.2040259, 1.0572252};

}  // namespace detail

// jac (when non-null) receives d lab[i] / d rgb[j] row-major
template <class T>
void rgb_to_lab_pixel(const T rgb[3], T lab[3], T* jac = nullptr) {
  using namespace detail;
  T lin[3], dlin[3];
  for (int i = 0; i < 3; ++i) {
    lin[i] = srgb_to_linear(rgb[i]);
    if (jac) dlin[i] = srgb_to_linear_d(rgb[i]);
  }
  T xyz[3];
  for (int i = 0; i < 3; ++i)
    xyz[i] = T(kM[3 * i]) * lin[0] + T(kM[3 * i + 1]) * lin[1] + T(kM[3 * i + 2]) * lin[2];
  const T wn[3] = {T(kXn), T(kYn), T(kZn)};
  T fr[3], dfr[3];
  for (int i = 0; i < 3; ++i) {
    T t = xyz[i] / wn[i];
    fr[i] = lab_f(t);
    if (jac) dfr[i] = lab_f_d(t) / wn[i];
  }
  lab[0] = T(116) * fr[1] - T(16);
  lab[1] = T(500) * (fr[0] - fr[1]);
  lab[2] = T(200) * (fr[1] - fr[2]);
  if (jac) {
    // d lab / d xyz, then chain through the linear matrix and the gamma curve
    T dl_dxyz[9] = {0,
                    T(116) * dfr[1],
                    0,
                    T(500) * dfr[0],
                    -T(500) * dfr[1],
                    0,
                    0,
                    T(200) * dfr[1],
                    -T(200) * dfr[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += dl_dxyz[3 * i + k] * T(kM[3 * k + j]);
        jac[3 * i + j] = s * dlin[j];
      }
  }
}

// jac (when non-null) receives d rgb[i] / d lab[j] row-major; clamped outputs
// have zero rows (saturated)
template <class T>
void lab_to_rgb_pixel(const T lab[3], T rgb[3], T* jac = nullptr, bool clamp = true) {
  using namespace detail;
  T fy = (lab[0] + T(16)) / T(116);
  T fx = fy + lab[1] / T(500);
  T fz = fy - lab[2] / T(200);
  T fx3 = fx * fx * fx, fz3 = fz * fz * fz;
  T xr = fx3 > T(kEps) ? fx3 : (T(116) * fx - T(16)) / T(kKappa);
  T yr = lab[0] > T(kKappa* kEps) ? fy * fy * fy : lab[0] / T(kKappa);
  T zr = fz3 > T(kEps) ? fz3 : (T(116) * fz - T(16)) / T(kKappa);
  T xyz[3] = {xr * T(kXn), yr * T(kYn), zr * T(kZn)};
  T lin[3];
  for (int i = 0; i < 3; ++i)
    lin[i] = T(kMInv[3 * i]) * xyz[0] + T(kMInv[3 * i + 1]) * xyz[1] +
             T(kMInv[3 * i + 2]) * xyz[2];
  T unclamped[3];
  for (int i = 0; i < 3; ++i) {
    unclamped[i] = linear_to_srgb(lin[i]);
    rgb[i] = clamp ? std::min(std::max(unclamped[i], T(0)), T(1)) : unclamped[i];
  }
  if (jac) {
    // d (xr,yr,zr) / d (fx,fy,fz diag) then assemble d xyz / d lab
    T dxr = fx3 > T(kEps) ? T(3) * fx * fx : T(116) / T(kKappa);
    T dyr_dL = lab[0] > T(kKappa* kEps) ? T(3) * fy * fy / T(116) : T(1) / T(kKappa);
    T dzr = fz3 > T(kEps) ? T(3) * fz * fz : T(116) / T(kKappa);
    // fx = (L+16)/116 + a/500; fz = (L+16)/116 - b/200
    T dxyz_dlab[9] = {T(kXn) * dxr / T(116), T(kXn) * dxr / T(500),  0,
                      T(kYn) * dyr_dL,       0,                      0,
                      T(kZn) * dzr / T(116), 0,                      -T(kZn) * dzr / T(200)};
    for (int i = 0; i < 3; ++i) {
      T g = linear_to_srgb_d(lin[i]);
      if (clamp && (unclamped[i] < T(0) || unclamped[i] > T(1))) g = T(0);
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += T(kMInv[3 * i + k]) * dxyz_dlab[3 * k + j];
        jac[3 * i + j] = g * s;
      }
    }
  }
}

// raw interleaved buffers of n pixels (…,3)
void rgb_to_lab_buffer(const double* rgb, double* lab, int64_t n_pixels);
void lab_to_rgb_buffer(const double* lab, double* rgb, int64_t n_pixels);

// ------------------------------------------------------------------ tape ops
// Planar {3,H,W} maps for use inside model/loss graphs.

template <class T>
ad::Var<T> rgb_to_lab_op(ad::Tape<T>& t, ad::Var<T> x) {
  ad::detail::require(x->val.ndim() == 3 && x->val.dim(0) == 3, "rgb_to_lab: want {3,H,W}");
  int64_t HW = x->val.dim(1) * x->val.dim(2);
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < HW; ++i) {
    T rgb[3] = {x->val[i], x->val[HW + i], x->val[2 * HW + i]};
    T lab[3];
    rgb_to_lab_pixel(rgb, lab);
    out[i] = lab[0];
    out[HW + i] = lab[1];
    out[2 * HW + i] = lab[2];
  }
  return t.make(std::move(out), {x}, [x, HW](ad::Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < HW; ++i) {
      T rgb[3] = {x->val[i], x->val[HW + i], x->val[2 * HW + i]};
      T lab[3], jac[9];
      rgb_to_lab_pixel(rgb, lab, jac);
      T d[3] = {n.grad[i], n.grad[HW + i], n.grad[2 * HW + i]};
      for (int j = 0; j < 3; ++j)
        g[j * HW + i] += jac[0 * 3 + j] * d[0] + jac[1 * 3 + j] * d[1] + jac[2 * 3 + j] * d[2];
    }
  });
}

template <class T>
ad::Var<T> lab_to_rgb_op(ad::Tape<T>& t, ad::Var<T> x, bool clamp = true) {
  ad::detail::require(x->val.ndim() == 3 && x->val.dim(0) == 3, "lab_to_rgb: want {3,H,W}");
  int64_t HW = x->val.dim(1) * x->val.dim(2);
  Tensor<T> out(x->val.shape());
  for (int64_t i = 0; i < HW; ++i) {
    T lab[3] = {x->val[i], x->val[HW + i], x->val[2 * HW + i]};
    T rgb[3];
    lab_to_rgb_pixel(lab, rgb, static_cast<T*>(nullptr), clamp);
    out[i] = rgb[0];
    out[HW + i] = rgb[1];
    out[2 * HW + i] = rgb[2];
  }
  return t.make(std::move(out), {x}, [x, HW, clamp](ad::Node<T>& n) {
    if (!x->requires_grad) return;
    Tensor<T>& g = x->grad_buffer();
    for (int64_t i = 0; i < HW; ++i) {
      T lab[3] = {x->val[i], x->val[HW + i], x->val[2 * HW + i]};
      T rgb[3], jac[9];
      lab_to_rgb_pixel(lab, rgb, jac, clamp);
      T d[3] = {n.grad[i], n.grad[HW + i], n.grad[2 * HW + i]};
      for (int j = 0; j < 3; ++j)
        g[j * HW + i] += jac[0 * 3 + j] * d[0] + jac[1 * 3 + j] * d[1] + jac[2 * 3 + j] * d[2];
    }
  });
}

}  // namespace rtn::color

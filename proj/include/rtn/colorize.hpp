#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtn/colorspace.hpp"
#include "rtn/flow.hpp"
#include "rtn/model.hpp"
#include "rtn/ops.hpp"
#include "rtn/tape.hpp"
#include "rtn/tensor.hpp"
#include "rtn/videodata.hpp"

// Reference-based colorization: a correspondence encoder matches each gray
// frame against one colorized reference frame, attention over the reference
// transfers its chroma coarsely, and the restoration recurrence refines it.
// Chroma runs in scaled LAB units (L/100 in [0,1], a/128 and b/128 in
// [-1,1]) so every channel the networks see is O(1).
namespace rtn::colorize {

using ad::Tape;
using ad::Var;

inline constexpr double kTemperature = 0.01;

// one colorized frame prepared for matching
struct ColorReference {
  Tensor<double> frame_lab;  // {H,W,3}, L in [0,100], a/b in [-128,128]
  Tensor<double> features;   // {C_c, h, w} correspondence features of its luminance
  int64_t frame_index = 0;   // which sequence frame this reference colorizes
};

// Attention transfer of reference chroma onto a gray frame. gray_feat and
// ref_feat are {C, h, w} feature maps (L2-normalized per position here, so
// raw encoder outputs are fine); ref_ab is {2, h, w} scaled chroma at the
// same resolution. Correlation C(i,j) = <g_i, r_j> is tempered by
// 1/temperature and softmaxed over reference positions, giving each output
// position a convex combination of reference chroma; the result is
// upsampled bilinearly to {2, out_h, out_w}. Differentiable end to end.
// attn_out, when given, receives the {N_g, N_r} attention matrix.
template <typename T>
Var<T> coarse_color_transfer(Tape<T>& t, Var<T> gray_feat, Var<T> ref_feat, Var<T> ref_ab,
                             double temperature, int64_t out_h, int64_t out_w,
                             Tensor<T>* attn_out = nullptr) {
  if (gray_feat->val.ndim() != 3 || ref_feat->val.ndim() != 3)
    throw std::invalid_argument("coarse_color_transfer: features want {C,h,w}");
  if (gray_feat->val.dim(0) != ref_feat->val.dim(0))
    throw std::invalid_argument("coarse_color_transfer: feature channel mismatch");
  if (ref_ab->val.ndim() != 3 || ref_ab->val.dim(0) != 2 ||
      ref_ab->val.dim(1) != ref_feat->val.dim(1) || ref_ab->val.dim(2) != ref_feat->val.dim(2))
    throw std::invalid_argument("coarse_color_transfer: ref_ab must be {2,h,w} of ref_feat");
  if (!(temperature > 0.0))
    throw std::invalid_argument("coarse_color_transfer: temperature must be positive");

  const int64_t hg = gray_feat->val.dim(1), wg = gray_feat->val.dim(2);
  const int64_t ng = hg * wg;
  const int64_t nr = ref_feat->val.dim(1) * ref_feat->val.dim(2);
  const int64_t c = gray_feat->val.dim(0);

  Var<T> g = ad::row_l2_normalize(t, ad::chw_to_tokens(t, gray_feat));  // {ng, c}
  Var<T> r = ad::row_l2_normalize(t, ad::chw_to_tokens(t, ref_feat));   // {nr, c}
  Var<T> corr = ad::bmm_nt(t, ad::reshape(t, g, {1, ng, c}), ad::reshape(t, r, {1, nr, c}));
  Var<T> attn = ad::softmax_last(t, ad::scale(t, corr, T(1.0 / temperature)));  // {1,ng,nr}
  if (attn_out) {
    Tensor<T> a({ng, nr});
    std::copy(attn->val.data(), attn->val.data() + ng * nr, a.data());
    *attn_out = std::move(a);
  }
  Var<T> ab = ad::reshape(t, ad::chw_to_tokens(t, ref_ab), {1, nr, 2});
  Var<T> coarse = ad::tokens_to_chw(t, ad::reshape(t, ad::bmm(t, attn, ab), {ng, 2}), hg, wg);
  if (out_h == hg && out_w == wg) return coarse;
  return ad::upsample_bilinear(t, coarse, out_h, out_w);
}

// {H,W,3} LAB -> ({1,H,W} L/100, {2,H,W} (a,b)/128)
inline void split_scaled_lab(const Tensor<double>& lab_hwc, Tensor<double>& lum,
                             Tensor<double>& ab) {
  const int64_t H = lab_hwc.dim(0), W = lab_hwc.dim(1);
  lum = Tensor<double>({1, H, W});
  ab = Tensor<double>({2, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      lum[y * W + x] = lab_hwc[(y * W + x) * 3 + 0] / 100.0;
      ab[y * W + x] = lab_hwc[(y * W + x) * 3 + 1] / 128.0;
      ab[(H + y) * W + x] = lab_hwc[(y * W + x) * 3 + 2] / 128.0;
    }
}

namespace detail {

template <typename T>
Tensor<T> reflect_pad_chw(const Tensor<double>& chw, int64_t Hp, int64_t Wp) {
  Tape<T> tp;
  Var<T> v = ad::pad2d(tp, tp.leaf(tensor_cast<T>(chw), false), 0, Hp - chw.dim(1), 0,
                       Wp - chw.dim(2), ad::Pad::kReflect);
  return v->val;
}

}  // namespace detail

// Build the matching material from a colorized RGB frame {H,W,3}: LAB pixels
// plus correspondence features of its luminance (padded to the model's grid).
template <typename T>
ColorReference make_reference(const model::RtnModel<T>& m, const Tensor<double>& ref_rgb_hwc,
                              int64_t frame_index) {
  if (ref_rgb_hwc.ndim() != 3 || ref_rgb_hwc.dim(2) != 3)
    throw std::invalid_argument("make_reference: want an {H,W,3} RGB frame");
  const int64_t H = ref_rgb_hwc.dim(0), W = ref_rgb_hwc.dim(1);
  ColorReference ref;
  ref.frame_index = frame_index;
  ref.frame_lab = Tensor<double>({H, W, 3});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double lab[3];
      color::rgb_to_lab_pixel(ref_rgb_hwc.data() + (y * W + x) * 3, lab);
      for (int64_t k = 0; k < 3; ++k) ref.frame_lab[(y * W + x) * 3 + k] = lab[k];
    }

  const int64_t mult = m.config().pad_multiple();
  const int64_t Hp = (H + mult - 1) / mult * mult, Wp = (W + mult - 1) / mult * mult;
  Tensor<double> lum, ab;
  split_scaled_lab(ref.frame_lab, lum, ab);
  Tape<T> tp;
  Var<T> feat = m.correspondence()(
      tp, tp.leaf(detail::reflect_pad_chw<T>(lum, Hp, Wp), false));
  ref.features = tensor_cast<double>(feat->val);
  return ref;
}

// Colorize a grayscale sequence ({T,H,W,1} in [0,1]) against one reference.
// The luminance channel passes through untouched (output L = input * 100
// exactly); only chroma is synthesized. Returns a LAB sequence of the same
// length and size. Flows are estimated between adjacent gray frames.
template <typename T>
video::FrameSequence colorize_sequence(const model::RtnModel<T>& m,
                                       const video::FrameSequence& gray,
                                       const ColorReference& ref,
                                       flow::FlowProvider& flow_provider) {
  if (m.config().mode != model::Mode::kColorize)
    throw std::logic_error("colorize_sequence needs a chroma-head model");
  if (gray.c() != 1) throw std::invalid_argument("colorize_sequence: want grayscale input");
  if (gray.color_space == video::ColorSpace::kLab)
    throw std::invalid_argument("colorize_sequence: LAB input not supported");
  const int64_t n = gray.t(), H = gray.h(), W = gray.w();
  if (ref.frame_lab.dim(0) != H || ref.frame_lab.dim(1) != W)
    throw std::invalid_argument("colorize_sequence: reference size mismatch");
  if (ref.frame_index < 0 || ref.frame_index >= n)
    throw std::invalid_argument("colorize_sequence: reference frame index out of range");

  const int64_t mult = m.config().pad_multiple();
  const int64_t Hp = (H + mult - 1) / mult * mult, Wp = (W + mult - 1) / mult * mult;
  const int64_t stride = m.config().encoder_stride;

  // scaled chroma of the reference at correspondence resolution
  Tensor<double> ref_lum, ref_ab;
  split_scaled_lab(ref.frame_lab, ref_lum, ref_ab);
  const int64_t hc = ref.features.dim(1), wc = ref.features.dim(2);
  Tensor<T> ref_ab_c;
  {
    Tape<T> tp;
    Var<T> abp = tp.leaf(detail::reflect_pad_chw<T>(ref_ab, Hp, Wp), false);
    ref_ab_c = ad::upsample_bilinear(tp, abp, hc, wc)->val;
  }

  // per-frame inputs: luminance + attention-transferred coarse chroma
  std::vector<Tensor<T>> inputs(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Tensor<double> lum({1, H, W});
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) lum[y * W + x] = gray.frames[(i * H + y) * W + x];
    Tensor<T> lum_p = detail::reflect_pad_chw<T>(lum, Hp, Wp);
    Tape<T> tp;
    Var<T> lum_v = tp.leaf(lum_p, false);
    Var<T> feat = m.correspondence()(tp, lum_v);
    Var<T> coarse = coarse_color_transfer(tp, feat, tp.leaf(tensor_cast<T>(ref.features), false),
                                          tp.leaf(ref_ab_c, false), kTemperature, Hp, Wp);
    inputs[size_t(i)] = ad::concat_c(tp, lum_v, coarse)->val;
  }

  // flows between adjacent luminance frames, at feature resolution
  std::vector<Tensor<T>> flows_fwd, flows_bwd;
  for (int64_t i = 0; i + 1 < n; ++i) {
    Tensor<double> a({Hp, Wp, 1}), b({Hp, Wp, 1});
    for (int64_t y = 0; y < Hp; ++y)
      for (int64_t x = 0; x < Wp; ++x) {
        a[y * Wp + x] = double(inputs[size_t(i)][y * Wp + x]);
        b[y * Wp + x] = double(inputs[size_t(i + 1)][y * Wp + x]);
      }
    flows_fwd.push_back(tensor_cast<T>(flow::downscale_flow(flow_provider.estimate(b, a).flow, stride)));
    flows_bwd.push_back(tensor_cast<T>(flow::downscale_flow(flow_provider.estimate(a, b).flow, stride)));
  }

  std::vector<Tensor<T>> outputs = m.infer_frames(inputs, flows_fwd, flows_bwd);

  video::FrameSequence out;
  out.frames = Tensor<double>({n, H, W, 3});
  out.fps = gray.fps;
  out.color_space = video::ColorSpace::kLab;
  for (int64_t i = 0; i < n; ++i) {
    const Tensor<T>& ab = outputs[size_t(i)];  // {2, Hp, Wp} scaled chroma
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double* px = out.frames.data() + ((i * H + y) * W + x) * 3;
        px[0] = gray.frames[(i * H + y) * W + x] * 100.0;
        px[1] = std::clamp(double(ab[y * Wp + x]), -1.0, 1.0) * 128.0;
        px[2] = std::clamp(double(ab[(Hp + y) * Wp + x]), -1.0, 1.0) * 128.0;
      }
  }
  return out;
}

}  // namespace rtn::colorize

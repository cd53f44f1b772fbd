#pragma once

#include <string>
#include <vector>

#include "rtn/flow.hpp"
#include "rtn/tensor.hpp"
#include "rtn/videodata.hpp"

namespace rtn::metrics {

// Mean squared error over all elements. Throws on shape mismatch.
double mse(const Tensor<double>& pred, const Tensor<double>& target);

// 10*log10(1/MSE) for values in [0,1]. Identical inputs give +infinity,
// which report_json() renders as the string "perfect".
double psnr(const Tensor<double>& pred, const Tensor<double>& target);

// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
// K2=0.03, dynamic range 1. Accepts {H,W} or {H,W,C}; multi-channel input is
// scored per channel and averaged. The mean runs over fully-covered window
// positions only. Throws if either spatial dim is smaller than the window.
double ssim(const Tensor<double>& pred, const Tensor<double>& target);

// Sequence-level pooling used by the evaluation report: psnr over the pooled
// MSE of every sample, ssim as the mean of per-frame scores.
double sequence_psnr(const video::FrameSequence& pred, const video::FrameSequence& target);
double sequence_ssim(const video::FrameSequence& pred, const video::FrameSequence& target);

// Temporal warping error: mean over frame pairs (t-1, t) of the per-pixel
// mean of ||y_t - warp(y_{t-1}, f)||^2, where f is estimated between the
// frames of `flow_source` (same T/H/W as `seq`). Pixels are excluded when
// the forward displacement lands out of bounds or fails the forward/backward
// consistency check (occlusion_mask with threshold tau); a fully excluded
// pair drops out of the average. Returns NaN when every pair is excluded,
// which report_json() renders as null.
//
// Scoring restored output against flows from the clean source keeps the flow
// estimate from chasing the very defects being removed; pass the sequence
// itself when no clean source exists.
double warping_error(const video::FrameSequence& seq, const video::FrameSequence& flow_source,
                     flow::FlowProvider& provider, double tau = 0.01);
double warping_error(const video::FrameSequence& seq, flow::FlowProvider& provider,
                     double tau = 0.01);

// One evaluated sequence. Fields hold the raw metric values including the
// +inf / NaN sentinels.
struct SequenceScores {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
  double warping_error = 0.0;
};

// {"sequences":[{name,psnr,ssim,warping_error},...],"mean":{...}}; non-finite
// values map to "perfect" (+inf) or null (NaN), corpus means average the
// finite entries and are null when none exist.
std::string report_json(const std::vector<SequenceScores>& rows);

}  // namespace rtn::metrics

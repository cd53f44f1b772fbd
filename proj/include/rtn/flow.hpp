#pragma once

#include <memory>
#include <string>

#include "rtn/tensor.hpp"

namespace rtn::flow {

// Backward-sampling convention: flow lives on the TARGET grid and stores the
// (dx, dy) displacement into the SOURCE frame, so
// warped(p) = source_feature(p + flow(p)).
struct FlowField {
  Tensor<double> flow;    // {H,W,2}
  Tensor<uint8_t> valid;  // {H,W}, 1 where p + flow(p) lands in bounds
};

class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  // frames are {H,W,C} in [0,1]; returns the target->source field defined on
  // `target`'s grid
  virtual FlowField estimate(const Tensor<double>& target, const Tensor<double>& source) = 0;
  virtual bool trainable() const { return false; }
};

// Default estimator: coarse-to-fine exhaustive block matching over a Gaussian
// pyramid with parabolic sub-pixel refinement. Deterministic, no weights.
class BlockMatchFlow : public FlowProvider {
 public:
  explicit BlockMatchFlow(int levels = 3, int radius = 4, int patch_radius = 3)
      : levels_(levels), radius_(radius), patch_radius_(patch_radius) {}
  FlowField estimate(const Tensor<double>& target, const Tensor<double>& source) override;

 private:
  int levels_, radius_, patch_radius_;
};

// plain (non-tape) bilinear backward warp with border replication;
// feature {C,H,W}, flow {H,W,2}
Tensor<double> warp(const Tensor<double>& feature, const Tensor<double>& flow);

// 1 = consistent (non-occluded): |f_fwd(p) + f_bwd(p + f_fwd(p))|^2 <=
// tau*(|f_fwd(p)|^2 + |f_bwd(p+f_fwd(p))|^2) + 0.5
Tensor<uint8_t> occlusion_mask(const FlowField& fwd, const FlowField& bwd, double tau = 0.01);

// integer-factor downscale for warping feature-resolution states: box average
// per cell, displacement magnitudes divided by the factor
Tensor<double> downscale_flow(const Tensor<double>& flow, int64_t factor);

// on-disk cache: "RTNF" magic + H + W as little-endian int32, then H*W*2
// little-endian float32 (dx, dy interleaved)
void write_flow_cache(const std::string& path, const Tensor<double>& flow);
Tensor<double> read_flow_cache(const std::string& path);

}  // namespace rtn::flow

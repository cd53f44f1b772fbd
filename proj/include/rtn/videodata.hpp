#pragma once

#include <optional>
#include <string>

#include "rtn/tensor.hpp"

namespace rtn::video {

enum class ColorSpace { kRGB, kGray, kLab };

// Universal video carrier: {T,H,W,C} doubles. RGB/GRAY live in [0,1];
// LAB uses L in [0,100] and a,b in [-128,127].
struct FrameSequence {
  Tensor<double> frames;
  std::optional<double> fps;
  ColorSpace color_space = ColorSpace::kRGB;

  int64_t t() const { return frames.dim(0); }
  int64_t h() const { return frames.dim(1); }
  int64_t w() const { return frames.dim(2); }
  int64_t c() const { return frames.dim(3); }

  // throws std::invalid_argument when dims or value ranges are out of contract
  void validate() const;
};

// Reads `frame_%06d.png` starting at index 1 with no gaps; 8-bit samples map
// by /255, 16-bit by /65535. Errors name the offending file.
FrameSequence load_sequence(const std::string& directory);

// Writes `frame_%06d.png` (8-bit), clamping to [0,1] and quantizing by
// round(v*255). The sequence must be RGB or GRAY.
void save_sequence(const FrameSequence& seq, const std::string& directory);

// sRGB <-> CIELAB (D65) on whole sequences; see colorspace.hpp for the math
FrameSequence rgb_to_lab(const FrameSequence& seq);
FrameSequence lab_to_rgb(const FrameSequence& seq);

// frame views in the two layouts used by the pipeline
Tensor<double> frame_hwc(const FrameSequence& seq, int64_t t);
Tensor<double> frame_chw(const FrameSequence& seq, int64_t t);
void set_frame_chw(FrameSequence& seq, int64_t t, const Tensor<double>& chw);

}  // namespace rtn::video

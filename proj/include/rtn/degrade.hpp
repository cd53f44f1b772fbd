#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "rtn/rng.hpp"
#include "rtn/tensor.hpp"
#include "rtn/videodata.hpp"

// Synthetic degradation: contaminant blending + photometric damage with
// temporally coherent per-frame parameter jitter, producing training pairs
// and ground-truth defect masks.
namespace rtn::degrade {

enum class BlendMode { kAdd, kSubtract, kMultiply };
enum class NoiseKind { kGaussian, kSpeckle };
enum class ResampleMethod { kNearest, kBilinear, kBicubic };

struct ContaminantTemplate {
  Tensor<double> texture;  // {Ht,Wt} grayscale in [0,1]
  std::string id;
};

using TemplateLibrary = std::map<std::string, ContaminantTemplate>;

struct BlurParams {
  double sigma1 = 0.5;  // (0,1]
  double sigma2 = 0.5;  // (0,1]
  double theta = 0.0;   // [0,pi]
  int kernel_radius = 3;
};

// how a template is warped onto the frame before blending
struct TemplatePlacement {
  double rotation = 0.0;   // radians
  double crop_x = 0.0;     // crop window top-left, fraction of the slack
  double crop_y = 0.0;
  double crop_size = 1.0;  // crop side, fraction of min template dim
  double scale = 1.0;      // >1 zooms into the texture
  double contrast = 1.0;   // texture contrast tweak about 0.5
  int morph = 0;           // -1 erode, 0 none, +1 dilate (3x3 element)
};

struct DegradationRecipe {
  std::vector<std::string> template_ids;
  std::vector<BlendMode> blend_modes;       // per template
  std::vector<double> opacities;            // per template, [0.6,1.0]
  std::vector<TemplatePlacement> placements;
  NoiseKind noise_kind = NoiseKind::kGaussian;
  double noise_sigma = 10.0;  // [5,50] on the 0-255 scale
  BlurParams blur;
  double resample_scale = 1.0;  // [0.5,1.0]
  ResampleMethod resample_down = ResampleMethod::kBilinear;
  ResampleMethod resample_up = ResampleMethod::kBilinear;
  int jpeg_quality = 90;      // [40,100]
  double brightness = 1.0;    // [0.8,1.2]
  double contrast = 1.0;      // [0.9,1.0]
  double perturb_sigma = 0.05;
  uint64_t seed = 0;

  std::string to_json() const;
  static DegradationRecipe from_json(const std::string& text);
};

// the fully resolved parameters actually applied to one frame
struct FrameParams {
  std::vector<double> opacities;
  std::vector<std::array<double, 2>> offsets;  // placement drift, pixels
  NoiseKind noise_kind;
  double noise_sigma;
  BlurParams blur;
  double resample_scale;
  ResampleMethod resample_down, resample_up;
  int jpeg_quality;
  double brightness, contrast;
  uint64_t noise_seed;
};

struct DegradeResult {
  video::FrameSequence degraded;
  Tensor<uint8_t> defect_masks;  // {T,H,W}; 1 where blending moved a pixel > 1/255
  std::vector<FrameParams> frame_log;
};

// ------------------------------------------------------------------- stages
// All stages take/return {H,W,C} frames in [0,1].

// ADD: clamp(x + opacity*t); SUBTRACT: clamp(x - opacity*t);
// MULTIPLY: x*(1 - opacity*(1-t)); t broadcast over channels
Tensor<double> blend_contaminant(const Tensor<double>& frame, const Tensor<double>& placed,
                                 BlendMode mode, double opacity);

// GAUSSIAN: x+n; SPECKLE: x*(1+n); n ~ N(0,(sigma/255)^2) i.i.d.; clamped
Tensor<double> apply_noise(const Tensor<double>& frame, NoiseKind kind, double sigma, Rng& rng);

// kernel k(p) ~ exp(-p^T Sigma^-1 p / 2) on [-r,r]^2, normalized to sum 1,
// Sigma = R(theta) diag(s1^2,s2^2) R(theta)^T; reflected borders
Tensor<double> gaussian_blur(const Tensor<double>& frame, const BlurParams& params);

// down to (floor(s*H), floor(s*W)) then back up, possibly different filters
Tensor<double> resample_roundtrip(const Tensor<double>& frame, double scale,
                                  ResampleMethod down, ResampleMethod up);

Tensor<double> jpeg_roundtrip(const Tensor<double>& frame, int quality);

// out = clamp(brightness * clamp(contrast*(x - mean) + mean)); mean over all
// pixels and channels
Tensor<double> color_jitter(const Tensor<double>& frame, double brightness, double contrast);

// warp a template onto the frame grid as a defect-intensity map in [0,1]
// (0 = untouched); offset translates the placement in pixels
Tensor<double> place_template(const ContaminantTemplate& tmpl, const TemplatePlacement& pl,
                              double offset_x, double offset_y, int64_t H, int64_t W);

// ------------------------------------------------------------------ pipeline

// synthesize a small library of soft blobs, line scratches and dust speckle
// textures, deterministic in seed; used when no template files are supplied
TemplateLibrary procedural_template_library(uint64_t seed, int count = 6, int64_t size = 64);

// load every .png in a directory as a grayscale [0,1] template keyed by stem
TemplateLibrary load_template_library(const std::string& dir);

DegradationRecipe sample_recipe(const std::vector<std::string>& template_ids, uint64_t seed);

// applies blend -> blur -> resample -> noise -> jpeg -> jitter per frame, with
// every recipe field jittered by (1+eps), eps ~ N(0, perturb_sigma^2), clamped
// to its legal range; placement drifts as a random walk (step std 2 px).
// Deterministic in (clean, recipe, library).
DegradeResult degrade_sequence(const video::FrameSequence& clean,
                               const DegradationRecipe& recipe, const TemplateLibrary& library);

// re-render one frame from logged parameters (no rng involved)
Tensor<double> render_frame(const Tensor<double>& clean_frame, const FrameParams& params,
                            const DegradationRecipe& recipe, const TemplateLibrary& library,
                            Tensor<uint8_t>* defect_mask_out = nullptr);

}  // namespace rtn::degrade

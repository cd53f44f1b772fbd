#include "rtn/videodata.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "rtn/colorspace.hpp"

namespace fs = std::filesystem;

namespace rtn::video {

namespace {

std::string frame_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06lld.png", static_cast<long long>(index));
  return buf;
}

}  // namespace

void FrameSequence::validate() const {
  if (frames.ndim() != 4) throw std::invalid_argument("FrameSequence: want {T,H,W,C}");
  if (t() < 1 || h() < 8 || w() < 8) throw std::invalid_argument("FrameSequence: dims too small");
  if (c() < 1 || c() > 3) throw std::invalid_argument("FrameSequence: C must be 1..3");
  if (!all_finite(frames)) throw std::invalid_argument("FrameSequence: non-finite values");
  if (color_space == ColorSpace::kRGB || color_space == ColorSpace::kGray) {
    for (int64_t i = 0; i < frames.size(); ++i)
      if (frames[i] < 0.0 || frames[i] > 1.0)
        throw std::invalid_argument("FrameSequence: values outside [0,1]");
  } else if (c() == 3) {
    for (int64_t i = 0; i < frames.size(); i += 3) {
      if (frames[i] < 0.0 || frames[i] > 100.0)
        throw std::invalid_argument("FrameSequence: L outside [0,100]");
      for (int64_t k = 1; k < 3; ++k)
        if (frames[i + k] < -128.0 || frames[i + k] > 127.0)
          throw std::invalid_argument("FrameSequence: a/b outside [-128,127]");
    }
  }
}

FrameSequence load_sequence(const std::string& directory) {
  if (!fs::is_directory(directory))
    throw std::runtime_error("load_sequence: not a directory: " + directory);

  // highest frame index present, so gaps can be reported by name
  int64_t max_index = 0;
  for (const auto& e : fs::directory_iterator(directory)) {
    long long idx = 0;
    if (std::sscanf(e.path().filename().string().c_str(), "frame_%lld.png", &idx) == 1)
      max_index = std::max<int64_t>(max_index, idx);
  }
  if (max_index == 0)
    throw std::runtime_error("load_sequence: no frame_%06d.png files in " + directory);

  FrameSequence seq;
  int64_t H = 0, W = 0, C = 0;
  for (int64_t i = 1; i <= max_index; ++i) {
    fs::path p = fs::path(directory) / frame_name(i);
    if (!fs::exists(p))
      throw std::runtime_error("load_sequence: missing frame (gap): " + p.string());
    cv::Mat img = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw std::runtime_error("load_sequence: unreadable file: " + p.string());
    if (img.channels() != 1 && img.channels() != 3)
      throw std::runtime_error("load_sequence: unsupported channel count in " + p.string());

    if (i == 1) {
      H = img.rows;
      W = img.cols;
      C = img.channels();
      seq.frames = Tensor<double>({max_index, H, W, C});
      seq.color_space = (C == 1) ? ColorSpace::kGray : ColorSpace::kRGB;
    } else if (img.rows != H || img.cols != W || img.channels() != C) {
      throw std::runtime_error("load_sequence: dimension mismatch in " + p.string());
    }

    double scale = (img.depth() == CV_16U) ? 1.0 / 65535.0 : 1.0 / 255.0;
    if (img.depth() != CV_8U && img.depth() != CV_16U)
      throw std::runtime_error("load_sequence: unsupported bit depth in " + p.string());
    double* dst = seq.frames.data() + (i - 1) * H * W * C;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        for (int64_t ch = 0; ch < C; ++ch) {
          // OpenCV stores color images as BGR
          int64_t src_ch = (C == 3) ? 2 - ch : ch;
          double v = (img.depth() == CV_16U)
                         ? img.ptr<uint16_t>(int(y))[x * C + src_ch]
                         : img.ptr<uint8_t>(int(y))[x * C + src_ch];
          dst[(y * W + x) * C + ch] = v * scale;
        }
  }
  seq.validate();
  return seq;
}

void save_sequence(const FrameSequence& seq, const std::string& directory) {
  if (seq.color_space == ColorSpace::kLab)
    throw std::invalid_argument("save_sequence: convert LAB to RGB first");
  // dims only: out-of-range values are legal here and clamp at quantization
  if (seq.frames.ndim() != 4 || seq.t() < 1)
    throw std::invalid_argument("save_sequence: want {T,H,W,C}");
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (!fs::is_directory(directory))
    throw std::runtime_error("save_sequence: cannot create directory " + directory);

  int64_t H = seq.h(), W = seq.w(), C = seq.c();
  for (int64_t t = 0; t < seq.t(); ++t) {
    cv::Mat img(int(H), int(W), C == 1 ? CV_8UC1 : CV_8UC3);
    const double* src = seq.frames.data() + t * H * W * C;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        for (int64_t ch = 0; ch < C; ++ch) {
          double v = src[(y * W + x) * C + ch];
          v = std::min(std::max(v, 0.0), 1.0);
          int64_t dst_ch = (C == 3) ? 2 - ch : ch;
          img.ptr<uint8_t>(int(y))[x * C + dst_ch] = uint8_t(std::lround(v * 255.0));
        }
    fs::path p = fs::path(directory) / frame_name(t + 1);
    if (!cv::imwrite(p.string(), img))
      throw std::runtime_error("save_sequence: failed to write " + p.string());
  }
}

FrameSequence rgb_to_lab(const FrameSequence& seq) {
  if (seq.color_space != ColorSpace::kRGB || seq.c() != 3)
    throw std::invalid_argument("rgb_to_lab: source must be 3-channel RGB");
  FrameSequence out = seq;
  color::rgb_to_lab_buffer(seq.frames.data(), out.frames.data(), seq.frames.size() / 3);
  out.color_space = ColorSpace::kLab;
  return out;
}

FrameSequence lab_to_rgb(const FrameSequence& seq) {
  if (seq.color_space != ColorSpace::kLab || seq.c() != 3)
    throw std::invalid_argument("lab_to_rgb: source must be 3-channel LAB");
  FrameSequence out = seq;
  color::lab_to_rgb_buffer(seq.frames.data(), out.frames.data(), seq.frames.size() / 3);
  out.color_space = ColorSpace::kRGB;
  return out;
}

Tensor<double> frame_hwc(const FrameSequence& seq, int64_t t) {
  int64_t n = seq.h() * seq.w() * seq.c();
  Tensor<double> out({seq.h(), seq.w(), seq.c()});
  std::copy(seq.frames.data() + t * n, seq.frames.data() + (t + 1) * n, out.data());
  return out;
}

Tensor<double> frame_chw(const FrameSequence& seq, int64_t t) {
  int64_t H = seq.h(), W = seq.w(), C = seq.c();
  Tensor<double> out({C, H, W});
  const double* src = seq.frames.data() + t * H * W * C;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H * W; ++i) out[c * H * W + i] = src[i * C + c];
  return out;
}

void set_frame_chw(FrameSequence& seq, int64_t t, const Tensor<double>& chw) {
  int64_t H = seq.h(), W = seq.w(), C = seq.c();
  if (chw.ndim() != 3 || chw.dim(0) != C || chw.dim(1) != H || chw.dim(2) != W)
    throw std::invalid_argument("set_frame_chw: shape mismatch");
  double* dst = seq.frames.data() + t * H * W * C;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H * W; ++i) dst[i * C + c] = chw[c * H * W + i];
}

}  // namespace rtn::video

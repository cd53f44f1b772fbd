#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/opencv.hpp>

#include "doctest.h"
#include "rtn/colorspace.hpp"
#include "rtn/rng.hpp"
#include "rtn/videodata.hpp"
#include "testutil.hpp"

using namespace rtn;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("rtn_vd_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string frame_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06d.png", idx);
  return buf;
}

// published sRGB -> XYZ(D65) -> CIELAB pipeline, coded straight from the
// formulas as an oracle for the library conversion
void reference_rgb_to_lab(const double rgb[3], double lab[3]) {
  double lin[3];
  for (int i = 0; i < 3; ++i)
    lin[i] = rgb[i] <= 0.04045 ? rgb[i] / 12.92 : std::pow((rgb[i] + 0.055) / 1.055, 2.4);
  double x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
  double y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
  double z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
  double r[3] = {x / 0.95047, y / 1.0, z / 1.08883};
  double f[3];
  for (int i = 0; i < 3; ++i)
    f[i] = r[i] > 216.0 / 24389.0 ? std::cbrt(r[i]) : (24389.0 / 27.0 * r[i] + 16.0) / 116.0;
  lab[0] = 116.0 * f[1] - 16.0;
  lab[1] = 500.0 * (f[0] - f[1]);
  lab[2] = 200.0 * (f[1] - f[2]);
}

}  // namespace

TEST_CASE("load maps black and white frames to zeros and ones") {
  std::string d1 = fresh_dir("black");
  cv::Mat black(16, 16, CV_8UC3, cv::Scalar(0, 0, 0));
  for (int i = 1; i <= 3; ++i) cv::imwrite(d1 + "/" + frame_name(i), black);
  video::FrameSequence s = video::load_sequence(d1);
  CHECK(s.t() == 3);
  CHECK(s.h() == 16);
  CHECK(s.c() == 3);
  for (int64_t i = 0; i < s.frames.size(); ++i) CHECK(s.frames[i] == 0.0);

  std::string d2 = fresh_dir("white");
  cv::Mat white(8, 8, CV_8UC1, cv::Scalar(255));
  cv::imwrite(d2 + "/" + frame_name(1), white);
  video::FrameSequence w = video::load_sequence(d2);
  CHECK(w.t() == 1);
  CHECK(w.c() == 1);
  for (int64_t i = 0; i < w.frames.size(); ++i) CHECK(w.frames[i] == 1.0);
}

TEST_CASE("load reports gaps and mismatches by filename") {
  std::string d = fresh_dir("gap");
  cv::Mat m(16, 16, CV_8UC3, cv::Scalar(10, 20, 30));
  cv::imwrite(d + "/" + frame_name(1), m);
  cv::imwrite(d + "/" + frame_name(3), m);
  CHECK_THROWS_WITH_AS(video::load_sequence(d), doctest::Contains("frame_000002.png"),
                       std::runtime_error);

  std::string d2 = fresh_dir("dims");
  cv::Mat small(8, 8, CV_8UC3, cv::Scalar(1, 2, 3));
  cv::imwrite(d2 + "/" + frame_name(1), m);
  cv::imwrite(d2 + "/" + frame_name(2), small);
  CHECK_THROWS_WITH_AS(video::load_sequence(d2), doctest::Contains("frame_000002.png"),
                       std::runtime_error);
}

TEST_CASE("load rejects unreadable files by name") {
  std::string d = fresh_dir("bad");
  std::ofstream(d + "/" + frame_name(1)) << "not a png";
  CHECK_THROWS_WITH_AS(video::load_sequence(d), doctest::Contains("frame_000001.png"),
                       std::runtime_error);
}

TEST_CASE("save and load round trip within quantization error") {
  Rng rng(42);
  video::FrameSequence s;
  s.frames = testutil::rand_tensor({3, 12, 10, 3}, rng, 0.0, 1.0);
  s.color_space = video::ColorSpace::kRGB;
  std::string d = fresh_dir("round");
  video::save_sequence(s, d);
  video::FrameSequence r = video::load_sequence(d);
  REQUIRE(r.frames.same_shape(s.frames));
  double worst = 0.0;
  for (int64_t i = 0; i < s.frames.size(); ++i)
    worst = std::max(worst, std::abs(r.frames[i] - s.frames[i]));
  CHECK(worst <= 1.0 / 510.0 + 1e-12);
}

TEST_CASE("save quantizes by round and clamps out-of-range values") {
  video::FrameSequence s;
  s.frames = Tensor<double>({1, 8, 8, 1});
  s.color_space = video::ColorSpace::kGray;
  s.frames.fill(0.5);
  s.frames[0] = 1.2;
  s.frames[1] = -0.3;
  std::string d = fresh_dir("quant");
  video::save_sequence(s, d);
  video::FrameSequence r = video::load_sequence(d);
  CHECK(r.frames[0] == 1.0);
  CHECK(r.frames[1] == 0.0);
  CHECK(r.frames[2] == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("sixteen bit input maps by 65535") {
  std::string d = fresh_dir("deep");
  cv::Mat m(8, 8, CV_16UC1, cv::Scalar(32768));
  cv::imwrite(d + "/" + frame_name(1), m);
  video::FrameSequence s = video::load_sequence(d);
  CHECK(s.frames[0] == doctest::Approx(32768.0 / 65535.0).epsilon(1e-12));
  std::string d2 = fresh_dir("deepwhite");
  cv::Mat w(8, 8, CV_16UC1, cv::Scalar(65535));
  cv::imwrite(d2 + "/" + frame_name(1), w);
  CHECK(video::load_sequence(d2).frames[0] == 1.0);
}

TEST_CASE("lab conversion hits the standard anchor colors") {
  video::FrameSequence s;
  s.frames = Tensor<double>({1, 8, 8, 3});
  s.color_space = video::ColorSpace::kRGB;
  // rows of black, white, red
  for (int64_t x = 0; x < 8; ++x) {
    for (int64_t c = 0; c < 3; ++c) {
      s.frames[(0 * 8 + x) * 3 + c] = 0.0;
      s.frames[(1 * 8 + x) * 3 + c] = 1.0;
      s.frames[(2 * 8 + x) * 3 + c] = c == 0 ? 1.0 : 0.0;
    }
  }
  video::FrameSequence lab = video::rgb_to_lab(s);
  CHECK(lab.color_space == video::ColorSpace::kLab);
  CHECK(std::abs(lab.frames[0]) < 1e-9);   // black L
  CHECK(std::abs(lab.frames[1]) < 1e-9);   // black a
  CHECK(std::abs(lab.frames[2]) < 1e-9);   // black b
  CHECK(lab.frames[8 * 3 + 0] == doctest::Approx(100.0).epsilon(1e-6));
  CHECK(std::abs(lab.frames[8 * 3 + 1]) <= 0.01);
  CHECK(std::abs(lab.frames[8 * 3 + 2]) <= 0.01);
  double red[3] = {1.0, 0.0, 0.0}, ref[3];
  reference_rgb_to_lab(red, ref);
  for (int c = 0; c < 3; ++c)
    CHECK(lab.frames[16 * 3 + c] == doctest::Approx(ref[c]).epsilon(1e-6));
  // sanity against the well-known published values for sRGB red
  CHECK(ref[0] == doctest::Approx(53.2408).epsilon(1e-3));
  CHECK(ref[1] == doctest::Approx(80.0925).epsilon(1e-3));
  CHECK(ref[2] == doctest::Approx(67.2032).epsilon(1e-3));
}

TEST_CASE("lab round trip recovers interior rgb values") {
  Rng rng(7);
  video::FrameSequence s;
  s.frames = testutil::rand_tensor({2, 8, 8, 3}, rng, 0.01, 0.99);
  s.color_space = video::ColorSpace::kRGB;
  video::FrameSequence back = video::lab_to_rgb(video::rgb_to_lab(s));
  CHECK(back.color_space == video::ColorSpace::kRGB);
  double worst = 0.0;
  for (int64_t i = 0; i < s.frames.size(); ++i)
    worst = std::max(worst, std::abs(back.frames[i] - s.frames[i]));
  CHECK(worst <= 1e-4);
}

TEST_CASE("conversions demand the declared source space") {
  video::FrameSequence s;
  s.frames = Tensor<double>({1, 8, 8, 3});
  s.color_space = video::ColorSpace::kLab;
  CHECK_THROWS_AS(video::rgb_to_lab(s), std::invalid_argument);
  s.color_space = video::ColorSpace::kRGB;
  CHECK_THROWS_AS(video::lab_to_rgb(s), std::invalid_argument);
  video::FrameSequence lab;
  lab.frames = Tensor<double>({1, 8, 8, 3});
  lab.color_space = video::ColorSpace::kLab;
  std::string d = fresh_dir("labsave");
  CHECK_THROWS_AS(video::save_sequence(lab, d), std::invalid_argument);
}

TEST_CASE("frame views round trip") {
  Rng rng(9);
  video::FrameSequence s;
  s.frames = testutil::rand_tensor({2, 6, 5, 3}, rng, 0.0, 1.0);
  s.color_space = video::ColorSpace::kRGB;
  Tensor<double> hwc = video::frame_hwc(s, 1);
  CHECK(hwc.dim(0) == 6);
  CHECK(hwc.dim(2) == 3);
  CHECK(hwc.at(2, 3, 1) == s.frames[((1 * 6 + 2) * 5 + 3) * 3 + 1]);
  Tensor<double> chw = video::frame_chw(s, 1);
  CHECK(chw.dim(0) == 3);
  CHECK(chw.at(1, 2, 3) == hwc.at(2, 3, 1));
  Tensor<double> mod = chw;
  mod.at(0, 0, 0) = 0.123;
  video::set_frame_chw(s, 1, mod);
  CHECK(video::frame_chw(s, 1).at(0, 0, 0) == 0.123);
  CHECK(video::frame_chw(s, 0).at(0, 0, 0) != 0.123);
}

TEST_CASE("validate enforces the container invariants") {
  video::FrameSequence s;
  s.frames = Tensor<double>({1, 4, 16, 3});  // H < 8
  s.color_space = video::ColorSpace::kRGB;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.frames = Tensor<double>({1, 16, 16, 3});
  s.frames.fill(1.5);  // out of range for RGB
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.frames.fill(0.5);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("rgb to lab jacobian matches finite differences") {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    double rgb[3];
    for (double& v : rgb) v = rng.uniform(0.06, 0.97);
    double lab[3], jac[9];
    color::rgb_to_lab_pixel(rgb, lab, jac);
    const double h = 1e-5;
    for (int j = 0; j < 3; ++j) {
      double rp[3] = {rgb[0], rgb[1], rgb[2]}, rm[3] = {rgb[0], rgb[1], rgb[2]};
      rp[j] += h;
      rm[j] -= h;
      double lp[3], lm[3];
      color::rgb_to_lab_pixel(rp, lp);
      color::rgb_to_lab_pixel(rm, lm);
      for (int i = 0; i < 3; ++i) {
        double fd = (lp[i] - lm[i]) / (2.0 * h);
        double scale = std::max({std::abs(fd), std::abs(jac[3 * i + j]), 1e-3});
        CHECK(std::abs(fd - jac[3 * i + j]) / scale <= 1e-4);
      }
    }
  }
}

TEST_CASE("lab to rgb tape op passes a gradient check") {
  Rng rng(33);
  // start from reachable interior LAB values so no channel saturates
  Tensor<double> lab({3, 2, 2});
  for (int64_t p = 0; p < 4; ++p) {
    double rgb[3] = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    double l[3];
    color::rgb_to_lab_pixel(rgb, l);
    for (int64_t c = 0; c < 3; ++c) lab[c * 4 + p] = l[c];
  }
  Tensor<double> proj = testutil::rand_tensor({3, 2, 2}, rng, 0.2, 1.0);
  testutil::GradReport rep = testutil::check_gradients(
      {lab},
      [&](ad::Tape<double>& t, std::vector<ad::Var<double>>& in) {
        return testutil::project(t, color::lab_to_rgb_op(t, in[0]), proj);
      },
      1e-4, 1e-4, 1e-8);
  CHECK(rep.ok);
  CHECK(rep.checked == 12);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "rtn/colorize.hpp"
#include "rtn/flow.hpp"
#include "rtn/model.hpp"
#include "rtn/rng.hpp"
#include "testutil.hpp"

using namespace rtn;

namespace {

model::ModelConfig tiny_colorize_config() {
  model::ModelConfig c;
  c.mode = model::Mode::kColorize;
  c.encoder_channels = 8;
  c.encoder_stride = 2;
  c.num_swin_blocks = 2;
  c.window_size = 4;
  c.num_heads = 2;
  c.head_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("constant reference chroma transfers as a constant") {
  Rng rng(11);
  ad::Tape<double> t;
  ad::Var<double> g = t.leaf(testutil::rand_tensor({5, 3, 4}, rng), false);
  ad::Var<double> r = t.leaf(testutil::rand_tensor({5, 3, 4}, rng), false);
  Tensor<double> ab({2, 3, 4});
  for (int64_t i = 0; i < 12; ++i) {
    ab[i] = 0.3;
    ab[12 + i] = -0.2;
  }
  ad::Var<double> out =
      colorize::coarse_color_transfer(t, g, r, t.leaf(ab, false), 0.5, 6, 8);
  CHECK(out->val.dim(0) == 2);
  CHECK(out->val.dim(1) == 6);
  CHECK(out->val.dim(2) == 8);
  for (int64_t i = 0; i < 48; ++i) {
    CHECK(out->val[i] == doctest::Approx(0.3).epsilon(1e-9));
    CHECK(out->val[48 + i] == doctest::Approx(-0.2).epsilon(1e-9));
  }
}

TEST_CASE("matching features with a sharp temperature recover the reference chroma") {
  // four well-separated feature vectors shared by both frames: as the
  // temperature approaches zero each position attends only to itself
  ad::Tape<double> t;
  Tensor<double> feat({4, 2, 2});
  for (int64_t p = 0; p < 4; ++p)
    for (int64_t c = 0; c < 4; ++c) feat[c * 4 + p] = (c == p) ? 1.0 : 0.0;
  Tensor<double> ab({2, 2, 2});
  const double vals[8] = {0.9, -0.4, 0.2, 0.7, -0.8, 0.1, 0.5, -0.3};
  for (int64_t i = 0; i < 8; ++i) ab[i] = vals[i];
  ad::Var<double> out = colorize::coarse_color_transfer(
      t, t.leaf(feat, false), t.leaf(feat, false), t.leaf(ab, false), 1e-4, 2, 2);
  for (int64_t i = 0; i < 8; ++i) CHECK(out->val[i] == doctest::Approx(vals[i]).epsilon(1e-12));
}

TEST_CASE("two-position transfer matches the closed-form softmax blend") {
  // correlations (1, 0) at unit temperature blend {+10, -10} into
  // 10*(e-1)/(e+1)
  ad::Tape<double> t;
  Tensor<double> g({2, 1, 1});
  g[0] = 1.0;
  g[1] = 0.0;
  Tensor<double> r({2, 1, 2});
  r[0] = 1.0;  // position 0: (1,0)
  r[1] = 0.0;  // position 1: (0,1)
  r[2] = 0.0;
  r[3] = 1.0;
  Tensor<double> ab({2, 1, 2});
  ab[0] = 10.0;
  ab[1] = -10.0;
  ab[2] = 0.0;
  ab[3] = 0.0;
  Tensor<double> attn;
  ad::Var<double> out = colorize::coarse_color_transfer(
      t, t.leaf(g, false), t.leaf(r, false), t.leaf(ab, false), 1.0, 1, 1, &attn);
  const double e = std::exp(1.0);
  CHECK(out->val[0] == doctest::Approx(10.0 * (e - 1.0) / (e + 1.0)).epsilon(1e-12));
  CHECK(out->val[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(attn.dim(0) == 1);
  CHECK(attn.dim(1) == 2);
  CHECK(attn[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-12));
}

TEST_CASE("attention rows are convex weights and outputs stay in the chroma hull") {
  Rng rng(23);
  ad::Tape<double> t;
  ad::Var<double> g = t.leaf(testutil::rand_tensor({6, 4, 4}, rng), false);
  ad::Var<double> r = t.leaf(testutil::rand_tensor({6, 3, 5}, rng), false);
  Tensor<double> ab = testutil::rand_tensor({2, 3, 5}, rng);
  Tensor<double> attn;
  ad::Var<double> out = colorize::coarse_color_transfer(t, g, r, t.leaf(ab, false), 0.1,
                                                        8, 8, &attn);
  for (int64_t i = 0; i < attn.dim(0); ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < attn.dim(1); ++j) {
      CHECK(attn[i * attn.dim(1) + j] >= 0.0);
      s += attn[i * attn.dim(1) + j];
    }
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
  for (int64_t ch = 0; ch < 2; ++ch) {
    double lo = ab[ch * 15], hi = ab[ch * 15];
    for (int64_t j = 1; j < 15; ++j) {
      lo = std::min(lo, ab[ch * 15 + j]);
      hi = std::max(hi, ab[ch * 15 + j]);
    }
    for (int64_t j = 0; j < 64; ++j) {
      CHECK(out->val[ch * 64 + j] >= lo - 1e-9);
      CHECK(out->val[ch * 64 + j] <= hi + 1e-9);
    }
  }
}

TEST_CASE("chroma transfer gradients match finite differences") {
  Rng rng(31);
  std::vector<Tensor<double>> inputs;
  inputs.push_back(testutil::rand_tensor_off_zero({3, 2, 2}, rng));
  inputs.push_back(testutil::rand_tensor_off_zero({3, 2, 3}, rng));
  inputs.push_back(testutil::rand_tensor({2, 2, 3}, rng));
  Tensor<double> proj = testutil::rand_tensor({2, 4, 4}, rng);
  auto build = [&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& in) {
    ad::Var<double> out =
        colorize::coarse_color_transfer(t, in[0], in[1], in[2], 0.7, 4, 4);
    return testutil::project(t, out, proj);
  };
  testutil::GradReport rep = testutil::check_gradients(inputs, build, 1e-5, 1e-4, 1e-7);
  CHECK(rep.ok);
  CHECK(rep.checked > 0);
}

TEST_CASE("colorization keeps luminance bit-exact and bounds chroma") {
  model::ModelConfig mc = tiny_colorize_config();
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(mc, ps);

  Rng rng(7);
  video::FrameSequence gray;
  gray.frames = Tensor<double>({3, 32, 32, 1});
  for (int64_t i = 0; i < gray.frames.size(); ++i) gray.frames[i] = rng.uniform();
  gray.color_space = video::ColorSpace::kGray;

  Tensor<double> ref_rgb({32, 32, 3});
  for (int64_t i = 0; i < ref_rgb.size(); ++i) ref_rgb[i] = rng.uniform();
  colorize::ColorReference ref = colorize::make_reference(m, ref_rgb, 1);
  CHECK(ref.features.dim(0) == 64);
  CHECK(ref.features.dim(1) == 8);  // quarter of the 32-padded frame

  flow::BlockMatchFlow bm(1, 2, 2);
  video::FrameSequence out = colorize::colorize_sequence(m, gray, ref, bm);
  CHECK(out.color_space == video::ColorSpace::kLab);
  CHECK(out.t() == 3);
  CHECK(out.h() == 32);
  CHECK(out.w() == 32);
  CHECK(out.c() == 3);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t x = 0; x < 32; ++x) {
        const double* px = out.frames.data() + ((i * 32 + y) * 32 + x) * 3;
        CHECK(px[0] == gray.frames[(i * 32 + y) * 32 + x] * 100.0);  // bit-exact
        CHECK(px[1] >= -128.0);
        CHECK(px[1] <= 128.0);
        CHECK(px[2] >= -128.0);
        CHECK(px[2] <= 128.0);
      }

  // a restoration-head model must refuse to colorize
  model::ModelConfig rc = mc;
  rc.mode = model::Mode::kRestore;
  nn::ParamStore<float> ps2;
  model::RtnModel<float> m2(rc, ps2);
  CHECK_THROWS(colorize::colorize_sequence(m2, gray, ref, bm));

  // reference must match the frame size
  Tensor<double> small({16, 16, 3});
  CHECK_THROWS(colorize::colorize_sequence(m, gray, colorize::make_reference(m, small, 0), bm));
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "rtn/checkpoint.hpp"
#include "rtn/flow.hpp"
#include "rtn/model.hpp"
#include "rtn/nn.hpp"
#include "testutil.hpp"

using namespace rtn;
using ad::Tape;
using ad::Var;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.encoder_channels = 8;
  c.encoder_stride = 2;
  c.num_swin_blocks = 2;  // one plain block, one shifted
  c.window_size = 4;
  c.num_heads = 2;
  c.head_dim = 4;
  c.mask_net_layers = 3;
  return c;
}

video::FrameSequence rand_clip(int64_t T, int64_t H, int64_t W, int64_t C, uint64_t seed) {
  video::FrameSequence s;
  s.frames = Tensor<double>({T, H, W, C});
  s.color_space = C == 1 ? video::ColorSpace::kGray : video::ColorSpace::kRGB;
  Rng rng(seed);
  for (int64_t i = 0; i < s.frames.size(); ++i) s.frames[i] = rng.uniform();
  return s;
}

video::FrameSequence reversed(const video::FrameSequence& s) {
  video::FrameSequence r = s;
  int64_t T = s.t(), n = s.frames.size() / T;
  for (int64_t i = 0; i < T; ++i)
    std::copy(s.frames.data() + i * n, s.frames.data() + (i + 1) * n,
              r.frames.data() + (T - 1 - i) * n);
  return r;
}

}  // namespace

TEST_CASE("binary masks route features through exactly one branch") {
  Rng rng(3);
  Tape<double> t;
  Tensor<double> ev = testutil::rand_tensor({4, 6, 6}, rng);
  Tensor<double> wv = testutil::rand_tensor({4, 6, 6}, rng);
  Tensor<double> mv({1, 6, 6});
  for (int64_t i = 0; i < mv.size(); ++i) mv[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  Var<double> f = model::aggregate_features(t, t.leaf(ev, false), t.leaf(wv, false),
                                            t.leaf(mv, false));
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 36; ++i) {
      double want = mv[i] == 1.0 ? ev[c * 36 + i] : wv[c * 36 + i];
      CHECK(f->val[c * 36 + i] == want);
    }
}

TEST_CASE("zero-initialized refinement stage starts as the identity") {
  nn::ParamStore<double> ps;
  Rng rng(5);
  auto sr = model::SpatialRestore<double>::create(ps, "r", 8, 8, 2, 4, 2, rng);
  Tape<double> t;
  Tensor<double> xv = testutil::rand_tensor({8, 8, 8}, rng);
  Var<double> y = sr(t, t.leaf(xv, false));
  CHECK(max_abs_diff(y->val, xv) == 0.0);
}

TEST_CASE("clip forward produces aligned, finite outputs and open-gate masks") {
  auto cfg = tiny_config();
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(cfg, ps, 11);

  Rng rng(2);
  Tape<float> t;
  std::vector<Var<float>> frames;
  for (int i = 0; i < 3; ++i)
    frames.push_back(
        t.leaf(tensor_cast<float>(testutil::rand_tensor({3, 16, 16}, rng, 0.0, 1.0)), false));
  std::vector<Tensor<float>> ff(2, Tensor<float>({8, 8, 2})), fb(2, Tensor<float>({8, 8, 2}));
  auto res = m.forward_clip(t, frames, ff, fb);

  REQUIRE(res.outputs.size() == 3);
  for (auto* out : res.outputs) {
    CHECK(out->val.shape() == std::vector<int64_t>{3, 16, 16});
    CHECK(all_finite(out->val));
  }
  for (auto* mk : res.fwd_masks) {
    CHECK(mk->val.shape() == std::vector<int64_t>{1, 8, 8});
    for (int64_t i = 0; i < mk->val.size(); ++i) {
      CHECK(mk->val[i] > 0.0f);
      CHECK(mk->val[i] < 1.0f);
    }
  }
}

TEST_CASE("model config json roundtrip") {
  auto cfg = tiny_config();
  cfg.mode = model::Mode::kColorize;
  model::ModelConfig back = model::ModelConfig::from_json(cfg.to_json());
  CHECK(back.encoder_channels == cfg.encoder_channels);
  CHECK(back.encoder_stride == cfg.encoder_stride);
  CHECK(back.num_swin_blocks == cfg.num_swin_blocks);
  CHECK(back.window_size == cfg.window_size);
  CHECK(back.num_heads == cfg.num_heads);
  CHECK(back.head_dim == cfg.head_dim);
  CHECK(back.mask_net_layers == cfg.mask_net_layers);
  CHECK(back.mode == cfg.mode);
}

TEST_CASE("checkpoint file roundtrips every parameter bit-exactly") {
  auto cfg = tiny_config();
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(cfg, ps, 21);

  ckpt::Checkpoint c;
  c.config_json = cfg.to_json();
  ckpt::collect_params(c, ps);
  std::string path = (std::filesystem::temp_directory_path() / "rtn_test_ckpt.bin").string();
  ckpt::write_checkpoint(path, c);

  std::vector<Tensor<float>> orig;
  for (const auto& n : ps.names()) orig.push_back(ps.get(n));
  for (const auto& n : ps.names()) {
    Tensor<float> junk(ps.get(n).shape());
    junk.fill(7.0f);
    ps.set_value(n, junk);
  }

  ckpt::Checkpoint back = ckpt::read_checkpoint(path);
  CHECK(model::ModelConfig::from_json(back.config_json).encoder_channels == cfg.encoder_channels);
  ckpt::restore_params(back, ps);
  for (size_t i = 0; i < ps.names().size(); ++i)
    CHECK(max_abs_diff(ps.get(ps.names()[i]), orig[i]) == 0.0f);
  std::remove(path.c_str());
}

TEST_CASE("internal padding matches manual padding plus crop") {
  auto cfg = tiny_config();  // pad multiple 16
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(cfg, ps, 31);

  video::FrameSequence in = rand_clip(2, 24, 24, 3, 77);
  flow::BlockMatchFlow prov(2, 3, 2);
  model::RestoreResult a = m.restore_sequence(in, prov);

  // pre-pad with the same reflect rule, run, then crop the result
  video::FrameSequence pre;
  pre.frames = Tensor<double>({2, 32, 32, 3});
  pre.color_space = video::ColorSpace::kRGB;
  for (int64_t i = 0; i < 2; ++i) {
    Tape<double> tp;
    Var<double> p = ad::pad2d(tp, tp.leaf(video::frame_chw(in, i), false), 0, 8, 0, 8,
                              ad::Pad::kReflect);
    video::set_frame_chw(pre, i, p->val);
  }
  model::RestoreResult b = m.restore_sequence(pre, prov);

  double dmax = 0;
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t y = 0; y < 24; ++y)
      for (int64_t x = 0; x < 24; ++x)
        for (int64_t c = 0; c < 3; ++c)
          dmax = std::max(dmax, std::abs(a.restored.frames[((i * 24 + y) * 24 + x) * 3 + c] -
                                         b.restored.frames[((i * 32 + y) * 32 + x) * 3 + c]));
  CHECK(dmax == 0.0);
}

TEST_CASE("swapping direction weights makes restoration time-reversal equivariant") {
  auto cfg = tiny_config();
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(cfg, ps, 41);

  video::FrameSequence in = rand_clip(3, 16, 16, 3, 55);
  flow::BlockMatchFlow prov(1, 3, 2);
  model::RestoreResult fwd = m.restore_sequence(in, prov);

  testutil::swap_direction_weights(ps);
  model::RestoreResult rev = m.restore_sequence(reversed(in), prov);

  double dmax = 0;
  int64_t n = 16 * 16 * 3;
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < n; ++j)
      dmax = std::max(dmax, std::abs(fwd.restored.frames[i * n + j] -
                                     rev.restored.frames[(2 - i) * n + j]));
  CHECK(dmax <= 1e-5);
}

TEST_CASE("grayscale input rides replicated channels") {
  auto cfg = tiny_config();
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(cfg, ps, 51);
  video::FrameSequence in = rand_clip(2, 16, 16, 1, 66);
  flow::BlockMatchFlow prov(1, 3, 2);
  model::RestoreResult r = m.restore_sequence(in, prov);
  CHECK(r.restored.frames.shape() == std::vector<int64_t>{2, 16, 16, 3});
  CHECK(all_finite(r.restored.frames));
}

TEST_CASE("analytic parameter gradients match finite differences through a clip") {
  auto cfg = tiny_config();
  nn::ParamStore<double> ps;
  model::RtnModel<double> m(cfg, ps, 61);

  Rng rng(9);
  std::vector<Tensor<double>> frames;
  for (int i = 0; i < 2; ++i) frames.push_back(testutil::rand_tensor({3, 16, 16}, rng, 0.0, 1.0));
  // fractional flows keep bilinear warp away from its integer-coordinate kinks
  std::vector<Tensor<double>> ff = {testutil::rand_tensor({8, 8, 2}, rng, 0.2, 0.7)};
  std::vector<Tensor<double>> fb = {testutil::rand_tensor({8, 8, 2}, rng, 0.2, 0.7)};
  Tensor<double> proj0 = testutil::rand_tensor({3, 16, 16}, rng);
  Tensor<double> projm = testutil::rand_tensor({1, 8, 8}, rng);

  auto build = [&](Tape<double>& t) -> Var<double> {
    std::vector<Var<double>> fv;
    for (const auto& f : frames) fv.push_back(t.leaf(f, false));
    auto res = m.forward_clip(t, fv, ff, fb);
    Var<double> loss = testutil::project(t, res.outputs[0], proj0);
    loss = ad::add(t, loss, testutil::project(t, res.outputs[1], proj0));
    loss = ad::add(t, loss, testutil::project(t, res.fwd_masks[0], projm));
    return loss;
  };

  Tape<double> t0;  // must outlive the FD loop: grads live on the param nodes
  auto loss_backward = [&]() -> double {
    Var<double> L = build(t0);
    t0.backward(L);
    return L->val[0];
  };
  auto loss_eval = [&]() -> double {
    Tape<double> t;
    return build(t)->val[0];
  };

  Rng pick(13);
  auto rep = testutil::check_param_gradients(ps, loss_eval, loss_backward, pick, 40, 1e-5, 1e-3,
                                             1e-8);
  CHECK(rep.checked == 40);
  CHECK(rep.ok);
}

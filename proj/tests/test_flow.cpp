#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "rtn/flow.hpp"
#include "rtn/ops.hpp"
#include "rtn/rng.hpp"
#include "testutil.hpp"

using namespace rtn;

namespace {

// smooth deterministic texture so block matching has gradients to lock onto
Tensor<double> texture(int64_t H, int64_t W, double phase) {
  Tensor<double> t({H, W, 1});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      t.at(y, x, 0) = 0.5 + 0.2 * std::sin(0.35 * double(x) + phase) +
                      0.15 * std::cos(0.23 * double(y) - 0.4 * phase) +
                      0.1 * std::sin(0.11 * double(x + y));
  return t;
}

double median_of(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

Tensor<double> const_flow(int64_t H, int64_t W, double dx, double dy) {
  Tensor<double> f({H, W, 2});
  for (int64_t p = 0; p < H * W; ++p) {
    f[p * 2 + 0] = dx;
    f[p * 2 + 1] = dy;
  }
  return f;
}

flow::FlowField field_of(Tensor<double> f) {
  flow::FlowField ff;
  int64_t H = f.dim(0), W = f.dim(1);
  ff.flow = std::move(f);
  ff.valid = Tensor<uint8_t>({H, W});
  ff.valid.fill(1);
  return ff;
}

}  // namespace

TEST_CASE("warp with zero flow is the identity") {
  Rng rng(1);
  Tensor<double> feat = testutil::rand_tensor({2, 7, 9}, rng, 0.0, 1.0);
  Tensor<double> zero({7, 9, 2});
  Tensor<double> out = flow::warp(feat, zero);
  for (int64_t i = 0; i < feat.size(); ++i) CHECK(out[i] == feat[i]);
}

TEST_CASE("warp shifts by integer flows exactly on the interior") {
  Rng rng(2);
  Tensor<double> feat = testutil::rand_tensor({1, 6, 10}, rng, 0.0, 1.0);
  Tensor<double> out = flow::warp(feat, const_flow(6, 10, 1.0, 0.0));
  for (int64_t y = 0; y < 6; ++y) {
    for (int64_t x = 0; x + 1 < 10; ++x)
      CHECK(std::abs(out.at(0, y, x) - feat.at(0, y, x + 1)) <= 1e-6);
    // border replication: the last column samples itself
    CHECK(out.at(0, y, 9) == feat.at(0, y, 9));
  }
}

TEST_CASE("warp interpolates a ramp by the exact fractional offset") {
  const int64_t H = 5, W = 8;
  Tensor<double> ramp({1, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) ramp.at(0, y, x) = double(x) / double(W);
  Tensor<double> out = flow::warp(ramp, const_flow(H, W, 0.5, 0.0));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x + 1 < W; ++x)
      CHECK(out.at(0, y, x) == doctest::Approx(ramp.at(0, y, x) + 0.5 / double(W)).epsilon(1e-12));
}

TEST_CASE("warp validates dimensions") {
  Tensor<double> feat({1, 6, 6});
  Tensor<double> bad({5, 6, 2});
  CHECK_THROWS_AS(flow::warp(feat, bad), std::invalid_argument);
}

TEST_CASE("plain warp agrees with the tape op") {
  Rng rng(3);
  Tensor<double> feat = testutil::rand_tensor({2, 6, 6}, rng, 0.0, 1.0);
  Tensor<double> fl = testutil::rand_tensor({6, 6, 2}, rng, -1.3, 1.3);
  Tensor<double> plain = flow::warp(feat, fl);
  ad::Tape<double> t;
  ad::Var<double> y = ad::warp_bilinear(t, t.leaf(feat), t.leaf(fl));
  for (int64_t i = 0; i < plain.size(); ++i)
    CHECK(plain[i] == doctest::Approx(y->val[i]).epsilon(1e-12));
}

TEST_CASE("block matching returns zero flow for identical frames") {
  Tensor<double> a = texture(64, 64, 0.0);
  flow::BlockMatchFlow bm;
  flow::FlowField f = bm.estimate(a, a);
  CHECK(f.flow.dim(0) == 64);
  for (int64_t i = 0; i < f.flow.size(); ++i) CHECK(f.flow[i] == 0.0);
  for (int64_t i = 0; i < f.valid.size(); ++i) CHECK(f.valid[i] == 1);
}

TEST_CASE("block matching recovers a synthetic translation") {
  const int64_t H = 64, W = 64;
  Tensor<double> a({H, W, 1}), b({H, W, 1});
  Tensor<double> base = texture(H, W, 1.7);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      a.at(y, x, 0) = base.at(y, x, 0);
      b.at(y, x, 0) = base.at(y, (x + 3) % W, 0);  // b(x) = a(x+3), wrap padding
    }
  flow::BlockMatchFlow bm;
  flow::FlowField f = bm.estimate(b, a);
  std::vector<double> dxs, dys;
  for (int64_t p = 0; p < H * W; ++p) {
    dxs.push_back(f.flow[p * 2 + 0]);
    dys.push_back(f.flow[p * 2 + 1]);
  }
  CHECK(std::abs(median_of(dxs) - 3.0) <= 0.5);
  CHECK(std::abs(median_of(dys)) <= 0.5);
}

TEST_CASE("block matching on uncorrelated noise stays inside the search window") {
  Rng rng(5);
  Tensor<double> a = testutil::rand_tensor({64, 64, 1}, rng, 0.0, 1.0);
  Tensor<double> b = testutil::rand_tensor({64, 64, 1}, rng, 0.0, 1.0);
  // single level: the search window alone bounds the output
  flow::BlockMatchFlow bm(1, 4, 3);
  flow::FlowField f = bm.estimate(a, b);
  std::vector<double> dxs, dys;
  for (int64_t p = 0; p < 64 * 64; ++p) {
    dxs.push_back(f.flow[p * 2 + 0]);
    dys.push_back(f.flow[p * 2 + 1]);
  }
  CHECK(std::abs(median_of(dxs)) <= 4.0);
  CHECK(std::abs(median_of(dys)) <= 4.0);
}

TEST_CASE("block matching rejects frames smaller than the pyramid floor") {
  Tensor<double> a = texture(32, 32, 0.0);
  flow::BlockMatchFlow bm(3, 4, 3);  // needs min dim >= 2^3 * 8 = 64
  CHECK_THROWS_AS(bm.estimate(a, a), std::invalid_argument);
}

TEST_CASE("occlusion mask accepts consistent flows and rejects inconsistent ones") {
  const int64_t H = 10, W = 12;
  flow::FlowField zero = field_of(const_flow(H, W, 0.0, 0.0));
  Tensor<uint8_t> m0 = flow::occlusion_mask(zero, zero, 0.01);
  for (int64_t i = 0; i < H * W; ++i) CHECK(m0[i] == 1);

  flow::FlowField fwd = field_of(const_flow(H, W, 2.0, 0.0));
  flow::FlowField bwd = field_of(const_flow(H, W, -2.0, 0.0));
  Tensor<uint8_t> m1 = flow::occlusion_mask(fwd, bwd, 0.01);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x + 2 < W; ++x) CHECK(m1[y * W + x] == 1);

  // residual |(4,0)|^2 = 16 > 0.01*(4+4) + 0.5
  flow::FlowField same = field_of(const_flow(H, W, 2.0, 0.0));
  Tensor<uint8_t> m2 = flow::occlusion_mask(fwd, same, 0.01);
  for (int64_t i = 0; i < H * W; ++i) CHECK(m2[i] == 0);

  flow::FlowField odd = field_of(const_flow(H, W + 1, 0.0, 0.0));
  CHECK_THROWS_AS(flow::occlusion_mask(zero, odd, 0.01), std::invalid_argument);
}

TEST_CASE("downscale flow averages cells and rescales displacements") {
  Tensor<double> f = const_flow(8, 8, 4.0, -2.0);
  Tensor<double> d = flow::downscale_flow(f, 2);
  CHECK(d.dim(0) == 4);
  CHECK(d.dim(1) == 4);
  for (int64_t p = 0; p < 16; ++p) {
    CHECK(d[p * 2 + 0] == doctest::Approx(2.0));
    CHECK(d[p * 2 + 1] == doctest::Approx(-1.0));
  }
  CHECK_THROWS_AS(flow::downscale_flow(f, 3), std::invalid_argument);
}

TEST_CASE("flow cache round trips through float32") {
  Rng rng(7);
  Tensor<double> f = testutil::rand_tensor({9, 11, 2}, rng, -8.0, 8.0);
  std::filesystem::path p = std::filesystem::temp_directory_path() / "rtn_flow_cache.bin";
  flow::write_flow_cache(p.string(), f);
  Tensor<double> r = flow::read_flow_cache(p.string());
  REQUIRE(r.same_shape(f));
  for (int64_t i = 0; i < f.size(); ++i) CHECK(r[i] == double(float(f[i])));

  std::filesystem::path bad = std::filesystem::temp_directory_path() / "rtn_flow_bad.bin";
  std::ofstream(bad) << "garbage";
  CHECK_THROWS_AS(flow::read_flow_cache(bad.string()), std::runtime_error);
}

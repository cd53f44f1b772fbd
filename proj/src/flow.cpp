#include "rtn/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace rtn::flow {

namespace {

int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

// mean over channels -> {H,W} grayscale
Tensor<double> to_gray(const Tensor<double>& frame) {
  int64_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  Tensor<double> g({H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += frame[i * C + c];
    g[i] = s / double(C);
  }
  return g;
}

// separable binomial 5-tap blur (reflected borders) then 2x decimation
Tensor<double> pyr_down(const Tensor<double>& img) {
  static const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  int64_t H = img.dim(0), W = img.dim(1);
  Tensor<double> tmp({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double s = 0;
      for (int64_t j = -2; j <= 2; ++j) s += k[j + 2] * img[y * W + reflect(x + j, W)];
      tmp[y * W + x] = s;
    }
  int64_t H2 = (H + 1) / 2, W2 = (W + 1) / 2;
  Tensor<double> out({H2, W2});
  for (int64_t y = 0; y < H2; ++y)
    for (int64_t x = 0; x < W2; ++x) {
      double s = 0;
      for (int64_t j = -2; j <= 2; ++j) s += k[j + 2] * tmp[reflect(2 * y + j, H) * W + 2 * x];
      out[y * W2 + x] = s;
    }
  return out;
}

double patch_ssd(const Tensor<double>& a, const Tensor<double>& b, int64_t ay, int64_t ax,
                 int64_t by, int64_t bx, int pr) {
  int64_t Ha = a.dim(0), Wa = a.dim(1), Hb = b.dim(0), Wb = b.dim(1);
  double s = 0;
  for (int64_t dy = -pr; dy <= pr; ++dy)
    for (int64_t dx = -pr; dx <= pr; ++dx) {
      double va = a[reflect(ay + dy, Ha) * Wa + reflect(ax + dx, Wa)];
      double vb = b[reflect(by + dy, Hb) * Wb + reflect(bx + dx, Wb)];
      s += (va - vb) * (va - vb);
    }
  return s;
}

// vertex of the parabola through (-1,c0),(0,c1),(1,c2), clamped to [-0.5,0.5];
// 0 when the fit is degenerate or c1 is already an exact match
double parabolic_offset(double c0, double c1, double c2) {
  if (c1 == 0.0) return 0.0;
  double denom = c0 - 2.0 * c1 + c2;
  if (denom <= 0.0) return 0.0;
  double d = 0.5 * (c0 - c2) / denom;
  return std::min(std::max(d, -0.5), 0.5);
}

}  // namespace

FlowField BlockMatchFlow::estimate(const Tensor<double>& target, const Tensor<double>& source) {
  if (target.ndim() != 3 || source.ndim() != 3 || target.dim(0) != source.dim(0) ||
      target.dim(1) != source.dim(1) || target.dim(2) != source.dim(2))
    throw std::invalid_argument("BlockMatchFlow: frames must have identical dims");
  int64_t H = target.dim(0), W = target.dim(1);
  int64_t min_side = (int64_t(1) << levels_) * 8;
  if (H < min_side || W < min_side)
    throw std::invalid_argument("BlockMatchFlow: frames smaller than 2^levels * 8");

  std::vector<Tensor<double>> pt{to_gray(target)}, ps{to_gray(source)};
  for (int l = 1; l < levels_; ++l) {
    pt.push_back(pyr_down(pt.back()));
    ps.push_back(pyr_down(ps.back()));
  }

  Tensor<double> fl({pt.back().dim(0), pt.back().dim(1), 2});
  for (int l = levels_ - 1; l >= 0; --l) {
    const Tensor<double>&tg = pt[size_t(l)], &sr = ps[size_t(l)];
    int64_t h = tg.dim(0), w = tg.dim(1);
    if (l != levels_ - 1) {
      // upsample the coarser estimate: nearest parent cell, doubled magnitude
      Tensor<double> up({h, w, 2});
      int64_t hc = fl.dim(0), wc = fl.dim(1);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          int64_t yc = std::min(y / 2, hc - 1), xc = std::min(x / 2, wc - 1);
          up[(y * w + x) * 2 + 0] = 2.0 * fl[(yc * wc + xc) * 2 + 0];
          up[(y * w + x) * 2 + 1] = 2.0 * fl[(yc * wc + xc) * 2 + 1];
        }
      fl = std::move(up);
    }
    Tensor<double> refined({h, w, 2});
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int64_t bx = int64_t(std::lround(fl[(y * w + x) * 2 + 0]));
        int64_t by = int64_t(std::lround(fl[(y * w + x) * 2 + 1]));
        // exhaustive search around the propagated estimate; ties prefer the
        // smaller displacement so identical frames give exactly zero
        double best = std::numeric_limits<double>::infinity();
        int64_t bu = 0, bv = 0;
        for (int64_t v = -radius_; v <= radius_; ++v)
          for (int64_t u = -radius_; u <= radius_; ++u) {
            int64_t du = bx + u, dv = by + v;
            double c = patch_ssd(tg, sr, y, x, y + dv, x + du, patch_radius_);
            double norm = double(du * du + dv * dv);
            double bnorm = double(bu * bu + bv * bv);
            if (c < best || (c == best && (norm < bnorm || (norm == bnorm && (dv < bv || (dv == bv && du < bu)))))) {
              best = c;
              bu = du;
              bv = dv;
            }
          }
        double cx0 = patch_ssd(tg, sr, y, x, y + bv, x + bu - 1, patch_radius_);
        double cx2 = patch_ssd(tg, sr, y, x, y + bv, x + bu + 1, patch_radius_);
        double cy0 = patch_ssd(tg, sr, y, x, y + bv - 1, x + bu, patch_radius_);
        double cy2 = patch_ssd(tg, sr, y, x, y + bv + 1, x + bu, patch_radius_);
        refined[(y * w + x) * 2 + 0] = double(bu) + parabolic_offset(cx0, best, cx2);
        refined[(y * w + x) * 2 + 1] = double(bv) + parabolic_offset(cy0, best, cy2);
      }
    fl = std::move(refined);
  }

  double bound = double(std::max(H, W));
  FlowField out;
  out.flow = std::move(fl);
  out.valid = Tensor<uint8_t>({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double dx = out.flow[(y * W + x) * 2 + 0], dy = out.flow[(y * W + x) * 2 + 1];
      dx = std::min(std::max(dx, -bound), bound);
      dy = std::min(std::max(dy, -bound), bound);
      out.flow[(y * W + x) * 2 + 0] = dx;
      out.flow[(y * W + x) * 2 + 1] = dy;
      double sx = double(x) + dx, sy = double(y) + dy;
      out.valid[y * W + x] = (sx >= 0 && sx <= double(W - 1) && sy >= 0 && sy <= double(H - 1));
    }
  return out;
}

Tensor<double> warp(const Tensor<double>& feature, const Tensor<double>& fl) {
  if (feature.ndim() != 3 || fl.ndim() != 3 || fl.dim(2) != 2 ||
      fl.dim(0) != feature.dim(1) || fl.dim(1) != feature.dim(2))
    throw std::invalid_argument("warp: dim mismatch");
  int64_t C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
  Tensor<double> out(feature.shape());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double xs = double(x) + fl[(y * W + x) * 2 + 0];
      double ys = double(y) + fl[(y * W + x) * 2 + 1];
      xs = std::min(std::max(xs, 0.0), double(W - 1));
      ys = std::min(std::max(ys, 0.0), double(H - 1));
      int64_t x0 = int64_t(std::floor(xs)), y0 = int64_t(std::floor(ys));
      int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      double wx = xs - double(x0), wy = ys - double(y0);
      for (int64_t c = 0; c < C; ++c) {
        const double* f = feature.data() + c * H * W;
        double top = f[y0 * W + x0] * (1.0 - wx) + f[y0 * W + x1] * wx;
        double bot = f[y1 * W + x0] * (1.0 - wx) + f[y1 * W + x1] * wx;
        out[(c * H + y) * W + x] = top * (1.0 - wy) + bot * wy;
      }
    }
  return out;
}

Tensor<uint8_t> occlusion_mask(const FlowField& fwd, const FlowField& bwd, double tau) {
  if (!fwd.flow.same_shape(bwd.flow))
    throw std::invalid_argument("occlusion_mask: dim mismatch");
  int64_t H = fwd.flow.dim(0), W = fwd.flow.dim(1);
  // sample the backward field where the forward displacement lands
  Tensor<double> bwd_chw({2, H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    bwd_chw[i] = bwd.flow[i * 2 + 0];
    bwd_chw[H * W + i] = bwd.flow[i * 2 + 1];
  }
  Tensor<double> bwd_at = warp(bwd_chw, fwd.flow);
  Tensor<uint8_t> mask({H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    double fx = fwd.flow[i * 2 + 0], fy = fwd.flow[i * 2 + 1];
    double bx = bwd_at[i], by = bwd_at[H * W + i];
    double rx = fx + bx, ry = fy + by;
    double resid = rx * rx + ry * ry;
    double mag = fx * fx + fy * fy + bx * bx + by * by;
    mask[i] = resid <= tau * mag + 0.5;
  }
  return mask;
}

Tensor<double> downscale_flow(const Tensor<double>& fl, int64_t factor) {
  if (fl.ndim() != 3 || fl.dim(2) != 2 || fl.dim(0) % factor != 0 || fl.dim(1) % factor != 0)
    throw std::invalid_argument("downscale_flow: dims not divisible by factor");
  int64_t H = fl.dim(0), W = fl.dim(1), h = H / factor, w = W / factor;
  Tensor<double> out({h, w, 2});
  double inv_area = 1.0 / double(factor * factor);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 2; ++c) {
        double s = 0;
        for (int64_t dy = 0; dy < factor; ++dy)
          for (int64_t dx = 0; dx < factor; ++dx)
            s += fl[((y * factor + dy) * W + x * factor + dx) * 2 + c];
        out[(y * w + x) * 2 + c] = s * inv_area / double(factor);
      }
  return out;
}

void write_flow_cache(const std::string& path, const Tensor<double>& fl) {
  if (fl.ndim() != 3 || fl.dim(2) != 2)
    throw std::invalid_argument("write_flow_cache: want {H,W,2}");
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_flow_cache: cannot open " + path);
  int32_t hw[2] = {int32_t(fl.dim(0)), int32_t(fl.dim(1))};
  std::fwrite("RTNF", 1, 4, f);
  std::fwrite(hw, sizeof(int32_t), 2, f);
  std::vector<float> buf(size_t(fl.size()));
  for (int64_t i = 0; i < fl.size(); ++i) buf[size_t(i)] = float(fl[i]);
  std::fwrite(buf.data(), sizeof(float), buf.size(), f);
  std::fclose(f);
}

Tensor<double> read_flow_cache(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("read_flow_cache: cannot open " + path);
  char magic[4];
  int32_t hw[2];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "RTNF", 4) != 0 ||
      std::fread(hw, sizeof(int32_t), 2, f) != 2 || hw[0] <= 0 || hw[1] <= 0) {
    std::fclose(f);
    throw std::runtime_error("read_flow_cache: bad header in " + path);
  }
  Tensor<double> fl({hw[0], hw[1], 2});
  std::vector<float> buf(size_t(fl.size()));
  size_t got = std::fread(buf.data(), sizeof(float), buf.size(), f);
  std::fclose(f);
  if (got != buf.size()) throw std::runtime_error("read_flow_cache: truncated " + path);
  for (int64_t i = 0; i < fl.size(); ++i) fl[i] = double(buf[size_t(i)]);
  return fl;
}

}  // namespace rtn::flow

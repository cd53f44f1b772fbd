#include "rtn/metrics.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace rtn::metrics {

namespace {

constexpr int64_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;

// normalized 11x11 Gaussian, built once
const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> g(kWindow);
    double sum = 0.0;
    for (int64_t k = 0; k < kWindow; ++k) {
      double d = double(k) - double(kWindow / 2);
      g[size_t(k)] = std::exp(-0.5 * d * d / (kSigma * kSigma));
      sum += g[size_t(k)];
    }
    std::vector<double> w2(size_t(kWindow * kWindow));
    for (int64_t i = 0; i < kWindow; ++i)
      for (int64_t j = 0; j < kWindow; ++j)
        w2[size_t(i * kWindow + j)] = g[size_t(i)] * g[size_t(j)] / (sum * sum);
    return w2;
  }();
  return w;
}

// SSIM mean over valid window positions for one {H,W} plane laid out row-major
double ssim_plane(const double* a, const double* b, int64_t H, int64_t W) {
  const std::vector<double>& win = ssim_window();
  const double c1 = kK1 * kK1, c2 = kK2 * kK2;
  double total = 0.0;
  int64_t count = 0;
  for (int64_t y0 = 0; y0 + kWindow <= H; ++y0)
    for (int64_t x0 = 0; x0 + kWindow <= W; ++x0) {
      double mu_a = 0.0, mu_b = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
      for (int64_t i = 0; i < kWindow; ++i)
        for (int64_t j = 0; j < kWindow; ++j) {
          double wv = win[size_t(i * kWindow + j)];
          double av = a[(y0 + i) * W + (x0 + j)];
          double bv = b[(y0 + i) * W + (x0 + j)];
          mu_a += wv * av;
          mu_b += wv * bv;
          saa += wv * av * av;
          sbb += wv * bv * bv;
          sab += wv * (av * bv);  // grouped so the score is bitwise symmetric
        }
      double var_a = saa - mu_a * mu_a;
      double var_b = sbb - mu_b * mu_b;
      double cov = sab - mu_a * mu_b;
      double num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
      double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      total += num / den;
      ++count;
    }
  return total / double(count);
}

nlohmann::json metric_value(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return "perfect";
  return v;
}

nlohmann::json finite_mean(const std::vector<double>& vs) {
  double sum = 0.0;
  int64_t n = 0;
  for (double v : vs)
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  if (n == 0) return nullptr;
  return sum / double(n);
}

}  // namespace

double mse(const Tensor<double>& pred, const Tensor<double>& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse: dim mismatch");
  double sum = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - target[i];
    sum += d * d;
  }
  return sum / double(pred.size());
}

double psnr(const Tensor<double>& pred, const Tensor<double>& target) {
  double m = mse(pred, target);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double ssim(const Tensor<double>& pred, const Tensor<double>& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("ssim: dim mismatch");
  if (pred.ndim() != 2 && pred.ndim() != 3)
    throw std::invalid_argument("ssim: expected {H,W} or {H,W,C}");
  int64_t H = pred.dim(0), W = pred.dim(1);
  int64_t C = pred.ndim() == 3 ? pred.dim(2) : 1;
  if (H < kWindow || W < kWindow) throw std::invalid_argument("ssim: frame smaller than window");
  // canonical argument order makes the score bitwise symmetric no matter how
  // the window sums round
  const Tensor<double>* a = &pred;
  const Tensor<double>* b = &target;
  if (std::memcmp(a->data(), b->data(), size_t(a->size()) * sizeof(double)) > 0) std::swap(a, b);
  if (pred.ndim() == 2) return ssim_plane(a->data(), b->data(), H, W);
  // split interleaved channels into planes, score each, average
  Tensor<double> pa({H, W}), pb({H, W});
  double total = 0.0;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < H * W; ++i) {
      pa[i] = (*a)[i * C + c];
      pb[i] = (*b)[i * C + c];
    }
    total += ssim_plane(pa.data(), pb.data(), H, W);
  }
  return total / double(C);
}

double sequence_psnr(const video::FrameSequence& pred, const video::FrameSequence& target) {
  return psnr(pred.frames, target.frames);
}

double sequence_ssim(const video::FrameSequence& pred, const video::FrameSequence& target) {
  if (!pred.frames.same_shape(target.frames))
    throw std::invalid_argument("sequence_ssim: dim mismatch");
  double total = 0.0;
  for (int64_t t = 0; t < pred.t(); ++t)
    total += ssim(video::frame_hwc(pred, t), video::frame_hwc(target, t));
  return total / double(pred.t());
}

double warping_error(const video::FrameSequence& seq, const video::FrameSequence& flow_source,
                     flow::FlowProvider& provider, double tau) {
  int64_t T = seq.t(), H = seq.h(), W = seq.w(), C = seq.c();
  if (T < 2) throw std::invalid_argument("warping_error: need at least 2 frames");
  if (flow_source.t() != T || flow_source.h() != H || flow_source.w() != W)
    throw std::invalid_argument("warping_error: flow source dims mismatch");
  double total = 0.0;
  int64_t pairs = 0;
  for (int64_t t = 1; t < T; ++t) {
    Tensor<double> cur_src = video::frame_hwc(flow_source, t);
    Tensor<double> prev_src = video::frame_hwc(flow_source, t - 1);
    flow::FlowField fwd = provider.estimate(cur_src, prev_src);
    flow::FlowField bwd = provider.estimate(prev_src, cur_src);
    Tensor<uint8_t> ok = flow::occlusion_mask(fwd, bwd, tau);
    Tensor<double> warped = flow::warp(video::frame_chw(seq, t - 1), fwd.flow);
    Tensor<double> cur = video::frame_chw(seq, t);
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int64_t p = y * W + x;
        if (!ok[p]) continue;
        double sx = double(x) + fwd.flow[p * 2 + 0];
        double sy = double(y) + fwd.flow[p * 2 + 1];
        if (sx < 0.0 || sx > double(W - 1) || sy < 0.0 || sy > double(H - 1)) continue;
        double px = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          double d = cur[c * H * W + p] - warped[c * H * W + p];
          px += d * d;
        }
        sum += px;
        ++count;
      }
    if (count == 0) continue;  // fully occluded pair drops out
    total += sum / double(count);
    ++pairs;
  }
  if (pairs == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / double(pairs);
}

double warping_error(const video::FrameSequence& seq, flow::FlowProvider& provider, double tau) {
  return warping_error(seq, seq, provider, tau);
}

std::string report_json(const std::vector<SequenceScores>& rows) {
  nlohmann::json out;
  out["sequences"] = nlohmann::json::array();
  std::vector<double> ps, ss, ws;
  for (const SequenceScores& r : rows) {
    nlohmann::json row;
    row["name"] = r.name;
    row["psnr"] = metric_value(r.psnr);
    row["ssim"] = metric_value(r.ssim);
    row["warping_error"] = metric_value(r.warping_error);
    out["sequences"].push_back(row);
    ps.push_back(r.psnr);
    ss.push_back(r.ssim);
    ws.push_back(r.warping_error);
  }
  out["mean"]["psnr"] = finite_mean(ps);
  out["mean"]["ssim"] = finite_mean(ss);
  out["mean"]["warping_error"] = finite_mean(ws);
  return out.dump(2);
}

}  // namespace rtn::metrics

#include "rtn/degrade.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace rtn::degrade {

namespace {

using nlohmann::json;

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// multiplicative jitter clamped back into the field's legal range; the bounds
// widen to admit a hand-written base value that already sits outside it
double jitter(Rng& rng, double v, double sigma, double lo, double hi) {
  return clampd(v * (1.0 + rng.normal(0.0, sigma)), std::min(lo, v), std::max(hi, v));
}

const char* blend_name(BlendMode m) {
  switch (m) {
    case BlendMode::kAdd: return "ADD";
    case BlendMode::kSubtract: return "SUBTRACT";
    default: return "MULTIPLY";
  }
}
BlendMode blend_from(const std::string& s) {
  if (s == "ADD") return BlendMode::kAdd;
  if (s == "SUBTRACT") return BlendMode::kSubtract;
  if (s == "MULTIPLY") return BlendMode::kMultiply;
  throw std::invalid_argument("unknown blend mode: " + s);
}
const char* noise_name(NoiseKind k) {
  return k == NoiseKind::kGaussian ? "GAUSSIAN" : "SPECKLE";
}
NoiseKind noise_from(const std::string& s) {
  if (s == "GAUSSIAN") return NoiseKind::kGaussian;
  if (s == "SPECKLE") return NoiseKind::kSpeckle;
  throw std::invalid_argument("unknown noise kind: " + s);
}
const char* method_name(ResampleMethod m) {
  switch (m) {
    case ResampleMethod::kNearest: return "NEAREST";
    case ResampleMethod::kBilinear: return "BILINEAR";
    default: return "BICUBIC";
  }
}
ResampleMethod method_from(const std::string& s) {
  if (s == "NEAREST") return ResampleMethod::kNearest;
  if (s == "BILINEAR") return ResampleMethod::kBilinear;
  if (s == "BICUBIC") return ResampleMethod::kBicubic;
  throw std::invalid_argument("unknown resample method: " + s);
}

int cv_interp(ResampleMethod m) {
  switch (m) {
    case ResampleMethod::kNearest: return cv::INTER_NEAREST;
    case ResampleMethod::kBilinear: return cv::INTER_LINEAR;
    default: return cv::INTER_CUBIC;
  }
}

cv::Mat to_mat(const Tensor<double>& frame) {
  int64_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  cv::Mat m(int(H), int(W), CV_64FC(int(C)));
  std::copy(frame.data(), frame.data() + frame.size(), reinterpret_cast<double*>(m.data));
  return m;
}

Tensor<double> from_mat(const cv::Mat& m, int64_t C) {
  Tensor<double> out({m.rows, m.cols, C});
  const double* src = reinterpret_cast<const double*>(m.data);
  std::copy(src, src + out.size(), out.data());
  return out;
}

}  // namespace

Tensor<double> blend_contaminant(const Tensor<double>& frame, const Tensor<double>& placed,
                                 BlendMode mode, double opacity) {
  if (frame.ndim() != 3 || placed.ndim() != 2 || placed.dim(0) != frame.dim(0) ||
      placed.dim(1) != frame.dim(1))
    throw std::invalid_argument("blend_contaminant: size mismatch");
  int64_t HW = frame.dim(0) * frame.dim(1), C = frame.dim(2);
  Tensor<double> out(frame.shape());
  for (int64_t i = 0; i < HW; ++i) {
    double t = placed[i];
    for (int64_t c = 0; c < C; ++c) {
      double x = frame[i * C + c], v = 0;
      switch (mode) {
        case BlendMode::kAdd: v = x + opacity * t; break;
        case BlendMode::kSubtract: v = x - opacity * t; break;
        case BlendMode::kMultiply: v = x * (1.0 - opacity * (1.0 - t)); break;
      }
      out[i * C + c] = clampd(v, 0.0, 1.0);
    }
  }
  return out;
}

Tensor<double> apply_noise(const Tensor<double>& frame, NoiseKind kind, double sigma, Rng& rng) {
  if (sigma < 0 || sigma > 100) throw std::invalid_argument("apply_noise: sigma out of [0,100]");
  double s = sigma / 255.0;
  Tensor<double> out(frame.shape());
  for (int64_t i = 0; i < frame.size(); ++i) {
    double n = rng.normal(0.0, s);
    double v = kind == NoiseKind::kGaussian ? frame[i] + n : frame[i] * (1.0 + n);
    out[i] = clampd(v, 0.0, 1.0);
  }
  return out;
}

Tensor<double> gaussian_blur(const Tensor<double>& frame, const BlurParams& p) {
  if (p.sigma1 <= 0 || p.sigma2 <= 0) throw std::invalid_argument("gaussian_blur: sigma <= 0");
  int r = std::max(p.kernel_radius, 1);
  int n = 2 * r + 1;
  // closed-form inverse covariance of R(theta) diag(s1^2,s2^2) R(theta)^T
  double ct = std::cos(p.theta), st = std::sin(p.theta);
  double i1 = 1.0 / (p.sigma1 * p.sigma1), i2 = 1.0 / (p.sigma2 * p.sigma2);
  double a = ct * ct * i1 + st * st * i2;
  double c = st * st * i1 + ct * ct * i2;
  double b = ct * st * (i1 - i2);
  std::vector<double> k(size_t(n) * size_t(n));
  double sum = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      double e = std::exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy));
      k[size_t((dy + r) * n + dx + r)] = e;
      sum += e;
    }
  for (double& v : k) v /= sum;

  int64_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  auto reflect = [](int64_t i, int64_t m) {
    if (m == 1) return int64_t(0);
    int64_t period = 2 * (m - 1);
    i = ((i % period) + period) % period;
    return i < m ? i : period - i;
  };
  Tensor<double> out(frame.shape());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t ch = 0; ch < C; ++ch) {
        double s = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx)
            s += k[size_t((dy + r) * n + dx + r)] *
                 frame[(reflect(y + dy, H) * W + reflect(x + dx, W)) * C + ch];
        out[(y * W + x) * C + ch] = s;
      }
  return out;
}

Tensor<double> resample_roundtrip(const Tensor<double>& frame, double scale,
                                  ResampleMethod down, ResampleMethod up) {
  int64_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  int64_t h = int64_t(std::floor(scale * double(H))), w = int64_t(std::floor(scale * double(W)));
  if (scale <= 0 || scale > 1 || h < 4 || w < 4)
    throw std::invalid_argument("resample_roundtrip: bad scale for frame size");
  if (h == H && w == W && down != ResampleMethod::kBicubic && up != ResampleMethod::kBicubic)
    return frame;
  cv::Mat src = to_mat(frame), small, back;
  cv::resize(src, small, cv::Size(int(w), int(h)), 0, 0, cv_interp(down));
  cv::resize(small, back, cv::Size(int(W), int(H)), 0, 0, cv_interp(up));
  Tensor<double> out = from_mat(back, C);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = clampd(out[i], 0.0, 1.0);
  return out;
}

Tensor<double> jpeg_roundtrip(const Tensor<double>& frame, int quality) {
  if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg_roundtrip: quality");
  int64_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  if (C != 1 && C != 3) throw std::invalid_argument("jpeg_roundtrip: want 1 or 3 channels");
  cv::Mat img(int(H), int(W), C == 1 ? CV_8UC1 : CV_8UC3);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t ch = 0; ch < C; ++ch) {
        double v = clampd(frame[(y * W + x) * C + ch], 0.0, 1.0);
        int64_t dst_ch = (C == 3) ? 2 - ch : ch;  // OpenCV wants BGR
        img.ptr<uint8_t>(int(y))[x * C + dst_ch] = uint8_t(std::lround(v * 255.0));
      }
  std::vector<uchar> buf;
  cv::imencode(".jpg", img, buf, {cv::IMWRITE_JPEG_QUALITY, quality});
  cv::Mat dec = cv::imdecode(buf, C == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  Tensor<double> out(frame.shape());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t ch = 0; ch < C; ++ch) {
        int64_t src_ch = (C == 3) ? 2 - ch : ch;
        out[(y * W + x) * C + ch] = dec.ptr<uint8_t>(int(y))[x * C + src_ch] / 255.0;
      }
  return out;
}

Tensor<double> color_jitter(const Tensor<double>& frame, double brightness, double contrast) {
  if (brightness < 0.5 || brightness > 1.5 || contrast < 0.5 || contrast > 1.5)
    throw std::invalid_argument("color_jitter: parameter out of accepted range");
  double mean = 0;
  for (int64_t i = 0; i < frame.size(); ++i) mean += frame[i];
  mean /= double(frame.size());
  Tensor<double> out(frame.shape());
  for (int64_t i = 0; i < frame.size(); ++i) {
    double v = clampd(contrast * (frame[i] - mean) + mean, 0.0, 1.0);
    out[i] = clampd(brightness * v, 0.0, 1.0);
  }
  return out;
}

Tensor<double> place_template(const ContaminantTemplate& tmpl, const TemplatePlacement& pl,
                              double offset_x, double offset_y, int64_t H, int64_t W) {
  int64_t Ht = tmpl.texture.dim(0), Wt = tmpl.texture.dim(1);
  double S = std::max(2.0, pl.crop_size * double(std::min(Ht, Wt)));
  double tx = pl.crop_x * (double(Wt) - S), ty = pl.crop_y * (double(Ht) - S);
  double tcx = tx + (S - 1.0) / 2.0, tcy = ty + (S - 1.0) / 2.0;
  double f = S / (std::max(pl.scale, 1e-3) * double(std::max(H, W)));
  double pcx = double(W - 1) / 2.0, pcy = double(H - 1) / 2.0;
  double ct = std::cos(pl.rotation), st = std::sin(pl.rotation);

  Tensor<double> placed({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double ux = double(x) - offset_x - pcx, uy = double(y) - offset_y - pcy;
      double rx = ct * ux + st * uy, ry = -st * ux + ct * uy;
      double tu = tcx + rx * f, tv = tcy + ry * f;
      double v = 0;
      if (tu >= 0 && tu <= double(Wt - 1) && tv >= 0 && tv <= double(Ht - 1)) {
        int64_t x0 = int64_t(std::floor(tu)), y0 = int64_t(std::floor(tv));
        int64_t x1 = std::min(x0 + 1, Wt - 1), y1 = std::min(y0 + 1, Ht - 1);
        double wx = tu - double(x0), wy = tv - double(y0);
        double top = tmpl.texture[y0 * Wt + x0] * (1 - wx) + tmpl.texture[y0 * Wt + x1] * wx;
        double bot = tmpl.texture[y1 * Wt + x0] * (1 - wx) + tmpl.texture[y1 * Wt + x1] * wx;
        v = top * (1 - wy) + bot * wy;
      }
      placed[y * W + x] = clampd(pl.contrast * (v - 0.5) + 0.5, 0.0, 1.0);
    }
  if (pl.morph != 0) {
    Tensor<double> m({H, W});
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double v = placed[y * W + x];
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            int64_t yy = std::min(std::max(y + dy, int64_t(0)), H - 1);
            int64_t xx = std::min(std::max(x + dx, int64_t(0)), W - 1);
            v = pl.morph > 0 ? std::max(v, placed[yy * W + xx])
                             : std::min(v, placed[yy * W + xx]);
          }
        m[y * W + x] = v;
      }
    placed = std::move(m);
  }
  return placed;
}

std::string DegradationRecipe::to_json() const {
  json j;
  j["schema"] = 1;
  j["template_ids"] = template_ids;
  std::vector<std::string> modes;
  for (auto m : blend_modes) modes.push_back(blend_name(m));
  j["blend_modes"] = modes;
  j["opacities"] = opacities;
  json pls = json::array();
  for (const auto& p : placements)
    pls.push_back({{"rotation", p.rotation},
                   {"crop_x", p.crop_x},
                   {"crop_y", p.crop_y},
                   {"crop_size", p.crop_size},
                   {"scale", p.scale},
                   {"contrast", p.contrast},
                   {"morph", p.morph}});
  j["placements"] = pls;
  j["noise_kind"] = noise_name(noise_kind);
  j["noise_sigma"] = noise_sigma;
  j["blur"] = {{"sigma1", blur.sigma1},
               {"sigma2", blur.sigma2},
               {"theta", blur.theta},
               {"kernel_radius", blur.kernel_radius}};
  j["resample_scale"] = resample_scale;
  j["resample_down"] = method_name(resample_down);
  j["resample_up"] = method_name(resample_up);
  j["jpeg_quality"] = jpeg_quality;
  j["brightness"] = brightness;
  j["contrast"] = contrast;
  j["perturb_sigma"] = perturb_sigma;
  j["seed"] = seed;
  j["codec"] = std::string("opencv-") + CV_VERSION;
  return j.dump(2);
}

DegradationRecipe DegradationRecipe::from_json(const std::string& text) {
  json j = json::parse(text);
  if (!j.contains("schema") || j["schema"].get<int>() != 1)
    throw std::invalid_argument("recipe: unsupported schema");
  DegradationRecipe r;
  r.template_ids = j["template_ids"].get<std::vector<std::string>>();
  for (const auto& s : j["blend_modes"]) r.blend_modes.push_back(blend_from(s.get<std::string>()));
  r.opacities = j["opacities"].get<std::vector<double>>();
  for (const auto& p : j["placements"]) {
    TemplatePlacement pl;
    pl.rotation = p["rotation"].get<double>();
    pl.crop_x = p["crop_x"].get<double>();
    pl.crop_y = p["crop_y"].get<double>();
    pl.crop_size = p["crop_size"].get<double>();
    pl.scale = p["scale"].get<double>();
    pl.contrast = p["contrast"].get<double>();
    pl.morph = p["morph"].get<int>();
    r.placements.push_back(pl);
  }
  r.noise_kind = noise_from(j["noise_kind"].get<std::string>());
  r.noise_sigma = j["noise_sigma"].get<double>();
  r.blur.sigma1 = j["blur"]["sigma1"].get<double>();
  r.blur.sigma2 = j["blur"]["sigma2"].get<double>();
  r.blur.theta = j["blur"]["theta"].get<double>();
  r.blur.kernel_radius = j["blur"]["kernel_radius"].get<int>();
  r.resample_scale = j["resample_scale"].get<double>();
  r.resample_down = method_from(j["resample_down"].get<std::string>());
  r.resample_up = method_from(j["resample_up"].get<std::string>());
  r.jpeg_quality = j["jpeg_quality"].get<int>();
  r.brightness = j["brightness"].get<double>();
  r.contrast = j["contrast"].get<double>();
  r.perturb_sigma = j["perturb_sigma"].get<double>();
  r.seed = j["seed"].get<uint64_t>();
  const size_t k = r.template_ids.size();
  if (r.blend_modes.size() != k || r.opacities.size() != k || r.placements.size() != k)
    throw std::invalid_argument("recipe: per-template array length mismatch");
  return r;
}

TemplateLibrary procedural_template_library(uint64_t seed, int count, int64_t size) {
  if (count < 1 || size < 8) throw std::invalid_argument("procedural_template_library: bad args");
  Rng rng(seed);
  TemplateLibrary lib;
  for (int i = 0; i < count; ++i) {
    Tensor<double> tex({size, size});
    const int kind = i % 3;
    if (kind == 0) {
      // soft radial blob
      const double cx = (size - 1) * rng.uniform(0.3, 0.7);
      const double cy = (size - 1) * rng.uniform(0.3, 0.7);
      const double s = size * rng.uniform(0.10, 0.28);
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          tex.at(y, x) = std::exp(-0.5 * r2 / (s * s));
        }
    } else if (kind == 1) {
      // feathered line scratch through a random point
      const double ang = rng.uniform(0.0, M_PI);
      const double nx = -std::sin(ang);
      const double ny = std::cos(ang);
      const double px = (size - 1) * rng.uniform(0.25, 0.75);
      const double py = (size - 1) * rng.uniform(0.25, 0.75);
      const double w = rng.uniform(0.6, 2.0);
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          const double d = (x - px) * nx + (y - py) * ny;
          tex.at(y, x) = std::exp(-(d * d) / (2.0 * w * w));
        }
    } else {
      // dust: a handful of small specks
      const int n = rng.uniform_int(6, 14);
      for (int k = 0; k < n; ++k) {
        const double cx = (size - 1) * rng.uniform();
        const double cy = (size - 1) * rng.uniform();
        const double s = size * rng.uniform(0.01, 0.04);
        const int64_t r = std::max<int64_t>(2, int64_t(4 * s));
        for (int64_t y = std::max<int64_t>(0, int64_t(cy) - r);
             y <= std::min(size - 1, int64_t(cy) + r); ++y)
          for (int64_t x = std::max<int64_t>(0, int64_t(cx) - r);
               x <= std::min(size - 1, int64_t(cx) + r); ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            tex.at(y, x) = std::min(1.0, tex.at(y, x) + std::exp(-0.5 * r2 / (s * s)));
          }
      }
    }
    const char* names[3] = {"blob", "scratch", "dust"};
    ContaminantTemplate t;
    t.id = std::string(names[kind]) + std::to_string(i);
    t.texture = tex;
    lib.emplace(t.id, std::move(t));
  }
  return lib;
}

TemplateLibrary load_template_library(const std::string& dir) {
  namespace fs = std::filesystem;
  TemplateLibrary lib;
  if (!fs::is_directory(dir)) throw std::runtime_error("template dir not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    cv::Mat img = cv::imread(p.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("cannot read template: " + p.string());
    ContaminantTemplate t;
    t.id = p.stem().string();
    t.texture = Tensor<double>({img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
      for (int x = 0; x < img.cols; ++x)
        t.texture.at(y, x) = img.at<uint8_t>(y, x) / 255.0;
    lib.emplace(t.id, std::move(t));
  }
  if (lib.empty()) throw std::runtime_error("no .png templates in " + dir);
  return lib;
}

DegradationRecipe sample_recipe(const std::vector<std::string>& template_ids, uint64_t seed) {
  if (template_ids.empty()) throw std::invalid_argument("sample_recipe: empty template library");
  Rng rng(seed);
  DegradationRecipe r;
  r.seed = seed;
  int64_t count = rng.uniform_int(1, 4);
  for (int64_t k = 0; k < count; ++k) {
    r.template_ids.push_back(template_ids[size_t(rng.uniform_int(0, int64_t(template_ids.size()) - 1))]);
    int64_t mode = rng.uniform_int(0, 2);
    r.blend_modes.push_back(mode == 0 ? BlendMode::kAdd
                                      : (mode == 1 ? BlendMode::kSubtract : BlendMode::kMultiply));
    r.opacities.push_back(rng.uniform(0.6, 1.0));
    TemplatePlacement pl;
    pl.rotation = rng.uniform(0.0, 2.0 * M_PI);
    pl.crop_size = rng.uniform(0.5, 1.0);
    pl.crop_x = rng.uniform(0.0, 1.0);
    pl.crop_y = rng.uniform(0.0, 1.0);
    pl.scale = rng.uniform(0.5, 1.5);
    pl.contrast = rng.uniform(0.8, 1.2);
    pl.morph = int(rng.uniform_int(-1, 1));
    r.placements.push_back(pl);
  }
  r.noise_kind = rng.bernoulli(0.5) ? NoiseKind::kGaussian : NoiseKind::kSpeckle;
  r.noise_sigma = rng.uniform(5.0, 50.0);
  r.blur.sigma1 = std::max(rng.uniform(0.0, 1.0), 1e-6);
  r.blur.sigma2 = std::max(rng.uniform(0.0, 1.0), 1e-6);
  r.blur.theta = rng.uniform(0.0, M_PI);
  r.blur.kernel_radius = 3;
  r.resample_scale = rng.uniform(0.5, 1.0);
  auto pick_method = [&rng] {
    int64_t m = rng.uniform_int(0, 2);
    return m == 0 ? ResampleMethod::kNearest
                  : (m == 1 ? ResampleMethod::kBilinear : ResampleMethod::kBicubic);
  };
  r.resample_down = pick_method();
  r.resample_up = pick_method();
  r.jpeg_quality = int(rng.uniform_int(40, 100));
  r.brightness = rng.uniform(0.8, 1.2);
  r.contrast = rng.uniform(0.9, 1.0);
  r.perturb_sigma = 0.05;
  return r;
}

Tensor<double> render_frame(const Tensor<double>& clean_frame, const FrameParams& p,
                            const DegradationRecipe& recipe, const TemplateLibrary& library,
                            Tensor<uint8_t>* defect_mask_out) {
  int64_t H = clean_frame.dim(0), W = clean_frame.dim(1), C = clean_frame.dim(2);
  Tensor<double> x = clean_frame;
  Tensor<double> pre = x;
  for (size_t k = 0; k < recipe.template_ids.size(); ++k) {
    auto it = library.find(recipe.template_ids[k]);
    if (it == library.end())
      throw std::runtime_error("render_frame: unknown template id: " + recipe.template_ids[k]);
    Tensor<double> d = place_template(it->second, recipe.placements[k], p.offsets[k][0],
                                      p.offsets[k][1], H, W);
    // the placed map is a defect-intensity map (0 = untouched); MULTIPLY's
    // identity texture value is 1, so invert for that mode
    if (recipe.blend_modes[k] == BlendMode::kMultiply)
      for (int64_t i = 0; i < d.size(); ++i) d[i] = 1.0 - d[i];
    x = blend_contaminant(x, d, recipe.blend_modes[k], p.opacities[k]);
  }
  if (defect_mask_out) {
    *defect_mask_out = Tensor<uint8_t>({H, W});
    for (int64_t i = 0; i < H * W; ++i) {
      double dmax = 0;
      for (int64_t c = 0; c < C; ++c) dmax = std::max(dmax, std::abs(x[i * C + c] - pre[i * C + c]));
      (*defect_mask_out)[i] = dmax > 1.0 / 255.0;
    }
  }
  if (std::max(p.blur.sigma1, p.blur.sigma2) >= 1e-3) x = gaussian_blur(x, p.blur);
  x = resample_roundtrip(x, p.resample_scale, p.resample_down, p.resample_up);
  Rng noise_rng(p.noise_seed);
  x = apply_noise(x, p.noise_kind, p.noise_sigma, noise_rng);
  x = jpeg_roundtrip(x, p.jpeg_quality);
  x = color_jitter(x, p.brightness, p.contrast);
  return x;
}

DegradeResult degrade_sequence(const video::FrameSequence& clean,
                               const DegradationRecipe& recipe, const TemplateLibrary& library) {
  if (clean.color_space == video::ColorSpace::kLab)
    throw std::invalid_argument("degrade_sequence: clean sequence must be RGB or GRAY");
  int64_t T = clean.t(), H = clean.h(), W = clean.w();
  Rng rng(recipe.seed);
  size_t K = recipe.template_ids.size();

  // pre-draw the whole per-frame parameter stream; the placement walk makes
  // this order-dependent
  std::vector<FrameParams> log(static_cast<size_t>(T));
  std::vector<std::array<double, 2>> walk(K, {0.0, 0.0});
  double ps = recipe.perturb_sigma;
  for (int64_t t = 0; t < T; ++t) {
    FrameParams& p = log[size_t(t)];
    for (size_t k = 0; k < K; ++k)
      p.opacities.push_back(jitter(rng, recipe.opacities[k], ps, 0.6, 1.0));
    if (t > 0)
      for (size_t k = 0; k < K; ++k) {
        walk[k][0] += rng.normal(0.0, 2.0);
        walk[k][1] += rng.normal(0.0, 2.0);
      }
    p.offsets = walk;
    p.noise_kind = recipe.noise_kind;
    p.noise_sigma = jitter(rng, recipe.noise_sigma, ps, 5.0, 50.0);
    p.blur.sigma1 = jitter(rng, recipe.blur.sigma1, ps, 1e-6, 1.0);
    p.blur.sigma2 = jitter(rng, recipe.blur.sigma2, ps, 1e-6, 1.0);
    p.blur.theta = jitter(rng, recipe.blur.theta, ps, 0.0, M_PI);
    p.blur.kernel_radius = recipe.blur.kernel_radius;
    p.resample_scale = jitter(rng, recipe.resample_scale, ps, 0.5, 1.0);
    p.resample_down = recipe.resample_down;
    p.resample_up = recipe.resample_up;
    p.jpeg_quality =
        int(std::lround(clampd(recipe.jpeg_quality * (1.0 + rng.normal(0.0, ps)), 40.0, 100.0)));
    p.brightness = jitter(rng, recipe.brightness, ps, 0.8, 1.2);
    p.contrast = jitter(rng, recipe.contrast, ps, 0.9, 1.0);
    p.noise_seed = uint64_t(rng.uniform_int(0, std::numeric_limits<int64_t>::max()));
  }

  DegradeResult res;
  res.degraded = clean;
  res.defect_masks = Tensor<uint8_t>({T, H, W});
  for (int64_t t = 0; t < T; ++t) {
    Tensor<uint8_t> mask;
    Tensor<double> out = render_frame(video::frame_hwc(clean, t), log[size_t(t)], recipe,
                                      library, &mask);
    std::copy(out.data(), out.data() + out.size(),
              res.degraded.frames.data() + t * out.size());
    std::copy(mask.data(), mask.data() + mask.size(), res.defect_masks.data() + t * H * W);
  }
  res.frame_log = std::move(log);
  return res;
}

}  // namespace rtn::degrade

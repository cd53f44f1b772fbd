#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rtn/flow.hpp"
#include "rtn/nn.hpp"
#include "rtn/ops.hpp"
#include "rtn/videodata.hpp"

namespace rtn::model {

using ad::Tape;
using ad::Var;

enum class Mode { kRestore, kColorize };

inline const char* mode_name(Mode m) { return m == Mode::kRestore ? "restore" : "colorize"; }
inline Mode mode_from(const std::string& s) {
  if (s == "restore") return Mode::kRestore;
  if (s == "colorize") return Mode::kColorize;
  throw std::invalid_argument("unknown mode: " + s);
}

struct ModelConfig {
  int64_t encoder_channels = 64;  // feature width carried through the recurrence
  int64_t encoder_stride = 2;     // pixel-to-feature downscale factor
  int64_t num_swin_blocks = 4;
  int64_t window_size = 8;
  int64_t num_heads = 4;
  int64_t head_dim = 32;
  int64_t mask_net_layers = 3;
  Mode mode = Mode::kRestore;

  int64_t attn_dim() const { return num_heads * head_dim; }
  int64_t in_channels() const { return 3; }
  int64_t out_channels() const { return mode == Mode::kRestore ? 3 : 2; }
  // frames are padded so the attention stage sees whole windows
  int64_t pad_multiple() const { return encoder_stride * 2 * window_size; }

  std::string to_json() const {
    nlohmann::json j;
    j["encoder_channels"] = encoder_channels;
    j["encoder_stride"] = encoder_stride;
    j["num_swin_blocks"] = num_swin_blocks;
    j["window_size"] = window_size;
    j["num_heads"] = num_heads;
    j["head_dim"] = head_dim;
    j["mask_net_layers"] = mask_net_layers;
    j["mode"] = mode_name(mode);
    return j.dump(2);
  }

  static ModelConfig from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.encoder_stride = j.value("encoder_stride", c.encoder_stride);
    c.num_swin_blocks = j.value("num_swin_blocks", c.num_swin_blocks);
    c.window_size = j.value("window_size", c.window_size);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.mask_net_layers = j.value("mask_net_layers", c.mask_net_layers);
    c.mode = mode_from(j.value("mode", std::string("restore")));
    return c;
  }
};

template <class T>
struct Encoder {
  nn::Conv2d<T> c1, c2, c3;

  static Encoder create(nn::ParamStore<T>& ps, const std::string& name, int64_t cin, int64_t cs,
                        int64_t stride, Rng& rng) {
    Encoder e;
    e.c1 = nn::Conv2d<T>::create(ps, name + ".c1", cin, cs / 2, 3, 1, 1, rng);
    e.c2 = nn::Conv2d<T>::create(ps, name + ".c2", cs / 2, cs, 3, stride, 1, rng);
    e.c3 = nn::Conv2d<T>::create(ps, name + ".c3", cs, cs, 3, 1, 1, rng);
    return e;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> h = ad::leaky_relu(t, c1(t, x), T(0.2));
    h = ad::leaky_relu(t, c2(t, h), T(0.2));
    return c3(t, h);
  }
};

// Predicts a per-pixel gate from current features stacked with warped history;
// low values hand the pixel over to the temporal branch.
template <class T>
struct MaskNet {
  std::vector<nn::Conv2d<T>> convs;

  static MaskNet create(nn::ParamStore<T>& ps, const std::string& name, int64_t cs,
                        int64_t layers, Rng& rng) {
    if (layers < 2) throw std::invalid_argument("mask net needs at least 2 layers");
    MaskNet m;
    for (int64_t i = 0; i < layers; ++i) {
      int64_t cin = i == 0 ? 2 * cs : cs;
      int64_t cout = i == layers - 1 ? 1 : cs;
      m.convs.push_back(
          nn::Conv2d<T>::create(ps, name + ".c" + std::to_string(i), cin, cout, 3, 1, 1, rng));
    }
    // open the gate toward current-frame features at the start of training
    ps.node(name + ".c" + std::to_string(layers - 1) + ".b")->val.fill(T(1));
    return m;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> h = x;
    for (size_t i = 0; i < convs.size(); ++i) {
      h = convs[i](t, h);
      if (i + 1 < convs.size()) h = ad::leaky_relu(t, h, T(0.2));
    }
    return ad::sigmoid(t, h);
  }
};

// Transformer trunk between downscale and upscale convs; the upscale conv is
// zero-initialized so the whole stage starts as the identity.
template <class T>
struct SpatialRestore {
  nn::Conv2d<T> down, up;
  std::vector<nn::SwinBlock<T>> blocks;

  static SpatialRestore create(nn::ParamStore<T>& ps, const std::string& name, int64_t cs,
                               int64_t ca, int64_t heads, int64_t M, int64_t nblocks, Rng& rng) {
    SpatialRestore s;
    s.down = nn::Conv2d<T>::create(ps, name + ".down", cs, ca, 3, 2, 1, rng);
    for (int64_t i = 0; i < nblocks; ++i)
      s.blocks.push_back(nn::SwinBlock<T>::create(ps, name + ".blk" + std::to_string(i), ca,
                                                  heads, M, i % 2 ? M / 2 : 0, rng));
    s.up = nn::Conv2d<T>::create(ps, name + ".up", ca, 4 * cs, 3, 1, 1, rng, /*zero_init=*/true);
    return s;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> h = down(t, x);
    for (const auto& b : blocks) h = b(t, h);
    Var<T> u = ad::pixel_shuffle(t, up(t, h), 2);
    return ad::add(t, x, u);
  }
};

template <class T>
struct Decoder {
  nn::Conv2d<T> c1, c2, c3, c4;
  int64_t stride = 2;

  static Decoder create(nn::ParamStore<T>& ps, const std::string& name, int64_t cs, int64_t cout,
                        int64_t stride, Rng& rng) {
    Decoder d;
    d.stride = stride;
    d.c1 = nn::Conv2d<T>::create(ps, name + ".c1", 2 * cs, cs, 3, 1, 1, rng);
    d.c2 = nn::Conv2d<T>::create(ps, name + ".c2", cs, cs, 3, 1, 1, rng);
    d.c3 = nn::Conv2d<T>::create(ps, name + ".c3", cs, stride * stride * 32, 3, 1, 1, rng);
    d.c4 = nn::Conv2d<T>::create(ps, name + ".c4", 32, cout, 3, 1, 1, rng);
    return d;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> h = ad::leaky_relu(t, c1(t, x), T(0.2));
    h = ad::leaky_relu(t, c2(t, h), T(0.2));
    h = ad::leaky_relu(t, ad::pixel_shuffle(t, c3(t, h), stride), T(0.2));
    return c4(t, h);
  }
};

// Correspondence feature encoder used by the colorization path: maps a
// luminance plane to L2-normalizable matching features at quarter resolution.
template <class T>
struct CorrespondenceEncoder {
  nn::Conv2d<T> c1, c2, c3;

  static CorrespondenceEncoder create(nn::ParamStore<T>& ps, const std::string& name, Rng& rng) {
    CorrespondenceEncoder e;
    e.c1 = nn::Conv2d<T>::create(ps, name + ".c1", 1, 32, 3, 2, 1, rng);
    e.c2 = nn::Conv2d<T>::create(ps, name + ".c2", 32, 64, 3, 2, 1, rng);
    e.c3 = nn::Conv2d<T>::create(ps, name + ".c3", 64, 64, 3, 1, 1, rng);
    return e;
  }

  Var<T> operator()(Tape<T>& t, Var<T> lum) const {
    Var<T> h = ad::leaky_relu(t, c1(t, lum), T(0.2));
    h = ad::leaky_relu(t, c2(t, h), T(0.2));
    return c3(t, h);
  }
};

// F = E * M + W * (1 - M), arranged so a saturated mask hands the pixel over
// to exactly one branch.
template <class T>
Var<T> aggregate_features(Tape<T>& t, Var<T> e, Var<T> w, Var<T> m) {
  Var<T> em = ad::mul_channel_mask(t, e, m);
  Var<T> wm = ad::mul_channel_mask(t, w, m);
  return ad::add(t, em, ad::sub(t, w, wm));
}

struct RestoreResult {
  video::FrameSequence restored;
  Tensor<double> fwd_masks;  // {T, H, W} temporal-trust gate per pixel
};

// Bidirectional recurrent restorer: per direction, history features are warped
// to the current frame, gated against fresh encoder features, and refined by a
// windowed transformer; a shared decoder fuses both directions per frame.
template <class T>
class RtnModel {
 public:
  RtnModel(ModelConfig cfg, nn::ParamStore<T>& ps, uint64_t init_seed = 0x52544e01ull)
      : cfg_(cfg), ps_(&ps) {
    Rng rng(init_seed);
    int64_t cs = cfg.encoder_channels;
    enc_ = Encoder<T>::create(ps, "enc", cfg.in_channels(), cs, cfg.encoder_stride, rng);
    fwd_mask_ = MaskNet<T>::create(ps, "fwd.mask", cs, cfg.mask_net_layers, rng);
    fwd_restore_ = SpatialRestore<T>::create(ps, "fwd.restore", cs, cfg.attn_dim(),
                                             cfg.num_heads, cfg.window_size,
                                             cfg.num_swin_blocks, rng);
    bwd_mask_ = MaskNet<T>::create(ps, "bwd.mask", cs, cfg.mask_net_layers, rng);
    bwd_restore_ = SpatialRestore<T>::create(ps, "bwd.restore", cs, cfg.attn_dim(),
                                             cfg.num_heads, cfg.window_size,
                                             cfg.num_swin_blocks, rng);
    dec_ = Decoder<T>::create(ps, "dec", cs, cfg.out_channels(), cfg.encoder_stride, rng);
    if (cfg.mode == Mode::kColorize)
      corr_ = CorrespondenceEncoder<T>::create(ps, "corr", rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() const { return *ps_; }
  const CorrespondenceEncoder<T>& correspondence() const {
    if (cfg_.mode != Mode::kColorize)
      throw std::logic_error("correspondence encoder only exists in colorize mode");
    return corr_;
  }

  Var<T> encode(Tape<T>& t, Var<T> frame) const { return enc_(t, frame); }

  struct StepOut {
    Var<T> state;
    Var<T> mask;
  };

  // One recurrence step: e = encoder features of the current frame,
  // prev_state = previous state in scan order, flow = feature-resolution flow
  // aligning prev_state onto this frame (null at the boundary).
  StepOut step(Tape<T>& t, bool forward_dir, Var<T> e, Var<T> prev_state,
               const Tensor<T>* flow) const {
    Var<T> w = prev_state;
    if (flow) {
      Var<T> fl = t.leaf(*flow, false);
      w = ad::warp_bilinear(t, prev_state, fl);
    }
    const MaskNet<T>& mn = forward_dir ? fwd_mask_ : bwd_mask_;
    const SpatialRestore<T>& sr = forward_dir ? fwd_restore_ : bwd_restore_;
    Var<T> m = mn(t, ad::concat_c(t, e, w));
    return {sr(t, aggregate_features(t, e, w, m)), m};
  }

  Var<T> decode(Tape<T>& t, Var<T> s_fwd, Var<T> s_bwd) const {
    return dec_(t, ad::concat_c(t, s_fwd, s_bwd));
  }

  struct ClipResult {
    std::vector<Var<T>> outputs;
    std::vector<Var<T>> fwd_masks;
    std::vector<Var<T>> bwd_masks;
  };

  // Differentiable whole-clip pass for training. frames[i] are {C_in, H, W}
  // leaves with H, W already multiples of pad_multiple(). flows_fwd[i] aligns
  // state i onto frame i+1; flows_bwd[i] aligns state i+1 onto frame i; both
  // at feature resolution.
  ClipResult forward_clip(Tape<T>& t, const std::vector<Var<T>>& frames,
                          const std::vector<Tensor<T>>& flows_fwd,
                          const std::vector<Tensor<T>>& flows_bwd) const {
    int64_t n = int64_t(frames.size());
    if (n == 0) throw std::invalid_argument("forward_clip: empty clip");
    if (int64_t(flows_fwd.size()) != n - 1 || int64_t(flows_bwd.size()) != n - 1)
      throw std::invalid_argument("forward_clip: need T-1 flows per direction");
    int64_t H = frames[0]->val.dim(1), W = frames[0]->val.dim(2);
    if (H % cfg_.pad_multiple() != 0 || W % cfg_.pad_multiple() != 0)
      throw std::invalid_argument("forward_clip: frame size not aligned to " +
                                  std::to_string(cfg_.pad_multiple()));

    std::vector<Var<T>> feats(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) feats[size_t(i)] = encode(t, frames[size_t(i)]);
    int64_t h = H / cfg_.encoder_stride, w = W / cfg_.encoder_stride;

    ClipResult res;
    res.outputs.resize(size_t(n));
    res.fwd_masks.resize(size_t(n));
    res.bwd_masks.resize(size_t(n));

    std::vector<Var<T>> fwd_states(static_cast<size_t>(n));
    std::vector<Var<T>> bwd_states(static_cast<size_t>(n));
    Var<T> prev = t.leaf(Tensor<T>({cfg_.encoder_channels, h, w}), false);
    for (int64_t i = 0; i < n; ++i) {
      StepOut so = step(t, true, feats[size_t(i)], prev,
                        i > 0 ? &flows_fwd[size_t(i - 1)] : nullptr);
      fwd_states[size_t(i)] = so.state;
      res.fwd_masks[size_t(i)] = so.mask;
      prev = so.state;
    }
    Var<T> next = t.leaf(Tensor<T>({cfg_.encoder_channels, h, w}), false);
    for (int64_t i = n - 1; i >= 0; --i) {
      StepOut so = step(t, false, feats[size_t(i)], next,
                        i < n - 1 ? &flows_bwd[size_t(i)] : nullptr);
      bwd_states[size_t(i)] = so.state;
      res.bwd_masks[size_t(i)] = so.mask;
      next = so.state;
    }
    for (int64_t i = 0; i < n; ++i)
      res.outputs[size_t(i)] = decode(t, fwd_states[size_t(i)], bwd_states[size_t(i)]);
    return res;
  }

  // Bounded-memory pass over prepared frames (each {C_in, Hp, Wp} with Hp, Wp
  // aligned to pad_multiple()); flows at feature resolution, same indexing as
  // forward_clip. Gradients are disabled and every stage runs on a throwaway
  // tape, so memory stays flat in sequence length. Returns the raw decoder
  // outputs {C_out, Hp, Wp}; fwd_masks (feature resolution) optional.
  std::vector<Tensor<T>> infer_frames(const std::vector<Tensor<T>>& frames,
                                      const std::vector<Tensor<T>>& flows_fwd,
                                      const std::vector<Tensor<T>>& flows_bwd,
                                      std::vector<Tensor<T>>* fwd_masks = nullptr) const {
    NoGradGuard guard(ps_);
    const int64_t n = int64_t(frames.size());
    if (n == 0) throw std::invalid_argument("infer_frames: empty clip");
    if (int64_t(flows_fwd.size()) != n - 1 || int64_t(flows_bwd.size()) != n - 1)
      throw std::invalid_argument("infer_frames: need T-1 flows per direction");
    const int64_t Hp = frames[0].dim(1), Wp = frames[0].dim(2);
    if (Hp % cfg_.pad_multiple() != 0 || Wp % cfg_.pad_multiple() != 0)
      throw std::invalid_argument("infer_frames: frame size not aligned to " +
                                  std::to_string(cfg_.pad_multiple()));

    std::vector<Tensor<T>> feats(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      Tape<T> tp;
      feats[size_t(i)] = encode(tp, tp.leaf(frames[size_t(i)], false))->val;
    }

    const int64_t h = Hp / cfg_.encoder_stride, w = Wp / cfg_.encoder_stride;
    std::vector<Tensor<T>> fwd_states(static_cast<size_t>(n));
    std::vector<Tensor<T>> bwd_states(static_cast<size_t>(n));
    if (fwd_masks) fwd_masks->resize(static_cast<size_t>(n));
    Tensor<T> prev({cfg_.encoder_channels, h, w});
    for (int64_t i = 0; i < n; ++i) {
      Tape<T> tp;
      StepOut so = step(tp, true, tp.leaf(feats[size_t(i)], false), tp.leaf(prev, false),
                        i > 0 ? &flows_fwd[size_t(i - 1)] : nullptr);
      fwd_states[size_t(i)] = so.state->val;
      if (fwd_masks) (*fwd_masks)[size_t(i)] = so.mask->val;
      prev = so.state->val;
    }
    Tensor<T> next({cfg_.encoder_channels, h, w});
    for (int64_t i = n - 1; i >= 0; --i) {
      Tape<T> tp;
      StepOut so = step(tp, false, tp.leaf(feats[size_t(i)], false), tp.leaf(next, false),
                        i < n - 1 ? &flows_bwd[size_t(i)] : nullptr);
      bwd_states[size_t(i)] = so.state->val;
      next = so.state->val;
    }

    std::vector<Tensor<T>> outputs(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      Tape<T> tp;
      outputs[size_t(i)] = decode(tp, tp.leaf(fwd_states[size_t(i)], false),
                                  tp.leaf(bwd_states[size_t(i)], false))
                               ->val;
    }
    return outputs;
  }

  // {T,H,W,C} -> per-frame {3,Hp,Wp} reflect-padded to the window grid
  std::vector<Tensor<T>> pad_frames_aligned(const video::FrameSequence& input) const {
    return pad_frames(input);
  }

  // Inference over a full sequence with bounded memory: frames are
  // reflect-padded to the window grid, flows come from the provider at full
  // resolution and are rescaled to feature resolution, and each recurrence
  // step runs on its own throwaway tape.
  RestoreResult restore_sequence(const video::FrameSequence& input,
                                 flow::FlowProvider& flow_provider) const {
    std::vector<Tensor<double>> fwd, bwd;
    return restore_padded(pad_frames(input), input, &flow_provider, fwd, bwd);
  }

  // Variant with caller-supplied full-resolution flows over the *unpadded*
  // frames; only legal when the input is already aligned to pad_multiple().
  RestoreResult restore_sequence(const video::FrameSequence& input,
                                 const std::vector<Tensor<double>>& flows_fwd,
                                 const std::vector<Tensor<double>>& flows_bwd) const {
    if (input.h() % cfg_.pad_multiple() != 0 || input.w() % cfg_.pad_multiple() != 0)
      throw std::invalid_argument("caller-supplied flows need pre-aligned frames");
    return restore_padded(pad_frames(input), input, nullptr, flows_fwd, flows_bwd);
  }

 private:
  struct NoGradGuard {
    nn::ParamStore<T>* ps;
    explicit NoGradGuard(nn::ParamStore<T>* p) : ps(p) { ps->set_requires_grad(false); }
    ~NoGradGuard() { ps->set_requires_grad(true); }
  };

  // {T,H,W,C} -> per-frame {3,Hp,Wp} reflect-padded to the window grid
  std::vector<Tensor<T>> pad_frames(const video::FrameSequence& input) const {
    int64_t mult = cfg_.pad_multiple();
    int64_t H = input.h(), W = input.w();
    int64_t Hp = (H + mult - 1) / mult * mult, Wp = (W + mult - 1) / mult * mult;
    std::vector<Tensor<T>> out;
    for (int64_t i = 0; i < input.t(); ++i) {
      Tensor<double> chw = video::frame_chw(input, i);
      if (chw.dim(0) == 1) {  // grayscale footage rides in replicated channels
        Tensor<double> rep({3, H, W});
        for (int64_t c = 0; c < 3; ++c)
          std::copy(chw.data(), chw.data() + H * W, rep.data() + c * H * W);
        chw = std::move(rep);
      }
      Tape<T> tp;
      Var<T> padded = ad::pad2d(tp, tp.leaf(tensor_cast<T>(chw), false), 0, Hp - H, 0, Wp - W,
                                ad::Pad::kReflect);
      out.push_back(padded->val);
    }
    return out;
  }

  RestoreResult restore_padded(const std::vector<Tensor<T>>& frames,
                               const video::FrameSequence& input,
                               flow::FlowProvider* provider,
                               const std::vector<Tensor<double>>& given_fwd,
                               const std::vector<Tensor<double>>& given_bwd) const {
    if (cfg_.mode != Mode::kRestore)
      throw std::logic_error("restore_sequence drives the restoration head only");
    int64_t n = int64_t(frames.size());
    int64_t Hp = frames[0].dim(1), Wp = frames[0].dim(2);
    int64_t H = input.h(), W = input.w();
    int64_t stride = cfg_.encoder_stride;

    std::vector<Tensor<T>> flows_fwd, flows_bwd;
    for (int64_t i = 0; i + 1 < n; ++i) {
      Tensor<double> ffull, bfull;
      if (provider) {
        Tensor<double> a = hwc_of(frames[size_t(i)]);
        Tensor<double> b = hwc_of(frames[size_t(i + 1)]);
        ffull = provider->estimate(b, a).flow;  // aligns frame i onto i+1
        bfull = provider->estimate(a, b).flow;  // aligns frame i+1 onto i
      } else {
        if (int64_t(given_fwd.size()) != n - 1 || int64_t(given_bwd.size()) != n - 1)
          throw std::invalid_argument("restore_sequence: need T-1 flows per direction");
        ffull = given_fwd[size_t(i)];
        bfull = given_bwd[size_t(i)];
      }
      flows_fwd.push_back(tensor_cast<T>(flow::downscale_flow(ffull, stride)));
      flows_bwd.push_back(tensor_cast<T>(flow::downscale_flow(bfull, stride)));
    }

    std::vector<Tensor<T>> masks;
    std::vector<Tensor<T>> outputs = infer_frames(frames, flows_fwd, flows_bwd, &masks);

    RestoreResult res;
    res.restored.frames = Tensor<double>({n, H, W, cfg_.out_channels()});
    res.restored.fps = input.fps;
    res.restored.color_space = video::ColorSpace::kRGB;
    res.fwd_masks = Tensor<double>({n, H, W});
    for (int64_t i = 0; i < n; ++i) {
      const Tensor<T>& yv = outputs[size_t(i)];  // {C_out, Hp, Wp}
      int64_t C = cfg_.out_channels();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t yy = 0; yy < H; ++yy)
          for (int64_t xx = 0; xx < W; ++xx) {
            double v = double(yv[(c * Hp + yy) * Wp + xx]);
            res.restored.frames[((i * H + yy) * W + xx) * C + c] =
                std::min(1.0, std::max(0.0, v));
          }
      Tape<T> tp;
      Var<T> mu = ad::upsample_bilinear(tp, tp.leaf(masks[size_t(i)], false), Hp, Wp);
      for (int64_t yy = 0; yy < H; ++yy)
        for (int64_t xx = 0; xx < W; ++xx)
          res.fwd_masks[(i * H + yy) * W + xx] = double(mu->val[yy * Wp + xx]);
    }
    return res;
  }

  static Tensor<double> hwc_of(const Tensor<T>& chw) {
    int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor<double> out({H, W, C});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          out[(y * W + x) * C + c] = double(chw[(c * H + y) * W + x]);
    return out;
  }

  ModelConfig cfg_;
  nn::ParamStore<T>* ps_;
  Encoder<T> enc_;
  MaskNet<T> fwd_mask_, bwd_mask_;
  SpatialRestore<T> fwd_restore_, bwd_restore_;
  Decoder<T> dec_;
  CorrespondenceEncoder<T> corr_;
};

}  // namespace rtn::model

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rtn/checkpoint.hpp"
#include "rtn/colorize.hpp"
#include "rtn/colorspace.hpp"
#include "rtn/degrade.hpp"
#include "rtn/flow.hpp"
#include "rtn/losses.hpp"
#include "rtn/model.hpp"
#include "rtn/nn.hpp"
#include "rtn/ops.hpp"
#include "rtn/rng.hpp"
#include "rtn/tape.hpp"
#include "rtn/videodata.hpp"

// Optimization loop: Adam over the recurrence + discriminator with
// alternating hinge-GAN steps, linear-decay learning-rate schedule, and an
// on-the-fly degradation sampler that turns clean clips into training pairs.
namespace rtn::train {

using ad::Tape;
using ad::Var;

enum class DecaySchedule { kNone, kLinearAfter };

inline std::string decay_name(DecaySchedule d) {
  return d == DecaySchedule::kNone ? "none" : "linear_after";
}

inline DecaySchedule decay_from(const std::string& s) {
  if (s == "none") return DecaySchedule::kNone;
  if (s == "linear_after") return DecaySchedule::kLinearAfter;
  throw std::invalid_argument("unknown decay schedule: " + s);
}

struct TrainConfig {
  int64_t epochs = 20;
  double lr_main = 2e-4;
  double lr_flow = 2.5e-5;  // used only when the flow provider is trainable
  double beta1 = 0.9;
  double beta2 = 0.99;
  int64_t crop = 256;
  int64_t clip_len = 8;
  int64_t batch = 4;
  int64_t flow_freeze_epochs = 5;
  uint64_t seed = 0;
  losses::LossWeights loss_weights;
  DecaySchedule decay = DecaySchedule::kNone;

  std::string to_json() const {
    nlohmann::json j;
    j["epochs"] = epochs;
    j["lr_main"] = lr_main;
    j["lr_flow"] = lr_flow;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["crop"] = crop;
    j["clip_len"] = clip_len;
    j["batch"] = batch;
    j["flow_freeze_epochs"] = flow_freeze_epochs;
    j["seed"] = seed;
    j["loss_weights"] = {{"lambda_1", loss_weights.lambda_1},
                         {"lambda_p", loss_weights.lambda_p},
                         {"lambda_g", loss_weights.lambda_g}};
    j["decay"] = decay_name(decay);
    return j.dump(2);
  }

  static TrainConfig from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.lr_main = j.value("lr_main", c.lr_main);
    c.lr_flow = j.value("lr_flow", c.lr_flow);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.crop = j.value("crop", c.crop);
    c.clip_len = j.value("clip_len", c.clip_len);
    c.batch = j.value("batch", c.batch);
    c.flow_freeze_epochs = j.value("flow_freeze_epochs", c.flow_freeze_epochs);
    c.seed = j.value("seed", c.seed);
    if (j.count("loss_weights")) {
      const auto& w = j["loss_weights"];
      c.loss_weights.lambda_1 = w.value("lambda_1", c.loss_weights.lambda_1);
      c.loss_weights.lambda_p = w.value("lambda_p", c.loss_weights.lambda_p);
      c.loss_weights.lambda_g = w.value("lambda_g", c.loss_weights.lambda_g);
    }
    c.decay = decay_from(j.value("decay", decay_name(c.decay)));
    return c;
  }
};

// Learning rate at a step. kNone holds lr_main throughout. kLinearAfter holds
// lr_main for the first half of an extended run (the configured epochs) and
// then decays linearly to zero over a second, equally long phase, so
// total_steps covers both phases.
inline double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  if (step < 0 || total_steps <= 0) throw std::invalid_argument("lr_at: bad step counts");
  if (cfg.decay == DecaySchedule::kNone) return cfg.lr_main;
  const int64_t hold = total_steps / 2;
  if (step <= hold) return cfg.lr_main;
  if (step >= total_steps) return 0.0;
  return cfg.lr_main * double(total_steps - step) / double(total_steps - hold);
}

// Adam with decoupled moment state per parameter; `apply` only touches
// parameters selected by the predicate, so generator and discriminator
// updates stay isolated.
template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void apply(nn::ParamStore<T>& ps, double lr,
             const std::function<bool(const std::string&)>& pick) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (const std::string& name : ps.names()) {
      if (!pick(name)) continue;
      ad::Node<T>* n = ps.node(name);
      if (n->grad.size() == 0) continue;
      auto& mv = moments_[name];
      if (mv.first.size() == 0) {
        mv.first = Tensor<double>(n->val.shape());
        mv.second = Tensor<double>(n->val.shape());
      }
      for (int64_t i = 0; i < n->val.size(); ++i) {
        const double g = double(n->grad[i]);
        double& m = mv.first[i];
        double& v = mv.second[i];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g * g;
        n->val[i] = T(double(n->val[i]) - lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

  int64_t steps() const { return t_; }

  void save(ckpt::Checkpoint& c, const std::string& tag) const {
    Tensor<double> tc({1});
    tc[0] = double(t_);
    c.tensors.emplace_back("optim." + tag + ".t", tc);
    for (const auto& [name, mv] : moments_) {
      c.tensors.emplace_back("optim." + tag + ".m." + name, mv.first);
      c.tensors.emplace_back("optim." + tag + ".v." + name, mv.second);
    }
  }

  void load(const ckpt::Checkpoint& c, const std::string& tag) {
    moments_.clear();
    t_ = 0;
    const std::string tp = "optim." + tag + ".t";
    const std::string mp = "optim." + tag + ".m.";
    const std::string vp = "optim." + tag + ".v.";
    for (const auto& [name, ten] : c.tensors) {
      if (name == tp)
        t_ = int64_t(ten[0]);
      else if (name.rfind(mp, 0) == 0)
        moments_[name.substr(mp.size())].first = ten;
      else if (name.rfind(vp, 0) == 0)
        moments_[name.substr(vp.size())].second = ten;
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  // parameter name -> (first moment, second moment), kept in double
  std::map<std::string, std::pair<Tensor<double>, Tensor<double>>> moments_;
};

// One training clip. Restoration: degraded input vs clean target. Chroma
// training: `clean` is a color clip, `ref_index` picks the in-clip reference
// frame, and `degraded` stays empty. Flows are full-resolution {H,W,2}
// displacement fields between adjacent frames.
struct ClipSample {
  video::FrameSequence degraded;
  video::FrameSequence clean;
  std::vector<Tensor<double>> flows_fwd;  // [i] aligns frame i onto i+1
  std::vector<Tensor<double>> flows_bwd;  // [i] aligns frame i+1 onto i
  int64_t ref_index = 0;
};

using TrainBatch = std::vector<ClipSample>;

struct StepRecord {
  int64_t step = 0;
  double l1 = 0.0;
  double perc = 0.0;
  double g = 0.0;
  double d = 0.0;
  double lr = 0.0;
};

inline void append_loss_log(std::ostream& os, const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["l1"] = r.l1;
  j["perc"] = r.perc;
  j["g"] = r.g;
  j["d"] = r.d;
  j["lr"] = r.lr;
  os << j.dump() << "\n";
}

// Owns the model, discriminator, perceptual features and both optimizers.
// Per step: one discriminator update on (clean, detached output) then one
// generator update against the refreshed discriminator — the two parameter
// sets never see each other's gradients.
class Trainer {
 public:
  Trainer(model::ModelConfig mc, TrainConfig tc, int64_t total_steps,
          uint64_t init_seed = 0x52544e01ull)
      : mcfg_(mc),
        cfg_(tc),
        total_steps_(total_steps),
        model_(mc, ps_, init_seed),
        fx_(),
        opt_g_(tc.beta1, tc.beta2),
        opt_d_(tc.beta1, tc.beta2) {
    if (total_steps <= 0) throw std::invalid_argument("trainer: total_steps must be positive");
    Rng drng(init_seed + 1);
    disc_ = losses::Discriminator<float>::create(ps_, "disc", drng);
  }

  model::RtnModel<float>& net() { return model_; }
  nn::ParamStore<float>& params() { return ps_; }
  const TrainConfig& config() const { return cfg_; }
  const model::ModelConfig& model_config() const { return mcfg_; }
  int64_t step() const { return step_; }
  int64_t total_steps() const { return total_steps_; }
  void set_epoch(int64_t e) { epoch_ = e; }
  void set_flow_trainable(bool t) { flow_trainable_ = t; }

  StepRecord train_step(const TrainBatch& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const double lr = lr_at(step_, total_steps_, cfg_);
    const double inv_n = 1.0 / double(batch.size());
    const bool use_adv = cfg_.loss_weights.lambda_g != 0.0 && batch[0].clean.t() >= 4;
    ps_.zero_grad();

    // generator graph: restored (or recolorized) outputs per clip
    ps_.set_requires_grad("disc.", false);
    Tape<float> tg;
    std::vector<std::vector<Var<float>>> outs_rgb(batch.size());
    Var<float> l1_sum = nullptr;
    Var<float> perc_sum = nullptr;
    std::vector<Tensor<float>> real_clips(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
      Var<float> l1_clip = nullptr;
      Var<float> perc_clip = nullptr;
      if (mcfg_.mode == model::Mode::kRestore)
        forward_restore(tg, batch[b], outs_rgb[b], l1_clip, perc_clip, real_clips[b]);
      else
        forward_colorize(tg, batch[b], outs_rgb[b], l1_clip, perc_clip, real_clips[b]);
      l1_sum = accum(tg, l1_sum, l1_clip);
      perc_sum = accum(tg, perc_sum, perc_clip);
    }
    Var<float> l1 = ad::scale(tg, l1_sum, float(inv_n));
    Var<float> perc = ad::scale(tg, perc_sum, float(inv_n));

    // discriminator step on clean vs the detached outputs
    double d_val = 0.0;
    if (use_adv) {
      ps_.set_requires_grad("disc.", true);
      Tape<float> td;
      Var<float> d_sum = nullptr;
      for (size_t b = 0; b < batch.size(); ++b) {
        Tensor<float> fake = stack_values(outs_rgb[b]);
        Var<float> sr = disc_(td, td.leaf(real_clips[b], false));
        Var<float> sf = disc_(td, td.leaf(fake, false));
        d_sum = accum(td, d_sum, losses::d_hinge_loss(td, sr, sf));
      }
      Var<float> d_loss = ad::scale(td, d_sum, float(inv_n));
      d_val = double(d_loss->val[0]);
      require_finite(d_val, "d");
      td.backward(d_loss);
      opt_d_.apply(ps_, lr, [](const std::string& n) { return n.rfind("disc.", 0) == 0; });
      ps_.set_requires_grad("disc.", false);
    }

    // generator step against the refreshed discriminator
    Var<float> g_adv = nullptr;
    if (use_adv) {
      Var<float> g_sum = nullptr;
      for (size_t b = 0; b < batch.size(); ++b) {
        Var<float> clip = ad::stack_frames(tg, outs_rgb[b]);
        g_sum = accum(tg, g_sum, losses::g_adv_loss(tg, disc_(tg, clip)));
      }
      g_adv = ad::scale(tg, g_sum, float(inv_n));
    }
    Var<float> total = losses::combine_losses(tg, l1, perc, g_adv, cfg_.loss_weights);

    StepRecord rec;
    rec.step = step_;
    rec.l1 = double(l1->val[0]);
    rec.perc = double(perc->val[0]);
    rec.g = g_adv ? double(g_adv->val[0]) : 0.0;
    rec.d = d_val;
    rec.lr = lr;
    require_finite(rec.l1, "l1");
    require_finite(rec.perc, "perc");
    require_finite(rec.g, "g");
    require_finite(double(total->val[0]), "total");

    tg.backward(total);
    opt_g_.apply(ps_, lr, [](const std::string& n) {
      return n.rfind("disc.", 0) != 0 && n.rfind("flow.", 0) != 0;
    });
    if (flow_trainable_ && epoch_ >= cfg_.flow_freeze_epochs)
      opt_g_.apply(ps_, cfg_.lr_flow,
                   [](const std::string& n) { return n.rfind("flow.", 0) == 0; });
    ps_.set_requires_grad("disc.", true);

    ++step_;
    return rec;
  }

  void save_checkpoint(const std::string& path, const std::string& extra_json = "{}") const {
    ckpt::Checkpoint c;
    nlohmann::json cj;
    cj["model"] = nlohmann::json::parse(mcfg_.to_json());
    cj["train"] = nlohmann::json::parse(cfg_.to_json());
    c.config_json = cj.dump(2);
    c.extra_json = extra_json;
    ckpt::collect_params(c, ps_);
    Tensor<double> st({1});
    st[0] = double(step_);
    c.tensors.emplace_back("trainer.step", st);
    opt_g_.save(c, "g");
    opt_d_.save(c, "d");
    ckpt::write_checkpoint(path, c);
  }

  // restores parameters, optimizer state and the step counter; returns the
  // checkpoint's extra payload (sampler state and the like)
  std::string load_checkpoint(const std::string& path) {
    ckpt::Checkpoint c = ckpt::read_checkpoint(path);
    ckpt::restore_params(c, ps_);
    opt_g_.load(c, "g");
    opt_d_.load(c, "d");
    if (const Tensor<double>* st = c.find("trainer.step")) step_ = int64_t((*st)[0]);
    return c.extra_json;
  }

 private:
  static Var<float> accum(Tape<float>& t, Var<float> sum, Var<float> term) {
    return sum ? ad::add(t, sum, term) : term;
  }

  void require_finite(double v, const char* part) const {
    if (!std::isfinite(v))
      throw std::runtime_error("non-finite " + std::string(part) + " loss at step " +
                               std::to_string(step_));
  }

  // {C,H,W} frame leaves stacked into a plain {C,T,H,W} clip tensor
  static Tensor<float> stack_values(const std::vector<Var<float>>& frames) {
    const int64_t n = int64_t(frames.size());
    const int64_t C = frames[0]->val.dim(0), H = frames[0]->val.dim(1),
                  W = frames[0]->val.dim(2);
    Tensor<float> out({C, n, H, W});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < C; ++c)
        std::copy(frames[size_t(i)]->val.data() + c * H * W,
                  frames[size_t(i)]->val.data() + (c + 1) * H * W,
                  out.data() + (c * n + i) * H * W);
    return out;
  }

  Tensor<float> frame3(const video::FrameSequence& seq, int64_t i) const {
    Tensor<double> chw = video::frame_chw(seq, i);
    const int64_t H = chw.dim(1), W = chw.dim(2);
    if (chw.dim(0) == 1) {
      Tensor<double> rep({3, H, W});
      for (int64_t c = 0; c < 3; ++c)
        std::copy(chw.data(), chw.data() + H * W, rep.data() + c * H * W);
      chw = std::move(rep);
    }
    if (chw.dim(0) != 3) throw std::invalid_argument("train: want 1- or 3-channel frames");
    return tensor_cast<float>(chw);
  }

  std::vector<Tensor<float>> feature_flows(const std::vector<Tensor<double>>& full) const {
    std::vector<Tensor<float>> out;
    out.reserve(full.size());
    for (const auto& f : full)
      out.push_back(tensor_cast<float>(flow::downscale_flow(f, mcfg_.encoder_stride)));
    return out;
  }

  void forward_restore(Tape<float>& tg, const ClipSample& s, std::vector<Var<float>>& outs,
                       Var<float>& l1_clip, Var<float>& perc_clip, Tensor<float>& real_clip) {
    const int64_t n = s.degraded.t();
    if (s.clean.t() != n) throw std::invalid_argument("train: clip length mismatch");
    if (s.degraded.color_space == video::ColorSpace::kLab)
      throw std::invalid_argument("train: LAB clips not supported");
    std::vector<Var<float>> frames;
    std::vector<Var<float>> targets;
    for (int64_t i = 0; i < n; ++i) {
      frames.push_back(tg.leaf(frame3(s.degraded, i), false));
      targets.push_back(tg.leaf(frame3(s.clean, i), false));
    }
    auto res = model_.forward_clip(tg, frames, feature_flows(s.flows_fwd),
                                   feature_flows(s.flows_bwd));
    outs = res.outputs;
    l1_clip = losses::l1_loss(tg, outs, targets);
    perc_clip = losses::perceptual_loss(tg, fx_, outs, targets);
    std::vector<Var<float>> tv(targets.begin(), targets.end());
    real_clip = stack_values(tv);
  }

  void forward_colorize(Tape<float>& tg, const ClipSample& s, std::vector<Var<float>>& outs_rgb,
                        Var<float>& l1_clip, Var<float>& perc_clip, Tensor<float>& real_clip) {
    const int64_t n = s.clean.t(), H = s.clean.h(), W = s.clean.w();
    if (s.clean.c() != 3 || s.clean.color_space != video::ColorSpace::kRGB)
      throw std::invalid_argument("train: chroma training needs RGB clips");
    if (s.ref_index < 0 || s.ref_index >= n)
      throw std::invalid_argument("train: reference index out of range");

    // scaled LAB planes per frame
    std::vector<Tensor<double>> lum(static_cast<size_t>(n));
    std::vector<Tensor<double>> ab_gt(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      Tensor<double> hwc = video::frame_hwc(s.clean, i);
      Tensor<double> lab({H, W, 3});
      for (int64_t p = 0; p < H * W; ++p)
        color::rgb_to_lab_pixel(hwc.data() + p * 3, lab.data() + p * 3);
      colorize::split_scaled_lab(lab, lum[size_t(i)], ab_gt[size_t(i)]);
    }

    // reference chroma at correspondence resolution + its features
    Var<float> ref_lum = tg.leaf(tensor_cast<float>(lum[size_t(s.ref_index)]), false);
    Var<float> ref_feat = model_.correspondence()(tg, ref_lum);
    const int64_t hc = ref_feat->val.dim(1), wc = ref_feat->val.dim(2);
    Var<float> ref_ab_c = ad::upsample_bilinear(
        tg, tg.leaf(tensor_cast<float>(ab_gt[size_t(s.ref_index)]), false), hc, wc);

    std::vector<Var<float>> frames;
    std::vector<Var<float>> ab_targets;
    for (int64_t i = 0; i < n; ++i) {
      Var<float> lv = tg.leaf(tensor_cast<float>(lum[size_t(i)]), false);
      Var<float> feat = model_.correspondence()(tg, lv);
      Var<float> coarse = colorize::coarse_color_transfer(
          tg, feat, ref_feat, ref_ab_c, colorize::kTemperature, H, W);
      frames.push_back(ad::concat_c(tg, lv, coarse));
      ab_targets.push_back(tg.leaf(tensor_cast<float>(ab_gt[size_t(i)]), false));
    }
    auto res = model_.forward_clip(tg, frames, feature_flows(s.flows_fwd),
                                   feature_flows(s.flows_bwd));

    // fidelity on scaled chroma; perceptual/adversarial back in RGB
    l1_clip = losses::l1_loss(tg, res.outputs, ab_targets);
    outs_rgb.clear();
    std::vector<Var<float>> rgb_targets;
    for (int64_t i = 0; i < n; ++i) {
      Var<float> lv = tg.leaf(tensor_cast<float>(lum[size_t(i)]), false);
      Var<float> lab = ad::concat_c(tg, ad::scale(tg, lv, 100.0f),
                                    ad::scale(tg, res.outputs[size_t(i)], 128.0f));
      outs_rgb.push_back(color::lab_to_rgb_op(tg, lab));
      rgb_targets.push_back(tg.leaf(frame3(s.clean, i), false));
    }
    perc_clip = losses::perceptual_loss(tg, fx_, outs_rgb, rgb_targets);
    real_clip = stack_values(rgb_targets);
  }

  model::ModelConfig mcfg_;
  TrainConfig cfg_;
  int64_t total_steps_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  bool flow_trainable_ = false;
  nn::ParamStore<float> ps_;
  model::RtnModel<float> model_;
  losses::ConvPyramidFeatures<float> fx_;
  losses::Discriminator<float> disc_;
  Adam<float> opt_g_;
  Adam<float> opt_d_;
};

// Draws training clips from a directory of clean sequences: every
// subdirectory holding numbered frames is one sequence (a bare frame
// directory works too). Restoration mode degrades each crop with a freshly
// sampled recipe; contaminant textures come from a `templates` subdirectory
// when present, otherwise from a procedural library. Flows are estimated
// once per adjacent full-resolution frame pair on the clean footage, cached,
// and cropped with the clip.
class ClipSampler {
 public:
  ClipSampler(const std::string& data_dir, const TrainConfig& tc, const model::ModelConfig& mc,
              flow::FlowProvider& fp)
      : cfg_(tc), mcfg_(mc), flow_(&fp), rng_(tc.seed) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(data_dir)) throw std::runtime_error("data dir not found: " + data_dir);
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(data_dir)) {
      if (!e.is_directory() || e.path().filename() == "templates") continue;
      if (fs::exists(e.path() / "frame_000001.png")) dirs.push_back(e.path().string());
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty() && fs::exists(fs::path(data_dir) / "frame_000001.png"))
      dirs.push_back(data_dir);
    if (dirs.empty()) throw std::runtime_error("no frame sequences under " + data_dir);
    for (const auto& d : dirs) {
      video::FrameSequence seq = video::load_sequence(d);
      if (seq.t() < cfg_.clip_len) continue;
      if (mcfg_.mode == model::Mode::kColorize && seq.c() != 3) continue;
      seqs_.push_back(std::move(seq));
      total_frames_ += seqs_.back().t();
    }
    if (seqs_.empty())
      throw std::runtime_error("no usable sequences (need >= " +
                               std::to_string(cfg_.clip_len) + " frames each) under " +
                               data_dir);
    if (mcfg_.mode == model::Mode::kRestore) {
      const fs::path tdir = fs::path(data_dir) / "templates";
      templates_ = fs::is_directory(tdir) ? degrade::load_template_library(tdir.string())
                                          : degrade::procedural_template_library(cfg_.seed);
      for (const auto& [id, t] : templates_) template_ids_.push_back(id);
    }
  }

  int64_t sequences() const { return int64_t(seqs_.size()); }

  // batches that constitute one pass over the corpus, for epoch accounting
  int64_t steps_per_epoch() const {
    const int64_t clips = std::max<int64_t>(1, total_frames_ / cfg_.clip_len);
    return std::max<int64_t>(1, clips / std::max<int64_t>(1, cfg_.batch));
  }

  TrainBatch next_batch() {
    TrainBatch batch;
    for (int64_t b = 0; b < cfg_.batch; ++b) batch.push_back(sample_clip());
    return batch;
  }

  std::string state() const { return rng_.save_state(); }
  void set_state(const std::string& s) { rng_.load_state(s); }

 private:
  ClipSample sample_clip() {
    const int64_t si = rng_.uniform_int(0, int64_t(seqs_.size()) - 1);
    const video::FrameSequence& seq = seqs_[size_t(si)];
    const int64_t mult = mcfg_.pad_multiple();
    int64_t cs = std::min(cfg_.crop, std::min(seq.h(), seq.w()));
    cs = cs / mult * mult;
    if (cs <= 0)
      throw std::runtime_error("sequence smaller than the model grid of " +
                               std::to_string(mult));
    const int64_t t0 = rng_.uniform_int(0, seq.t() - cfg_.clip_len);
    const int64_t y0 = rng_.uniform_int(0, seq.h() - cs);
    const int64_t x0 = rng_.uniform_int(0, seq.w() - cs);

    ClipSample s;
    s.clean.frames = Tensor<double>({cfg_.clip_len, cs, cs, seq.c()});
    s.clean.fps = seq.fps;
    s.clean.color_space = seq.color_space;
    for (int64_t i = 0; i < cfg_.clip_len; ++i)
      for (int64_t y = 0; y < cs; ++y)
        for (int64_t x = 0; x < cs; ++x)
          for (int64_t c = 0; c < seq.c(); ++c)
            s.clean.frames[((i * cs + y) * cs + x) * seq.c() + c] =
                seq.frames[(((t0 + i) * seq.h() + y0 + y) * seq.w() + x0 + x) * seq.c() + c];

    for (int64_t i = 0; i + 1 < cfg_.clip_len; ++i) {
      s.flows_fwd.push_back(crop_flow(cached_flow(si, t0 + i, true), y0, x0, cs));
      s.flows_bwd.push_back(crop_flow(cached_flow(si, t0 + i, false), y0, x0, cs));
    }

    if (mcfg_.mode == model::Mode::kRestore) {
      degrade::DegradationRecipe recipe = degrade::sample_recipe(
          template_ids_, uint64_t(rng_.uniform_int(0, std::numeric_limits<int64_t>::max())));
      s.degraded = degrade::degrade_sequence(s.clean, recipe, templates_).degraded;
    } else {
      s.ref_index = rng_.uniform_int(0, cfg_.clip_len - 1);
    }
    return s;
  }

  // full-resolution flow between frames (t, t+1) of sequence si
  const Tensor<double>& cached_flow(int64_t si, int64_t t, bool fwd) {
    const int64_t key = (si * 1000000 + t) * 2 + (fwd ? 1 : 0);
    auto it = flow_cache_.find(key);
    if (it != flow_cache_.end()) return it->second;
    Tensor<double> a = video::frame_hwc(seqs_[size_t(si)], t);
    Tensor<double> b = video::frame_hwc(seqs_[size_t(si)], t + 1);
    Tensor<double> f = fwd ? flow_->estimate(b, a).flow : flow_->estimate(a, b).flow;
    return flow_cache_.emplace(key, std::move(f)).first->second;
  }

  static Tensor<double> crop_flow(const Tensor<double>& flow, int64_t y0, int64_t x0,
                                  int64_t cs) {
    Tensor<double> out({cs, cs, 2});
    const int64_t W = flow.dim(1);
    for (int64_t y = 0; y < cs; ++y)
      for (int64_t x = 0; x < cs; ++x)
        for (int64_t k = 0; k < 2; ++k)
          out[(y * cs + x) * 2 + k] = flow[((y0 + y) * W + x0 + x) * 2 + k];
    return out;
  }

  TrainConfig cfg_;
  model::ModelConfig mcfg_;
  flow::FlowProvider* flow_;
  Rng rng_;
  std::vector<video::FrameSequence> seqs_;
  int64_t total_frames_ = 0;
  degrade::TemplateLibrary templates_;
  std::vector<std::string> template_ids_;
  std::unordered_map<int64_t, Tensor<double>> flow_cache_;
};

}  // namespace rtn::train

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/opencv.hpp>

#include "CLI11.hpp"
#include "json.hpp"
#include "rtn/checkpoint.hpp"
#include "rtn/colorize.hpp"
#include "rtn/degrade.hpp"
#include "rtn/flow.hpp"
#include "rtn/metrics.hpp"
#include "rtn/model.hpp"
#include "rtn/train.hpp"
#include "rtn/videodata.hpp"

namespace fs = std::filesystem;
using namespace rtn;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  if (!f) throw std::runtime_error("cannot write file: " + path);
}

// pyramid depth the built-in estimator can afford at this resolution
int flow_levels(int64_t h, int64_t w) {
  int levels = 1;
  while (levels < 3 && std::min(h, w) >= (int64_t(16) << levels)) ++levels;
  return levels;
}

Tensor<double> load_rgb_png(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("unreadable image: " + path);
  Tensor<double> out({img.rows, img.cols, 3});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < 3; ++c)
        out[(int64_t(y) * img.cols + x) * 3 + c] = img.ptr<uint8_t>(y)[x * 3 + (2 - c)] / 255.0;
  return out;
}

// frame dims of the first sequence under a training data dir (mirrors the
// sampler's directory layout: sequence subdirs, or the dir itself)
std::pair<int64_t, int64_t> probe_frame_dims(const std::string& data_dir) {
  std::vector<fs::path> candidates;
  if (fs::is_directory(data_dir)) {
    for (const auto& e : fs::directory_iterator(data_dir)) {
      if (!e.is_directory() || e.path().filename() == "templates") continue;
      if (fs::exists(e.path() / "frame_000001.png")) candidates.push_back(e.path());
    }
    std::sort(candidates.begin(), candidates.end());
    if (candidates.empty() && fs::exists(fs::path(data_dir) / "frame_000001.png"))
      candidates.push_back(data_dir);
  }
  if (candidates.empty()) throw std::runtime_error("no sequences under data dir: " + data_dir);
  cv::Mat img = cv::imread((candidates[0] / "frame_000001.png").string());
  if (img.empty())
    throw std::runtime_error("unreadable frame: " + (candidates[0] / "frame_000001.png").string());
  return {img.rows, img.cols};
}

void require_frames_on_disk(const std::string& dir, int64_t count) {
  for (int64_t i = 1; i <= count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.png", int(i));
    if (!fs::exists(fs::path(dir) / buf))
      throw std::runtime_error("output frame missing after write: " + (fs::path(dir) / buf).string());
  }
}

// ------------------------------------------------------------------ degrade

int run_degrade(const std::string& in_dir, const std::string& out_dir,
                const std::string& templates_dir, uint64_t seed, const std::string& recipe_file,
                bool emit_masks) {
  video::FrameSequence clean = video::load_sequence(in_dir);

  degrade::TemplateLibrary lib;
  if (!templates_dir.empty()) lib = degrade::load_template_library(templates_dir);

  degrade::DegradationRecipe recipe;
  if (!recipe_file.empty()) {
    recipe = degrade::DegradationRecipe::from_json(read_text(recipe_file));
  } else {
    if (templates_dir.empty()) lib = degrade::procedural_template_library(seed);
    std::vector<std::string> ids;
    for (const auto& [id, t] : lib) ids.push_back(id);
    recipe = degrade::sample_recipe(ids, seed);
  }

  degrade::DegradeResult result = degrade::degrade_sequence(clean, recipe, lib);
  fs::create_directories(out_dir);
  video::save_sequence(result.degraded, out_dir);
  write_text((fs::path(out_dir) / "recipe.json").string(), recipe.to_json());

  if (emit_masks) {
    int64_t T = result.defect_masks.dim(0), H = result.defect_masks.dim(1),
            W = result.defect_masks.dim(2);
    for (int64_t t = 0; t < T; ++t) {
      cv::Mat m(int(H), int(W), CV_8UC1);
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          m.ptr<uint8_t>(int(y))[x] = result.defect_masks[(t * H + y) * W + x] ? 255 : 0;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "mask_%06d.png", int(t + 1));
      if (!cv::imwrite((fs::path(out_dir) / buf).string(), m))
        throw std::runtime_error("cannot write mask: " + std::string(buf));
    }
  }

  require_frames_on_disk(out_dir, clean.t());
  std::cout << "degraded " << clean.t() << " frames -> " << out_dir << "\n";
  return 0;
}

// -------------------------------------------------------------------- train

int run_train(const std::string& data_dir, const std::string& config_file,
              const std::string& mode_str, const std::string& out_dir,
              const std::string& resume) {
  nlohmann::json cj = nlohmann::json::parse(read_text(config_file));
  model::ModelConfig mc =
      cj.contains("model") ? model::ModelConfig::from_json(cj["model"].dump()) : model::ModelConfig{};
  train::TrainConfig tc =
      cj.contains("train") ? train::TrainConfig::from_json(cj["train"].dump()) : train::TrainConfig{};
  mc.mode = model::mode_from(mode_str);

  auto [fh, fw] = probe_frame_dims(data_dir);
  flow::BlockMatchFlow provider(flow_levels(fh, fw));
  train::ClipSampler sampler(data_dir, tc, mc, provider);

  const int64_t spe = sampler.steps_per_epoch();
  const int64_t total_steps = tc.epochs * spe;
  train::Trainer trainer(mc, tc, total_steps);
  trainer.set_flow_trainable(provider.trainable());

  fs::create_directories(out_dir);
  bool resuming = !resume.empty();
  if (resuming) {
    nlohmann::json extra = nlohmann::json::parse(trainer.load_checkpoint(resume));
    if (extra.contains("sampler_state")) sampler.set_state(extra["sampler_state"]);
    std::cout << "resumed at step " << trainer.step() << "\n";
  }

  std::ofstream log((fs::path(out_dir) / "loss_log.jsonl").string(),
                    resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open loss log in " + out_dir);

  auto save_with_state = [&](const std::string& name) {
    nlohmann::json extra;
    extra["sampler_state"] = sampler.state();
    trainer.save_checkpoint((fs::path(out_dir) / name).string(), extra.dump());
  };

  while (trainer.step() < total_steps) {
    int64_t s = trainer.step();
    trainer.set_epoch(s / spe);
    train::StepRecord rec = trainer.train_step(sampler.next_batch());
    train::append_loss_log(log, rec);
    if ((s + 1) % spe == 0) {
      save_with_state("checkpoint_latest.rtnw");
      std::cout << "epoch " << (s / spe) << " step " << (s + 1) << "/" << total_steps
                << " l1 " << rec.l1 << " perc " << rec.perc << " g " << rec.g << " d " << rec.d
                << "\n";
    }
  }
  save_with_state("checkpoint_final.rtnw");
  if (!fs::exists(fs::path(out_dir) / "checkpoint_final.rtnw"))
    throw std::runtime_error("checkpoint missing after write");
  std::cout << "trained " << total_steps << " steps -> " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------- restore/colorize

model::ModelConfig config_from_checkpoint(const ckpt::Checkpoint& c) {
  nlohmann::json j = nlohmann::json::parse(c.config_json);
  if (!j.contains("model")) throw std::runtime_error("checkpoint lacks a model config");
  return model::ModelConfig::from_json(j["model"].dump());
}

int run_restore(const std::string& in_dir, const std::string& ckpt_file,
                const std::string& out_dir) {
  ckpt::Checkpoint c = ckpt::read_checkpoint(ckpt_file);
  model::ModelConfig mc = config_from_checkpoint(c);
  if (mc.mode != model::Mode::kRestore)
    throw std::runtime_error("checkpoint was trained for colorize, not restore");
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(mc, ps);
  ckpt::restore_params(c, ps);

  video::FrameSequence input = video::load_sequence(in_dir);
  flow::BlockMatchFlow provider(flow_levels(input.h(), input.w()));
  model::RestoreResult result = m.restore_sequence(input, provider);
  fs::create_directories(out_dir);
  video::save_sequence(result.restored, out_dir);
  require_frames_on_disk(out_dir, input.t());
  std::cout << "restored " << input.t() << " frames -> " << out_dir << "\n";
  return 0;
}

int run_colorize(const std::string& in_dir, const std::string& ref_png, int64_t ref_index,
                 const std::string& ckpt_file, const std::string& out_dir) {
  ckpt::Checkpoint c = ckpt::read_checkpoint(ckpt_file);
  model::ModelConfig mc = config_from_checkpoint(c);
  if (mc.mode != model::Mode::kColorize)
    throw std::runtime_error("checkpoint was trained for restore, not colorize");
  nn::ParamStore<float> ps;
  model::RtnModel<float> m(mc, ps);
  ckpt::restore_params(c, ps);

  video::FrameSequence gray = video::load_sequence(in_dir);
  Tensor<double> ref_rgb = load_rgb_png(ref_png);
  colorize::ColorReference ref = colorize::make_reference(m, ref_rgb, ref_index);
  flow::BlockMatchFlow provider(flow_levels(gray.h(), gray.w()));
  video::FrameSequence lab = colorize::colorize_sequence(m, gray, ref, provider);
  video::FrameSequence rgb = video::lab_to_rgb(lab);
  fs::create_directories(out_dir);
  video::save_sequence(rgb, out_dir);
  require_frames_on_disk(out_dir, gray.t());
  std::cout << "colorized " << gray.t() << " frames -> " << out_dir << "\n";
  return 0;
}

// --------------------------------------------------------------------- eval

int run_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& flow_source, const std::string& report_file) {
  std::vector<std::pair<std::string, std::pair<std::string, std::string>>> pairs;
  if (fs::exists(fs::path(pred_dir) / "frame_000001.png")) {
    pairs.emplace_back(fs::path(pred_dir).filename().string(), std::make_pair(pred_dir, gt_dir));
  } else {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(pred_dir))
      if (e.is_directory() && fs::exists(e.path() / "frame_000001.png"))
        names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const std::string& n : names) {
      fs::path g = fs::path(gt_dir) / n;
      if (!fs::exists(g / "frame_000001.png"))
        throw std::runtime_error("no ground-truth sequence for " + n);
      pairs.emplace_back(n, std::make_pair((fs::path(pred_dir) / n).string(), g.string()));
    }
  }
  if (pairs.empty()) throw std::runtime_error("no sequences under " + pred_dir);

  std::vector<metrics::SequenceScores> rows;
  for (const auto& [name, dirs] : pairs) {
    video::FrameSequence pred = video::load_sequence(dirs.first);
    video::FrameSequence gt = video::load_sequence(dirs.second);
    if (!pred.frames.same_shape(gt.frames))
      throw std::runtime_error("prediction/ground-truth dims differ for " + name);
    metrics::SequenceScores row;
    row.name = name;
    row.psnr = metrics::sequence_psnr(pred, gt);
    row.ssim = metrics::sequence_ssim(pred, gt);
    if (pred.t() >= 2) {
      flow::BlockMatchFlow provider(flow_levels(pred.h(), pred.w()));
      row.warping_error =
          metrics::warping_error(pred, flow_source == "gt" ? gt : pred, provider);
    } else {
      row.warping_error = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(row);
  }

  std::string report = metrics::report_json(rows);
  write_text(report_file, report);
  std::cout << report << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"old-film restoration and reference-based colorization toolkit"};
  app.require_subcommand(1);

  // degrade
  auto* deg = app.add_subcommand("degrade", "synthesize film damage over a clean sequence");
  std::string deg_in, deg_out, deg_templates, deg_recipe;
  uint64_t deg_seed = 0;
  bool deg_masks = false;
  deg->add_option("--in", deg_in, "directory of clean frame_%06d.png frames")->required();
  deg->add_option("--out", deg_out, "output directory for degraded frames + recipe.json")
      ->required();
  deg->add_option("--templates", deg_templates,
                  "directory of grayscale contaminant PNGs (procedural library when omitted)");
  deg->add_option("--seed", deg_seed, "seed for recipe sampling and per-frame jitter");
  deg->add_option("--recipe", deg_recipe, "recipe JSON to apply instead of sampling by seed");
  deg->add_flag("--emit-masks", deg_masks, "also write mask_%06d.png ground-truth defect masks");

  // train
  auto* tr = app.add_subcommand("train", "train a model on clean sequences");
  std::string tr_data, tr_config, tr_mode, tr_out, tr_resume;
  tr->add_option("--data", tr_data, "directory of training sequences (subdirs of frames)")
      ->required();
  tr->add_option("--config", tr_config, "JSON config with \"model\" and \"train\" sections")
      ->required();
  tr->add_option("--mode", tr_mode, "training objective")
      ->required()
      ->check(CLI::IsMember({"restore", "colorize"}));
  tr->add_option("--out", tr_out, "output directory for checkpoints and the loss log")
      ->required();
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");

  // restore
  auto* re = app.add_subcommand("restore", "run defect restoration over a sequence");
  std::string re_in, re_ckpt, re_out;
  re->add_option("--in", re_in, "directory of degraded frames")->required();
  re->add_option("--ckpt", re_ckpt, "restore-mode checkpoint")->required();
  re->add_option("--out", re_out, "output directory for restored frames")->required();

  // colorize
  auto* co = app.add_subcommand("colorize", "propagate color from a reference frame");
  std::string co_in, co_ref, co_ckpt, co_out;
  int64_t co_ref_index = 0;
  co->add_option("--in", co_in, "directory of grayscale frames")->required();
  co->add_option("--ref", co_ref, "color reference PNG aligned with one input frame")->required();
  co->add_option("--ref-index", co_ref_index, "0-based index of the frame the reference colors");
  co->add_option("--ckpt", co_ckpt, "colorize-mode checkpoint")->required();
  co->add_option("--out", co_out, "output directory for colorized frames")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  std::string ev_pred, ev_gt, ev_flow = "gt", ev_report;
  ev->add_option("--pred", ev_pred, "predicted sequence dir, or dir of sequence subdirs")
      ->required();
  ev->add_option("--gt", ev_gt, "ground-truth sequence dir with matching layout")->required();
  ev->add_option("--flow-source", ev_flow,
                 "frames the warping-error flows are estimated on (default gt)")
      ->check(CLI::IsMember({"gt", "pred"}));
  ev->add_option("--report", ev_report, "output JSON report path")->required();

  try {
    app.parse(argc, argv);
    if (deg->parsed())
      return run_degrade(deg_in, deg_out, deg_templates, deg_seed, deg_recipe, deg_masks);
    if (tr->parsed()) return run_train(tr_data, tr_config, tr_mode, tr_out, tr_resume);
    if (re->parsed()) return run_restore(re_in, re_ckpt, re_out);
    if (co->parsed()) return run_colorize(co_in, co_ref, co_ref_index, co_ckpt, co_out);
    if (ev->parsed()) return run_eval(ev_pred, ev_gt, ev_flow, ev_report);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

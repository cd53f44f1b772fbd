#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "rtn/videodata.hpp"

using namespace rtn;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  std::string cmd = std::string("\"") + RTN_CLI_PATH + "\" " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunResult r;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), p)) r.output.append(buf, n);
  int status = pclose(p);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "rtn_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

// small moving color pattern, enough frames for two clips
void write_clean_data(const fs::path& dir, int64_t T = 8, int64_t HW = 32) {
  video::FrameSequence s;
  s.frames = Tensor<double>({T, HW, HW, 3});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < HW; ++y)
      for (int64_t x = 0; x < HW; ++x) {
        double* px = s.frames.data() + (((t * HW) + y) * HW + x) * 3;
        px[0] = 0.5 + 0.4 * std::sin(0.3 * double(x) + 0.5 * double(t)) * std::cos(0.25 * double(y));
        px[1] = 0.5 + 0.4 * std::cos(0.2 * double(x) - 0.3 * double(t)) * std::sin(0.35 * double(y));
        px[2] = 0.5 + 0.3 * std::sin(0.15 * double(x + y) + 0.4 * double(t));
      }
  s.color_space = video::ColorSpace::kRGB;
  video::save_sequence(s, dir.string());
}

// one grayscale texture PNG; the library keys templates by filename stem
void make_template(const fs::path& dir, const std::string& name, double phase) {
  if (fs::exists(dir / (name + ".png"))) return;
  video::FrameSequence t;
  t.frames = Tensor<double>({1, 32, 32, 1});
  for (int64_t y = 0; y < 32; ++y)
    for (int64_t x = 0; x < 32; ++x)
      t.frames.at(0, y, x, 0) =
          0.5 + 0.5 * std::sin(phase + 0.4 * double(x)) * std::cos(phase + 0.3 * double(y));
  t.color_space = video::ColorSpace::kGray;
  fs::path scratch = dir / ("_tmp_" + name);
  video::save_sequence(t, scratch.string());
  fs::rename(scratch / "frame_000001.png", dir / (name + ".png"));
  fs::remove_all(scratch);
}

void write_gray_data(const fs::path& src, const fs::path& dst) {
  video::FrameSequence s = video::load_sequence(src.string());
  video::FrameSequence g;
  g.frames = Tensor<double>({s.t(), s.h(), s.w(), 1});
  for (int64_t i = 0; i < g.frames.size(); ++i) {
    const double* px = s.frames.data() + i * 3;
    g.frames[i] = (px[0] + px[1] + px[2]) / 3.0;
  }
  g.color_space = video::ColorSpace::kGray;
  video::save_sequence(g, dst.string());
}

const char* kTinyConfig = R"({
  "model": {"encoder_channels": 8, "encoder_stride": 2, "num_swin_blocks": 2,
            "window_size": 4, "num_heads": 2, "head_dim": 4, "mask_net_layers": 2},
  "train": {"epochs": 2, "lr_main": 0.0002, "crop": 32, "clip_len": 4, "batch": 1,
            "flow_freeze_epochs": 0, "seed": 1,
            "loss_weights": {"lambda_1": 1.0, "lambda_p": 1.0, "lambda_g": 0.0}}
})";

fs::path tiny_config_file() {
  fs::path p = work_root() / "config.json";
  if (!fs::exists(p)) std::ofstream(p) << kTinyConfig;
  return p;
}

fs::path clean_seq_dir() {
  fs::path d = work_root() / "data" / "seq0";
  if (!fs::exists(d / "frame_000001.png")) write_clean_data(d);
  return d;
}

std::vector<nlohmann::json> parse_jsonl(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

// shared across cases: trained once, reused by restore/colorize/mismatch tests
fs::path restore_ckpt() {
  fs::path out = work_root() / "run_restore";
  if (!fs::exists(out / "checkpoint_final.rtnw")) {
    clean_seq_dir();
    RunResult r = run_cli("train --data " + (work_root() / "data").string() + " --config " +
                          tiny_config_file().string() + " --mode restore --out " + out.string());
    REQUIRE(r.exit_code == 0);
  }
  return out / "checkpoint_final.rtnw";
}

fs::path colorize_ckpt() {
  fs::path out = work_root() / "run_colorize";
  if (!fs::exists(out / "checkpoint_final.rtnw")) {
    clean_seq_dir();
    RunResult r = run_cli("train --data " + (work_root() / "data").string() + " --config " +
                          tiny_config_file().string() + " --mode colorize --out " + out.string());
    REQUIRE(r.exit_code == 0);
  }
  return out / "checkpoint_final.rtnw";
}

}  // namespace

TEST_CASE("help documents every command and flag") {
  RunResult top = run_cli("--help");
  CHECK(top.exit_code == 0);
  for (const char* sub : {"degrade", "train", "restore", "colorize", "eval"})
    CHECK(top.output.find(sub) != std::string::npos);
  RunResult deg = run_cli("degrade --help");
  CHECK(deg.exit_code == 0);
  for (const char* flag : {"--in", "--out", "--templates", "--seed", "--recipe", "--emit-masks"})
    CHECK(deg.output.find(flag) != std::string::npos);
  RunResult ev = run_cli("eval --help");
  for (const char* flag : {"--pred", "--gt", "--flow-source", "--report"})
    CHECK(ev.output.find(flag) != std::string::npos);
  RunResult tr = run_cli("train --help");
  for (const char* flag : {"--data", "--config", "--mode", "--out", "--resume"})
    CHECK(tr.output.find(flag) != std::string::npos);
  RunResult co = run_cli("colorize --help");
  for (const char* flag : {"--in", "--ref", "--ref-index", "--ckpt", "--out"})
    CHECK(co.output.find(flag) != std::string::npos);
}

TEST_CASE("degrade is deterministic in its seed and emits masks plus a recipe") {
  fs::path in = clean_seq_dir();
  fs::path a = work_root() / "deg_a", b = work_root() / "deg_b", c = work_root() / "deg_c";
  std::string base = "degrade --in " + in.string() + " --seed 7 --emit-masks --out ";
  REQUIRE(run_cli(base + a.string()).exit_code == 0);
  REQUIRE(run_cli(base + b.string()).exit_code == 0);
  for (int i = 1; i <= 8; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.png", i);
    CHECK(same_bytes(a / buf, b / buf));
  }
  CHECK(same_bytes(a / "recipe.json", b / "recipe.json"));
  CHECK(fs::exists(a / "mask_000001.png"));
  CHECK(fs::exists(a / "mask_000008.png"));

  RunResult other = run_cli("degrade --in " + in.string() + " --seed 8 --out " + c.string());
  REQUIRE(other.exit_code == 0);
  CHECK_FALSE(same_bytes(a / "frame_000001.png", c / "frame_000001.png"));
}

TEST_CASE("degrade applies a given recipe instead of sampling") {
  fs::path in = clean_seq_dir();
  fs::path tdir = work_root() / "templates";
  make_template(tdir, "blotch", 0.3);
  make_template(tdir, "scratch", 0.7);
  fs::path a = work_root() / "deg_t";
  REQUIRE(run_cli("degrade --in " + in.string() + " --templates " + tdir.string() +
                  " --seed 7 --out " + a.string())
              .exit_code == 0);
  fs::path d = work_root() / "deg_recipe";
  RunResult r = run_cli("degrade --in " + in.string() + " --templates " + tdir.string() +
                        " --recipe " + (a / "recipe.json").string() + " --seed 999 --out " +
                        d.string());
  REQUIRE(r.exit_code == 0);
  for (int i = 1; i <= 8; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.png", i);
    CHECK(same_bytes(a / buf, d / buf));
  }
  CHECK(same_bytes(a / "recipe.json", d / "recipe.json"));
}

TEST_CASE("degrade fails loudly when a recipe names an unknown template") {
  fs::path in = clean_seq_dir();
  fs::path a = work_root() / "deg_a";
  if (!fs::exists(a / "recipe.json"))
    REQUIRE(run_cli("degrade --in " + in.string() + " --seed 7 --out " + a.string()).exit_code ==
            0);
  fs::path recipe = work_root() / "bad_recipe.json";
  nlohmann::json j = nlohmann::json::parse(read_file(a / "recipe.json"));
  REQUIRE(j["template_ids"].size() >= 1);  // sampled recipes always place a template
  j["template_ids"][0] = "missing_texture";
  std::ofstream(recipe) << j.dump();
  RunResult r = run_cli("degrade --in " + in.string() + " --recipe " + recipe.string() +
                        " --out " + (work_root() / "deg_bad").string());
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("missing_texture") != std::string::npos);
}

TEST_CASE("train writes checkpoints and a parsable loss log") {
  fs::path ck = restore_ckpt();
  CHECK(fs::exists(ck));
  CHECK(fs::exists(ck.parent_path() / "checkpoint_latest.rtnw"));
  std::vector<nlohmann::json> rows = parse_jsonl(ck.parent_path() / "loss_log.jsonl");
  REQUIRE(rows.size() == 4);  // 2 epochs x 2 steps
  for (const auto& r : rows) {
    CHECK(r.contains("step"));
    CHECK(r.contains("l1"));
    CHECK(r.contains("perc"));
    CHECK(r.contains("g"));
    CHECK(r.contains("d"));
    CHECK(r.contains("lr"));
  }
  CHECK(rows[0]["step"] == 0);
  CHECK(rows[3]["step"] == 3);
}

TEST_CASE("train rejects an invalid mode with a usage error") {
  RunResult r = run_cli("train --data x --config y --mode sharpen --out z");
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("--mode") != std::string::npos);
}

TEST_CASE("same seed reproduces the first training step exactly") {
  clean_seq_dir();
  fs::path out2 = work_root() / "run_repeat";
  RunResult r = run_cli("train --data " + (work_root() / "data").string() + " --config " +
                        tiny_config_file().string() + " --mode restore --out " + out2.string());
  REQUIRE(r.exit_code == 0);
  std::vector<nlohmann::json> a = parse_jsonl(restore_ckpt().parent_path() / "loss_log.jsonl");
  std::vector<nlohmann::json> b = parse_jsonl(out2 / "loss_log.jsonl");
  REQUIRE(a.size() == b.size());
  CHECK(a[0].dump() == b[0].dump());
}

TEST_CASE("resumed training continues the uninterrupted loss trajectory") {
  clean_seq_dir();
  // one-epoch run, then resume under the full two-epoch config
  fs::path cfg1 = work_root() / "config_1ep.json";
  nlohmann::json j = nlohmann::json::parse(kTinyConfig);
  j["train"]["epochs"] = 1;
  std::ofstream(cfg1) << j.dump();
  fs::path half = work_root() / "run_half";
  REQUIRE(run_cli("train --data " + (work_root() / "data").string() + " --config " +
                  cfg1.string() + " --mode restore --out " + half.string())
              .exit_code == 0);
  fs::path cont = work_root() / "run_cont";
  fs::create_directories(cont);
  RunResult r = run_cli("train --data " + (work_root() / "data").string() + " --config " +
                        tiny_config_file().string() + " --mode restore --out " + cont.string() +
                        " --resume " + (half / "checkpoint_final.rtnw").string());
  REQUIRE(r.exit_code == 0);
  std::vector<nlohmann::json> full = parse_jsonl(restore_ckpt().parent_path() / "loss_log.jsonl");
  std::vector<nlohmann::json> tail = parse_jsonl(cont / "loss_log.jsonl");
  REQUIRE(full.size() == 4);
  REQUIRE(tail.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(tail[i]["step"] == full[i + 2]["step"]);
    CHECK(std::abs(double(tail[i]["l1"]) - double(full[i + 2]["l1"])) <=
          1e-4 * std::max(1.0, std::abs(double(full[i + 2]["l1"]))));
  }
}

TEST_CASE("restore preserves frame count and is deterministic") {
  fs::path ck = restore_ckpt();
  fs::path in = work_root() / "deg_a";
  if (!fs::exists(in / "frame_000001.png"))
    REQUIRE(run_cli("degrade --in " + clean_seq_dir().string() + " --seed 7 --out " + in.string())
                .exit_code == 0);
  fs::path out1 = work_root() / "restored1", out2 = work_root() / "restored2";
  REQUIRE(run_cli("restore --in " + in.string() + " --ckpt " + ck.string() + " --out " +
                  out1.string())
              .exit_code == 0);
  REQUIRE(run_cli("restore --in " + in.string() + " --ckpt " + ck.string() + " --out " +
                  out2.string())
              .exit_code == 0);
  video::FrameSequence r = video::load_sequence(out1.string());
  CHECK(r.t() == 8);
  CHECK(r.c() == 3);
  for (int i = 1; i <= 8; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.png", i);
    CHECK(same_bytes(out1 / buf, out2 / buf));
  }
}

TEST_CASE("restore and colorize demand a matching checkpoint mode") {
  RunResult r1 = run_cli("restore --in " + clean_seq_dir().string() + " --ckpt " +
                         colorize_ckpt().string() + " --out " + (work_root() / "x1").string());
  CHECK(r1.exit_code != 0);
  CHECK(r1.output.find("colorize") != std::string::npos);

  fs::path gray = work_root() / "gray" / "seq0";
  if (!fs::exists(gray / "frame_000001.png")) write_gray_data(clean_seq_dir(), gray);
  RunResult r2 = run_cli("colorize --in " + gray.string() + " --ref " +
                         (clean_seq_dir() / "frame_000001.png").string() + " --ckpt " +
                         restore_ckpt().string() + " --out " + (work_root() / "x2").string());
  CHECK(r2.exit_code != 0);
  CHECK(r2.output.find("restore") != std::string::npos);
}

TEST_CASE("colorize preserves frame count") {
  fs::path gray = work_root() / "gray" / "seq0";
  if (!fs::exists(gray / "frame_000001.png")) write_gray_data(clean_seq_dir(), gray);
  fs::path out = work_root() / "colorized";
  RunResult r = run_cli("colorize --in " + gray.string() + " --ref " +
                        (clean_seq_dir() / "frame_000001.png").string() +
                        " --ref-index 0 --ckpt " + colorize_ckpt().string() + " --out " +
                        out.string());
  REQUIRE(r.exit_code == 0);
  video::FrameSequence c = video::load_sequence(out.string());
  CHECK(c.t() == 8);
  CHECK(c.c() == 3);
}

TEST_CASE("eval on identical sequences reports the perfect sentinel") {
  fs::path in = clean_seq_dir();
  fs::path report = work_root() / "report_self.json";
  RunResult r = run_cli("eval --pred " + in.string() + " --gt " + in.string() + " --report " +
                        report.string());
  REQUIRE(r.exit_code == 0);
  nlohmann::json j = nlohmann::json::parse(read_file(report));
  REQUIRE(j["sequences"].size() == 1);
  CHECK(j["sequences"][0]["psnr"] == "perfect");
  CHECK(double(j["sequences"][0]["ssim"]) == doctest::Approx(1.0));
  CHECK(j["sequences"][0]["warping_error"].is_number());
  CHECK(j["mean"]["psnr"].is_null());  // no finite psnr entries
}

TEST_CASE("eval scores sequence subdirectories against matching ground truth") {
  fs::path preds = work_root() / "eval_pred";
  fs::path gts = work_root() / "eval_gt";
  write_clean_data(preds / "seq0");
  write_clean_data(gts / "seq0");
  write_clean_data(preds / "seq1", 4, 32);
  write_clean_data(gts / "seq1", 4, 32);
  fs::path report = work_root() / "report_multi.json";
  RunResult r = run_cli("eval --pred " + preds.string() + " --gt " + gts.string() +
                        " --flow-source pred --report " + report.string());
  REQUIRE(r.exit_code == 0);
  nlohmann::json j = nlohmann::json::parse(read_file(report));
  CHECK(j["sequences"].size() == 2);
  CHECK(j["sequences"][0]["name"] == "seq0");
  CHECK(j["sequences"][1]["name"] == "seq1");
}

TEST_CASE("eval rejects mismatched frame counts") {
  fs::path shorter = work_root() / "eval_short";
  write_clean_data(shorter, 4, 32);
  RunResult r = run_cli("eval --pred " + shorter.string() + " --gt " + clean_seq_dir().string() +
                        " --report " + (work_root() / "r.json").string());
  CHECK(r.exit_code != 0);
}

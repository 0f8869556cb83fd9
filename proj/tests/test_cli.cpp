// Drives the liafkd binary end to end on a seconds-scale config.
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "liaf/heatmap.hpp"
#include "liaf/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace liaf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_binary;
fs::path g_root;

struct Result {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Result run(const std::string& args, const std::string& env = "") {
  const auto out = g_root / "stdout.txt", err = g_root / "stderr.txt";
  const std::string cmd = env + " " + g_binary + " " + args + " >" + out.string() + " 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

const char* kConfig = R"({
  "data": {"image_size": 64, "train_scenes": 24, "eval_scenes": 8},
  "teacher": {"widths": [6, 8, 12], "strides": [2, 2, 2], "head_width": 12, "epochs": 1},
  "student": {"widths": [4, 6, 8], "strides": [2, 2, 2], "head_width": 8, "epochs": 2},
  "selector": {"K": 3, "pool_h": 3, "pool_w": 3, "epochs": 1},
  "optim": {"batch_size": 4},
  "run": {"checkpoint_steps": [1]},
  "ablate": {"K": [1, 2], "seeds": [0]}
})";

std::string config_path() { return (g_root / "cfg.json").string(); }

std::string dir(const std::string& name) { return (g_root / name).string(); }

std::string last_line(const std::string& s) {
  auto t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  const auto p = t.rfind('\n');
  return p == std::string::npos ? t : t.substr(p + 1);
}

// Metric rows with the wall clock removed.
std::vector<json> stable_rows(const fs::path& jsonl) {
  std::vector<json> rows;
  std::istringstream in(slurp(jsonl));
  for (std::string line; std::getline(in, line);) {
    auto j = json::parse(line);
    j.erase("wall_time");
    rows.push_back(j);
  }
  return rows;
}

void train_prerequisites() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("train-teacher --quiet --config " + config_path() + " --out " + dir("teacher")).status == 0);
  REQUIRE(run("train-selectors --quiet --config " + config_path() + " --out " + dir("sel") + " --teacher " +
              dir("teacher") + "/teacher.ckpt")
              .status == 0);
  done = true;
}

}  // namespace

TEST_CASE("usage and config errors exit with 2") {
  auto r = run("frobnicate");
  CHECK(r.status == 2);
  CHECK(r.err.find("gen-data") != std::string::npos);
  CHECK(json::parse(last_line(r.err)).at("error") == "usage");

  r = run("");
  CHECK(r.status == 2);

  std::ofstream(g_root / "bad.json") << "{\"distill\": {\"lambda\": -1}}";
  r = run("train-teacher --config " + (g_root / "bad.json").string() + " --out " + dir("bad"));
  CHECK(r.status == 2);
  const auto e = json::parse(last_line(r.err));
  CHECK(e.at("error") == "config");
  CHECK(r.err.find('\n') == r.err.size() - 1);

  std::ofstream(g_root / "unknown.json") << "{\"distill\": {\"lamda\": 1}}";
  CHECK(run("gen-data --config " + (g_root / "unknown.json").string() + " --out " + dir("bad")).status == 2);
  CHECK(run("gen-data --config " + config_path() + " --out " + dir("bad"), "LIAF__distill__lambda='\"x\"'").status == 2);
  CHECK(run("distill --config " + config_path() + " --out " + dir("bad")).status == 2);
  CHECK(run("baseline --variant liaf --config " + config_path() + " --out " + dir("bad")).status == 2);
  CHECK(run("baseline --variant nonsense --config " + config_path() + " --out " + dir("bad")).status == 2);
}

TEST_CASE("runtime failures exit with 1") {
  const auto r = run("eval --student " + dir("missing.ckpt") + " --out " + dir("rt"));
  CHECK(r.status == 1);
  CHECK(json::parse(last_line(r.err)).at("error") == "runtime");
}

TEST_CASE("gen-data creates the output directory and is idempotent") {
  const auto out = g_root / "nested" / "data";
  REQUIRE(run("gen-data --quiet --config " + config_path() + " --out " + out.string()).status == 0);
  const auto first = slurp(out / "train_manifest.jsonl");
  CHECK(std::count(first.begin(), first.end(), '\n') == 24);
  REQUIRE(run("gen-data --quiet --config " + config_path() + " --out " + out.string()).status == 0);
  CHECK(slurp(out / "train_manifest.jsonl") == first);
}

TEST_CASE("seed flag and environment overrides reach the config") {
  const auto a = run("gen-data --config " + config_path() + " --out " + dir("envA"), "LIAF__data__eval_scenes=3");
  REQUIRE(a.status == 0);
  const auto m = slurp(g_root / "envA" / "eval_manifest.jsonl");
  CHECK(std::count(m.begin(), m.end(), '\n') == 3);

  REQUIRE(run("baseline --quiet --seed 5 --config " + config_path() + " --out " + dir("seed5")).status == 0);
  const auto header = stable_rows(g_root / "seed5" / "metrics.jsonl").front();
  CHECK(header.at("config").at("seed") == 5);
}

TEST_CASE("distill, eval and reruns") {
  train_prerequisites();
  const auto teacher = dir("teacher") + "/teacher.ckpt", sel = dir("sel") + "/selectors.ckpt";
  const auto teacher_bytes = slurp(teacher), sel_bytes = slurp(sel);
  const auto args = "distill --quiet --config " + config_path() + " --teacher " + teacher + " --selectors " + sel;

  REQUIRE(run(args + " --out " + dir("d1")).status == 0);
  REQUIRE(run(args + " --out " + dir("d2")).status == 0);
  CHECK(slurp(teacher) == teacher_bytes);
  CHECK(slurp(sel) == sel_bytes);

  const fs::path d1 = dir("d1"), d2 = dir("d2");
  CHECK(slurp(d1 / "student.ckpt") == slurp(d2 / "student.ckpt"));
  CHECK(slurp(d1 / "summary.csv") == slurp(d2 / "summary.csv"));
  CHECK(stable_rows(d1 / "metrics.jsonl") == stable_rows(d2 / "metrics.jsonl"));
  CHECK(fs::exists(d1 / "snapshots" / "step_1.ckpt"));

  // Overwriting in place gives the same files.
  const auto before = slurp(d1 / "student.ckpt");
  REQUIRE(run(args + " --out " + dir("d1")).status == 0);
  CHECK(slurp(d1 / "student.ckpt") == before);

  // eval reports what the run recorded.
  const auto rows = stable_rows(d1 / "metrics.jsonl");
  json recorded;
  for (const auto& r : rows)
    if (r.at("kind") == "eval") recorded = r;
  const auto r = run("eval --student " + (d1 / "student.ckpt").string() + " --out " + dir("e1"));
  REQUIRE(r.status == 0);
  const auto printed = json::parse(last_line(r.out));
  CHECK(printed.at("map").get<double>() == recorded.at("map").get<double>());
  CHECK(printed.at("ap50").get<double>() == recorded.at("ap50").get<double>());
  CHECK(printed.at("ap75").get<double>() == recorded.at("ap75").get<double>());
  CHECK(json::parse(slurp(g_root / "e1" / "eval.json")) == printed);
}

TEST_CASE("baselines and ablation") {
  train_prerequisites();
  const auto teacher = dir("teacher") + "/teacher.ckpt", sel = dir("sel") + "/selectors.ckpt";
  REQUIRE(run("baseline --quiet --config " + config_path() + " --out " + dir("nokd")).status == 0);
  CHECK(slurp(g_root / "nokd" / "summary.csv").find("student,no_kd,0,") != std::string::npos);
  REQUIRE(run("baseline --quiet --variant fitnet_allones --config " + config_path() + " --teacher " + teacher +
              " --out " + dir("fit"))
              .status == 0);
  REQUIRE(run("baseline --quiet --variant teacher_only_mask --config " + config_path() + " --teacher " + teacher +
              " --selectors " + sel + " --out " + dir("tom"))
              .status == 0);
  REQUIRE(run("ablate --quiet --config " + config_path() + " --teacher " + teacher + " --out " + dir("abl")).status == 0);
  const auto csv = slurp(g_root / "abl" / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  const auto summary = slurp(g_root / "abl" / "summary.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 3);
}

TEST_CASE("viz-masks renders the soft mask values") {
  train_prerequisites();
  const auto teacher = dir("teacher") + "/teacher.ckpt", sel = dir("sel") + "/selectors.ckpt";
  REQUIRE(run("baseline --quiet --variant teacher_only_mask --config " + config_path() + " --teacher " + teacher +
              " --selectors " + sel + " --out " + dir("stu"))
              .status == 0);
  const auto student = dir("stu") + "/student.ckpt";
  REQUIRE(run("viz-masks --quiet --config " + config_path() + " --teacher " + teacher + " --selectors " + sel +
              " --student " + student + " --scene 2 --scene 5 --upscale 1 --out " + dir("viz"))
              .status == 0);
  const fs::path masks = g_root / "viz" / "masks";
  for (const char* name : {"scene_2_teacher.png", "scene_2_student.png", "scene_5_teacher.png", "scene_5_student.png"})
    CHECK(fs::exists(masks / name));

  // Recompute the teacher mask through the library and compare pixel values.
  const auto cfg = load_config(config_path());
  const auto det = detector_from_checkpoint(load_checkpoint(teacher));
  const auto ens = ensemble_from_checkpoint(load_checkpoint(sel));
  const auto eval = Corpus::generate(cfg.scene, cfg.data_seed, stream::eval_split, cfg.eval_scenes);
  const std::vector<int> idx{2, 5};
  const auto neck = det.backbone_forward(stack_images<Real>(eval, idx));
  const auto inst = instances_for_level(batch_ground_truth(eval, idx), det.spec().neck_stride(), neck.h(), neck.w());
  const auto roi = extract_roi_batch(neck, inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin);
  const auto scores = average_scores(roi, ens, cfg.softmax_scope);
  const auto mask = build_soft_mask(inst, scores.values, neck.n(), neck.h(), neck.w(), cfg.rescale, cfg.softmax_scope);
  for (Index b = 0; b < 2; ++b) {
    const auto img = read_png((masks / ("scene_" + std::to_string(idx[static_cast<std::size_t>(b)]) + "_teacher.png")).string());
    REQUIRE(img.width == neck.w());
    REQUIRE(img.height == neck.h());
    int mismatches = 0;
    for (Index y = 0; y < neck.h(); ++y)
      for (Index x = 0; x < neck.w(); ++x) {
        const auto want = static_cast<int>(std::lround(255.0 * static_cast<double>(mask.values(b, 0, y, x))));
        mismatches += img.pixels[static_cast<std::size_t>(y * neck.w() + x)] != want;
      }
    CHECK(mismatches == 0);
  }
  const auto scores_csv = slurp(masks / "scores.csv");
  CHECK(scores_csv.rfind("scene,instance,label,", 0) == 0);
  CHECK(std::count(scores_csv.begin(), scores_csv.end(), '\n') == inst.count() + 1);
}

TEST_CASE("a locked output directory is refused") {
  const auto out = g_root / "locked";
  fs::create_directories(out);
  const int fd = ::open((out / ".lock").c_str(), O_RDWR | O_CREAT, 0644);
  REQUIRE(fd >= 0);
  REQUIRE(::flock(fd, LOCK_EX | LOCK_NB) == 0);
  const auto r = run("gen-data --config " + config_path() + " --out " + out.string());
  CHECK(r.status == 1);
  CHECK(r.err.find("in use") != std::string::npos);
  ::close(fd);
  CHECK(run("gen-data --quiet --config " + config_path() + " --out " + out.string()).status == 0);
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path to liafkd> [doctest options]\n");
    return 2;
  }
  g_binary = argv[1];
  g_root = fs::temp_directory_path() / ("liaf_cli_" + std::to_string(::getpid()));
  fs::remove_all(g_root);
  fs::create_directories(g_root);
  std::ofstream(g_root / "cfg.json") << kConfig;

  doctest::Context ctx;
  ctx.applyCommandLine(argc - 1, argv + 1);
  const int rc = ctx.run();
  fs::remove_all(g_root);
  return rc;
}

// liafkd: batch driver for teacher training, selector learning, distillation,
// baselines, ablation, evaluation and mask rendering.

#include "liaf/heatmap.hpp"
#include "liaf/pipeline.hpp"

#include <CLI11.hpp>
#include <fcntl.h>
#include <spdlog/spdlog.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace liaf;

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string teacher;
  std::string selectors;
  std::string student;
  std::string variant;
  std::string split = "eval";
  std::vector<int> scenes{0};
  int upscale = 8;
};

// Usage problems that surface after parsing (missing inputs for a variant).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Held for the whole invocation; released by the kernel if we die.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    const auto path = (dir / ".lock").string();
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot create lock file " + path);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("output directory " + dir.string() + " is in use by another run");
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

DistillConfig resolve_config(const Options& o) {
  auto cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

std::string need(const std::string& path, const std::string& flag) {
  if (path.empty()) throw UsageError(flag + " is required");
  return path;
}

std::string summary_line(const std::string& stage, const std::string& variant, const DistillConfig& cfg,
                         const MapMetrics& m) {
  std::ostringstream s;
  s.precision(6);
  s << stage << ',' << variant << ',' << cfg.seed << ',' << std::fixed << m.map << ',' << m.ap50 << ',' << m.ap75
    << '\n';
  return s.str();
}

void write_summary(const Options& o, const std::string& line) {
  write_file_atomic(out_path(o, "summary.csv"), "stage,variant,seed,map,ap50,ap75\n" + line);
}

void print_metrics(const Options& o, const MapMetrics& m) {
  if (!o.quiet) std::cout << metrics_json(m).dump() << '\n';
}

int gen_data(const Options& o, const DistillConfig& cfg) {
  const auto data = Datasets::generate(cfg);
  write_file_atomic(out_path(o, "train_manifest.jsonl"), data.train.manifest());
  write_file_atomic(out_path(o, "eval_manifest.jsonl"), data.eval.manifest());
  if (!o.quiet) std::cout << "train " << data.train.size() << " eval " << data.eval.size() << '\n';
  return 0;
}

int train_teacher_cmd(const Options& o, const DistillConfig& cfg) {
  const auto data = Datasets::generate(cfg);
  RunRecord record(out_path(o, "metrics.jsonl"), run_header(cfg, "teacher"));
  const auto teacher = train_teacher(data, cfg, &record);
  save_checkpoint(out_path(o, "teacher.ckpt"), detector_checkpoint(teacher, "teacher", cfg));
  const auto m = evaluate_detector(teacher, data.eval, cfg.batch_size, cfg.decode);
  write_summary(o, summary_line("teacher", "", cfg, m));
  print_metrics(o, m);
  return 0;
}

int train_selectors_cmd(const Options& o, const DistillConfig& cfg) {
  const auto teacher = detector_from_checkpoint(load_checkpoint(need(o.teacher, "--teacher")));
  const auto data = Datasets::generate(cfg);
  const auto cache = NeckCache::build(teacher, data.train, cfg.batch_size);
  RunRecord record(out_path(o, "metrics.jsonl"), run_header(cfg, "selectors"));
  const auto res = train_selectors(teacher, data, cfg, &record, &cache);
  save_checkpoint(out_path(o, "selectors.ckpt"), ensemble_checkpoint(res.ensemble, cfg));
  std::ostringstream s;
  s << "K,initial_diversity,final_diversity\n" << cfg.K << ',' << res.initial_diversity << ',' << res.final_diversity
    << '\n';
  write_file_atomic(out_path(o, "summary.csv"), s.str());
  if (!o.quiet) std::cout << json{{"initial_diversity", res.initial_diversity}, {"final_diversity", res.final_diversity}}.dump() << '\n';
  return 0;
}

int student_cmd(const Options& o, const DistillConfig& cfg, Variant variant) {
  const bool needs_teacher = variant != Variant::no_kd;
  const bool needs_selectors = variant == Variant::liaf || variant == Variant::teacher_only_mask;
  const auto data = Datasets::generate(cfg);

  std::optional<Detector> teacher;
  std::optional<Ensemble> ensemble;
  std::optional<NeckCache> cache;
  if (needs_teacher) {
    teacher = detector_from_checkpoint(load_checkpoint(need(o.teacher, "--teacher")));
    cache = NeckCache::build(*teacher, data.train, cfg.batch_size);
  }
  if (needs_selectors) ensemble = ensemble_from_checkpoint(load_checkpoint(need(o.selectors, "--selectors")));

  std::string snapshots;
  if (!cfg.checkpoint_steps.empty()) {
    snapshots = out_path(o, "snapshots");
    fs::create_directories(snapshots);
  }
  RunRecord record(out_path(o, "metrics.jsonl"), run_header(cfg, to_string(variant)));
  const DistillInputs in{teacher ? &*teacher : nullptr, ensemble ? &*ensemble : nullptr, &data,
                         cache ? &*cache : nullptr};
  const auto res = distill(in, cfg, variant, &record, snapshots);
  save_checkpoint(out_path(o, "student.ckpt"), student_checkpoint(res, variant, cfg));
  write_summary(o, summary_line("student", to_string(variant), cfg, res.metrics));
  print_metrics(o, res.metrics);
  return 0;
}

int ablate_cmd(const Options& o, const DistillConfig& cfg) {
  const auto teacher = detector_from_checkpoint(load_checkpoint(need(o.teacher, "--teacher")));
  const auto data = Datasets::generate(cfg);
  const auto cache = NeckCache::build(teacher, data.train, cfg.batch_size);
  RunRecord record(out_path(o, "metrics.jsonl"), run_header(cfg, "ablate"));
  const auto report = ablate(teacher, data, cfg, &cache, &record);
  write_file_atomic(out_path(o, "ablation.csv"), report.csv());
  write_file_atomic(out_path(o, "summary.csv"), report.summary_csv());
  if (!o.quiet) std::cout << report.summary_csv();
  return 0;
}

// The checkpoint's own config decides the eval split unless one is given.
int eval_cmd(const Options& o) {
  const auto ckpt = load_checkpoint(need(o.student.empty() ? o.teacher : o.student, "--student or --teacher"));
  DistillConfig cfg;
  if (!o.config.empty() || !ckpt.meta.contains("config"))
    cfg = resolve_config(o);
  else
    cfg = config_from_json(ckpt.meta.at("config"));
  const auto model = detector_from_checkpoint(ckpt);
  const auto eval = Corpus::generate(cfg.scene, cfg.data_seed, stream::eval_split, cfg.eval_scenes);
  const auto m = evaluate_detector(model, eval, cfg.batch_size, cfg.decode);
  write_file_atomic(out_path(o, "eval.json"), metrics_json(m).dump() + "\n");
  print_metrics(o, m);
  return 0;
}

SoftMask<double> to_double(const SoftMask<Real>& m) { return SoftMask<double>{m.values.cast<double>()}; }

int viz_masks_cmd(const Options& o, const DistillConfig& cfg) {
  const auto teacher = detector_from_checkpoint(load_checkpoint(need(o.teacher, "--teacher")));
  const auto ensemble = ensemble_from_checkpoint(load_checkpoint(need(o.selectors, "--selectors")));
  if (o.split != "eval" && o.split != "train") throw UsageError("--split must be train or eval");
  const auto corpus = o.split == "train"
                          ? Corpus::generate(cfg.scene, cfg.data_seed, stream::train_split, cfg.train_scenes)
                          : Corpus::generate(cfg.scene, cfg.data_seed, stream::eval_split, cfg.eval_scenes);
  for (int s : o.scenes)
    if (s < 0 || static_cast<std::size_t>(s) >= corpus.size())
      throw UsageError("--scene " + std::to_string(s) + " is outside the " + o.split + " split");

  const auto images = stack_images<Real>(corpus, o.scenes);
  const auto t_neck = teacher.backbone_forward(images);
  const auto inst = instances_for_level(batch_ground_truth(corpus, o.scenes), teacher.spec().neck_stride(),
                                        t_neck.h(), t_neck.w());

  // Without a student the teacher map stands in, so only teacher outputs are meaningful.
  Tensor4<Real> projected = t_neck;
  if (!o.student.empty()) {
    const auto ckpt = load_checkpoint(o.student);
    const auto student = detector_from_checkpoint(ckpt);
    projected = projection_from_checkpoint(ckpt).forward(student.backbone_forward(images));
  }
  const auto term = distill_term(t_neck, projected, inst, ensemble, cfg.term_options(MaskPolicy::separate));

  const fs::path dir = fs::path(o.out) / "masks";
  fs::create_directories(dir);
  const auto mt = to_double(term.mask_teacher), ms = to_double(term.mask_student);
  for (std::size_t b = 0; b < o.scenes.size(); ++b) {
    const auto stem = "scene_" + std::to_string(o.scenes[b]);
    write_png((dir / (stem + "_teacher.png")).string(), mask_to_gray(mt, static_cast<Index>(b), o.upscale));
    if (!o.student.empty())
      write_png((dir / (stem + "_student.png")).string(), mask_to_gray(ms, static_cast<Index>(b), o.upscale));
  }

  std::ostringstream s;
  s.precision(8);
  s << "scene,instance,label,x1,y1,x2,y2,teacher_score,student_score\n";
  for (Index i = 0; i < inst.count(); ++i) {
    const auto& it = inst[i];
    s << o.scenes[static_cast<std::size_t>(it.batch_index)] << ',' << i << ',' << it.label << ',' << it.box.x1 << ','
      << it.box.y1 << ',' << it.box.x2 << ',' << it.box.y2 << ',' << term.teacher_scores.values(i) << ',';
    if (!o.student.empty()) s << term.student_scores.values(i);
    s << '\n';
  }
  write_file_atomic((dir / "scores.csv").string(), s.str());
  if (!o.quiet) std::cout << "wrote " << o.scenes.size() << " scene(s) to " << dir.string() << '\n';
  return 0;
}

void fail_line(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Instance-attention filtered knowledge distillation for a toy detector", "liafkd"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--config", o.config, "JSON config; keys not given keep their defaults");
  app.add_option("--out", o.out, "Output directory (created if absent)");
  app.add_option("--seed", o.seed, "Override the root seed");
  app.add_flag("--quiet", o.quiet, "Only warnings and errors");

  auto* gen = app.add_subcommand("gen-data", "Write train and eval scene manifests");
  auto* teach = app.add_subcommand("train-teacher", "Train the teacher detector");
  auto* sel = app.add_subcommand("train-selectors", "Learn instance selectors against a frozen teacher");
  auto* dist = app.add_subcommand("distill", "Distill a student with learned instance masks");
  auto* base = app.add_subcommand("baseline", "Train a baseline student");
  auto* abl = app.add_subcommand("ablate", "Sweep the ablation grid");
  auto* ev = app.add_subcommand("eval", "Evaluate a detector checkpoint on the eval split");
  auto* viz = app.add_subcommand("viz-masks", "Render soft masks and dump instance scores");

  for (auto* c : {sel, dist, base, abl, viz}) c->add_option("--teacher", o.teacher, "Teacher checkpoint");
  for (auto* c : {dist, base, viz}) c->add_option("--selectors", o.selectors, "Selector checkpoint");
  dist->add_option("--variant", o.variant, "liaf (default), teacher_only_mask, fitnet_allones or no_kd");
  base->add_option("--variant", o.variant, "no_kd (default), fitnet_allones or teacher_only_mask");
  ev->add_option("--student", o.student, "Student checkpoint");
  ev->add_option("--teacher", o.teacher, "Teacher checkpoint, when no student is given");
  viz->add_option("--student", o.student, "Student checkpoint, for student masks and scores");
  viz->add_option("--scene", o.scenes, "Scene indices (repeatable)");
  viz->add_option("--split", o.split, "train or eval");
  viz->add_option("--upscale", o.upscale, "Pixels per mask cell")->check(CLI::Range(1, 64));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    fail_line("usage", e.what());
    return 2;
  }

  spdlog::set_level(o.quiet ? spdlog::level::warn : spdlog::level::info);
  try {
    fs::create_directories(o.out);
    DirLock lock(o.out);
    if (*ev) return eval_cmd(o);
    const auto cfg = resolve_config(o);
    if (*gen) return gen_data(o, cfg);
    if (*teach) return train_teacher_cmd(o, cfg);
    if (*sel) return train_selectors_cmd(o, cfg);
    if (*abl) return ablate_cmd(o, cfg);
    if (*viz) return viz_masks_cmd(o, cfg);
    if (*dist) return student_cmd(o, cfg, o.variant.empty() ? Variant::liaf : parse_variant(o.variant));
    const auto v = o.variant.empty() ? Variant::no_kd : parse_variant(o.variant);
    if (v == Variant::liaf) throw UsageError("baseline does not run liaf; use distill");
    return student_cmd(o, cfg, v);
  } catch (const ConfigError& e) {
    fail_line("config", e.what());
    return 2;
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    return 2;
  } catch (const std::exception& e) {
    fail_line("runtime", e.what());
    return 1;
  }
}

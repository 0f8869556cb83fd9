#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "liaf/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace liaf;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

DistillConfig tiny_config() {
  spdlog::set_level(spdlog::level::warn);
  DistillConfig c;
  c.scene.image_size = 64;
  c.scene.min_box = 10;
  c.scene.max_box = 28;
  c.train_scenes = 24;
  c.eval_scenes = 8;
  c.teacher.spec.widths = {6, 8, 12};
  c.teacher.spec.strides = {2, 2, 2};
  c.teacher.spec.head_width = 12;
  c.teacher.optim.epochs = 1;
  c.student.spec.widths = {4, 6, 8};
  c.student.spec.strides = {2, 2, 2};
  c.student.spec.head_width = 8;
  c.student.optim.epochs = 2;
  c.selector_optim.epochs = 1;
  c.K = 3;
  c.pool_h = c.pool_w = 3;
  c.batch_size = 4;
  c.ablate.K = {2};
  c.ablate.seeds = {0, 1};
  return c;
}

struct Fixture {
  DistillConfig cfg = tiny_config();
  Datasets data = Datasets::generate(cfg);
  Detector teacher = train_teacher(data, cfg);
  Ensemble ensemble = train_selectors(teacher, data, cfg).ensemble;
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::vector<double> flatten(const Checkpoint& c) {
  std::vector<double> out;
  for (const auto& a : c.arrays) out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("liaf_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("schedules and batching") {
  const auto batches = epoch_batches(10, 4, 3);
  REQUIRE(batches.size() == 3);
  CHECK(batches[2].size() == 2);
  std::set<int> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 10);
  CHECK(epoch_batches(10, 4, 3) == batches);
  CHECK(epoch_batches(10, 4, 4) != batches);

  CHECK(cosine_lr(0.1, 0, 100, true) == doctest::Approx(0.1));
  CHECK(cosine_lr(0.1, 50, 100, true) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.1, 50, 100, false) == 0.1);
  CHECK(cosine_lr(0.1, 0, 100, false, 10) == doctest::Approx(0.01));
  CHECK(cosine_lr(0.1, 9, 100, false, 10) == doctest::Approx(0.1));
  CHECK(cosine_lr(0.1, 4, 100, true, 10) == doctest::Approx(0.025 * (1 + std::cos(std::numbers::pi * 0.04))));
  CHECK(cosine_lr(0.1, 50, 100, true, 10) == doctest::Approx(0.05));
  CHECK(lambda_at(2.0, 0.1, 0, 100) == doctest::Approx(0.2));
  CHECK(lambda_at(2.0, 0.1, 9, 100) == doctest::Approx(2.0));
  CHECK(lambda_at(2.0, 0.1, 50, 100) == 2.0);
  CHECK(lambda_at(2.0, 0.0, 0, 100) == 2.0);
}

TEST_CASE("config strictness and overrides") {
  const DistillConfig d;
  CHECK(d.K == 6);
  CHECK(d.momentum == 0.9);
  CHECK(d.weight_decay == 1e-4);
  CHECK(config_from_json(json::object()).hash() == d.hash());
  CHECK(config_from_json(d.to_json()).hash() == d.hash());
  CHECK_THROWS_AS(config_from_json(json{{"selector", {{"KK", 3}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"selector", {{"K", "six"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"selector", {{"K", 0}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"distill", {{"mask_mode", "both"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"distill", {{"lambda", -1.0}}}}), ConfigError);
  CHECK(config_from_json(json{{"distill", {{"mask_mode", "shared_mean"}}}}).mask_mode == MaskMode::shared_mean);

  const auto tree = apply_env_overrides(json::object(), {"LIAF__distill__lambda=0.5", "LIAF__selector__softmax_scope=image",
                                                        "OTHER=1", "LIAF__seed=7"});
  const auto c = config_from_json(tree);
  CHECK(c.lambda == 0.5);
  CHECK(c.softmax_scope == SoftmaxScope::image);
  CHECK(c.seed == 7);
  CHECK_THROWS_AS(config_from_json(apply_env_overrides(json::object(), {"LIAF__distill__lamda=0.5"})), ConfigError);

  const auto dir = temp_dir("cfg");
  {
    std::ofstream f(dir / "c.json");
    f << "{\n  // comments are allowed\n  \"selector\": {\"K\": 2}\n}\n";
    std::ofstream g(dir / "bad.json");
    g << "{ \"selector\": ";
  }
  CHECK(load_config((dir / "c.json").string()).K == 2);
  CHECK_THROWS_AS(load_config((dir / "bad.json").string()), ConfigError);
  CHECK_THROWS_AS(load_config((dir / "missing.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = temp_dir("ckpt");
  auto& f = fixture();
  const auto path = (dir / "t.ckpt").string();
  save_checkpoint(path, detector_checkpoint(f.teacher, "teacher", f.cfg));
  const auto loaded = load_checkpoint(path);
  CHECK(loaded.meta["stage"] == "teacher");
  CHECK(loaded.meta["config_hash"] == f.cfg.hash());
  const auto back = detector_from_checkpoint(loaded);
  CHECK(flatten(detector_checkpoint(back, "teacher", f.cfg)) == flatten(detector_checkpoint(f.teacher, "teacher", f.cfg)));

  save_checkpoint((dir / "e.ckpt").string(), ensemble_checkpoint(f.ensemble, f.cfg));
  CHECK(ensemble_from_checkpoint(load_checkpoint((dir / "e.ckpt").string())).vectors == f.ensemble.vectors);

  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS(load_checkpoint((dir / "bad.ckpt").string()));
  CHECK_THROWS(load_checkpoint((dir / "none.ckpt").string()));
  CHECK_FALSE(fs::exists(dir / "t.ckpt.tmp"));
  fs::remove_all(dir);
}

TEST_CASE("teacher training") {
  auto cfg = tiny_config();
  const auto data = Datasets::generate(cfg);
  SUBCASE("fixed seed reproduces parameters") {
    CHECK(flatten(detector_checkpoint(train_teacher(data, cfg), "t", cfg)) ==
          flatten(detector_checkpoint(fixture().teacher, "t", cfg)));
  }
  SUBCASE("zero epochs returns the initialization") {
    cfg.teacher.optim.epochs = 0;
    const Detector init(cfg.teacher.spec, mix_seed(cfg.seed, stream::teacher_init, 0));
    CHECK(flatten(detector_checkpoint(train_teacher(data, cfg), "t", cfg)) == flatten(detector_checkpoint(init, "t", cfg)));
  }
  SUBCASE("run record rows") {
    const auto dir = temp_dir("rec");
    {
      RunRecord rec((dir / "m.jsonl").string(), run_header(cfg, "teacher"));
      train_teacher(data, cfg, &rec);
      CHECK(rec.rows_of("step").size() == 6);
      CHECK(rec.rows_of("eval").size() == 1);
    }
    std::ifstream in(dir / "m.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      const auto j = json::parse(line);
      CHECK(j.contains("step"));
      CHECK(j.contains("wall_time"));
      if (n == 0) {
        CHECK(j["kind"] == "header");
        CHECK(j["code_hash"] == source_hash());
        CHECK(j.contains("config"));
      }
      ++n;
    }
    CHECK(n == 8);
    fs::remove_all(dir);
  }
}

TEST_CASE("selector training") {
  auto& f = fixture();
  CHECK(f.ensemble.K() == 3);
  CHECK(f.ensemble.dim() == 12 * 3 * 3);
  SUBCASE("teacher is untouched") {
    const auto before = flatten(detector_checkpoint(f.teacher, "t", f.cfg));
    train_selectors(f.teacher, f.data, f.cfg);
    CHECK(flatten(detector_checkpoint(f.teacher, "t", f.cfg)) == before);
  }
  SUBCASE("cached teacher features give the same ensemble") {
    const auto cache = NeckCache::build(f.teacher, f.data.train, 5);
    CHECK(train_selectors(f.teacher, f.data, f.cfg, nullptr, &cache).ensemble.vectors == f.ensemble.vectors);
  }
  SUBCASE("large mu lowers the diversity loss") {
    auto cfg = f.cfg;
    cfg.mu = 1e3;
    cfg.selector_optim.epochs = 3;
    const auto r = train_selectors(f.teacher, f.data, cfg);
    CHECK(r.final_diversity < r.initial_diversity);
  }
  SUBCASE("default K and pooled size give [6, C*7*7]") {
    auto cfg = f.cfg;
    cfg.K = 6;
    cfg.pool_h = cfg.pool_w = 7;
    cfg.selector_optim.epochs = 1;
    const auto r = train_selectors(f.teacher, f.data, cfg);
    CHECK(r.ensemble.K() == 6);
    CHECK(r.ensemble.dim() == 12 * 49);
  }
}

TEST_CASE("distillation") {
  auto& f = fixture();
  const DistillInputs in{&f.teacher, &f.ensemble, &f.data, nullptr};

  SUBCASE("lambda = 0 matches no_kd") {
    auto cfg = f.cfg;
    cfg.lambda = 0;
    const auto a = distill(in, cfg, Variant::liaf);
    const auto b = distill(in, cfg, Variant::no_kd);
    CHECK(a.step_total == b.step_total);
    CHECK(flatten(detector_checkpoint(a.student, "s", cfg)) == flatten(detector_checkpoint(b.student, "s", cfg)));
    CHECK(a.metrics.map == b.metrics.map);
  }
  SUBCASE("frozen teacher and ensemble") {
    const auto t0 = flatten(detector_checkpoint(f.teacher, "t", f.cfg));
    const auto e0 = f.ensemble.vectors;
    for (auto v : {Variant::liaf, Variant::fitnet_allones, Variant::teacher_only_mask}) distill(in, f.cfg, v);
    CHECK(flatten(detector_checkpoint(f.teacher, "t", f.cfg)) == t0);
    CHECK(f.ensemble.vectors == e0);
  }
  SUBCASE("deterministic for a fixed seed, different across seeds") {
    const auto a = distill(in, f.cfg, Variant::liaf);
    const auto b = distill(in, f.cfg, Variant::liaf);
    CHECK(a.step_total == b.step_total);
    CHECK(flatten(student_checkpoint(a, Variant::liaf, f.cfg)) == flatten(student_checkpoint(b, Variant::liaf, f.cfg)));
    auto other = f.cfg;
    other.seed = 5;
    CHECK(distill(in, other, Variant::liaf).step_total != a.step_total);
  }
  SUBCASE("cached teacher necks change nothing") {
    const auto cache = NeckCache::build(f.teacher, f.data.train, 3);
    const DistillInputs cached{&f.teacher, &f.ensemble, &f.data, &cache};
    CHECK(distill(cached, f.cfg, Variant::liaf).step_total == distill(in, f.cfg, Variant::liaf).step_total);
  }
  SUBCASE("logged distillation loss is reproducible from snapshots") {
    const auto dir = temp_dir("snap");
    auto cfg = f.cfg;
    cfg.checkpoint_steps = {0, 4, 11};
    for (auto v : {Variant::liaf, Variant::fitnet_allones, Variant::teacher_only_mask}) {
      fs::remove_all(dir);
      RunRecord rec;
      const auto r = distill(in, cfg, v, &rec, dir.string());
      const auto steps = rec.rows_of("step");
      for (int k : cfg.checkpoint_steps) {
        const auto snap = load_checkpoint((dir / ("step_" + std::to_string(k) + ".ckpt")).string());
        const double logged = steps[static_cast<std::size_t>(k)]["distill"].get<double>();
        CHECK(snap.meta["distill_loss"].get<double>() == logged);
        const double again = recompute_distill_loss(snap, f.teacher, f.ensemble, f.data, cfg);
        CHECK(std::abs(again - logged) <= 1e-6 * std::max(1.0, std::abs(logged)));
        if (v == Variant::fitnet_allones) {
          const auto idx = snap.meta["batch"].get<std::vector<int>>();
          const auto images = stack_images<Real>(f.data.train, idx);
          const auto p = projection_from_checkpoint(snap).forward(detector_from_checkpoint(snap).backbone_forward(images));
          const auto t = f.teacher.backbone_forward(images);
          CHECK(generic_masked_loss(t, p, SoftMask<Real>::ones(t.n(), t.h(), t.w())) == doctest::Approx(logged).epsilon(1e-6));
        }
      }
      CHECK(r.step_distill.size() == 12);
    }
    fs::remove_all(dir);
  }
  SUBCASE("only student and projection change") {
    const auto r = distill(in, f.cfg, Variant::liaf);
    const Detector init(f.cfg.student.spec, mix_seed(f.cfg.seed, stream::student_init, 0));
    CHECK(flatten(detector_checkpoint(r.student, "s", f.cfg)) != flatten(detector_checkpoint(init, "s", f.cfg)));
    const auto p0 = Projection::random(12, 8, false, mix_seed(f.cfg.seed, stream::projection_init, 0));
    CHECK(r.projection.weight != p0.weight);
  }
  SUBCASE("zero epochs returns the initialization") {
    auto cfg = f.cfg;
    cfg.student.optim.epochs = 0;
    const auto r = distill(in, cfg, Variant::liaf);
    const Detector init(cfg.student.spec, mix_seed(cfg.seed, stream::student_init, 0));
    CHECK(flatten(detector_checkpoint(r.student, "s", cfg)) == flatten(detector_checkpoint(init, "s", cfg)));
    CHECK(r.step_total.empty());
  }
  SUBCASE("variants needing selectors reject a missing ensemble") {
    const DistillInputs bare{&f.teacher, nullptr, &f.data, nullptr};
    CHECK_THROWS_AS(distill(bare, f.cfg, Variant::liaf), std::invalid_argument);
    CHECK_NOTHROW(distill(bare, f.cfg, Variant::fitnet_allones));
  }
  SUBCASE("student checkpoint round trip") {
    const auto r = distill(in, f.cfg, Variant::teacher_only_mask);
    const auto c = student_checkpoint(r, Variant::teacher_only_mask, f.cfg);
    CHECK(c.meta["variant"] == "teacher_only_mask");
    CHECK(projection_from_checkpoint(c).weight == r.projection.weight);
    CHECK(flatten(detector_checkpoint(detector_from_checkpoint(c), "s", f.cfg)) ==
          flatten(detector_checkpoint(r.student, "s", f.cfg)));
  }
  SUBCASE("variant names") {
    for (auto v : {Variant::liaf, Variant::no_kd, Variant::fitnet_allones, Variant::teacher_only_mask})
      CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS_AS(parse_variant("fitnet"), ConfigError);
  }
}

TEST_CASE("total loss decreases over the first epoch") {
  auto cfg = tiny_config();
  cfg.train_scenes = 160;
  cfg.student.optim.epochs = 1;
  const auto data = Datasets::generate(cfg);
  auto& f = fixture();
  const auto r = distill({&f.teacher, &f.ensemble, &data, nullptr}, cfg, Variant::liaf);
  const auto n = r.step_total.size();
  REQUIRE(n == 40);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    head += r.step_total[i];
    tail += r.step_total[n - 1 - i];
  }
  CHECK(tail < head);
}

TEST_CASE("ablation") {
  auto& f = fixture();
  SUBCASE("one cell equals a direct distill call") {
    const auto report = ablate(f.teacher, f.data, f.cfg);
    REQUIRE(report.rows.size() == 2);
    auto cfg = f.cfg;
    cfg.K = 2;
    const auto sel = train_selectors(f.teacher, f.data, cfg).ensemble;
    for (const auto& row : report.rows) {
      CHECK(row.ok);
      auto run = cfg;
      run.seed = row.seed;
      CHECK(distill({&f.teacher, &sel, &f.data, nullptr}, run, Variant::liaf).metrics.map == row.metrics.map);
    }
    const std::string csv = report.csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }
  SUBCASE("row count is cells x seeds and a failing cell does not stop the grid") {
    auto cfg = f.cfg;
    cfg.ablate.K = {0, 2};  // K = 0 is rejected when that cell starts
    cfg.ablate.rescale = {Rescale::none, Rescale::mean_one};
    cfg.ablate.seeds = {0, 1};
    const auto report = ablate(f.teacher, f.data, cfg);
    REQUIRE(report.rows.size() == 8);
    for (const auto& row : report.rows) {
      CHECK(row.ok == (row.cell["K"] == 2));
      if (!row.ok) CHECK(row.error.find("K") != std::string::npos);
    }
    const std::string summary = report.summary_csv();
    CHECK(summary.rfind("K,mu,", 0) == 0);
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 5);
  }
}

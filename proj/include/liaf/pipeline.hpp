#pragma once

#include "liaf/checkpoint.hpp"
#include "liaf/config.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace liaf {

// Training runs in single precision; gradient checks use double.
using Real = float;
using Detector = TinyDetector<Real>;
using Ensemble = SelectorEnsemble<Real>;
using Projection = ChannelProjection<Real>;

// Random streams derived from a root seed with mix_seed.
namespace stream {
inline constexpr std::uint64_t train_split = 1;
inline constexpr std::uint64_t eval_split = 2;
inline constexpr std::uint64_t teacher_init = 10;
inline constexpr std::uint64_t teacher_shuffle = 11;
inline constexpr std::uint64_t selector_init = 20;
inline constexpr std::uint64_t selector_shuffle = 21;
inline constexpr std::uint64_t student_init = 30;
inline constexpr std::uint64_t student_shuffle = 31;
inline constexpr std::uint64_t projection_init = 32;
}  // namespace stream

struct Datasets {
  Corpus train;
  Corpus eval;
  static Datasets generate(const DistillConfig& cfg);
};

// Append-only metric log. Every row gets the run's step counter and the
// wall time in seconds since the record was opened. With a path, rows are
// also written as JSON lines, starting with a header row.
class RunRecord {
 public:
  RunRecord() : RunRecord("", nlohmann::json::object()) {}
  RunRecord(const std::string& path, const nlohmann::json& header);

  void append(nlohmann::json row);
  const std::vector<nlohmann::json>& rows() const { return rows_; }
  std::vector<nlohmann::json> rows_of(const std::string& kind) const;

 private:
  std::vector<nlohmann::json> rows_;
  std::optional<std::ofstream> out_;
  std::chrono::steady_clock::time_point start_;
};

// Header row for run records: config snapshot plus code and config hashes.
nlohmann::json run_header(const DistillConfig& cfg, const std::string& stage);
std::string source_hash();

// Frozen teacher neck features for every scene of a corpus, [C, HW] each.
struct NeckCache {
  std::vector<MatrixX<Real>> features;
  Index channels = 0, height = 0, width = 0;
  static NeckCache build(const Detector& teacher, const Corpus& corpus, int batch_size);
  Tensor4<Real> gather(const std::vector<int>& indices) const;
};

// Batch ordering for one epoch: a seeded Fisher-Yates shuffle split into
// consecutive batches (the last one may be short).
std::vector<std::vector<int>> epoch_batches(std::size_t count, int batch_size, std::uint64_t seed);

// Cosine decay over total steps, scaled by a linear ramp over the first
// warmup steps.
double cosine_lr(double base, std::int64_t step, std::int64_t total, bool cosine, std::int64_t warmup = 0);
double lambda_at(double lambda, double warmup_fraction, std::int64_t step, std::int64_t total);

std::vector<std::vector<GroundTruth>> batch_ground_truth(const Corpus& corpus, const std::vector<int>& indices);

nlohmann::json metrics_json(const MapMetrics& m);  // map, ap50, ap75
MapMetrics evaluate_detector(const Detector& model, const Corpus& corpus, int batch_size, const DecodeParams& decode);

Detector train_teacher(const Datasets& data, const DistillConfig& cfg, RunRecord* record = nullptr);

struct SelectorResult {
  Ensemble ensemble;
  double initial_diversity = 0;
  double final_diversity = 0;
};

// Learns only the selector vectors. The teacher is read-only.
SelectorResult train_selectors(const Detector& teacher, const Datasets& data, const DistillConfig& cfg,
                               RunRecord* record = nullptr, const NeckCache* cache = nullptr);

enum class Variant { liaf, no_kd, fitnet_allones, teacher_only_mask };
std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
MaskPolicy policy_for(Variant v, MaskMode mode);

struct StudentResult {
  Detector student;
  Projection projection;
  MapMetrics metrics;  // on the eval split after the last epoch
  std::vector<double> step_total;
  std::vector<double> step_distill;
};

struct DistillInputs {
  const Detector* teacher = nullptr;
  const Ensemble* ensemble = nullptr;  // unused by no_kd and fitnet_allones
  const Datasets* data = nullptr;
  const NeckCache* teacher_necks = nullptr;  // optional, for the train split
};

// Stage 2 and the baselines: L_task + lambda * L_dist over student and
// projection parameters. At every step listed in cfg.checkpoint_steps the
// pre-update state is saved to snapshot_dir (when nonempty) as
// step_<k>.ckpt, with the batch indices and the logged loss in its meta.
StudentResult distill(const DistillInputs& in, const DistillConfig& cfg, Variant variant, RunRecord* record = nullptr,
                      const std::string& snapshot_dir = "");

// Recomputes the distillation loss logged at a snapshot.
double recompute_distill_loss(const Checkpoint& snapshot, const Detector& teacher, const Ensemble& ensemble,
                              const Datasets& data, const DistillConfig& cfg);

// Checkpoint conversions.
Checkpoint detector_checkpoint(const Detector& model, const std::string& stage, const DistillConfig& cfg);
Detector detector_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "");
void append_detector(Checkpoint& ckpt, const Detector& model, const std::string& prefix);
Checkpoint ensemble_checkpoint(const Ensemble& ensemble, const DistillConfig& cfg);
Ensemble ensemble_from_checkpoint(const Checkpoint& ckpt);
Checkpoint student_checkpoint(const StudentResult& result, Variant variant, const DistillConfig& cfg);
Projection projection_from_checkpoint(const Checkpoint& ckpt);

struct AblationRow {
  nlohmann::json cell;  // K, mu, mask_mode, softmax_scope, rescale, detach_scores
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MapMetrics metrics;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string csv() const;          // one line per (cell, seed)
  std::string summary_csv() const;  // mean and std of mAP per cell
};

// Every grid cell retrains selectors with that cell's settings and then
// distills one student per seed. A failing cell is recorded and skipped.
AblationReport ablate(const Detector& teacher, const Datasets& data, const DistillConfig& cfg,
                      const NeckCache* cache = nullptr, RunRecord* record = nullptr);

}  // namespace liaf

#include "liaf/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace liaf {

using json = nlohmann::json;

namespace {

template <typename T>
void append_views(std::vector<ParamView<T>>& out, std::vector<ParamView<T>> more) {
  out.insert(out.end(), more.begin(), more.end());
}

std::vector<ParamView<Real>> projection_views(MatrixX<Real>& weight, VectorX<Real>& bias) {
  std::vector<ParamView<Real>> v{{"proj.weight", weight.data(), weight.size(), {weight.rows(), weight.cols()}}};
  if (bias.size() > 0) v.push_back({"proj.bias", bias.data(), bias.size(), {bias.size()}});
  return v;
}

void require_finite(double value, const std::string& stage, std::int64_t step) {
  if (!std::isfinite(value))
    throw std::runtime_error(stage + ": non-finite loss at step " + std::to_string(step) + " (diverged)");
}

NamedArray to_array(const std::string& name, const Real* data, Index size, const std::vector<Index>& shape) {
  NamedArray a;
  a.name = name;
  a.shape.assign(shape.begin(), shape.end());
  a.data.assign(data, data + size);
  return a;
}

void copy_array(const NamedArray& a, Real* dst, Index size) {
  if (static_cast<Index>(a.data.size()) != size)
    throw std::runtime_error("checkpoint array '" + a.name + "' has " + std::to_string(a.data.size()) +
                             " values, expected " + std::to_string(size));
  for (Index i = 0; i < size; ++i) dst[i] = static_cast<Real>(a.data[static_cast<std::size_t>(i)]);
}

json spec_json(const DetectorSpec& s) {
  return json{{"widths", s.widths},         {"strides", s.strides},         {"kernel", s.kernel},
              {"head_width", s.head_width}, {"num_classes", s.num_classes}, {"in_channels", s.in_channels}};
}

DetectorSpec spec_from(const json& j) {
  DetectorSpec s;
  s.widths = j.at("widths").get<std::vector<int>>();
  s.strides = j.at("strides").get<std::vector<int>>();
  s.kernel = j.at("kernel").get<int>();
  s.head_width = j.at("head_width").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  return s;
}

std::int64_t warmup_steps(const StageOptim& o, std::int64_t per_epoch) {
  return static_cast<std::int64_t>(std::ceil(o.warmup_epochs * static_cast<double>(per_epoch)));
}

bool should_eval(const DistillConfig& cfg, int epoch, int epochs) {
  return epoch + 1 == epochs || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
}

}  // namespace

json metrics_json(const MapMetrics& m) { return json{{"map", m.map}, {"ap50", m.ap50}, {"ap75", m.ap75}}; }

Datasets Datasets::generate(const DistillConfig& cfg) {
  return Datasets{Corpus::generate(cfg.scene, cfg.data_seed, stream::train_split, cfg.train_scenes),
                  Corpus::generate(cfg.scene, cfg.data_seed, stream::eval_split, cfg.eval_scenes)};
}

RunRecord::RunRecord(const std::string& path, const json& header) : start_(std::chrono::steady_clock::now()) {
  if (!path.empty()) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    out_.emplace(path, std::ios::out | std::ios::trunc);
    if (!*out_) throw std::runtime_error("cannot open run record '" + path + "'");
  }
  json h = header;
  h["kind"] = "header";
  append(std::move(h));
}

void RunRecord::append(json row) {
  row["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  if (!row.contains("step")) row["step"] = rows_.empty() ? json(0) : rows_.back().value("step", json(0));
  if (out_) {
    *out_ << row.dump() << '\n';
    out_->flush();
  }
  rows_.push_back(std::move(row));
}

std::vector<json> RunRecord::rows_of(const std::string& kind) const {
  std::vector<json> out;
  for (const auto& r : rows_)
    if (r.value("kind", "") == kind) out.push_back(r);
  return out;
}

std::string source_hash() { return LIAF_SOURCE_HASH; }

json run_header(const DistillConfig& cfg, const std::string& stage) {
  return json{{"stage", stage}, {"config", cfg.to_json()}, {"config_hash", cfg.hash()}, {"code_hash", source_hash()}};
}

NeckCache NeckCache::build(const Detector& teacher, const Corpus& corpus, int batch_size) {
  NeckCache cache;
  for (std::size_t first = 0; first < corpus.size(); first += static_cast<std::size_t>(batch_size)) {
    std::vector<int> idx;
    for (std::size_t i = first; i < std::min(corpus.size(), first + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(static_cast<int>(i));
    const auto neck = teacher.backbone_forward(stack_images<Real>(corpus, idx));
    cache.channels = neck.c();
    cache.height = neck.h();
    cache.width = neck.w();
    for (Index n = 0; n < neck.n(); ++n) cache.features.emplace_back(neck.image(n));
  }
  return cache;
}

Tensor4<Real> NeckCache::gather(const std::vector<int>& indices) const {
  Tensor4<Real> out(static_cast<Index>(indices.size()), channels, height, width);
  for (std::size_t b = 0; b < indices.size(); ++b)
    out.image(static_cast<Index>(b)) = features.at(static_cast<std::size_t>(indices[b]));
  return out;
}

std::vector<std::vector<int>> epoch_batches(std::size_t count, int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("epoch_batches: batch size must be >= 1");
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  // Hand-rolled so the permutation does not depend on the standard library.
  std::mt19937_64 rng(seed);
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < count; i += static_cast<std::size_t>(batch_size))
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + static_cast<std::size_t>(batch_size))));
  return batches;
}

double cosine_lr(double base, std::int64_t step, std::int64_t total, bool cosine, std::int64_t warmup) {
  const double ramp = warmup > 0 ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup)) : 1.0;
  if (!cosine || total <= 0) return base * ramp;
  return 0.5 * base * ramp * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

double lambda_at(double lambda, double warmup_fraction, std::int64_t step, std::int64_t total) {
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
  if (warmup <= 0) return lambda;
  return lambda * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

std::vector<std::vector<GroundTruth>> batch_ground_truth(const Corpus& corpus, const std::vector<int>& indices) {
  std::vector<std::vector<GroundTruth>> gt;
  for (int i : indices) gt.push_back(corpus.scenes.at(static_cast<std::size_t>(i)).ground_truth);
  return gt;
}

MapMetrics evaluate_detector(const Detector& model, const Corpus& corpus, int batch_size, const DecodeParams& decode) {
  std::vector<Detection> preds;
  std::vector<std::vector<GroundTruth>> gt;
  for (std::size_t first = 0; first < corpus.size(); first += static_cast<std::size_t>(batch_size)) {
    std::vector<int> idx;
    for (std::size_t i = first; i < std::min(corpus.size(), first + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(static_cast<int>(i));
    const auto out = model.forward(stack_images<Real>(corpus, idx));
    auto d = decode_detections(out.class_logits, out.box_deltas, out.neck.level_stride, corpus.spec.image_size,
                               static_cast<int>(first), decode);
    preds.insert(preds.end(), d.begin(), d.end());
    for (int i : idx) gt.push_back(corpus.scenes[static_cast<std::size_t>(i)].ground_truth);
  }
  return evaluate_map(preds, gt, model.spec().num_classes);
}

Detector train_teacher(const Datasets& data, const DistillConfig& cfg, RunRecord* record) {
  cfg.validate();
  if (data.train.size() == 0) throw std::invalid_argument("train_teacher: empty training corpus");
  Detector model(cfg.teacher.spec, mix_seed(cfg.seed, stream::teacher_init, 0));
  Sgd<Real> opt(cfg.momentum, cfg.weight_decay);
  const int epochs = cfg.teacher.optim.epochs;
  const auto per_epoch = static_cast<std::int64_t>((data.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total = per_epoch * epochs;
  const auto warmup = warmup_steps(cfg.teacher.optim, per_epoch);
  const int stride = cfg.teacher.spec.neck_stride();
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& idx : epoch_batches(data.train.size(), cfg.batch_size, mix_seed(cfg.seed, stream::teacher_shuffle, epoch))) {
      const double lr = cosine_lr(cfg.teacher.optim.lr, step, total, cfg.teacher.optim.cosine, warmup);
      const auto gt = batch_ground_truth(data.train, idx);
      Detector::Cache cache;
      const auto out = model.forward(stack_images<Real>(data.train, idx), &cache);
      const auto loss = detection_task_loss(out.class_logits, out.box_deltas, gt, stride);
      require_finite(loss.total, "train_teacher", step);
      auto grads = model.zero_grads();
      model.backbone_backward(cache, model.head_backward(cache, loss.grad_logits, loss.grad_deltas, grads), grads);
      const auto gviews = Detector::grad_views(grads);
      const double gnorm = clip_grad_norm(gviews, cfg.grad_clip);
      opt.step(model.parameters(), gviews, lr);
      if (record)
        record->append({{"kind", "step"}, {"stage", "teacher"}, {"step", step}, {"epoch", epoch}, {"lr", lr},
                        {"task", loss.total}, {"total", loss.total}, {"grad_norm", gnorm}});
      ++step;
    }
    if (should_eval(cfg, epoch, epochs)) {
      const auto m = evaluate_detector(model, data.eval, cfg.batch_size, cfg.decode);
      spdlog::info("teacher epoch {}: mAP {:.4f} AP50 {:.4f}", epoch, m.map, m.ap50);
      if (record) {
        json row = metrics_json(m);
        row.update({{"kind", "eval"}, {"stage", "teacher"}, {"epoch", epoch}, {"step", step}});
        record->append(row);
      }
    }
  }
  return model;
}

SelectorResult train_selectors(const Detector& teacher, const Datasets& data, const DistillConfig& cfg,
                               RunRecord* record, const NeckCache* cache) {
  cfg.validate();
  const Index C = teacher.spec().neck_channels();
  SelectorResult result;
  Ensemble& E = result.ensemble;
  E = init_ensemble<Real>(cfg.K, C * cfg.pool_h * cfg.pool_w, mix_seed(cfg.seed, stream::selector_init, 0));
  result.initial_diversity = diversity_loss(E);
  Sgd<Real> opt(cfg.momentum, cfg.weight_decay);
  const int epochs = cfg.selector_optim.epochs;
  const auto per_epoch = static_cast<std::int64_t>((data.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total = per_epoch * epochs;
  const int stride = teacher.spec().neck_stride();
  const Real mu = static_cast<Real>(cfg.mu);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& idx :
         epoch_batches(data.train.size(), cfg.batch_size, mix_seed(cfg.seed, stream::selector_shuffle, epoch))) {
      const double lr = cosine_lr(cfg.selector_optim.lr, step, total, cfg.selector_optim.cosine);
      const auto gt = batch_ground_truth(data.train, idx);
      const auto feats = cache ? cache->gather(idx) : teacher.backbone_forward(stack_images<Real>(data.train, idx));
      const Index N = feats.n(), H = feats.h(), W = feats.w();
      const auto inst = instances_for_level(gt, stride, H, W);
      if (inst.empty()) {
        ++step;
        continue;
      }
      const auto roi = extract_roi_batch(feats, inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin);
      const auto scores = average_scores(roi, E, cfg.softmax_scope, ScoreSource::teacher);
      const auto mask = build_soft_mask(inst, scores.values, N, H, W, cfg.rescale, cfg.softmax_scope);
      const auto masked = apply_mask(feats, mask);

      Detector::Cache hc;
      Tensor4<Real> logits, deltas;
      teacher.head_forward(masked, logits, deltas, &hc);
      const auto task = detection_task_loss(logits, deltas, gt, stride);
      const Real div = diversity_loss(E);
      const double total_loss = static_cast<double>(task.total) + cfg.mu * static_cast<double>(div);
      require_finite(total_loss, "train_selectors", step);

      auto unused = teacher.zero_grads();
      const auto dmasked = teacher.head_backward(hc, task.grad_logits, task.grad_deltas, unused);
      Tensor4<Real> dmask(N, 1, H, W);
      for (Index n = 0; n < N; ++n)
        dmask.image(n).row(0) = (dmasked.image(n).array() * feats.image(n).array()).colwise().sum();
      const auto dscores = build_soft_mask_backward(inst, scores.values, dmask, cfg.rescale, cfg.softmax_scope);
      auto grad = average_scores_backward(roi, E, scores, dscores, cfg.softmax_scope).ensemble;
      if (mu > 0) grad += mu * diversity_loss_gradient(E);

      std::vector<ParamView<Real>> g{{"selectors", grad.data(), grad.size(), {grad.rows(), grad.cols()}}};
      clip_grad_norm(g, cfg.grad_clip);
      opt.step({{"selectors", E.vectors.data(), E.vectors.size(), {E.K(), E.dim()}}}, g, lr);
      if (record)
        record->append({{"kind", "step"}, {"stage", "selectors"}, {"step", step}, {"epoch", epoch}, {"lr", lr},
                        {"task", task.total}, {"diversity", div}, {"total", total_loss}});
      ++step;
    }
  }
  result.final_diversity = diversity_loss(E);
  spdlog::info("selectors: diversity {:.4f} -> {:.4f}", result.initial_diversity, result.final_diversity);
  return result;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::liaf: return "liaf";
    case Variant::no_kd: return "no_kd";
    case Variant::fitnet_allones: return "fitnet_allones";
    case Variant::teacher_only_mask: return "teacher_only_mask";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::liaf, Variant::no_kd, Variant::fitnet_allones, Variant::teacher_only_mask})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "' (expected liaf, no_kd, fitnet_allones or teacher_only_mask)");
}

MaskPolicy policy_for(Variant v, MaskMode mode) {
  switch (v) {
    case Variant::liaf: return mode == MaskMode::separate ? MaskPolicy::separate : MaskPolicy::shared_mean;
    case Variant::teacher_only_mask: return MaskPolicy::teacher_only;
    default: return MaskPolicy::all_ones;
  }
}

StudentResult distill(const DistillInputs& in, const DistillConfig& cfg, Variant variant, RunRecord* record,
                      const std::string& snapshot_dir) {
  cfg.validate();
  if (!in.data) throw std::invalid_argument("distill: datasets required");
  const bool kd = variant != Variant::no_kd;
  const bool needs_ensemble = variant == Variant::liaf || variant == Variant::teacher_only_mask;
  if (kd && !in.teacher) throw std::invalid_argument("distill: teacher required for " + to_string(variant));
  if (needs_ensemble && !in.ensemble) throw std::invalid_argument("distill: selector ensemble required");
  const auto& train = in.data->train;
  if (train.size() == 0) throw std::invalid_argument("distill: empty training corpus");

  StudentResult res{Detector(cfg.student.spec, mix_seed(cfg.seed, stream::student_init, 0)),
                    Projection::random(cfg.teacher.spec.neck_channels(), cfg.student.spec.neck_channels(),
                                       cfg.proj_bias, mix_seed(cfg.seed, stream::projection_init, 0)),
                    {}, {}, {}};
  Detector& student = res.student;
  Projection& proj = res.projection;
  if (needs_ensemble && in.ensemble->dim() != cfg.teacher.spec.neck_channels() * cfg.pool_h * cfg.pool_w)
    throw std::invalid_argument("distill: selector length does not match teacher channels x pooled size");

  const auto opt_term = cfg.term_options(policy_for(variant, cfg.mask_mode));
  static const Ensemble kNoEnsemble{MatrixX<Real>::Zero(1, 1)};
  const Ensemble& ensemble = needs_ensemble ? *in.ensemble : kNoEnsemble;
  Sgd<Real> opt(cfg.momentum, cfg.weight_decay);
  const int epochs = cfg.student.optim.epochs;
  const auto per_epoch = static_cast<std::int64_t>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total = per_epoch * epochs;
  const auto warmup = warmup_steps(cfg.student.optim, per_epoch);
  const int stride = cfg.student.spec.neck_stride();
  std::int64_t step = 0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, mix_seed(cfg.seed, stream::student_shuffle, epoch))) {
      const double lr = cosine_lr(cfg.student.optim.lr, step, total, cfg.student.optim.cosine, warmup);
      const double lam = kd ? lambda_at(cfg.lambda, cfg.warmup_fraction, step, total) : 0.0;
      const auto gt = batch_ground_truth(train, idx);
      Detector::Cache sc;
      const auto out = student.forward(stack_images<Real>(train, idx), &sc);
      const auto task = detection_task_loss(out.class_logits, out.box_deltas, gt, stride);
      auto grads = student.zero_grads();
      auto dneck = student.head_backward(sc, task.grad_logits, task.grad_deltas, grads);

      MatrixX<Real> gw = MatrixX<Real>::Zero(proj.weight.rows(), proj.weight.cols());
      VectorX<Real> gb = VectorX<Real>::Zero(proj.bias.size());
      double dist = 0;
      if (kd) {
        const auto teacher_neck = in.teacher_necks ? in.teacher_necks->gather(idx)
                                                   : in.teacher->backbone_forward(stack_images<Real>(train, idx));
        const auto inst = instances_for_level(gt, stride, teacher_neck.h(), teacher_neck.w());
        const auto projected = proj.forward(out.neck.values);
        auto term = distill_term(teacher_neck, projected, inst, ensemble, opt_term);
        dist = term.loss;
        if (lam > 0) {
          term.grad_projected.flat() *= static_cast<Real>(lam);
          dneck.flat() += proj.backward(out.neck.values, term.grad_projected, gw, gb).flat();
        }
      }
      const double total_loss = static_cast<double>(task.total) + lam * dist;
      require_finite(total_loss, "distill", step);

      if (!snapshot_dir.empty() &&
          std::find(cfg.checkpoint_steps.begin(), cfg.checkpoint_steps.end(), step) != cfg.checkpoint_steps.end()) {
        auto snap = student_checkpoint(res, variant, cfg);
        snap.meta["stage"] = "distill_snapshot";
        snap.meta["step"] = step;
        snap.meta["batch"] = idx;
        snap.meta["distill_loss"] = dist;
        save_checkpoint((std::filesystem::path(snapshot_dir) / ("step_" + std::to_string(step) + ".ckpt")).string(), snap);
      }

      student.backbone_backward(sc, std::move(dneck), grads);
      auto gviews = Detector::grad_views(grads);
      auto params = student.parameters();
      if (kd) {
        append_views(gviews, projection_views(gw, gb));
        append_views(params, projection_views(proj.weight, proj.bias));
      }
      clip_grad_norm(gviews, cfg.grad_clip);
      opt.step(params, gviews, lr);

      res.step_total.push_back(total_loss);
      res.step_distill.push_back(dist);
      if (record)
        record->append({{"kind", "step"}, {"stage", "distill"}, {"variant", to_string(variant)}, {"step", step},
                        {"epoch", epoch}, {"lr", lr}, {"lambda", lam}, {"task", task.total}, {"distill", dist},
                        {"total", total_loss}});
      ++step;
    }
    if (should_eval(cfg, epoch, epochs)) {
      res.metrics = evaluate_detector(student, in.data->eval, cfg.batch_size, cfg.decode);
      spdlog::info("{} seed {} epoch {}: mAP {:.4f}", to_string(variant), cfg.seed, epoch, res.metrics.map);
      if (record) {
        json row = metrics_json(res.metrics);
        row.update({{"kind", "eval"}, {"stage", "distill"}, {"variant", to_string(variant)}, {"epoch", epoch},
                    {"step", step}});
        record->append(row);
      }
    }
  }
  if (epochs == 0) res.metrics = evaluate_detector(student, in.data->eval, cfg.batch_size, cfg.decode);
  return res;
}

double recompute_distill_loss(const Checkpoint& snapshot, const Detector& teacher, const Ensemble& ensemble,
                              const Datasets& data, const DistillConfig& cfg) {
  const auto variant = parse_variant(snapshot.meta.at("variant").get<std::string>());
  if (variant == Variant::no_kd) return 0.0;
  const auto student = detector_from_checkpoint(snapshot);
  const auto proj = projection_from_checkpoint(snapshot);
  const auto idx = snapshot.meta.at("batch").get<std::vector<int>>();
  const auto images = stack_images<Real>(data.train, idx);
  const auto gt = batch_ground_truth(data.train, idx);
  const auto teacher_neck = teacher.backbone_forward(images);
  const auto inst = instances_for_level(gt, cfg.student.spec.neck_stride(), teacher_neck.h(), teacher_neck.w());
  const auto projected = proj.forward(student.backbone_forward(images));
  return distill_term(teacher_neck, projected, inst, ensemble, cfg.term_options(policy_for(variant, cfg.mask_mode))).loss;
}

void append_detector(Checkpoint& ckpt, const Detector& model, const std::string& prefix) {
  for (const auto& p : model.parameters()) ckpt.arrays.push_back(to_array(prefix + p.name, p.data, p.size, p.shape));
}

Checkpoint detector_checkpoint(const Detector& model, const std::string& stage, const DistillConfig& cfg) {
  Checkpoint c;
  c.meta = {{"stage", stage}, {"spec", spec_json(model.spec())}, {"config_hash", cfg.hash()},
            {"code_hash", source_hash()}, {"seed", cfg.seed}, {"config", cfg.to_json()}};
  append_detector(c, model, "");
  return c;
}

Detector detector_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.meta.contains("spec")) throw std::runtime_error("checkpoint has no detector spec");
  Detector model(spec_from(ckpt.meta.at("spec")), 0);
  for (auto& p : model.parameters()) copy_array(ckpt.array(prefix + p.name), p.data, p.size);
  return model;
}

Checkpoint ensemble_checkpoint(const Ensemble& ensemble, const DistillConfig& cfg) {
  Checkpoint c;
  c.meta = {{"stage", "selectors"}, {"K", ensemble.K()}, {"dim", ensemble.dim()}, {"config_hash", cfg.hash()},
            {"code_hash", source_hash()}, {"seed", cfg.seed}};
  c.arrays.push_back(to_array("selectors", ensemble.vectors.data(), ensemble.vectors.size(), {ensemble.K(), ensemble.dim()}));
  return c;
}

Ensemble ensemble_from_checkpoint(const Checkpoint& ckpt) {
  const auto& a = ckpt.array("selectors");
  if (a.shape.size() != 2) throw std::runtime_error("selector array must be rank 2");
  Ensemble e{MatrixX<Real>(a.shape[0], a.shape[1])};
  copy_array(a, e.vectors.data(), e.vectors.size());
  return e;
}

Checkpoint student_checkpoint(const StudentResult& result, Variant variant, const DistillConfig& cfg) {
  auto c = detector_checkpoint(result.student, "student", cfg);
  c.meta["variant"] = to_string(variant);
  c.meta["metrics"] = metrics_json(result.metrics);
  const auto& p = result.projection;
  c.arrays.push_back(to_array("proj.weight", p.weight.data(), p.weight.size(), {p.weight.rows(), p.weight.cols()}));
  if (p.bias.size() > 0) c.arrays.push_back(to_array("proj.bias", p.bias.data(), p.bias.size(), {p.bias.size()}));
  return c;
}

Projection projection_from_checkpoint(const Checkpoint& ckpt) {
  const auto& w = ckpt.array("proj.weight");
  if (w.shape.size() != 2) throw std::runtime_error("proj.weight must be rank 2");
  Projection p;
  p.weight.resize(w.shape[0], w.shape[1]);
  copy_array(w, p.weight.data(), p.weight.size());
  if (ckpt.has("proj.bias")) {
    p.bias.resize(w.shape[0]);
    copy_array(ckpt.array("proj.bias"), p.bias.data(), p.bias.size());
  }
  return p;
}

std::string AblationReport::csv() const {
  std::ostringstream os;
  os << "K,mu,mask_mode,softmax_scope,rescale,detach_scores,seed,status,map,ap50,ap75\n";
  for (const auto& r : rows) {
    const auto& c = r.cell;
    os << c["K"].get<int>() << ',' << c["mu"].get<double>() << ',' << c["mask_mode"].get<std::string>() << ','
       << c["softmax_scope"].get<std::string>() << ',' << c["rescale"].get<std::string>() << ','
       << (c["detach_scores"].get<bool>() ? "true" : "false") << ',' << r.seed << ',' << (r.ok ? "ok" : "failed")
       << ',' << r.metrics.map << ',' << r.metrics.ap50 << ',' << r.metrics.ap75 << '\n';
  }
  return os.str();
}

std::string AblationReport::summary_csv() const {
  std::ostringstream os;
  os << "K,mu,mask_mode,softmax_scope,rescale,detach_scores,runs,failed,map_mean,map_std\n";
  std::vector<json> cells;
  for (const auto& r : rows)
    if (std::find(cells.begin(), cells.end(), r.cell) == cells.end()) cells.push_back(r.cell);
  for (const auto& c : cells) {
    std::vector<double> maps;
    int failed = 0;
    for (const auto& r : rows) {
      if (r.cell != c) continue;
      if (r.ok)
        maps.push_back(r.metrics.map);
      else
        ++failed;
    }
    double mean = 0, var = 0;
    for (double m : maps) mean += m;
    if (!maps.empty()) mean /= static_cast<double>(maps.size());
    for (double m : maps) var += (m - mean) * (m - mean);
    const double sd = maps.size() > 1 ? std::sqrt(var / static_cast<double>(maps.size() - 1)) : 0.0;
    os << c["K"].get<int>() << ',' << c["mu"].get<double>() << ',' << c["mask_mode"].get<std::string>() << ','
       << c["softmax_scope"].get<std::string>() << ',' << c["rescale"].get<std::string>() << ','
       << (c["detach_scores"].get<bool>() ? "true" : "false") << ',' << maps.size() << ',' << failed << ',' << mean
       << ',' << sd << '\n';
  }
  return os.str();
}

AblationReport ablate(const Detector& teacher, const Datasets& data, const DistillConfig& cfg, const NeckCache* cache,
                      RunRecord* record) {
  AblationReport report;
  const auto& g = cfg.ablate;
  for (int K : g.K)
    for (double mu : g.mu)
      for (auto mode : g.mask_mode)
        for (auto scope : g.softmax_scope)
          for (auto rescale : g.rescale)
            for (bool detach : g.detach_scores) {
              DistillConfig cell = cfg;
              cell.K = K;
              cell.mu = mu;
              cell.mask_mode = mode;
              cell.softmax_scope = scope;
              cell.rescale = rescale;
              cell.detach_scores = detach;
              cell.ablate = AblationGrid{};
              const json cj{{"K", K},
                            {"mu", mu},
                            {"mask_mode", to_string(mode)},
                            {"softmax_scope", to_string(scope)},
                            {"rescale", to_string(rescale)},
                            {"detach_scores", detach}};
              std::optional<Ensemble> ens;
              std::string cell_error;
              try {
                ens = train_selectors(teacher, data, cell, nullptr, cache).ensemble;
              } catch (const std::exception& e) {
                cell_error = e.what();
              }
              for (auto seed : g.seeds) {
                AblationRow row{cj, seed, false, cell_error, {}};
                if (ens) {
                  try {
                    DistillConfig run = cell;
                    run.seed = seed;
                    row.metrics = distill({&teacher, &*ens, &data, cache}, run, Variant::liaf).metrics;
                    row.ok = true;
                  } catch (const std::exception& e) {
                    row.error = e.what();
                  }
                }
                if (!row.ok) spdlog::error("ablation cell {} seed {} failed: {}", cj.dump(), seed, row.error);
                if (record) {
                  json r = metrics_json(row.metrics);
                  r.update({{"kind", "ablation"}, {"cell", cj}, {"seed", seed}, {"ok", row.ok}, {"error", row.error}});
                  record->append(r);
                }
                report.rows.push_back(std::move(row));
              }
            }
  return report;
}

}  // namespace liaf

#include "liaf/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

extern char** environ;

namespace liaf {

using nlohmann::json;

std::string to_string(MaskMode m) { return m == MaskMode::separate ? "separate" : "shared_mean"; }
std::string to_string(SoftmaxScope s) { return s == SoftmaxScope::batch ? "batch" : "image"; }
std::string to_string(Rescale r) { return r == Rescale::none ? "none" : "mean_one"; }

namespace {

template <typename E>
E parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, E>> values) {
  if (!j.is_string()) throw ConfigError(std::string(key) + ": expected a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, v] : values)
    if (s == name) return v;
  throw ConfigError(std::string(key) + ": invalid value '" + s + "'");
}

MaskMode parse_mask_mode(const json& j) {
  return parse_enum<MaskMode>(j, "mask_mode", {{"separate", MaskMode::separate}, {"shared_mean", MaskMode::shared_mean}});
}
SoftmaxScope parse_scope(const json& j) {
  return parse_enum<SoftmaxScope>(j, "softmax_scope", {{"batch", SoftmaxScope::batch}, {"image", SoftmaxScope::image}});
}
Rescale parse_rescale(const json& j) {
  return parse_enum<Rescale>(j, "rescale", {{"none", Rescale::none}, {"mean_one", Rescale::mean_one}});
}

json model_json(const ModelConfig& m) {
  return json{{"widths", m.spec.widths},       {"strides", m.spec.strides}, {"kernel", m.spec.kernel},
              {"head_width", m.spec.head_width}, {"lr", m.optim.lr},        {"epochs", m.optim.epochs},
              {"cosine", m.optim.cosine},       {"warmup_epochs", m.optim.warmup_epochs}};
}

void model_from(const json& j, ModelConfig& m, int num_classes) {
  m.spec.widths = j.at("widths").get<std::vector<int>>();
  m.spec.strides = j.at("strides").get<std::vector<int>>();
  m.spec.kernel = j.at("kernel").get<int>();
  m.spec.head_width = j.at("head_width").get<int>();
  m.spec.num_classes = num_classes;
  m.optim.lr = j.at("lr").get<double>();
  m.optim.epochs = j.at("epochs").get<int>();
  m.optim.cosine = j.at("cosine").get<bool>();
  m.optim.warmup_epochs = j.at("warmup_epochs").get<double>();
}

// Recursively overlays `patch` on `base`, rejecting keys absent from base
// and type changes between object/array/scalar.
void merge_strict(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError(path.empty() ? "config root must be an object" : path + ": expected object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      if (slot.is_array() != it.value().is_array()) throw ConfigError(key + ": type mismatch");
      if (slot.is_number() && !it.value().is_number()) throw ConfigError(key + ": expected a number");
      if (slot.is_boolean() && !it.value().is_boolean()) throw ConfigError(key + ": expected a boolean");
      if (slot.is_string() && !it.value().is_string()) throw ConfigError(key + ": expected a string");
      slot = it.value();
    }
  }
}

}  // namespace

DistillConfig::DistillConfig() {
  teacher.spec.widths = {16, 32, 64, 64};
  teacher.spec.strides = {2, 2, 2, 1};
  teacher.spec.head_width = 64;
  teacher.optim = StageOptim{0.01, 12, true};
  student.spec.widths = {8, 16, 32, 32};
  student.spec.strides = {2, 2, 2, 1};
  student.spec.head_width = 32;
  student.optim = StageOptim{0.01, 8, true};
}

json DistillConfig::to_json() const {
  json abl{{"K", ablate.K}, {"mu", ablate.mu}, {"seeds", ablate.seeds}, {"detach_scores", ablate.detach_scores}};
  abl["mask_mode"] = json::array();
  for (auto m : ablate.mask_mode) abl["mask_mode"].push_back(to_string(m));
  abl["softmax_scope"] = json::array();
  for (auto s : ablate.softmax_scope) abl["softmax_scope"].push_back(to_string(s));
  abl["rescale"] = json::array();
  for (auto r : ablate.rescale) abl["rescale"].push_back(to_string(r));

  return json{
      {"seed", seed},
      {"data",
       {{"seed", data_seed},
        {"image_size", scene.image_size},
        {"num_classes", scene.num_classes},
        {"min_instances", scene.min_instances},
        {"max_instances", scene.max_instances},
        {"min_box", scene.min_box},
        {"max_box", scene.max_box},
        {"noise", scene.noise},
        {"max_overlap_iou", scene.max_overlap_iou},
        {"train_scenes", train_scenes},
        {"eval_scenes", eval_scenes}}},
      {"teacher", model_json(teacher)},
      {"student", model_json(student)},
      {"optim",
       {{"batch_size", batch_size}, {"momentum", momentum}, {"weight_decay", weight_decay}, {"grad_clip", grad_clip}}},
      {"selector",
       {{"K", K},
        {"pool_h", pool_h},
        {"pool_w", pool_w},
        {"samples_per_bin", samples_per_bin},
        {"mu", mu},
        {"softmax_scope", to_string(softmax_scope)},
        {"lr", selector_optim.lr},
        {"epochs", selector_optim.epochs},
        {"cosine", selector_optim.cosine}}},
      {"distill",
       {{"lambda", lambda},
        {"warmup_fraction", warmup_fraction},
        {"mask_mode", to_string(mask_mode)},
        {"rescale", to_string(rescale)},
        {"detach_scores", detach_scores},
        {"proj_bias", proj_bias}}},
      {"run",
       {{"eval_every", eval_every},
        {"checkpoint_steps", checkpoint_steps},
        {"score_threshold", decode.score_threshold},
        {"pre_nms_top_k", decode.pre_nms_top_k},
        {"nms_iou", decode.nms_iou},
        {"max_per_image", decode.max_per_image}}},
      {"ablate", abl},
  };
}

DistillConfig config_from_json(const json& patch) {
  const DistillConfig defaults;
  json tree = defaults.to_json();
  merge_strict(tree, patch, "");

  DistillConfig c;
  try {
    c.seed = tree.at("seed").get<std::uint64_t>();
    const auto& d = tree.at("data");
    c.data_seed = d.at("seed").get<std::uint64_t>();
    c.scene.image_size = d.at("image_size").get<int>();
    c.scene.num_classes = d.at("num_classes").get<int>();
    c.scene.min_instances = d.at("min_instances").get<int>();
    c.scene.max_instances = d.at("max_instances").get<int>();
    c.scene.min_box = d.at("min_box").get<double>();
    c.scene.max_box = d.at("max_box").get<double>();
    c.scene.noise = d.at("noise").get<double>();
    c.scene.max_overlap_iou = d.at("max_overlap_iou").get<double>();
    c.train_scenes = d.at("train_scenes").get<int>();
    c.eval_scenes = d.at("eval_scenes").get<int>();

    model_from(tree.at("teacher"), c.teacher, c.scene.num_classes);
    model_from(tree.at("student"), c.student, c.scene.num_classes);

    const auto& o = tree.at("optim");
    c.batch_size = o.at("batch_size").get<int>();
    c.momentum = o.at("momentum").get<double>();
    c.weight_decay = o.at("weight_decay").get<double>();
    c.grad_clip = o.at("grad_clip").get<double>();

    const auto& s = tree.at("selector");
    c.K = s.at("K").get<int>();
    c.pool_h = s.at("pool_h").get<int>();
    c.pool_w = s.at("pool_w").get<int>();
    c.samples_per_bin = s.at("samples_per_bin").get<int>();
    c.mu = s.at("mu").get<double>();
    c.softmax_scope = parse_scope(s.at("softmax_scope"));
    c.selector_optim = StageOptim{s.at("lr").get<double>(), s.at("epochs").get<int>(), s.at("cosine").get<bool>()};

    const auto& k = tree.at("distill");
    c.lambda = k.at("lambda").get<double>();
    c.warmup_fraction = k.at("warmup_fraction").get<double>();
    c.mask_mode = parse_mask_mode(k.at("mask_mode"));
    c.rescale = parse_rescale(k.at("rescale"));
    c.detach_scores = k.at("detach_scores").get<bool>();
    c.proj_bias = k.at("proj_bias").get<bool>();

    const auto& r = tree.at("run");
    c.eval_every = r.at("eval_every").get<int>();
    c.checkpoint_steps = r.at("checkpoint_steps").get<std::vector<int>>();
    c.decode.score_threshold = r.at("score_threshold").get<double>();
    c.decode.pre_nms_top_k = r.at("pre_nms_top_k").get<int>();
    c.decode.nms_iou = r.at("nms_iou").get<double>();
    c.decode.max_per_image = r.at("max_per_image").get<int>();

    const auto& a = tree.at("ablate");
    c.ablate.K = a.at("K").get<std::vector<int>>();
    c.ablate.mu = a.at("mu").get<std::vector<double>>();
    c.ablate.seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
    c.ablate.detach_scores = a.at("detach_scores").get<std::vector<bool>>();
    c.ablate.mask_mode.clear();
    for (const auto& v : a.at("mask_mode")) c.ablate.mask_mode.push_back(parse_mask_mode(v));
    c.ablate.softmax_scope.clear();
    for (const auto& v : a.at("softmax_scope")) c.ablate.softmax_scope.push_back(parse_scope(v));
    c.ablate.rescale.clear();
    for (const auto& v : a.at("rescale")) c.ablate.rescale.push_back(parse_rescale(v));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  c.validate();
  return c;
}

void DistillConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  try {
    scene.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (train_scenes < 1) fail("data.train_scenes must be >= 1");
  if (eval_scenes < 0) fail("data.eval_scenes must be >= 0");
  for (const auto* m : {&teacher, &student}) {
    if (m->spec.widths.empty() || m->spec.widths.size() != m->spec.strides.size())
      fail("model widths/strides must be nonempty and of equal length");
    for (int v : m->spec.widths)
      if (v < 1) fail("model widths must be >= 1");
    for (int v : m->spec.strides)
      if (v < 1) fail("model strides must be >= 1");
    if (m->spec.kernel < 1 || m->spec.kernel % 2 == 0) fail("model kernel must be odd and >= 1");
    if (m->spec.head_width < 1) fail("model head_width must be >= 1");
    if (m->optim.lr <= 0 || m->optim.epochs < 0) fail("model lr must be > 0 and epochs >= 0");
    if (m->optim.warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  }
  if (teacher.spec.neck_stride() != student.spec.neck_stride())
    fail("teacher and student must share the neck stride");
  if (batch_size < 1) fail("optim.batch_size must be >= 1");
  if (momentum < 0 || momentum >= 1) fail("optim.momentum must be in [0, 1)");
  if (weight_decay < 0) fail("optim.weight_decay must be >= 0");
  if (K < 1) fail("selector.K must be >= 1");
  if (pool_h < 1 || pool_w < 1) fail("selector pooled size must be >= 1");
  if (samples_per_bin < 1) fail("selector.samples_per_bin must be >= 1");
  if (mu < 0) fail("selector.mu must be >= 0");
  if (selector_optim.lr <= 0 || selector_optim.epochs < 0) fail("selector lr must be > 0 and epochs >= 0");
  if (lambda < 0) fail("distill.lambda must be >= 0");
  if (warmup_fraction < 0 || warmup_fraction > 1) fail("distill.warmup_fraction must be in [0, 1]");
  if (eval_every < 0) fail("run.eval_every must be >= 0");
  for (int k : ablate.K)
    if (k < 1) fail("ablate.K entries must be >= 1");
  for (double m : ablate.mu)
    if (m < 0) fail("ablate.mu entries must be >= 0");
  if (ablate.seeds.empty()) fail("ablate.seeds must be nonempty");
}

std::string DistillConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DistillTermOptions DistillConfig::term_options(MaskPolicy policy) const {
  DistillTermOptions o;
  o.policy = policy;
  o.scope = softmax_scope;
  o.rescale = rescale;
  o.detach_scores = detach_scores;
  o.pool_h = pool_h;
  o.pool_w = pool_w;
  o.samples_per_bin = samples_per_bin;
  return o;
}

json apply_env_overrides(json tree, const std::vector<std::string>& environment, const std::string& prefix) {
  for (const auto& entry : environment) {
    if (entry.rfind(prefix, 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string path = entry.substr(prefix.size(), eq - prefix.size());
    const std::string raw = entry.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &tree;
    std::size_t start = 0;
    while (true) {
      const auto sep = path.find("__", start);
      const std::string key = path.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      if (key.empty()) throw ConfigError("malformed override variable '" + entry.substr(0, eq) + "'");
      if (sep == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      if (!node->contains(key)) (*node)[key] = json::object();
      node = &(*node)[key];
      if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
      start = sep + 2;
    }
  }
  return tree;
}

std::vector<std::string> process_environment() {
  std::vector<std::string> out;
  for (char** e = environ; e && *e; ++e) out.emplace_back(*e);
  return out;
}

DistillConfig load_config(const std::string& path) {
  json tree = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    try {
      tree = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
  }
  return config_from_json(apply_env_overrides(std::move(tree), process_environment()));
}

}  // namespace liaf

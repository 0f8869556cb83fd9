#pragma once

#include "liaf/distill.hpp"
#include "liaf/nn.hpp"
#include "liaf/toydet.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace liaf {

// Raised for anything wrong with a configuration: parse errors, unknown
// keys, wrong types, values outside their valid range.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MaskMode { separate, shared_mean };

struct StageOptim {
  double lr = 0.01;
  int epochs = 1;
  bool cosine = true;
  double warmup_epochs = 0;  // linear learning-rate ramp
};

struct ModelConfig {
  DetectorSpec spec;
  StageOptim optim;
};

struct AblationGrid {
  std::vector<int> K{1, 2, 6, 12};
  std::vector<double> mu{0.1};
  std::vector<MaskMode> mask_mode{MaskMode::separate};
  std::vector<SoftmaxScope> softmax_scope{SoftmaxScope::batch};
  std::vector<Rescale> rescale{Rescale::none};
  std::vector<bool> detach_scores{true};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct DistillConfig {
  std::uint64_t seed = 0;

  // data
  SceneSpec scene;
  std::uint64_t data_seed = 0;
  int train_scenes = 2000;
  int eval_scenes = 500;

  ModelConfig teacher;
  ModelConfig student;

  // shared optimizer settings
  int batch_size = 8;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;

  // selectors
  int K = 6;
  int pool_h = 7;
  int pool_w = 7;
  int samples_per_bin = 2;
  double mu = 0.1;
  SoftmaxScope softmax_scope = SoftmaxScope::batch;
  StageOptim selector_optim{0.01, 2, false};

  // distillation
  double lambda = 1.0;
  double warmup_fraction = 0.1;
  MaskMode mask_mode = MaskMode::separate;
  Rescale rescale = Rescale::none;
  bool detach_scores = true;
  bool proj_bias = false;

  // bookkeeping
  int eval_every = 1;  // epochs; 0 evaluates only after the last epoch
  std::vector<int> checkpoint_steps;
  DecodeParams decode;

  AblationGrid ablate;

  DistillConfig();

  void validate() const;
  nlohmann::json to_json() const;
  std::string hash() const;
  DistillTermOptions term_options(MaskPolicy policy) const;
};

// Parses a config tree over the defaults. Every key must already exist in
// the default tree; anything else is a ConfigError.
DistillConfig config_from_json(const nlohmann::json& j);
DistillConfig load_config(const std::string& path);

// Applies overrides from environment entries PREFIX<section>__<key>=value
// (e.g. LIAF__distill__lambda=0.5). Values are parsed as JSON when possible.
nlohmann::json apply_env_overrides(nlohmann::json tree, const std::vector<std::string>& environment,
                                   const std::string& prefix = "LIAF__");
std::vector<std::string> process_environment();

std::string to_string(MaskMode m);
std::string to_string(SoftmaxScope s);
std::string to_string(Rescale r);

}  // namespace liaf

#pragma once

// Run configuration: one JSON document with a section per stage, plus shared
// dims and ablation flags that override the per-stage values.

#include "avit/eval_metrics.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace avit::config {

struct ScheduleConfig {
  int T = 100;
  double beta_start = 1e-4;
  double beta_end = 0.1;

  diffusion::NoiseSchedule build() const;
};

struct Dims {
  std::optional<int> d_a, d_c, d_s, l, q_a;
};

struct Flags {
  bool no_diffusion = false;
  bool no_cont_align = false;
  bool no_aug = false;
  bool joint_lm = false;
};

struct RunConfig {
  // Master seed; model initializations are derived from it.
  std::uint64_t seed = 1;
  corpus::CorpusConfig corpus;
  // Existing corpus file; when empty the corpus is generated from `corpus`.
  std::string corpus_path;
  ScheduleConfig schedule;
  motion::MotionPriorConfig motion_prior;
  motion::PriorTrainConfig train_prior;
  avi::AlignConfig align;
  avi::AlignTrainConfig train_align;
  avi::LMConfig lm;
  avi::LMTrainConfig train_lm;
  bridge::BridgeConfig bridge;
  bridge::BridgeTrainConfig train_bridge;
  eval::AblationConfig ablation;
  Dims dims;
  Flags flags;

  /// Pushes dims, flags and the vocabulary size into the stage sections and validates them.
  void resolve(int vocab_size);
  std::uint64_t init_seed(const std::string& module) const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// JSON Schema (draft 2020-12) describing the accepted document.
nlohmann::json run_config_schema();

/// Applies "a.b.c=value" to `j`. The value is parsed as JSON when possible and
/// kept as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads `path` (or starts from defaults when empty), applies overrides, parses strictly.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace avit::config

#pragma once

// Orchestration: checkpoint wiring per module, the animation file format,
// output directories with manifests, the two-stage synthesis path and the CLI.
//
// CLI exit codes: 0 ok, 2 configuration error, 3 data/format error, 4 numeric failure.

#include "avit/checkpoint.hpp"
#include "avit/config.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace avit::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kTagPrior = "motion_prior";
inline constexpr const char* kTagAlign = "avi_align";
inline constexpr const char* kTagLM = "avi_lm";
inline constexpr const char* kTagBridge = "bridge";

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4 };

// ---------------------------------------------------------------- checkpoints

/// The motion prior checkpoint also carries the head template it was trained against.
ckpt::Checkpoint prior_checkpoint(const motion::MotionPrior& prior, const face::HeadTemplate& tmpl);
std::pair<std::unique_ptr<motion::MotionPrior>, face::HeadTemplate> prior_from_checkpoint(const ckpt::Checkpoint& c);

ckpt::Checkpoint align_checkpoint(const avi::AlignModel& align);
std::unique_ptr<avi::AlignModel> align_from_checkpoint(const ckpt::Checkpoint& c);

ckpt::Checkpoint lm_checkpoint(const avi::TinyLM& lm);
std::unique_ptr<avi::TinyLM> lm_from_checkpoint(const ckpt::Checkpoint& c);

ckpt::Checkpoint bridge_checkpoint(const bridge::BridgeModel& model);
std::unique_ptr<bridge::BridgeModel> bridge_from_checkpoint(const ckpt::Checkpoint& c);

nlohmann::json template_to_json(const face::HeadTemplate& tmpl);

/// Everything needed for inference, loaded from an output directory.
struct Models {
  std::unique_ptr<motion::MotionPrior> prior;
  face::HeadTemplate tmpl;
  std::unique_ptr<avi::AlignModel> align;
  std::unique_ptr<avi::TinyLM> lm;
  std::unique_ptr<bridge::BridgeModel> bridge;
  corpus::Vocabulary vocab = corpus::Vocabulary::build();
  std::map<std::string, std::string> hashes;  // module tag -> checkpoint file SHA-256
};

fs::path checkpoint_path(const fs::path& out, const std::string& tag);
Models load_models(const fs::path& out);

// ---------------------------------------------------------------- animation file

struct AnimationFile {
  static constexpr int kFps = face::kFps;
  face::CoeffSequence frames;
  std::string instruction;
  std::string clip_id;
  std::uint64_t seed = 0;
  int sample = 0;  // index among the style draws of one request
  std::map<std::string, std::string> checkpoint_hashes;

  nlohmann::json to_json() const;
  /// Rejects fps other than 25 and frames whose widths differ from `dim_psi`.
  static AnimationFile from_json(const nlohmann::json& j, int dim_psi);
  std::string serialize() const;
};

// ---------------------------------------------------------------- output directory

/// Artifact writer that keeps `manifest.json` (name -> sha256, bytes) in sync.
class OutputDir {
 public:
  explicit OutputDir(fs::path root);
  const fs::path& root() const { return root_; }
  fs::path path(const std::string& name) const { return root_ / name; }

  void write(const std::string& name, const std::string& bytes);
  void write_json(const std::string& name, const nlohmann::json& j);
  const nlohmann::json& manifest() const { return manifest_; }

 private:
  void flush() const;
  fs::path root_;
  nlohmann::json manifest_;
};

/// AVIT_OUT when set, otherwise "avit_out".
fs::path default_output_dir();

// ---------------------------------------------------------------- synthesis

struct SynthResult {
  std::string instruction;
  bool generated = false;  // false when the caller supplied the instruction
  std::vector<Eigen::VectorXd> styles;
  std::vector<AnimationFile> animations;
};

/// Stage 1 (unless `instruction_override`) then stage 2 for n_samples style draws.
SynthResult synth_pipeline(const Models& models, const corpus::CorpusRecord& clip,
                           const std::optional<std::string>& instruction_override, int n_samples,
                           std::uint64_t seed, int template_id = 0);

// ---------------------------------------------------------------- evaluation

/// End-to-end metrics on the test split: style probes, instruction quality,
/// perplexity and lip error with matched and phoneme-shuffled content.
eval::MetricReport evaluate_models(const Models& models, const corpus::Corpus& corpus, std::uint64_t seed);

// ---------------------------------------------------------------- CLI

/// Loads the corpus named by the config, or the one in `out`, or generates it.
corpus::Corpus obtain_corpus(const config::RunConfig& cfg, const fs::path& out);

int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace avit::pipeline

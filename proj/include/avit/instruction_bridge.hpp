#pragma once

// Stage 2b: instruction embeddings aligned into the style space by an MLP,
// a symmetric CLIP-style loss, and a conditional diffusion prior over z.

#include "avit/av_instruction.hpp"
#include "avit/diffusion.hpp"
#include "avit/motion_prior.hpp"

#include <nlohmann/json.hpp>

namespace avit::bridge {

inline constexpr double kDefaultLambda = 30.0;

struct BridgeConfig {
  int embed_dim = 64;  // l
  int style_dim = 16;  // d_s
  int hidden = 128;
  int prior_width = 64;
  int prior_heads = 4;
  int prior_layers = 2;
  int prior_ff = 128;
  // Inference path: return the aligned condition instead of sampling.
  bool no_diffusion = false;

  void validate() const;
  nlohmann::json to_json() const;
  static BridgeConfig from_json(const nlohmann::json& j);
};

class BridgeModel {
 public:
  BridgeModel(const BridgeConfig& config, const diffusion::NoiseSchedule& schedule, std::uint64_t init_seed);

  const BridgeConfig& config() const { return config_; }
  BridgeConfig& mutable_config() { return config_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const Var& logit_scale() const { return logit_scale_; }

  /// Per-dimension statistics of the style targets; the diffusion prior works in normalized units.
  const Eigen::VectorXd& z_mean() const { return z_mean_; }
  const Eigen::VectorXd& z_std() const { return z_std_; }
  void set_z_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& std);
  Mat normalize(const Mat& z) const;
  Mat denormalize(const Mat& z) const;

  /// Instruction embeddings (B x l) -> conditions c (B x d_s).
  Var align(const Var& instr) const;
  Eigen::VectorXd align_i2s(const Eigen::VectorXd& instr) const;

  /// Prediction of the clean (normalized) z from z_t at timestep t, conditioned on c.
  Var denoise(const Mat& z_t, const std::vector<int>& t, const Var& c) const;
  diffusion::Denoiser denoiser() const;

 private:
  BridgeConfig config_;
  diffusion::NoiseSchedule schedule_;
  ParamSet params_;
  nn::Linear mlp0_, mlp1_, mlp2_;
  Var logit_scale_;
  nn::Linear tok_c_, tok_t_, tok_z_, out_;
  Var type_emb_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm ln_;
  Eigen::VectorXd z_mean_, z_std_;
};

/// Symmetric InfoNCE over cosine logits scaled by exp(logit_scale) (capped at 100).
Var contrastive_i2s_from_similarity(const Var& similarity, const Var& logit_scale);
Var contrastive_i2s_loss(const Var& c, const Var& z, const Var& logit_scale);

/// L = L_cont + lambda * L_diff.
double combine_loss(double l_cont, double l_diff, double lambda = kDefaultLambda);
Var combine_loss(const Var& l_cont, const Var& l_diff, double lambda = kDefaultLambda);

struct BridgeTrainConfig {
  int steps = 1500;
  int batch = 64;
  double lr = 1e-3;
  double lambda = kDefaultLambda;
  int texts_per_record = 4;
  int styles_per_record = 4;
  bool no_diffusion = false;   // drop the diffusion term
  bool no_cont_align = false;  // drop the contrastive term
  bool no_aug = false;         // only the record's own instruction text
  double grad_clip = 1.0;
  int val_batch = 128;
  std::uint64_t seed = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static BridgeTrainConfig from_json(const nlohmann::json& j);
};

struct BridgeReport {
  std::vector<double> train_loss;
  double val_diff_initial = 0.0;
  double val_diff_final = 0.0;
  double val_cont_final = 0.0;
};

/// Frozen-encoder targets: instruction embeddings and style targets per training record.
struct BridgeData {
  std::vector<Mat> instr;  // per record: texts_per_record x l
  std::vector<Mat> z;      // per record: styles_per_record x d_s (raw units)
  std::vector<const corpus::CorpusRecord*> records;
};

BridgeData precompute_bridge_data(const std::vector<const corpus::CorpusRecord*>& records,
                                  const motion::MotionPrior& prior, const avi::AlignModel& align,
                                  const corpus::Vocabulary& vocab, int texts_per_record, int styles_per_record,
                                  bool no_aug, std::uint64_t seed);

BridgeReport train_bridge(BridgeModel& model, const corpus::Corpus& corpus, const motion::MotionPrior& prior,
                          const avi::AlignModel& align, const BridgeTrainConfig& cfg,
                          const std::function<void(int, double)>& on_step = {});

/// Style embeddings (raw units) for an instruction; OOD words map to [UNK].
std::vector<Eigen::VectorXd> sample_style(const std::string& text, int n_samples, std::uint64_t seed,
                                          const BridgeModel& model, const avi::AlignModel& align,
                                          const corpus::Vocabulary& vocab);

}  // namespace avit::bridge

#pragma once

// Disentangled motion prior: a local temporal-convolution content encoder,
// an order-invariant style encoder over reference coefficient frames, and a
// transformer generator fusing both into coefficient sequences.

#include "avit/nn.hpp"
#include "avit/synth_corpus.hpp"

#include <nlohmann/json.hpp>

namespace avit::motion {

using ad::Segment;

struct MotionPriorConfig {
  int feature_dim = 32;  // d_a
  int content_dim = 32;  // d_c
  int style_dim = 16;    // d_s
  int dim_psi = 16;
  int kernel = 5;
  int conv_layers = 2;
  int width = 64;
  int heads = 4;
  int ff_hidden = 128;
  int style_layers = 2;
  int generator_layers = 2;
  int num_refs = 32;  // S

  int coeff_dim() const { return face::kPoseDim + dim_psi; }
  void validate() const;
  nlohmann::json to_json() const;
  static MotionPriorConfig from_json(const nlohmann::json& j);
};

class MotionPrior {
 public:
  MotionPrior(const MotionPriorConfig& config, std::uint64_t init_seed);

  const MotionPriorConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Stacked features (sum of lengths x d_a) -> stacked content features.
  Var encode_content(const Var& features, const std::vector<Segment>& segments) const;
  Mat encode_content(const Mat& features) const;

  /// Stacked reference frames -> one style row per segment.
  Var encode_style(const Var& ref_frames, const std::vector<Segment>& segments) const;
  Eigen::VectorXd encode_style(const Mat& ref_frames) const;

  /// Content rows plus one z row per segment -> stacked coefficient rows, pose columns zero.
  Var generate(const Var& content, const std::vector<Segment>& segments, const Var& z) const;
  face::CoeffSequence generate(const Mat& content, const Eigen::VectorXd& z) const;

  /// Content of `features` rendered with style `z`.
  face::CoeffSequence animate(const Mat& features, const Eigen::VectorXd& z) const;

 private:
  MotionPriorConfig config_;
  ParamSet params_;
  std::vector<nn::Linear> conv_;
  nn::Linear style_in_, style_out_;
  std::vector<nn::TransformerLayer> style_layers_;
  nn::LayerNorm style_ln_;
  nn::Linear gen_content_, gen_style_, gen_out_;
  std::vector<nn::TransformerLayer> gen_layers_;
  nn::LayerNorm gen_ln_;
};

/// S reference frames of `coeffs` drawn from frames outside [exclude_begin, exclude_end).
/// Sampled without replacement when enough frames remain, with replacement otherwise.
Mat select_reference_frames(const face::CoeffSequence& coeffs, int count, Rng& rng, int exclude_begin = 0,
                            int exclude_end = 0);

/// Style embedding of a whole clip from a seeded reference draw.
Eigen::VectorXd clip_style(const MotionPrior& model, const face::CoeffSequence& coeffs, std::uint64_t seed);

struct PriorTrainConfig {
  int steps = 1200;
  int batch = 32;
  int window_min = 12;
  int window_max = 32;
  int exclusion = 2;
  double lr = 1e-3;
  double velocity_weight = 0.5;
  double grad_clip = 1.0;
  // Re-synthesize the content stream with a random speaking state so that
  // emotion can only reach the generator through z.
  bool revoice = true;
  int val_windows = 64;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static PriorTrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> train_loss;
  double val_initial = 0.0;
  double val_final = 0.0;
};

/// MSE(x_hat, x) + w * MSE(dx_hat, dx) over a stacked batch (velocity within segments).
Var reconstruction_loss(const Var& pred, const Mat& target, const std::vector<Segment>& segments,
                        double velocity_weight);

struct PriorBatch {
  Mat features;
  Mat targets;
  Mat refs;
  std::vector<Segment> frame_segments;
  std::vector<Segment> ref_segments;
};

/// Random training windows with their reference sets.
PriorBatch sample_prior_batch(const std::vector<const corpus::CorpusRecord*>& records, const corpus::Corpus& corpus,
                              const PriorTrainConfig& cfg, int num_refs, int batch, bool revoice, Rng& rng);

Var prior_batch_loss(const MotionPrior& model, const PriorBatch& b, double velocity_weight);

TrainReport train_prior(MotionPrior& model, const corpus::Corpus& corpus, const PriorTrainConfig& cfg,
                        const std::function<void(int, double)>& on_step = {});

}  // namespace avit::motion

#pragma once

#include "avit/face_model.hpp"
#include "avit/instruction_bridge.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace avit::eval {

using Tokens = std::vector<std::string>;

/// Mean pairwise Euclidean distance.
double diversity(const std::vector<Eigen::VectorXd>& samples);

/// Corpus-level BLEU with uniform weights over orders 1..n, clipped counts and
/// brevity penalty against the closest reference length. `epsilon` > 0 smooths
/// zero n-gram matches.
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references, int n,
                   double epsilon = 0.0);
double bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n, double epsilon = 0.0);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS F-measure with recall weight beta.
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2);

/// Mean over frames of the mean L2 distance between lip-region vertices.
double lip_vertex_error(const face::CoeffSequence& pred, const face::CoeffSequence& gt,
                        const face::HeadTemplate& tmpl);

/// Multinomial logistic regression on standardized inputs.
class LinearProbe {
 public:
  void fit(const Mat& x, const std::vector<int>& labels, int num_classes, std::uint64_t seed, int steps = 400);
  std::vector<int> predict(const Mat& x) const;
  double accuracy(const Mat& x, const std::vector<int>& labels) const;

 private:
  Eigen::RowVectorXd mean_, scale_;
  Mat w_;
  Eigen::RowVectorXd b_;
};

/// Stratified 80/20 split, probe fit on the larger part, accuracy on the held-out part.
double probe_accuracy(const std::vector<Eigen::VectorXd>& embeddings, const std::vector<int>& labels,
                      std::uint64_t seed);

struct MetricReport {
  std::string tag;
  std::map<std::string, double> metrics;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string split;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

nlohmann::json reports_to_json(const std::vector<MetricReport>& reports);

/// Majority viseme of a clip.
int majority_viseme(const std::vector<int>& phonemes);

struct AblationConfig {
  int n_samples = 8;
  int max_clips = 120;
  std::uint64_t seed = 5;
};

struct VariantEval {
  double diversity = 0.0;
  double emotion_probe = 0.0;
  double lip_vertex_error = 0.0;
};

/// Generated-style quality of one bridge on test clips. The emotion probe is
/// fit on real style embeddings of training clips and scored on sampled ones.
VariantEval evaluate_bridge(const bridge::BridgeModel& model, const corpus::Corpus& corpus,
                            const motion::MotionPrior& prior, const avi::AlignModel& align,
                            const face::HeadTemplate& tmpl, const LinearProbe& emotion_probe,
                            const AblationConfig& cfg);

LinearProbe fit_real_style_probe(const corpus::Corpus& corpus, const motion::MotionPrior& prior, std::uint64_t seed);

/// Trains and evaluates the four bridge variants ("full", "no_diffusion",
/// "no_cont_align", "no_aug") from a shared seed. When `full` is given it is
/// used instead of training the full variant.
std::vector<MetricReport> run_ablation_suite(const corpus::Corpus& corpus, const motion::MotionPrior& prior,
                                             const avi::AlignModel& align, const face::HeadTemplate& tmpl,
                                             const bridge::BridgeConfig& bridge_config,
                                             const diffusion::NoiseSchedule& schedule,
                                             const bridge::BridgeTrainConfig& train_config,
                                             const AblationConfig& cfg, const bridge::BridgeModel* full = nullptr,
                                             const std::function<void(const std::string&)>& on_variant = {});

}  // namespace avit::eval

#pragma once

// Stage 1: learnable-query speech compression, contrastive audio/instruction
// alignment, and a tiny causal LM that writes instructions from a projected
// audio prompt.

#include "avit/nn.hpp"
#include "avit/synth_corpus.hpp"

#include <nlohmann/json.hpp>

#include <optional>

namespace avit::avi {

using ad::Segment;
using corpus::Vocabulary;

struct AlignConfig {
  int feature_dim = 32;  // d_a
  int embed_dim = 64;    // l
  int num_queries = 8;   // q_a
  int heads = 4;
  int ff_hidden = 128;
  int qformer_layers = 2;
  int text_layers = 2;
  int max_text_len = 64;
  int vocab_size = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static AlignConfig from_json(const nlohmann::json& j);
};

struct AudioQueryEmbedding {
  Mat queries;             // q_a x l
  Eigen::VectorXd pooled;  // row mean of `queries`
};

class AlignModel {
 public:
  AlignModel(const AlignConfig& config, std::uint64_t init_seed);

  const AlignConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Stacked features -> stacked query outputs (q_a rows per segment).
  Var compress(const Var& features, const std::vector<Segment>& segments) const;
  AudioQueryEmbedding compress_speech(const Mat& features) const;

  /// One [CLS] output row per token sequence (sequences exclude the [CLS] id).
  Var encode_tokens(const std::vector<std::vector<int>>& sequences) const;
  Eigen::VectorXd encode_instruction(const std::string& text, const Vocabulary& vocab, bool allow_unk = false) const;

 private:
  AlignConfig config_;
  ParamSet params_;
  Var queries_;
  nn::Linear feat_in_;
  std::vector<nn::CrossAttentionLayer> qformer_;
  nn::LayerNorm q_ln_;
  Var tok_emb_, pos_emb_;
  std::vector<nn::TransformerLayer> text_layers_;
  nn::LayerNorm text_ln_;
};

/// a . b / (|a| |b|); zero vectors raise NumericError.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Audio-anchored InfoNCE over a precomputed cosine-similarity matrix (rows = audio).
Var contrastive_a2i_from_similarity(const Var& similarity, double temperature, bool symmetric = false);
/// Same loss from raw embeddings; row i of each batch forms the positive pair.
Var contrastive_a2i_loss(const Var& pooled, const Var& instr, double temperature, bool symmetric = false);

struct AlignTrainConfig {
  int steps = 500;
  int batch = 32;
  double lr = 1e-3;
  double temperature = 0.1;
  bool symmetric = false;
  bool augment = true;
  double grad_clip = 1.0;
  std::uint64_t seed = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static AlignTrainConfig from_json(const nlohmann::json& j);
};

struct AlignReport {
  std::vector<double> train_loss;
  double initial_loss = 0.0;  // on a fixed training batch
  double final_loss = 0.0;
  double val_retrieval = 0.0;
};

struct AlignBatch {
  Mat features;
  std::vector<Segment> segments;
  std::vector<std::vector<int>> tokens;
};

AlignBatch make_align_batch(const std::vector<const corpus::CorpusRecord*>& records, const Vocabulary& vocab,
                            bool augment, Rng* rng);
Var align_batch_loss(const AlignModel& model, const AlignBatch& batch, double temperature, bool symmetric);

AlignReport train_align(AlignModel& model, const corpus::Corpus& corpus, const AlignTrainConfig& cfg,
                        const std::function<void(int, double)>& on_step = {});

struct RetrievalResult {
  double semantic = 0.0;  // retrieved instruction parses to the audio's own (emotion, intensity)
  double exact = 0.0;     // retrieved instruction is the paired one
};

/// Audio -> instruction top-1 retrieval within shuffled batches of `batch` records.
RetrievalResult retrieval_accuracy(const AlignModel& model, const std::vector<const corpus::CorpusRecord*>& records,
                                   const Vocabulary& vocab, int batch, std::uint64_t seed);

// ---------------------------------------------------------------- language model

struct LMConfig {
  int vocab_size = 0;
  int model_dim = 64;  // d_lm
  int embed_dim = 64;  // l, input width of the projection
  int num_prefix = 8;  // q_a
  int heads = 4;
  int ff_hidden = 128;
  int layers = 2;
  int max_len = 112;

  void validate() const;
  nlohmann::json to_json() const;
  static LMConfig from_json(const nlohmann::json& j);
};

struct LMSequence {
  Var prefix;               // num_prefix x d_lm rows placed right after [BOS]; may be undefined
  std::vector<int> prompt;  // template tokens
  std::vector<int> target;  // instruction tokens, scored together with the closing [EOS]
};

class TinyLM {
 public:
  TinyLM(const LMConfig& config, std::uint64_t init_seed);

  const LMConfig& config() const { return config_; }
  /// Language-model body (embeddings, transformer, head).
  ParamSet& lm_params() { return lm_; }
  const ParamSet& lm_params() const { return lm_; }
  /// Input projection P from audio query rows into the LM embedding space.
  ParamSet& proj_params() { return proj_; }
  const ParamSet& proj_params() const { return proj_; }

  Var project(const Var& query_rows) const;
  Var token_embeddings(const std::vector<int>& ids) const;

  /// Logits for every position of every sequence, stacked. `targets` receives
  /// the next-token label for scored positions and -1 elsewhere.
  Var logits(const std::vector<LMSequence>& batch, std::vector<int>* targets) const;
  Var loss(const std::vector<LMSequence>& batch) const;

 private:
  LMConfig config_;
  ParamSet lm_, proj_;
  Var tok_emb_, pos_emb_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm ln_;
  nn::Linear head_;
  nn::Linear proj_layer_;
};

struct DecodeOptions {
  enum class Mode { greedy, topk } mode = Mode::greedy;
  int k = 5;
  std::uint64_t seed = 0;
  int max_len = 48;
};

struct GeneratedInstruction {
  std::string text;
  std::vector<int> tokens;
  bool truncated = false;  // no [EOS] before max_len
};

GeneratedInstruction decode(const TinyLM& lm, const Var& prefix, const std::vector<int>& prompt,
                            const Vocabulary& vocab, const DecodeOptions& options);

GeneratedInstruction generate_instruction(const Mat& features, int template_id, const AlignModel& align,
                                          const TinyLM& lm, const Vocabulary& vocab,
                                          const DecodeOptions& options = {});

struct LMTrainConfig {
  int pretrain_steps = 1500;
  int steps = 600;
  int batch = 32;
  double lr = 2e-3;
  double proj_lr = 3e-3;
  // Noise on the synthetic pretraining prefix, relative to its RMS.
  double prefix_noise = 0.3;
  bool joint_lm = false;
  double grad_clip = 1.0;
  std::uint64_t seed = 3;

  void validate() const;
  nlohmann::json to_json() const;
  static LMTrainConfig from_json(const nlohmann::json& j);
};

struct LMReport {
  std::vector<double> pretrain_loss;
  std::vector<double> train_loss;
  double val_perplexity = 0.0;
};

/// Text-only pretraining of the LM body with synthetic prefixes carrying
/// (emotion word, intensity adverb) embeddings.
void pretrain_lm(TinyLM& lm, const corpus::Corpus& corpus, const LMTrainConfig& cfg, LMReport& report,
                 const std::function<void(int, double)>& on_step = {});

/// Stage B: audio queries from the frozen aligner, projected by P into the LM prompt.
void train_projection(TinyLM& lm, const AlignModel& align, const corpus::Corpus& corpus, const LMTrainConfig& cfg,
                      LMReport& report, const std::function<void(int, double)>& on_step = {});

LMReport train_lm(TinyLM& lm, const AlignModel& align, const corpus::Corpus& corpus, const LMTrainConfig& cfg,
                  const std::function<void(const std::string&, int, double)>& on_step = {});

/// exp(mean next-token cross-entropy) over instruction tokens of `records`.
double perplexity(const TinyLM& lm, const AlignModel& align, const std::vector<const corpus::CorpusRecord*>& records,
                  const Vocabulary& vocab, std::uint64_t seed);

}  // namespace avit::avi

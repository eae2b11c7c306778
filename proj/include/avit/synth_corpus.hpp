#pragma once

// Procedural corpus of paired pseudo-audio features, ground-truth expression
// coefficients and instruction text, with every latent factor recorded.

#include "avit/face_model.hpp"
#include "avit/grammar.hpp"
#include "avit/trainkit.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace avit::corpus {

using grammar::Emotion;
using ad::Mat;

inline constexpr int kNumVisemes = 8;
inline constexpr const char* kCorpusSchema = "avit-corpus/1";

// Residual expression channels driven by the viseme track next to jaw_open.
inline constexpr int kLipShapeChannelA = 6;
inline constexpr int kLipShapeChannelB = 7;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kCls = 4;

  /// Special tokens, grammar tokens and prompt-template tokens.
  static Vocabulary build();
  static Vocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::string hash() const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(const std::string& token) const;

  /// Word ids for `text`. Unknown words throw TokenizationError unless allow_unk.
  std::vector<int> encode(std::string_view text, bool allow_unk = false) const;
  std::string decode(const std::vector<int>& ids) const;
  /// Number of UNK ids produced when encoding `text` leniently.
  int count_unknown(std::string_view text) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct SpeakingState {
  Emotion emotion = Emotion::neutral;
  int intensity = 1;
  std::array<double, 4> style_jitter{};
};

struct InstructionSample {
  std::string text;
  std::vector<int> tokens;
};

struct CorpusConfig {
  int n_records = 240;
  std::uint64_t seed = 1;
  // Seed of the fixed phoneme/emotion feature embeddings shared by all corpora.
  std::uint64_t embedding_seed = 7;
  int min_frames = 50;
  int max_frames = 100;
  int feature_dim = 32;
  double feature_noise = 0.1;
  double jitter_std = 0.03;
  double smooth_noise_amplitude = 0.05;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  int template_vertices = 400;
  int dim_beta = 8;
  int dim_psi = 16;
  std::uint64_t template_seed = 11;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

struct CorpusRecord {
  std::string record_id;
  std::string split;  // "train" | "val" | "test"
  std::uint64_t seed = 0;
  SpeakingState state;
  std::vector<int> phonemes;  // viseme ids at 25 FPS
  Mat features;               // T x feature_dim
  face::CoeffSequence coeffs;
  InstructionSample instruction;

  int length() const { return static_cast<int>(phonemes.size()); }
};

/// Fixed feature embeddings: one row per viseme / per emotion.
struct FeatureEmbeddings {
  Mat phoneme;  // 8 x d_a
  Mat emotion;  // 8 x d_a
  static FeatureEmbeddings make(std::uint64_t seed, int dim);
};

/// Per-viseme (jaw_open, lip shape A, lip shape B) targets.
const std::array<std::array<double, 3>, kNumVisemes>& viseme_profiles();

std::vector<int> gen_phoneme_track(Rng& rng, int length);

/// Lip channels: viseme profile smoothed with a [1/4, 1/2, 1/4] kernel.
Mat viseme_channels(const std::vector<int>& phonemes);

/// Pseudo-audio: E_phon(id) + E_emo(e) * intensity/3 + N(0, noise^2).
Mat pseudo_features(const std::vector<int>& phonemes, Emotion e, int intensity, const FeatureEmbeddings& emb,
                    double noise, Rng& rng);

InstructionSample gen_instruction(Emotion e, int intensity, Rng& rng, const Vocabulary& vocab);

/// One record. `state` overrides the sampled speaking state when given.
CorpusRecord gen_record(std::uint64_t seed, const CorpusConfig& config, const FeatureEmbeddings& emb,
                        const Vocabulary& vocab, const SpeakingState* state = nullptr);

struct Corpus {
  CorpusConfig config;
  Vocabulary vocab;
  FeatureEmbeddings embeddings;
  std::vector<CorpusRecord> records;

  std::vector<const CorpusRecord*> split(const std::string& name) const;
  const CorpusRecord* find(const std::string& record_id) const;
};

/// Stratified over the 24 emotion x intensity cells, split per cell.
Corpus gen_corpus(const CorpusConfig& config);

nlohmann::json record_to_json(const CorpusRecord& r);
CorpusRecord record_from_json(const nlohmann::json& j, int dim_psi);

/// JSON-lines text: header line then one record per line.
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(const std::string& text);

void write_corpus(const Corpus& corpus, const std::filesystem::path& corpus_path,
                  const std::filesystem::path& vocab_path);
Corpus read_corpus(const std::filesystem::path& corpus_path);

/// Flat JSON array with explicit shape.
nlohmann::json matrix_to_json(const Mat& m);
Mat matrix_from_json(const nlohmann::json& j);

}  // namespace avit::corpus

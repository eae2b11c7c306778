#include "avit/synth_corpus.hpp"

#include "avit/errors.hpp"
#include "avit/hashing.hpp"
#include "avit/json_util.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace avit::corpus {

using nlohmann::json;

namespace {

double quantize(double x) { return std::round(x * 1e6) / 1e6; }

void quantize(Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = quantize(m.data()[i]);
}

}  // namespace

// ---------------------------------------------------------------- vocabulary

Vocabulary Vocabulary::build() {
  std::set<std::string> words;
  for (const auto& t : grammar::grammar_tokens()) words.insert(t);
  for (const auto& tmpl : grammar::prompt_templates()) {
    for (const auto& t : grammar::tokenize(tmpl)) words.insert(t);
  }
  Vocabulary v;
  v.tokens_ = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[CLS]"};
  v.tokens_.insert(v.tokens_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

Vocabulary Vocabulary::from_json(const json& j) {
  Vocabulary v;
  const auto& map = j.at("token_to_id");
  v.tokens_.resize(map.size());
  for (auto it = map.begin(); it != map.end(); ++it) {
    const int id = it.value().get<int>();
    if (id < 0 || id >= static_cast<int>(map.size())) throw FormatError("vocabulary id out of range");
    v.tokens_[static_cast<std::size_t>(id)] = it.key();
    v.ids_[it.key()] = id;
  }
  return v;
}

json Vocabulary::to_json() const {
  json map = json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) map[tokens_[i]] = static_cast<int>(i);
  return json{{"token_to_id", map}};
}

std::string Vocabulary::hash() const { return sha256_hex(to_json().dump()); }

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text, bool allow_unk) const {
  std::vector<int> out;
  for (const auto& t : grammar::tokenize(text)) {
    auto id = find(t);
    if (!id) {
      if (!allow_unk) throw TokenizationError("out-of-vocabulary token: " + t);
      out.push_back(kUnk);
    } else {
      out.push_back(*id);
    }
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos || id == kCls) continue;
    words.push_back(token(id));
  }
  return grammar::detokenize(words);
}

int Vocabulary::count_unknown(std::string_view text) const {
  int n = 0;
  for (int id : encode(text, true)) n += id == kUnk;
  return n;
}

// ---------------------------------------------------------------- config

void CorpusConfig::validate() const {
  if (n_records < 24) throw ParameterError("n_records must be at least 24");
  if (min_frames < 1 || max_frames < min_frames) throw ParameterError("invalid frame range");
  if (feature_dim < 1) throw ParameterError("feature_dim must be positive");
  if (feature_noise < 0 || jitter_std < 0 || smooth_noise_amplitude < 0) throw ParameterError("negative noise scale");
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0) {
    throw ParameterError("invalid split fractions");
  }
  if (dim_psi < 8) throw ParameterError("dim_psi must be at least 8 (labeled + lip shape channels)");
}

json CorpusConfig::to_json() const {
  return json{{"n_records", n_records},
              {"seed", seed},
              {"embedding_seed", embedding_seed},
              {"min_frames", min_frames},
              {"max_frames", max_frames},
              {"feature_dim", feature_dim},
              {"feature_noise", feature_noise},
              {"jitter_std", jitter_std},
              {"smooth_noise_amplitude", smooth_noise_amplitude},
              {"val_fraction", val_fraction},
              {"test_fraction", test_fraction},
              {"template_vertices", template_vertices},
              {"dim_beta", dim_beta},
              {"dim_psi", dim_psi},
              {"template_seed", template_seed}};
}

CorpusConfig CorpusConfig::from_json(const json& j) {
  CorpusConfig c;
  StrictReader r(j, "corpus");
  r.get("n_records", c.n_records).get("seed", c.seed).get("embedding_seed", c.embedding_seed);
  r.get("min_frames", c.min_frames).get("max_frames", c.max_frames).get("feature_dim", c.feature_dim);
  r.get("feature_noise", c.feature_noise).get("jitter_std", c.jitter_std);
  r.get("smooth_noise_amplitude", c.smooth_noise_amplitude).get("val_fraction", c.val_fraction);
  r.get("test_fraction", c.test_fraction).get("template_vertices", c.template_vertices);
  r.get("dim_beta", c.dim_beta).get("dim_psi", c.dim_psi).get("template_seed", c.template_seed);
  r.finish();
  return c;
}

// ---------------------------------------------------------------- generators

FeatureEmbeddings FeatureEmbeddings::make(std::uint64_t seed, int dim) {
  Rng rng(derive_seed(seed, "feature-embeddings"));
  FeatureEmbeddings e;
  e.phoneme = init::normal(rng, kNumVisemes, dim, 1.0);
  e.emotion = init::normal(rng, grammar::kNumEmotions, dim, 1.0);
  return e;
}

const std::array<std::array<double, 3>, kNumVisemes>& viseme_profiles() {
  static const std::array<std::array<double, 3>, kNumVisemes> p = {{
      {0.0, 0.0, 0.0},     // silence
      {0.9, 0.2, 0.0},     // open vowel
      {0.35, -0.6, 0.3},   // spread vowel
      {0.45, 0.7, -0.2},   // rounded vowel
      {0.0, 0.0, 0.6},     // bilabial closure
      {0.15, -0.2, -0.6},  // labiodental
      {0.3, 0.1, -0.3},    // dental / lateral
      {0.55, -0.1, 0.1},   // velar
  }};
  return p;
}

std::vector<int> gen_phoneme_track(Rng& rng, int length) {
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(length));
  int prev = -1;
  while (static_cast<int>(ids.size()) < length) {
    int v = uniform_int(rng, 0, kNumVisemes - 2);
    if (v >= prev && prev >= 0) ++v;
    const int run = uniform_int(rng, 3, 7);
    for (int i = 0; i < run; ++i) ids.push_back(v);
    prev = v;
  }
  ids.resize(static_cast<std::size_t>(length));
  // A truncated final run shorter than 3 frames is merged into the previous one.
  int tail = 1;
  while (tail < length && ids[static_cast<std::size_t>(length - 1 - tail)] == ids.back()) ++tail;
  if (tail < 3 && tail < length) {
    const int fill = ids[static_cast<std::size_t>(length - 1 - tail)];
    for (int i = 0; i < tail; ++i) ids[static_cast<std::size_t>(length - 1 - i)] = fill;
  }
  return ids;
}

Mat viseme_channels(const std::vector<int>& phonemes) {
  const int n = static_cast<int>(phonemes.size());
  Mat raw(n, 3), out(n, 3);
  for (int t = 0; t < n; ++t) {
    const auto& p = viseme_profiles()[static_cast<std::size_t>(phonemes[static_cast<std::size_t>(t)])];
    raw.row(t) << p[0], p[1], p[2];
  }
  for (int t = 0; t < n; ++t) {
    const int a = std::max(0, t - 1), b = std::min(n - 1, t + 1);
    out.row(t) = 0.25 * raw.row(a) + 0.5 * raw.row(t) + 0.25 * raw.row(b);
  }
  return out;
}

Mat pseudo_features(const std::vector<int>& phonemes, Emotion e, int intensity, const FeatureEmbeddings& emb,
                    double noise, Rng& rng) {
  const int n = static_cast<int>(phonemes.size());
  const Eigen::Index d = emb.phoneme.cols();
  Mat f(n, d);
  const ad::RowVec style = emb.emotion.row(static_cast<int>(e)) * (intensity / 3.0);
  std::normal_distribution<double> eps(0.0, noise);
  for (int t = 0; t < n; ++t) {
    f.row(t) = emb.phoneme.row(phonemes[static_cast<std::size_t>(t)]) + style;
    for (Eigen::Index c = 0; c < d; ++c) f(t, c) += eps(rng);
  }
  quantize(f);
  return f;
}

InstructionSample gen_instruction(Emotion e, int intensity, Rng& rng, const Vocabulary& vocab) {
  InstructionSample s;
  s.text = grammar::generate_text(e, intensity, rng);
  s.tokens = vocab.encode(s.text);
  return s;
}

CorpusRecord gen_record(std::uint64_t seed, const CorpusConfig& config, const FeatureEmbeddings& emb,
                        const Vocabulary& vocab, const SpeakingState* state) {
  config.validate();
  Rng rng(seed);
  CorpusRecord r;
  r.seed = seed;
  const int length = uniform_int(rng, config.min_frames, config.max_frames);
  r.phonemes = gen_phoneme_track(rng, length);

  const int emo = uniform_int(rng, 0, grammar::kNumEmotions - 1);
  const int intensity = uniform_int(rng, 1, 3);
  r.state.emotion = static_cast<Emotion>(emo);
  r.state.intensity = intensity;
  for (auto& j : r.state.style_jitter) j = normal(rng, 0.0, config.jitter_std);
  if (state) {
    r.state.emotion = state->emotion;
    r.state.intensity = state->intensity;
  }
  if (r.state.intensity < 1 || r.state.intensity > 3) throw ParameterError("intensity must be 1, 2 or 3");

  const int dim_psi = config.dim_psi;
  Mat coeffs = Mat::Zero(length, face::kPoseDim + dim_psi);
  const Mat lip = viseme_channels(r.phonemes);
  coeffs.col(face::kPoseDim + face::kJawOpen) = lip.col(0);
  coeffs.col(face::kPoseDim + kLipShapeChannelA) = lip.col(1);
  coeffs.col(face::kPoseDim + kLipShapeChannelB) = lip.col(2);

  const auto& offsets = grammar::emotion_offsets(r.state.emotion);
  for (int c = 1; c <= 5; ++c) {
    double level = offsets[static_cast<std::size_t>(c - 1)] * (r.state.intensity / 3.0);
    if (c <= 4) level += r.state.style_jitter[static_cast<std::size_t>(c - 1)];
    // Three low-frequency sinusoids whose amplitudes sum to at most the cap.
    std::array<double, 9> wave{};
    for (int k = 0; k < 3; ++k) {
      wave[static_cast<std::size_t>(3 * k)] = uniform(rng, 0.0, config.smooth_noise_amplitude / 3.0);
      wave[static_cast<std::size_t>(3 * k + 1)] = uniform(rng, 0.2, 1.5);
      wave[static_cast<std::size_t>(3 * k + 2)] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
    for (int t = 0; t < length; ++t) {
      double v = level;
      for (int k = 0; k < 3; ++k) {
        v += wave[static_cast<std::size_t>(3 * k)] *
             std::sin(2.0 * std::numbers::pi * wave[static_cast<std::size_t>(3 * k + 1)] * t / face::kFps +
                      wave[static_cast<std::size_t>(3 * k + 2)]);
      }
      coeffs(t, face::kPoseDim + c) = v;
    }
  }
  quantize(coeffs);
  r.coeffs = face::CoeffSequence(std::move(coeffs), dim_psi);
  r.features = pseudo_features(r.phonemes, r.state.emotion, r.state.intensity, emb, config.feature_noise, rng);
  r.instruction = gen_instruction(r.state.emotion, r.state.intensity, rng, vocab);
  return r;
}

std::vector<const CorpusRecord*> Corpus::split(const std::string& name) const {
  std::vector<const CorpusRecord*> out;
  for (const auto& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

const CorpusRecord* Corpus::find(const std::string& record_id) const {
  for (const auto& r : records) {
    if (r.record_id == record_id) return &r;
  }
  return nullptr;
}

Corpus gen_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus c;
  c.config = config;
  c.vocab = Vocabulary::build();
  c.embeddings = FeatureEmbeddings::make(config.embedding_seed, config.feature_dim);
  const int cells = grammar::kNumEmotions * grammar::kNumIntensities;
  std::vector<std::vector<int>> by_cell(static_cast<std::size_t>(cells));
  c.records.reserve(static_cast<std::size_t>(config.n_records));
  for (int i = 0; i < config.n_records; ++i) {
    const int cell = i % cells;
    SpeakingState s;
    s.emotion = static_cast<Emotion>(cell / grammar::kNumIntensities);
    s.intensity = cell % grammar::kNumIntensities + 1;
    CorpusRecord r = gen_record(derive_seed(config.seed, "record", static_cast<std::uint64_t>(i)), config,
                                c.embeddings, c.vocab, &s);
    char id[32];
    std::snprintf(id, sizeof(id), "rec_%05d", i);
    r.record_id = id;
    c.records.push_back(std::move(r));
    by_cell[static_cast<std::size_t>(cell)].push_back(i);
  }
  for (int cell = 0; cell < cells; ++cell) {
    auto& members = by_cell[static_cast<std::size_t>(cell)];
    Rng rng(derive_seed(config.seed, "split", static_cast<std::uint64_t>(cell)));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = static_cast<double>(members.size());
    const auto n_test = static_cast<std::size_t>(std::lround(n * config.test_fraction));
    const auto n_val = static_cast<std::size_t>(std::lround(n * config.val_fraction));
    for (std::size_t k = 0; k < members.size(); ++k) {
      auto& r = c.records[static_cast<std::size_t>(members[k])];
      r.split = k < n_test ? "test" : (k < n_test + n_val ? "val" : "train");
    }
  }
  return c;
}

// ---------------------------------------------------------------- serialization

json matrix_to_json(const Mat& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return json{{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

Mat matrix_from_json(const json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size())) {
    throw FormatError("array shape does not match data length");
  }
  Mat m(shape[0], shape[1]);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

json record_to_json(const CorpusRecord& r) {
  return json{{"record_id", r.record_id},
              {"split", r.split},
              {"seed", r.seed},
              {"emotion", std::string(grammar::emotion_name(r.state.emotion))},
              {"intensity", r.state.intensity},
              {"style_jitter", r.state.style_jitter},
              {"phonemes", {{"shape", {r.phonemes.size()}}, {"data", r.phonemes}}},
              {"features", matrix_to_json(r.features)},
              {"coeffs", matrix_to_json(r.coeffs.matrix())},
              {"instruction", {{"text", r.instruction.text}, {"tokens", r.instruction.tokens}}}};
}

CorpusRecord record_from_json(const json& j, int dim_psi) {
  CorpusRecord r;
  try {
    r.record_id = j.at("record_id").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    auto emo = grammar::emotion_from_name(j.at("emotion").get<std::string>());
    if (!emo) throw FormatError("unknown emotion in record " + r.record_id);
    r.state.emotion = *emo;
    r.state.intensity = j.at("intensity").get<int>();
    r.state.style_jitter = j.at("style_jitter").get<std::array<double, 4>>();
    r.phonemes = j.at("phonemes").at("data").get<std::vector<int>>();
    r.features = matrix_from_json(j.at("features"));
    r.coeffs = face::CoeffSequence(matrix_from_json(j.at("coeffs")), dim_psi);
    r.instruction.text = j.at("instruction").at("text").get<std::string>();
    r.instruction.tokens = j.at("instruction").at("tokens").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed corpus record: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("malformed corpus record: ") + e.what());
  }
  if (r.coeffs.length() != r.length() || r.features.rows() != r.length()) {
    throw FormatError("record " + r.record_id + " has inconsistent sequence lengths");
  }
  return r;
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  json header{{"schema", kCorpusSchema},
              {"config", corpus.config.to_json()},
              {"vocab_hash", corpus.vocab.hash()},
              {"n_records", corpus.records.size()}};
  out += header.dump();
  out += '\n';
  for (const auto& r : corpus.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

Corpus parse_corpus(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty corpus file");
  Corpus c;
  std::size_t expected = 0;
  try {
    const json header = json::parse(line);
    if (header.at("schema").get<std::string>() != kCorpusSchema) throw FormatError("unsupported corpus schema");
    c.config = CorpusConfig::from_json(header.at("config"));
    c.vocab = Vocabulary::build();
    if (header.at("vocab_hash").get<std::string>() != c.vocab.hash()) {
      throw FormatError("corpus vocabulary hash does not match this build");
    }
    expected = header.at("n_records").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed corpus header: ") + e.what());
  }
  c.embeddings = FeatureEmbeddings::make(c.config.embedding_seed, c.config.feature_dim);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      c.records.push_back(record_from_json(json::parse(line), c.config.dim_psi));
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("malformed corpus line: ") + e.what());
    }
  }
  if (c.records.size() != expected) throw FormatError("corpus record count does not match header");
  return c;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& corpus_path,
                  const std::filesystem::path& vocab_path) {
  std::ofstream out(corpus_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + corpus_path.string());
  out << serialize_corpus(corpus);
  std::ofstream vout(vocab_path, std::ios::binary);
  if (!vout) throw IoError("cannot write " + vocab_path.string());
  vout << corpus.vocab.to_json().dump(2) << '\n';
  if (!out || !vout) throw IoError("write failed");
}

Corpus read_corpus(const std::filesystem::path& corpus_path) {
  std::ifstream in(corpus_path, std::ios::binary);
  if (!in) throw IoError("cannot read " + corpus_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str());
}

}  // namespace avit::corpus

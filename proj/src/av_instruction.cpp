#include "avit/av_instruction.hpp"

#include "avit/errors.hpp"
#include "avit/json_util.hpp"

#include <cmath>
#include <numeric>

namespace avit::avi {

using nlohmann::json;

namespace {

Mat stack_rows(const std::vector<Mat>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Mat out(rows, parts.empty() ? 0 : parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

void optimizer_step(ParamSet& params, AdamState& opt, double clip) {
  auto grads = collect_grads(params);
  if (clip > 0) clip_grad_norm(grads, clip);
  adam_step(params, grads, opt);
}

}  // namespace

// ---------------------------------------------------------------- configs

void AlignConfig::validate() const {
  AVIT_REQUIRE(feature_dim > 0 && embed_dim > 0 && num_queries > 0, "align dims must be positive");
  AVIT_REQUIRE(heads > 0 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  AVIT_REQUIRE(max_text_len >= 2, "max_text_len too small");
  AVIT_REQUIRE(vocab_size > corpus::Vocabulary::kCls, "vocab_size not set");
}

json AlignConfig::to_json() const {
  return json{{"feature_dim", feature_dim}, {"embed_dim", embed_dim},   {"num_queries", num_queries},
              {"heads", heads},             {"ff_hidden", ff_hidden},   {"qformer_layers", qformer_layers},
              {"text_layers", text_layers}, {"max_text_len", max_text_len}, {"vocab_size", vocab_size}};
}

AlignConfig AlignConfig::from_json(const json& j) {
  AlignConfig c;
  StrictReader r(j, "align");
  r.get("feature_dim", c.feature_dim).get("embed_dim", c.embed_dim).get("num_queries", c.num_queries);
  r.get("heads", c.heads).get("ff_hidden", c.ff_hidden).get("qformer_layers", c.qformer_layers);
  r.get("text_layers", c.text_layers).get("max_text_len", c.max_text_len).get("vocab_size", c.vocab_size);
  r.finish();
  return c;
}

void AlignTrainConfig::validate() const {
  AVIT_REQUIRE(steps >= 0 && batch >= 1, "invalid align step/batch counts");
  AVIT_REQUIRE(lr > 0 && temperature > 0, "lr and temperature must be positive");
}

json AlignTrainConfig::to_json() const {
  return json{{"steps", steps},         {"batch", batch},         {"lr", lr},
              {"temperature", temperature}, {"symmetric", symmetric}, {"augment", augment},
              {"grad_clip", grad_clip}, {"seed", seed}};
}

AlignTrainConfig AlignTrainConfig::from_json(const json& j) {
  AlignTrainConfig c;
  StrictReader r(j, "train_align");
  r.get("steps", c.steps).get("batch", c.batch).get("lr", c.lr).get("temperature", c.temperature);
  r.get("symmetric", c.symmetric).get("augment", c.augment).get("grad_clip", c.grad_clip).get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

void LMConfig::validate() const {
  AVIT_REQUIRE(vocab_size > corpus::Vocabulary::kCls, "vocab_size not set");
  AVIT_REQUIRE(model_dim > 0 && embed_dim > 0 && num_prefix > 0, "LM dims must be positive");
  AVIT_REQUIRE(heads > 0 && model_dim % heads == 0, "model_dim must be divisible by heads");
  AVIT_REQUIRE(max_len > num_prefix + 2, "max_len too small");
}

json LMConfig::to_json() const {
  return json{{"vocab_size", vocab_size}, {"model_dim", model_dim}, {"embed_dim", embed_dim},
              {"num_prefix", num_prefix}, {"heads", heads},         {"ff_hidden", ff_hidden},
              {"layers", layers},         {"max_len", max_len}};
}

LMConfig LMConfig::from_json(const json& j) {
  LMConfig c;
  StrictReader r(j, "lm");
  r.get("vocab_size", c.vocab_size).get("model_dim", c.model_dim).get("embed_dim", c.embed_dim);
  r.get("num_prefix", c.num_prefix).get("heads", c.heads).get("ff_hidden", c.ff_hidden);
  r.get("layers", c.layers).get("max_len", c.max_len);
  r.finish();
  return c;
}

void LMTrainConfig::validate() const {
  AVIT_REQUIRE(pretrain_steps >= 0 && steps >= 0 && batch >= 1, "invalid LM step/batch counts");
  AVIT_REQUIRE(lr > 0 && proj_lr > 0 && prefix_noise >= 0, "invalid LM learning rates");
}

json LMTrainConfig::to_json() const {
  return json{{"pretrain_steps", pretrain_steps}, {"steps", steps},         {"batch", batch},
              {"lr", lr},                         {"proj_lr", proj_lr},     {"prefix_noise", prefix_noise},
              {"joint_lm", joint_lm},             {"grad_clip", grad_clip}, {"seed", seed}};
}

LMTrainConfig LMTrainConfig::from_json(const json& j) {
  LMTrainConfig c;
  StrictReader r(j, "train_lm");
  r.get("pretrain_steps", c.pretrain_steps).get("steps", c.steps).get("batch", c.batch).get("lr", c.lr);
  r.get("proj_lr", c.proj_lr).get("prefix_noise", c.prefix_noise).get("joint_lm", c.joint_lm);
  r.get("grad_clip", c.grad_clip).get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------- align model

AlignModel::AlignModel(const AlignConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const int l = config_.embed_dim;
  queries_ = params_.add("qformer.queries", init::normal(rng, config_.num_queries, l, 0.5));
  feat_in_ = nn::Linear(params_, "qformer.feat_in", config_.feature_dim, l, rng);
  for (int i = 0; i < config_.qformer_layers; ++i) {
    qformer_.emplace_back(params_, "qformer.block" + std::to_string(i), l, config_.heads, config_.ff_hidden, rng);
  }
  q_ln_ = nn::LayerNorm(params_, "qformer.ln", l);
  tok_emb_ = params_.add("text.tok_emb", init::normal(rng, config_.vocab_size, l, 0.5));
  pos_emb_ = params_.add("text.pos_emb", init::normal(rng, config_.max_text_len, l, 0.1));
  for (int i = 0; i < config_.text_layers; ++i) {
    text_layers_.emplace_back(params_, "text.layer" + std::to_string(i), l, config_.heads, config_.ff_hidden, rng);
  }
  text_ln_ = nn::LayerNorm(params_, "text.ln", l);
}

Var AlignModel::compress(const Var& features, const std::vector<Segment>& segments) const {
  if (features.cols() != config_.feature_dim) throw ParameterError("feature width mismatch");
  const int q = config_.num_queries;
  std::vector<int> rep;
  std::vector<Segment> qsegs;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].length < 1) throw ParameterError("empty feature segment");
    for (int i = 0; i < q; ++i) rep.push_back(i);
    qsegs.push_back({static_cast<int>(s) * q, q});
  }
  Var h = ad::gather_rows(queries_, rep);
  Var ctx = feat_in_(features);
  for (const auto& block : qformer_) h = block(h, ctx, qsegs, segments);
  return q_ln_(h);
}

AudioQueryEmbedding AlignModel::compress_speech(const Mat& features) const {
  if (features.rows() < 1) throw ParameterError("empty feature sequence");
  const auto segs = ad::uniform_segments(1, static_cast<int>(features.rows()));
  AudioQueryEmbedding out;
  out.queries = compress(ad::constant(features), segs).value();
  out.pooled = out.queries.colwise().mean().transpose();
  return out;
}

Var AlignModel::encode_tokens(const std::vector<std::vector<int>>& sequences) const {
  std::vector<int> ids, positions, cls_rows;
  std::vector<Segment> segs;
  for (const auto& seq : sequences) {
    const int len = std::min(static_cast<int>(seq.size()), config_.max_text_len - 1) + 1;
    segs.push_back({static_cast<int>(ids.size()), len});
    cls_rows.push_back(static_cast<int>(ids.size()));
    ids.push_back(Vocabulary::kCls);
    positions.push_back(0);
    for (int i = 0; i + 1 < len; ++i) {
      const int id = seq[static_cast<std::size_t>(i)];
      if (id < 0 || id >= config_.vocab_size) throw ParameterError("token id out of range");
      ids.push_back(id);
      positions.push_back(i + 1);
    }
  }
  Var h = ad::add(ad::gather_rows(tok_emb_, ids), ad::gather_rows(pos_emb_, positions));
  for (const auto& layer : text_layers_) h = layer(h, segs, false);
  return ad::gather_rows(text_ln_(h), cls_rows);
}

Eigen::VectorXd AlignModel::encode_instruction(const std::string& text, const Vocabulary& vocab,
                                               bool allow_unk) const {
  return encode_tokens({vocab.encode(text, allow_unk)}).value().row(0).transpose();
}

// ---------------------------------------------------------------- losses

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ParameterError("cosine_similarity: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

Var contrastive_a2i_from_similarity(const Var& similarity, double temperature, bool symmetric) {
  if (similarity.rows() == 0) throw ParameterError("contrastive loss needs at least one pair");
  if (similarity.rows() != similarity.cols()) throw ParameterError("similarity matrix must be square");
  if (!(temperature > 0)) throw ParameterError("temperature must be positive");
  std::vector<int> diag(static_cast<std::size_t>(similarity.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  Var logits = ad::scale(similarity, 1.0 / temperature);
  Var loss = ad::cross_entropy(logits, diag);
  if (symmetric) loss = ad::scale(ad::add(loss, ad::cross_entropy(ad::transpose(logits), diag)), 0.5);
  return loss;
}

Var contrastive_a2i_loss(const Var& pooled, const Var& instr, double temperature, bool symmetric) {
  if (pooled.rows() == 0) throw ParameterError("contrastive loss needs at least one pair");
  if (pooled.rows() != instr.rows() || pooled.cols() != instr.cols()) throw ParameterError("batch shape mismatch");
  Var sim = ad::matmul(ad::row_normalize(pooled), ad::transpose(ad::row_normalize(instr)));
  return contrastive_a2i_from_similarity(sim, temperature, symmetric);
}

// ---------------------------------------------------------------- align training

AlignBatch make_align_batch(const std::vector<const corpus::CorpusRecord*>& records, const Vocabulary& vocab,
                            bool augment, Rng* rng) {
  AlignBatch b;
  std::vector<Mat> feats;
  int offset = 0;
  for (const auto* r : records) {
    feats.push_back(r->features);
    b.segments.push_back({offset, r->length()});
    offset += r->length();
    if (augment && rng) {
      b.tokens.push_back(vocab.encode(grammar::generate_text(r->state.emotion, r->state.intensity, *rng)));
    } else {
      b.tokens.push_back(r->instruction.tokens);
    }
  }
  b.features = stack_rows(feats);
  return b;
}

Var align_batch_loss(const AlignModel& model, const AlignBatch& batch, double temperature, bool symmetric) {
  Var q = model.compress(ad::constant(batch.features), batch.segments);
  const int nq = model.config().num_queries;
  Var pooled = ad::segment_mean(q, ad::uniform_segments(static_cast<int>(batch.segments.size()), nq));
  Var instr = model.encode_tokens(batch.tokens);
  return contrastive_a2i_loss(pooled, instr, temperature, symmetric);
}

namespace {

std::vector<const corpus::CorpusRecord*> draw(const std::vector<const corpus::CorpusRecord*>& pool, int n, Rng& rng) {
  std::vector<const corpus::CorpusRecord*> out;
  const auto perm = permutation(rng, static_cast<int>(pool.size()));
  for (int i = 0; i < n; ++i) out.push_back(pool[static_cast<std::size_t>(perm[static_cast<std::size_t>(i % perm.size())])]);
  return out;
}

}  // namespace

AlignReport train_align(AlignModel& model, const corpus::Corpus& corpus, const AlignTrainConfig& cfg,
                        const std::function<void(int, double)>& on_step) {
  cfg.validate();
  if (corpus.config.feature_dim != model.config().feature_dim) {
    throw FormatError("corpus feature width does not match the aligner");
  }
  if (corpus.vocab.size() != model.config().vocab_size) throw FormatError("vocabulary size mismatch");
  const auto train = corpus.split("train");
  auto val = corpus.split("val");
  if (train.empty()) throw FormatError("corpus has no training records");
  if (val.empty()) val = train;

  Rng fixed_rng(derive_seed(cfg.seed, "align-fixed"));
  const AlignBatch fixed = make_align_batch(draw(train, cfg.batch, fixed_rng), corpus.vocab, false, nullptr);

  AlignReport report;
  report.initial_loss = align_batch_loss(model, fixed, cfg.temperature, cfg.symmetric).item();
  Rng rng(derive_seed(cfg.seed, "align-train"));
  AdamState opt;
  opt.config.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    const AlignBatch b = make_align_batch(draw(train, cfg.batch, rng), corpus.vocab, cfg.augment, &rng);
    model.params().zero_grad();
    Var loss = align_batch_loss(model, b, cfg.temperature, cfg.symmetric);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite align loss at step " + std::to_string(step));
    loss.backward();
    optimizer_step(model.params(), opt, cfg.grad_clip);
    report.train_loss.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  model.params().zero_grad();
  report.final_loss = align_batch_loss(model, fixed, cfg.temperature, cfg.symmetric).item();
  report.val_retrieval = retrieval_accuracy(model, val, corpus.vocab, cfg.batch, cfg.seed).semantic;
  return report;
}

RetrievalResult retrieval_accuracy(const AlignModel& model, const std::vector<const corpus::CorpusRecord*>& records,
                                   const Vocabulary& vocab, int batch, std::uint64_t seed) {
  if (records.empty()) throw ParameterError("no records for retrieval");
  Rng rng(derive_seed(seed, "retrieval"));
  const auto perm = permutation(rng, static_cast<int>(records.size()));
  int semantic = 0, exact = 0, total = 0;
  for (std::size_t start = 0; start < perm.size(); start += static_cast<std::size_t>(batch)) {
    std::vector<const corpus::CorpusRecord*> group;
    for (std::size_t i = start; i < std::min(perm.size(), start + static_cast<std::size_t>(batch)); ++i) {
      group.push_back(records[static_cast<std::size_t>(perm[i])]);
    }
    const AlignBatch b = make_align_batch(group, vocab, false, nullptr);
    const Mat q = model.compress(ad::constant(b.features), b.segments).value();
    const int nq = model.config().num_queries;
    Mat pooled(static_cast<Eigen::Index>(group.size()), q.cols());
    for (std::size_t i = 0; i < group.size(); ++i) {
      pooled.row(static_cast<Eigen::Index>(i)) = q.middleRows(static_cast<Eigen::Index>(i) * nq, nq).colwise().mean();
    }
    const Mat instr = model.encode_tokens(b.tokens).value();
    for (std::size_t i = 0; i < group.size(); ++i) {
      Eigen::Index best = 0;
      double best_s = -2.0;
      for (std::size_t j = 0; j < group.size(); ++j) {
        const double s = cosine_similarity(pooled.row(static_cast<Eigen::Index>(i)).transpose(),
                                           instr.row(static_cast<Eigen::Index>(j)).transpose());
        if (s > best_s) {
          best_s = s;
          best = static_cast<Eigen::Index>(j);
        }
      }
      const auto& got = *group[static_cast<std::size_t>(best)];
      exact += best == static_cast<Eigen::Index>(i);
      semantic += got.state.emotion == group[i]->state.emotion && got.state.intensity == group[i]->state.intensity;
      ++total;
    }
  }
  return {static_cast<double>(semantic) / total, static_cast<double>(exact) / total};
}

// ---------------------------------------------------------------- tiny LM

TinyLM::TinyLM(const LMConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const int d = config_.model_dim;
  tok_emb_ = lm_.add("lm.tok_emb", init::normal(rng, config_.vocab_size, d, 0.3));
  pos_emb_ = lm_.add("lm.pos_emb", init::normal(rng, config_.max_len, d, 0.1));
  for (int i = 0; i < config_.layers; ++i) {
    layers_.emplace_back(lm_, "lm.layer" + std::to_string(i), d, config_.heads, config_.ff_hidden, rng);
  }
  ln_ = nn::LayerNorm(lm_, "lm.ln", d);
  head_ = nn::Linear(lm_, "lm.head", d, config_.vocab_size, rng);
  proj_layer_ = nn::Linear(proj_, "proj", config_.embed_dim, d, rng);
}

Var TinyLM::project(const Var& query_rows) const {
  if (query_rows.cols() != config_.embed_dim) throw ParameterError("projection input width mismatch");
  return proj_layer_(query_rows);
}

Var TinyLM::token_embeddings(const std::vector<int>& ids) const {
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw ParameterError("token id out of range");
  }
  return ad::gather_rows(tok_emb_, ids);
}

Var TinyLM::logits(const std::vector<LMSequence>& batch, std::vector<int>* targets) const {
  std::vector<Var> parts;
  std::vector<int> positions;
  std::vector<Segment> segs;
  if (targets) targets->clear();
  int offset = 0;
  for (const auto& ex : batch) {
    const int np = ex.prefix.defined() ? static_cast<int>(ex.prefix.rows()) : 0;
    if (np > 0 && ex.prefix.cols() != config_.model_dim) throw ParameterError("prefix width mismatch");
    // Input: [BOS] prefix prompt target; the last target token predicts [EOS].
    std::vector<int> head{Vocabulary::kBos};
    std::vector<int> tail = ex.prompt;
    tail.insert(tail.end(), ex.target.begin(), ex.target.end());
    const int len = 1 + np + static_cast<int>(tail.size());
    if (len > config_.max_len) throw ParameterError("sequence longer than the LM context");
    parts.push_back(token_embeddings(head));
    if (np > 0) parts.push_back(ex.prefix);
    if (!tail.empty()) parts.push_back(token_embeddings(tail));
    for (int p = 0; p < len; ++p) positions.push_back(p);
    segs.push_back({offset, len});
    if (targets) {
      std::vector<int> t(static_cast<std::size_t>(len), -1);
      const int first = 1 + np + static_cast<int>(ex.prompt.size()) - 1;  // position predicting target[0]
      for (std::size_t k = 0; k <= ex.target.size(); ++k) {
        t[static_cast<std::size_t>(first) + k] = k < ex.target.size() ? ex.target[k] : Vocabulary::kEos;
      }
      targets->insert(targets->end(), t.begin(), t.end());
    }
    offset += len;
  }
  Var h = ad::add(ad::concat_rows(parts), ad::gather_rows(pos_emb_, positions));
  for (const auto& layer : layers_) h = layer(h, segs, true);
  return head_(ln_(h));
}

Var TinyLM::loss(const std::vector<LMSequence>& batch) const {
  std::vector<int> targets;
  Var lg = logits(batch, &targets);
  return ad::cross_entropy(lg, targets);
}

GeneratedInstruction decode(const TinyLM& lm, const Var& prefix, const std::vector<int>& prompt,
                            const Vocabulary& vocab, const DecodeOptions& options) {
  if (options.max_len < 1) throw ParameterError("max_len must be positive");
  if (options.mode == DecodeOptions::Mode::topk && options.k < 1) throw ParameterError("top-k needs k >= 1");
  Rng rng(options.seed);
  GeneratedInstruction out;
  LMSequence seq{prefix, prompt, {}};
  const int np = prefix.defined() ? static_cast<int>(prefix.rows()) : 0;
  const int budget = lm.config().max_len - 1 - np - static_cast<int>(prompt.size());
  out.truncated = true;
  for (int step = 0; step < std::min(options.max_len, budget); ++step) {
    // The row predicting the next token is the last input row.
    const Mat lg = lm.logits({seq}, nullptr).value();
    const auto row = lg.row(lg.rows() - 1);
    int next = 0;
    if (options.mode == DecodeOptions::Mode::greedy) {
      row.maxCoeff(&next);
    } else {
      std::vector<int> idx(static_cast<std::size_t>(row.size()));
      std::iota(idx.begin(), idx.end(), 0);
      const int k = std::min<int>(options.k, static_cast<int>(idx.size()));
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) { return row(a) > row(b); });
      std::vector<double> w(static_cast<std::size_t>(k));
      for (int i = 0; i < k; ++i) w[static_cast<std::size_t>(i)] = std::exp(row(idx[static_cast<std::size_t>(i)]) - row(idx[0]));
      next = idx[static_cast<std::size_t>(std::discrete_distribution<int>(w.begin(), w.end())(rng))];
    }
    if (next == Vocabulary::kEos) {
      out.truncated = false;
      break;
    }
    seq.target.push_back(next);
  }
  out.tokens = seq.target;
  out.text = vocab.decode(out.tokens);
  return out;
}

GeneratedInstruction generate_instruction(const Mat& features, int template_id, const AlignModel& align,
                                          const TinyLM& lm, const Vocabulary& vocab, const DecodeOptions& options) {
  const auto& templates = grammar::prompt_templates();
  if (template_id < 0 || template_id >= static_cast<int>(templates.size())) {
    throw ParameterError("template id out of range");
  }
  const auto q = align.compress_speech(features);
  Var prefix = lm.project(ad::constant(q.queries));
  return decode(lm, prefix, vocab.encode(templates[static_cast<std::size_t>(template_id)]), vocab, options);
}

namespace {

std::vector<std::vector<int>> template_tokens(const Vocabulary& vocab) {
  std::vector<std::vector<int>> out;
  for (const auto& t : grammar::prompt_templates()) out.push_back(vocab.encode(t));
  return out;
}

// Canonical emotion word and intensity adverb carried by the synthetic pretraining prefix.
std::pair<int, int> prefix_words(const Vocabulary& vocab, grammar::Emotion e, int intensity) {
  static const char* adverbs[3] = {"slightly", "moderately", "strongly"};
  const auto emo = vocab.find(std::string(grammar::emotion_name(e)));
  const auto adv = vocab.find(adverbs[intensity - 1]);
  if (!emo || !adv) throw FormatError("vocabulary lacks prefix words");
  return {*emo, *adv};
}

}  // namespace

void pretrain_lm(TinyLM& lm, const corpus::Corpus& corpus, const LMTrainConfig& cfg, LMReport& report,
                 const std::function<void(int, double)>& on_step) {
  const auto train = corpus.split("train");
  if (train.empty()) throw FormatError("corpus has no training records");
  const auto tmpl = template_tokens(corpus.vocab);
  Rng rng(derive_seed(cfg.seed, "lm-pretrain"));
  AdamState opt;
  opt.config.lr = cfg.lr;
  const int np = lm.config().num_prefix;
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    std::vector<LMSequence> batch;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& r = *train[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(train.size()) - 1))];
      const auto [emo, adv] = prefix_words(corpus.vocab, r.state.emotion, r.state.intensity);
      Var clean = ad::add(lm.token_embeddings(std::vector<int>(static_cast<std::size_t>(np), emo)),
                          lm.token_embeddings(std::vector<int>(static_cast<std::size_t>(np), adv)));
      const double rms = std::sqrt(clean.value().squaredNorm() / static_cast<double>(clean.value().size()));
      Mat noise(clean.rows(), clean.cols());
      for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = normal(rng, 0.0, cfg.prefix_noise * rms);
      LMSequence seq;
      seq.prefix = ad::add(clean, ad::constant(noise));
      seq.prompt = tmpl[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(tmpl.size()) - 1))];
      seq.target = corpus.vocab.encode(grammar::generate_text(r.state.emotion, r.state.intensity, rng));
      batch.push_back(std::move(seq));
    }
    lm.lm_params().zero_grad();
    Var loss = lm.loss(batch);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite LM pretraining loss");
    loss.backward();
    optimizer_step(lm.lm_params(), opt, cfg.grad_clip);
    report.pretrain_loss.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  lm.lm_params().zero_grad();
}

void train_projection(TinyLM& lm, const AlignModel& align, const corpus::Corpus& corpus, const LMTrainConfig& cfg,
                      LMReport& report, const std::function<void(int, double)>& on_step) {
  const auto train = corpus.split("train");
  if (train.empty()) throw FormatError("corpus has no training records");
  const auto tmpl = template_tokens(corpus.vocab);
  // The aligner is frozen, so each record's query rows are computed once.
  std::vector<Mat> queries;
  queries.reserve(train.size());
  for (const auto* r : train) queries.push_back(align.compress_speech(r->features).queries);

  Rng rng(derive_seed(cfg.seed, "lm-project"));
  AdamState proj_opt, lm_opt;
  proj_opt.config.lr = cfg.proj_lr;
  lm_opt.config.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<LMSequence> batch;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(train.size()) - 1));
      const auto& r = *train[idx];
      LMSequence seq;
      seq.prefix = lm.project(ad::constant(queries[idx]));
      seq.prompt = tmpl[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(tmpl.size()) - 1))];
      seq.target = corpus.vocab.encode(grammar::generate_text(r.state.emotion, r.state.intensity, rng));
      batch.push_back(std::move(seq));
    }
    lm.proj_params().zero_grad();
    lm.lm_params().zero_grad();
    Var loss = lm.loss(batch);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite LM loss");
    loss.backward();
    optimizer_step(lm.proj_params(), proj_opt, cfg.grad_clip);
    if (cfg.joint_lm) optimizer_step(lm.lm_params(), lm_opt, cfg.grad_clip);
    report.train_loss.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  lm.proj_params().zero_grad();
  lm.lm_params().zero_grad();
}

LMReport train_lm(TinyLM& lm, const AlignModel& align, const corpus::Corpus& corpus, const LMTrainConfig& cfg,
                  const std::function<void(const std::string&, int, double)>& on_step) {
  cfg.validate();
  if (corpus.vocab.size() != lm.config().vocab_size) throw FormatError("vocabulary size mismatch");
  if (align.config().embed_dim != lm.config().embed_dim || align.config().num_queries != lm.config().num_prefix) {
    throw FormatError("aligner and LM dimensions do not match");
  }
  LMReport report;
  pretrain_lm(lm, corpus, cfg, report, [&](int s, double l) {
    if (on_step) on_step("pretrain", s, l);
  });
  train_projection(lm, align, corpus, cfg, report, [&](int s, double l) {
    if (on_step) on_step("project", s, l);
  });
  auto val = corpus.split("val");
  if (val.empty()) val = corpus.split("train");
  report.val_perplexity = perplexity(lm, align, val, corpus.vocab, cfg.seed);
  return report;
}

double perplexity(const TinyLM& lm, const AlignModel& align, const std::vector<const corpus::CorpusRecord*>& records,
                  const Vocabulary& vocab, std::uint64_t seed) {
  if (records.empty()) throw ParameterError("no records for perplexity");
  const auto tmpl = template_tokens(vocab);
  Rng rng(derive_seed(seed, "perplexity"));
  double total = 0.0;
  long count = 0;
  for (const auto* r : records) {
    LMSequence seq;
    seq.prefix = lm.project(ad::constant(align.compress_speech(r->features).queries));
    seq.prompt = tmpl[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(tmpl.size()) - 1))];
    seq.target = r->instruction.tokens;
    const double ce = lm.loss({seq}).item();
    const long n = static_cast<long>(seq.target.size()) + 1;
    total += ce * static_cast<double>(n);
    count += n;
  }
  return std::exp(total / static_cast<double>(count));
}

}  // namespace avit::avi

#include "avit/motion_prior.hpp"

#include "avit/errors.hpp"
#include "avit/json_util.hpp"

#include <numeric>

namespace avit::motion {

using nlohmann::json;

void MotionPriorConfig::validate() const {
  AVIT_REQUIRE(feature_dim > 0 && content_dim > 0 && style_dim > 0, "motion prior dims must be positive");
  AVIT_REQUIRE(dim_psi >= face::kNumLabeledChannels, "dim_psi too small");
  AVIT_REQUIRE(kernel > 0 && kernel % 2 == 1, "kernel must be odd");
  AVIT_REQUIRE(conv_layers >= 1, "need at least one conv layer");
  AVIT_REQUIRE(width > 0 && heads > 0 && width % heads == 0, "width must be divisible by heads");
  AVIT_REQUIRE(num_refs >= 2, "S must be at least 2");
}

json MotionPriorConfig::to_json() const {
  return json{{"feature_dim", feature_dim}, {"content_dim", content_dim}, {"style_dim", style_dim},
              {"dim_psi", dim_psi},         {"kernel", kernel},           {"conv_layers", conv_layers},
              {"width", width},             {"heads", heads},             {"ff_hidden", ff_hidden},
              {"style_layers", style_layers}, {"generator_layers", generator_layers}, {"num_refs", num_refs}};
}

MotionPriorConfig MotionPriorConfig::from_json(const json& j) {
  MotionPriorConfig c;
  StrictReader r(j, "motion_prior");
  r.get("feature_dim", c.feature_dim).get("content_dim", c.content_dim).get("style_dim", c.style_dim);
  r.get("dim_psi", c.dim_psi).get("kernel", c.kernel).get("conv_layers", c.conv_layers);
  r.get("width", c.width).get("heads", c.heads).get("ff_hidden", c.ff_hidden);
  r.get("style_layers", c.style_layers).get("generator_layers", c.generator_layers).get("num_refs", c.num_refs);
  r.finish();
  c.validate();
  return c;
}

MotionPrior::MotionPrior(const MotionPriorConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  int in = config_.feature_dim;
  for (int i = 0; i < config_.conv_layers; ++i) {
    conv_.emplace_back(params_, "content.conv" + std::to_string(i), in * config_.kernel, config_.content_dim, rng);
    in = config_.content_dim;
  }
  const int cd = config_.coeff_dim();
  style_in_ = nn::Linear(params_, "style.in", cd, config_.width, rng);
  for (int i = 0; i < config_.style_layers; ++i) {
    style_layers_.emplace_back(params_, "style.layer" + std::to_string(i), config_.width, config_.heads,
                               config_.ff_hidden, rng);
  }
  style_ln_ = nn::LayerNorm(params_, "style.ln", config_.width);
  style_out_ = nn::Linear(params_, "style.out", config_.width, config_.style_dim, rng);

  gen_content_ = nn::Linear(params_, "gen.content", config_.content_dim, config_.width, rng);
  gen_style_ = nn::Linear(params_, "gen.style", config_.style_dim, config_.width, rng, false);
  for (int i = 0; i < config_.generator_layers; ++i) {
    gen_layers_.emplace_back(params_, "gen.layer" + std::to_string(i), config_.width, config_.heads,
                             config_.ff_hidden, rng);
  }
  gen_ln_ = nn::LayerNorm(params_, "gen.ln", config_.width);
  gen_out_ = nn::Linear(params_, "gen.out", config_.width, config_.dim_psi, rng);
}

Var MotionPrior::encode_content(const Var& features, const std::vector<Segment>& segments) const {
  if (features.cols() != config_.feature_dim) throw ParameterError("feature width mismatch");
  Var h = features;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    h = conv_[i](ad::unfold1d(h, config_.kernel, segments));
    if (i + 1 < conv_.size()) h = ad::gelu(h);
  }
  return h;
}

Mat MotionPrior::encode_content(const Mat& features) const {
  if (features.rows() < 1) throw ParameterError("empty feature sequence");
  const auto segs = ad::uniform_segments(1, static_cast<int>(features.rows()));
  return encode_content(ad::constant(features), segs).value();
}

Var MotionPrior::encode_style(const Var& ref_frames, const std::vector<Segment>& segments) const {
  if (ref_frames.cols() != config_.coeff_dim()) throw ParameterError("reference frame width mismatch");
  for (const auto& s : segments) {
    if (s.length < 2) throw ParameterError("style encoder needs at least 2 reference frames");
  }
  Var h = style_in_(ref_frames);
  for (const auto& layer : style_layers_) h = layer(h, segments, false);
  h = ad::segment_mean(style_ln_(h), segments);
  return style_out_(h);
}

Eigen::VectorXd MotionPrior::encode_style(const Mat& ref_frames) const {
  if (ref_frames.rows() < 2) throw ParameterError("style encoder needs at least 2 reference frames");
  const auto segs = ad::uniform_segments(1, static_cast<int>(ref_frames.rows()));
  return encode_style(ad::constant(ref_frames), segs).value().row(0).transpose();
}

Var MotionPrior::generate(const Var& content, const std::vector<Segment>& segments, const Var& z) const {
  if (z.rows() != static_cast<Eigen::Index>(segments.size())) throw ParameterError("one z row per segment required");
  std::vector<int> owner(static_cast<std::size_t>(content.rows()), 0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (int t = 0; t < segments[s].length; ++t) {
      owner[static_cast<std::size_t>(segments[s].offset + t)] = static_cast<int>(s);
    }
  }
  Var h = ad::add(gen_content_(content), ad::gather_rows(gen_style_(z), owner));
  for (const auto& layer : gen_layers_) h = layer(h, segments, false);
  Var psi = gen_out_(gen_ln_(h));
  // Pose is neutral by convention in this corpus; the pose columns are held at zero.
  return ad::concat_cols({ad::constant(Mat::Zero(content.rows(), face::kPoseDim)), psi});
}

face::CoeffSequence MotionPrior::generate(const Mat& content, const Eigen::VectorXd& z) const {
  if (z.size() != config_.style_dim) throw ParameterError("style dimension mismatch");
  const auto segs = ad::uniform_segments(1, static_cast<int>(content.rows()));
  Mat zr = z.transpose();
  return face::CoeffSequence(generate(ad::constant(content), segs, ad::constant(zr)).value(), config_.dim_psi);
}

face::CoeffSequence MotionPrior::animate(const Mat& features, const Eigen::VectorXd& z) const {
  return generate(encode_content(features), z);
}

Mat select_reference_frames(const face::CoeffSequence& coeffs, int count, Rng& rng, int exclude_begin,
                            int exclude_end) {
  std::vector<int> pool;
  for (int t = 0; t < coeffs.length(); ++t) {
    if (t < exclude_begin || t >= exclude_end) pool.push_back(t);
  }
  if (pool.empty()) throw ParameterError("no frames left for the reference set");
  std::vector<int> picked;
  if (static_cast<int>(pool.size()) >= count) {
    std::shuffle(pool.begin(), pool.end(), rng);
    picked.assign(pool.begin(), pool.begin() + count);
  } else {
    for (int i = 0; i < count; ++i) picked.push_back(pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))]);
  }
  Mat out(count, coeffs.matrix().cols());
  for (int i = 0; i < count; ++i) out.row(i) = coeffs.matrix().row(picked[static_cast<std::size_t>(i)]);
  return out;
}

Eigen::VectorXd clip_style(const MotionPrior& model, const face::CoeffSequence& coeffs, std::uint64_t seed) {
  Rng rng(seed);
  return model.encode_style(select_reference_frames(coeffs, model.config().num_refs, rng));
}

// ---------------------------------------------------------------- training

void PriorTrainConfig::validate() const {
  AVIT_REQUIRE(steps >= 0 && batch >= 1, "invalid prior step/batch counts");
  AVIT_REQUIRE(window_min >= 2 && window_max >= window_min, "invalid window range");
  AVIT_REQUIRE(exclusion >= 0, "exclusion must be non-negative");
  AVIT_REQUIRE(lr > 0 && velocity_weight >= 0, "invalid learning rate or velocity weight");
  AVIT_REQUIRE(val_windows >= 1, "val_windows must be positive");
}

json PriorTrainConfig::to_json() const {
  return json{{"steps", steps},   {"batch", batch},         {"window_min", window_min},
              {"window_max", window_max}, {"exclusion", exclusion}, {"lr", lr},
              {"velocity_weight", velocity_weight}, {"grad_clip", grad_clip}, {"revoice", revoice},
              {"val_windows", val_windows}, {"seed", seed}};
}

PriorTrainConfig PriorTrainConfig::from_json(const json& j) {
  PriorTrainConfig c;
  StrictReader r(j, "train_prior");
  r.get("steps", c.steps).get("batch", c.batch).get("window_min", c.window_min).get("window_max", c.window_max);
  r.get("exclusion", c.exclusion).get("lr", c.lr).get("velocity_weight", c.velocity_weight);
  r.get("grad_clip", c.grad_clip).get("revoice", c.revoice).get("val_windows", c.val_windows).get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

Var reconstruction_loss(const Var& pred, const Mat& target, const std::vector<Segment>& segments,
                        double velocity_weight) {
  Var loss = ad::mse(pred, ad::constant(target));
  if (velocity_weight == 0.0) return loss;
  std::vector<int> next, prev;
  for (const auto& s : segments) {
    for (int t = 1; t < s.length; ++t) {
      next.push_back(s.offset + t);
      prev.push_back(s.offset + t - 1);
    }
  }
  if (next.empty()) return loss;
  Var dp = ad::sub(ad::gather_rows(pred, next), ad::gather_rows(pred, prev));
  Mat dt(static_cast<Eigen::Index>(next.size()), target.cols());
  for (std::size_t i = 0; i < next.size(); ++i) {
    dt.row(static_cast<Eigen::Index>(i)) = target.row(next[i]) - target.row(prev[i]);
  }
  return ad::add(loss, ad::scale(ad::mse(dp, ad::constant(dt)), velocity_weight));
}

PriorBatch sample_prior_batch(const std::vector<const corpus::CorpusRecord*>& records, const corpus::Corpus& corpus,
                              const PriorTrainConfig& cfg, int num_refs, int batch, bool revoice, Rng& rng) {
  if (records.empty()) throw ParameterError("no records to sample from");
  PriorBatch b;
  std::vector<Mat> feats, targets, refs;
  int offset = 0;
  for (int i = 0; i < batch; ++i) {
    const auto& rec = *records[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(records.size()) - 1))];
    // Leave at least one frame outside the excluded span for the references.
    const int room = rec.length() - 1 - 2 * cfg.exclusion;
    if (room < 2) throw ParameterError("record " + rec.record_id + " is too short for the training window");
    const int len = std::min(room, uniform_int(rng, cfg.window_min, cfg.window_max));
    const int start = uniform_int(rng, 0, rec.length() - len);
    Mat f;
    if (revoice) {
      const auto emo = static_cast<grammar::Emotion>(uniform_int(rng, 0, grammar::kNumEmotions - 1));
      const int intensity = uniform_int(rng, 1, 3);
      std::vector<int> ph(rec.phonemes.begin() + start, rec.phonemes.begin() + start + len);
      f = corpus::pseudo_features(ph, emo, intensity, corpus.embeddings, corpus.config.feature_noise, rng);
    } else {
      f = rec.features.middleRows(start, len);
    }
    feats.push_back(std::move(f));
    targets.push_back(rec.coeffs.matrix().middleRows(start, len));
    refs.push_back(select_reference_frames(rec.coeffs, num_refs, rng, start - cfg.exclusion,
                                           start + len + cfg.exclusion));
    b.frame_segments.push_back({offset, len});
    b.ref_segments.push_back({i * num_refs, num_refs});
    offset += len;
  }
  auto stack = [](const std::vector<Mat>& parts, Eigen::Index rows) {
    Mat out(rows, parts.front().cols());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      out.middleRows(r, p.rows()) = p;
      r += p.rows();
    }
    return out;
  };
  b.features = stack(feats, offset);
  b.targets = stack(targets, offset);
  b.refs = stack(refs, static_cast<Eigen::Index>(batch) * num_refs);
  return b;
}

Var prior_batch_loss(const MotionPrior& model, const PriorBatch& b, double velocity_weight) {
  Var content = model.encode_content(ad::constant(b.features), b.frame_segments);
  Var z = model.encode_style(ad::constant(b.refs), b.ref_segments);
  Var pred = model.generate(content, b.frame_segments, z);
  return reconstruction_loss(pred, b.targets, b.frame_segments, velocity_weight);
}

TrainReport train_prior(MotionPrior& model, const corpus::Corpus& corpus, const PriorTrainConfig& cfg,
                        const std::function<void(int, double)>& on_step) {
  cfg.validate();
  if (corpus.config.feature_dim != model.config().feature_dim || corpus.config.dim_psi != model.config().dim_psi) {
    throw FormatError("corpus dimensions do not match the motion prior configuration");
  }
  const auto train = corpus.split("train");
  auto val = corpus.split("val");
  if (train.empty()) throw FormatError("corpus has no training records");
  if (val.empty()) val = train;

  // Fixed validation windows, no re-voicing, so initial and final losses are comparable.
  Rng val_rng(derive_seed(cfg.seed, "prior-val"));
  const PriorBatch val_batch =
      sample_prior_batch(val, corpus, cfg, model.config().num_refs, cfg.val_windows, false, val_rng);

  TrainReport report;
  report.val_initial = prior_batch_loss(model, val_batch, cfg.velocity_weight).item();
  if (!std::isfinite(report.val_initial)) throw NumericError("non-finite initial validation loss");

  Rng rng(derive_seed(cfg.seed, "prior-train"));
  AdamState opt;
  opt.config.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    const PriorBatch b = sample_prior_batch(train, corpus, cfg, model.config().num_refs, cfg.batch, cfg.revoice, rng);
    model.params().zero_grad();
    Var loss = prior_batch_loss(model, b, cfg.velocity_weight);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss at step " + std::to_string(step));
    loss.backward();
    auto grads = collect_grads(model.params());
    if (cfg.grad_clip > 0) clip_grad_norm(grads, cfg.grad_clip);
    adam_step(model.params(), grads, opt);
    report.train_loss.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  model.params().zero_grad();
  report.val_final = prior_batch_loss(model, val_batch, cfg.velocity_weight).item();
  return report;
}

}  // namespace avit::motion

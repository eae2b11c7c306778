#include "avit/instruction_bridge.hpp"

#include "avit/errors.hpp"
#include "avit/json_util.hpp"

#include <cmath>
#include <numeric>

namespace avit::bridge {

using nlohmann::json;

void BridgeConfig::validate() const {
  AVIT_REQUIRE(embed_dim > 0 && style_dim > 0 && hidden > 0, "bridge dims must be positive");
  AVIT_REQUIRE(prior_width > 0 && prior_heads > 0 && prior_width % prior_heads == 0,
               "prior width must be divisible by heads");
  AVIT_REQUIRE(prior_layers >= 1, "prior needs at least one layer");
}

json BridgeConfig::to_json() const {
  return json{{"embed_dim", embed_dim},       {"style_dim", style_dim},     {"hidden", hidden},
              {"prior_width", prior_width},   {"prior_heads", prior_heads}, {"prior_layers", prior_layers},
              {"prior_ff", prior_ff},         {"no_diffusion", no_diffusion}};
}

BridgeConfig BridgeConfig::from_json(const json& j) {
  BridgeConfig c;
  StrictReader r(j, "bridge");
  r.get("embed_dim", c.embed_dim).get("style_dim", c.style_dim).get("hidden", c.hidden);
  r.get("prior_width", c.prior_width).get("prior_heads", c.prior_heads).get("prior_layers", c.prior_layers);
  r.get("prior_ff", c.prior_ff).get("no_diffusion", c.no_diffusion);
  r.finish();
  c.validate();
  return c;
}

void BridgeTrainConfig::validate() const {
  AVIT_REQUIRE(steps >= 0 && batch >= 2, "bridge batch must hold at least 2 pairs");
  AVIT_REQUIRE(lr > 0 && lambda >= 0, "invalid bridge lr or lambda");
  AVIT_REQUIRE(texts_per_record >= 1 && styles_per_record >= 1, "need at least one text and style per record");
  AVIT_REQUIRE(!(no_diffusion && no_cont_align), "at least one bridge loss term must remain");
  AVIT_REQUIRE(val_batch >= 2, "val_batch must be at least 2");
}

json BridgeTrainConfig::to_json() const {
  return json{{"steps", steps},
              {"batch", batch},
              {"lr", lr},
              {"lambda", lambda},
              {"texts_per_record", texts_per_record},
              {"styles_per_record", styles_per_record},
              {"no_diffusion", no_diffusion},
              {"no_cont_align", no_cont_align},
              {"no_aug", no_aug},
              {"grad_clip", grad_clip},
              {"val_batch", val_batch},
              {"seed", seed}};
}

BridgeTrainConfig BridgeTrainConfig::from_json(const json& j) {
  BridgeTrainConfig c;
  StrictReader r(j, "train_bridge");
  r.get("steps", c.steps).get("batch", c.batch).get("lr", c.lr).get("lambda", c.lambda);
  r.get("texts_per_record", c.texts_per_record).get("styles_per_record", c.styles_per_record);
  r.get("no_diffusion", c.no_diffusion).get("no_cont_align", c.no_cont_align).get("no_aug", c.no_aug);
  r.get("grad_clip", c.grad_clip).get("val_batch", c.val_batch).get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------- model

BridgeModel::BridgeModel(const BridgeConfig& config, const diffusion::NoiseSchedule& schedule,
                         std::uint64_t init_seed)
    : config_(config), schedule_(schedule) {
  config_.validate();
  Rng rng(init_seed);
  mlp0_ = nn::Linear(params_, "mlp.0", config_.embed_dim, config_.hidden, rng);
  mlp1_ = nn::Linear(params_, "mlp.1", config_.hidden, config_.hidden, rng);
  mlp2_ = nn::Linear(params_, "mlp.2", config_.hidden, config_.style_dim, rng);
  logit_scale_ = params_.add("logit_scale", Mat::Constant(1, 1, std::log(1.0 / 0.07)));
  const int w = config_.prior_width;
  tok_c_ = nn::Linear(params_, "prior.tok_c", config_.style_dim, w, rng);
  tok_t_ = nn::Linear(params_, "prior.tok_t", w, w, rng);
  tok_z_ = nn::Linear(params_, "prior.tok_z", config_.style_dim, w, rng);
  type_emb_ = params_.add("prior.type_emb", init::normal(rng, 3, w, 0.1));
  for (int i = 0; i < config_.prior_layers; ++i) {
    layers_.emplace_back(params_, "prior.layer" + std::to_string(i), w, config_.prior_heads, config_.prior_ff, rng);
  }
  ln_ = nn::LayerNorm(params_, "prior.ln", w);
  out_ = nn::Linear(params_, "prior.out", w, config_.style_dim, rng);
  z_mean_ = Eigen::VectorXd::Zero(config_.style_dim);
  z_std_ = Eigen::VectorXd::Ones(config_.style_dim);
}

void BridgeModel::set_z_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& std) {
  if (mean.size() != config_.style_dim || std.size() != config_.style_dim) throw ParameterError("z stats size");
  if ((std.array() <= 0).any()) throw ParameterError("z std must be positive");
  z_mean_ = mean;
  z_std_ = std;
}

Mat BridgeModel::normalize(const Mat& z) const {
  Mat out = z;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r) = (z.row(r) - z_mean_.transpose()).cwiseQuotient(z_std_.transpose());
  }
  return out;
}

Mat BridgeModel::denormalize(const Mat& z) const {
  Mat out = z;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r) = z.row(r).cwiseProduct(z_std_.transpose()) + z_mean_.transpose();
  }
  return out;
}

Var BridgeModel::align(const Var& instr) const {
  if (instr.cols() != config_.embed_dim) throw ParameterError("instruction embedding width mismatch");
  return mlp2_(ad::gelu(mlp1_(ad::gelu(mlp0_(instr)))));
}

Eigen::VectorXd BridgeModel::align_i2s(const Eigen::VectorXd& instr) const {
  Mat row = instr.transpose();
  return align(ad::constant(row)).value().row(0).transpose();
}

Var BridgeModel::denoise(const Mat& z_t, const std::vector<int>& t, const Var& c) const {
  const auto b = z_t.rows();
  if (c.rows() != b || static_cast<Eigen::Index>(t.size()) != b) throw ParameterError("denoiser batch mismatch");
  if (z_t.cols() != config_.style_dim) throw ParameterError("z width mismatch");
  const int n = static_cast<int>(b);
  Var tc = tok_c_(c);
  Var tt = tok_t_(ad::constant(nn::sinusoidal_embedding(t, config_.prior_width)));
  Var tz = tok_z_(ad::constant(z_t));
  // Interleave into per-item sequences [c, t, z_t].
  std::vector<int> order, types;
  for (int i = 0; i < n; ++i) {
    order.insert(order.end(), {i, n + i, 2 * n + i});
    types.insert(types.end(), {0, 1, 2});
  }
  Var h = ad::add(ad::gather_rows(ad::concat_rows({tc, tt, tz}), order), ad::gather_rows(type_emb_, types));
  const auto segs = ad::uniform_segments(n, 3);
  for (const auto& layer : layers_) h = layer(h, segs, true);
  std::vector<int> last(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) last[static_cast<std::size_t>(i)] = 3 * i + 2;
  return out_(ln_(ad::gather_rows(h, last)));
}

diffusion::Denoiser BridgeModel::denoiser() const {
  return [this](const Mat& z_t, const std::vector<int>& t, const Mat& cond) {
    return denoise(z_t, t, ad::constant(cond)).value();
  };
}

// ---------------------------------------------------------------- losses

Var contrastive_i2s_from_similarity(const Var& similarity, const Var& logit_scale) {
  if (similarity.rows() < 2) throw ParameterError("contrastive i2s loss needs a batch of at least 2");
  if (similarity.rows() != similarity.cols()) throw ParameterError("similarity matrix must be square");
  std::vector<int> diag(static_cast<std::size_t>(similarity.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  Var logits = ad::scale_by(similarity, ad::exp_clamped(logit_scale, 100.0));
  return ad::scale(ad::add(ad::cross_entropy(logits, diag), ad::cross_entropy(ad::transpose(logits), diag)), 0.5);
}

Var contrastive_i2s_loss(const Var& c, const Var& z, const Var& logit_scale) {
  if (c.rows() < 2) throw ParameterError("contrastive i2s loss needs a batch of at least 2");
  if (c.rows() != z.rows() || c.cols() != z.cols()) throw ParameterError("batch shape mismatch");
  Var sim = ad::matmul(ad::row_normalize(c), ad::transpose(ad::row_normalize(z)));
  return contrastive_i2s_from_similarity(sim, logit_scale);
}

double combine_loss(double l_cont, double l_diff, double lambda) { return l_cont + lambda * l_diff; }

Var combine_loss(const Var& l_cont, const Var& l_diff, double lambda) {
  return ad::add(l_cont, ad::scale(l_diff, lambda));
}

// ---------------------------------------------------------------- training

BridgeData precompute_bridge_data(const std::vector<const corpus::CorpusRecord*>& records,
                                  const motion::MotionPrior& prior, const avi::AlignModel& align,
                                  const corpus::Vocabulary& vocab, int texts_per_record, int styles_per_record,
                                  bool no_aug, std::uint64_t seed) {
  BridgeData d;
  d.records = records;
  const int n_text = no_aug ? 1 : texts_per_record;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = *records[i];
    Rng rng(derive_seed(seed, "bridge-text", i));
    std::vector<std::vector<int>> toks;
    for (int k = 0; k < n_text; ++k) {
      toks.push_back(no_aug ? r.instruction.tokens
                            : vocab.encode(grammar::generate_text(r.state.emotion, r.state.intensity, rng)));
    }
    d.instr.push_back(align.encode_tokens(toks).value());
    Mat z(styles_per_record, prior.config().style_dim);
    for (int m = 0; m < styles_per_record; ++m) {
      z.row(m) = motion::clip_style(prior, r.coeffs, derive_seed(seed, "bridge-style", i * 1000 + static_cast<std::size_t>(m))).transpose();
    }
    d.z.push_back(std::move(z));
  }
  return d;
}

namespace {

struct PairBatch {
  Mat instr;
  Mat z;  // normalized
};

PairBatch draw_pairs(const BridgeData& d, const BridgeModel& model, int n, Rng& rng) {
  PairBatch b{Mat(n, d.instr.front().cols()), Mat(n, d.z.front().cols())};
  for (int i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(d.records.size()) - 1));
    b.instr.row(i) = d.instr[r].row(uniform_int(rng, 0, static_cast<int>(d.instr[r].rows()) - 1));
    b.z.row(i) = d.z[r].row(uniform_int(rng, 0, static_cast<int>(d.z[r].rows()) - 1));
  }
  b.z = model.normalize(b.z);
  return b;
}

}  // namespace

BridgeReport train_bridge(BridgeModel& model, const corpus::Corpus& corpus, const motion::MotionPrior& prior,
                          const avi::AlignModel& align, const BridgeTrainConfig& cfg,
                          const std::function<void(int, double)>& on_step) {
  cfg.validate();
  if (prior.config().style_dim != model.config().style_dim) {
    throw FormatError("motion prior style dimension does not match the bridge");
  }
  if (align.config().embed_dim != model.config().embed_dim) {
    throw FormatError("instruction embedding width does not match the bridge");
  }
  const auto train = corpus.split("train");
  auto val = corpus.split("val");
  if (train.empty()) throw FormatError("corpus has no training records");
  if (val.empty()) val = train;

  const BridgeData data = precompute_bridge_data(train, prior, align, corpus.vocab, cfg.texts_per_record,
                                                 cfg.styles_per_record, cfg.no_aug, cfg.seed);
  const BridgeData val_data = precompute_bridge_data(val, prior, align, corpus.vocab, 1, 1, true,
                                                     derive_seed(cfg.seed, "bridge-val"));
  {
    Eigen::Index rows = 0;
    for (const auto& z : data.z) rows += z.rows();
    Mat all(rows, model.config().style_dim);
    Eigen::Index r = 0;
    for (const auto& z : data.z) {
      all.middleRows(r, z.rows()) = z;
      r += z.rows();
    }
    const Eigen::VectorXd mean = all.colwise().mean().transpose();
    Eigen::VectorXd sd = ((all.rowwise() - mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
    sd = sd.cwiseMax(1e-6);
    model.set_z_stats(mean, sd);
  }
  model.mutable_config().no_diffusion = cfg.no_diffusion;

  Rng val_rng(derive_seed(cfg.seed, "bridge-val-batch"));
  const PairBatch vb = draw_pairs(val_data, model, cfg.val_batch, val_rng);
  const auto val_noise = diffusion::noise_batch(vb.z, val_rng, model.schedule());
  const diffusion::VarDenoiser var_denoiser = [&model](const Mat& z_t, const std::vector<int>& t, const Var& c) {
    return model.denoise(z_t, t, c);
  };
  auto val_diff = [&] {
    return diffusion::diffusion_loss(var_denoiser, val_noise, vb.z, model.align(ad::constant(vb.instr))).item();
  };

  BridgeReport report;
  report.val_diff_initial = val_diff();
  Rng rng(derive_seed(cfg.seed, "bridge-train"));
  AdamState opt;
  opt.config.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    const PairBatch b = draw_pairs(data, model, cfg.batch, rng);
    model.params().zero_grad();
    Var c = model.align(ad::constant(b.instr));
    Var loss;
    if (!cfg.no_cont_align) loss = contrastive_i2s_loss(c, ad::constant(b.z), model.logit_scale());
    if (!cfg.no_diffusion) {
      Var diff = diffusion::diffusion_loss(var_denoiser, b.z, c, rng, model.schedule());
      loss = loss.defined() ? combine_loss(loss, diff, cfg.lambda) : ad::scale(diff, cfg.lambda);
    }
    if (!std::isfinite(loss.item())) throw NumericError("non-finite bridge loss at step " + std::to_string(step));
    loss.backward();
    auto grads = collect_grads(model.params());
    if (cfg.grad_clip > 0) clip_grad_norm(grads, cfg.grad_clip);
    adam_step(model.params(), grads, opt);
    report.train_loss.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  model.params().zero_grad();
  report.val_diff_final = val_diff();
  report.val_cont_final =
      contrastive_i2s_loss(model.align(ad::constant(vb.instr)), ad::constant(vb.z), model.logit_scale()).item();
  return report;
}

std::vector<Eigen::VectorXd> sample_style(const std::string& text, int n_samples, std::uint64_t seed,
                                          const BridgeModel& model, const avi::AlignModel& align,
                                          const corpus::Vocabulary& vocab) {
  if (n_samples < 1) throw ParameterError("n_samples must be at least 1");
  const Eigen::VectorXd c = model.align_i2s(align.encode_instruction(text, vocab, true));
  Mat cond(n_samples, c.size());
  for (int i = 0; i < n_samples; ++i) cond.row(i) = c.transpose();
  Mat z;
  if (model.config().no_diffusion) {
    z = model.denormalize(cond);
  } else {
    std::vector<Rng> rngs;
    for (int i = 0; i < n_samples; ++i) rngs.emplace_back(derive_seed(seed, "style-sample", static_cast<std::uint64_t>(i)));
    z = model.denormalize(diffusion::sample(model.denoiser(), cond, model.config().style_dim, model.schedule(), rngs));
  }
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < n_samples; ++i) out.push_back(z.row(i).transpose());
  return out;
}

}  // namespace avit::bridge

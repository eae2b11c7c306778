#include "avit/pipeline.hpp"

#include "avit/errors.hpp"
#include "avit/hashing.hpp"
#include "avit/json_util.hpp"
#include "avit/service.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace avit::pipeline {

using nlohmann::json;

namespace {

Mat vector_row(const Eigen::VectorXd& v) { return v.transpose(); }

Eigen::VectorXd row_vector(const ckpt::Checkpoint& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end() || it->second.rows() != 1) throw FormatError("checkpoint lacks row tensor '" + name + "'");
  return it->second.row(0).transpose();
}

const Mat& tensor(const ckpt::Checkpoint& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
  return it->second;
}

template <class T>
T parse_config(const json& j, const char* key, T (*parse)(const json&)) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("checkpoint config lacks '") + key + "'");
  try {
    return parse(j.at(key));
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------- checkpoints

json template_to_json(const face::HeadTemplate& tmpl) {
  json regions = json::object();
  for (const auto& [name, idx] : tmpl.region_map) regions[name] = idx;
  json semantics = json::object();
  for (const auto& [ch, name] : tmpl.blendshape_semantics) semantics[std::to_string(ch)] = name;
  return json{{"n_vertices", tmpl.n_vertices()},
              {"dim_beta", tmpl.dim_beta()},
              {"dim_psi", tmpl.dim_psi()},
              {"regions", regions},
              {"blendshape_semantics", semantics},
              {"jaw_pivot", {tmpl.jaw_pivot.x(), tmpl.jaw_pivot.y(), tmpl.jaw_pivot.z()}}};
}

ckpt::Checkpoint prior_checkpoint(const motion::MotionPrior& prior, const face::HeadTemplate& tmpl) {
  ckpt::Checkpoint c;
  c.tag = kTagPrior;
  c.config = json{{"model", prior.config().to_json()}, {"template", template_to_json(tmpl)}};
  ckpt::put_params(c, prior.params());
  Mat faces(static_cast<Eigen::Index>(tmpl.faces.size()), 3);
  for (std::size_t f = 0; f < tmpl.faces.size(); ++f) {
    for (int k = 0; k < 3; ++k) faces(static_cast<Eigen::Index>(f), k) = tmpl.faces[f][static_cast<std::size_t>(k)];
  }
  c.tensors["template.base_vertices"] = tmpl.base_vertices;
  c.tensors["template.faces"] = faces;
  c.tensors["template.id_basis"] = tmpl.id_basis;
  c.tensors["template.exp_basis"] = tmpl.exp_basis;
  return c;
}

std::pair<std::unique_ptr<motion::MotionPrior>, face::HeadTemplate> prior_from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != kTagPrior) throw FormatError("expected a motion_prior checkpoint, got '" + c.tag + "'");
  auto cfg = parse_config(c.config, "model", &motion::MotionPriorConfig::from_json);
  auto prior = std::make_unique<motion::MotionPrior>(cfg, 0);
  ckpt::get_params(c, prior->params());

  face::HeadTemplate t;
  try {
    const json& tj = c.config.at("template");
    t.base_vertices = tensor(c, "template.base_vertices");
    t.id_basis = tensor(c, "template.id_basis");
    t.exp_basis = tensor(c, "template.exp_basis");
    const Mat& faces = tensor(c, "template.faces");
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
      face::Face tri{};
      for (int k = 0; k < 3; ++k) tri[static_cast<std::size_t>(k)] = static_cast<int>(faces(f, k));
      t.faces.push_back(tri);
    }
    for (auto it = tj.at("regions").begin(); it != tj.at("regions").end(); ++it) {
      t.region_map[it.key()] = it.value().get<std::vector<int>>();
    }
    for (auto it = tj.at("blendshape_semantics").begin(); it != tj.at("blendshape_semantics").end(); ++it) {
      t.blendshape_semantics[std::stoi(it.key())] = it.value().get<std::string>();
    }
    const auto pivot = tj.at("jaw_pivot").get<std::vector<double>>();
    if (pivot.size() != 3) throw FormatError("jaw_pivot must have 3 entries");
    t.jaw_pivot = Eigen::Vector3d(pivot[0], pivot[1], pivot[2]);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint template: ") + e.what());
  }
  const int nv = t.n_vertices();
  if (t.base_vertices.cols() != 3 || t.id_basis.rows() != 3 * nv || t.exp_basis.rows() != 3 * nv) {
    throw FormatError("checkpoint template has inconsistent shapes");
  }
  if (t.dim_psi() != cfg.dim_psi) throw FormatError("template and motion prior disagree on dim_psi");
  for (const auto& tri : t.faces) {
    for (int v : tri) {
      if (v < 0 || v >= nv) throw FormatError("template face index out of range");
    }
  }
  return {std::move(prior), std::move(t)};
}

ckpt::Checkpoint align_checkpoint(const avi::AlignModel& align) {
  ckpt::Checkpoint c;
  c.tag = kTagAlign;
  c.config = json{{"model", align.config().to_json()}};
  ckpt::put_params(c, align.params());
  return c;
}

std::unique_ptr<avi::AlignModel> align_from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != kTagAlign) throw FormatError("expected an avi_align checkpoint, got '" + c.tag + "'");
  auto model = std::make_unique<avi::AlignModel>(parse_config(c.config, "model", &avi::AlignConfig::from_json), 0);
  ckpt::get_params(c, model->params());
  return model;
}

ckpt::Checkpoint lm_checkpoint(const avi::TinyLM& lm) {
  ckpt::Checkpoint c;
  c.tag = kTagLM;
  c.config = json{{"model", lm.config().to_json()}};
  ckpt::put_params(c, lm.lm_params());
  ckpt::put_params(c, lm.proj_params());
  return c;
}

std::unique_ptr<avi::TinyLM> lm_from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != kTagLM) throw FormatError("expected an avi_lm checkpoint, got '" + c.tag + "'");
  auto lm = std::make_unique<avi::TinyLM>(parse_config(c.config, "model", &avi::LMConfig::from_json), 0);
  ckpt::get_params(c, lm->lm_params());
  ckpt::get_params(c, lm->proj_params());
  return lm;
}

ckpt::Checkpoint bridge_checkpoint(const bridge::BridgeModel& model) {
  ckpt::Checkpoint c;
  c.tag = kTagBridge;
  c.config = json{{"model", model.config().to_json()}, {"schedule", model.schedule().to_json()}};
  ckpt::put_params(c, model.params());
  c.tensors["stats.z_mean"] = vector_row(model.z_mean());
  c.tensors["stats.z_std"] = vector_row(model.z_std());
  return c;
}

std::unique_ptr<bridge::BridgeModel> bridge_from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != kTagBridge) throw FormatError("expected a bridge checkpoint, got '" + c.tag + "'");
  auto cfg = parse_config(c.config, "model", &bridge::BridgeConfig::from_json);
  auto schedule = parse_config(c.config, "schedule", &diffusion::NoiseSchedule::from_json);
  auto model = std::make_unique<bridge::BridgeModel>(cfg, schedule, 0);
  ckpt::get_params(c, model->params());
  const auto mean = row_vector(c, "stats.z_mean");
  const auto sd = row_vector(c, "stats.z_std");
  if (mean.size() != cfg.style_dim || sd.size() != cfg.style_dim) throw FormatError("bridge z statistics have wrong size");
  model->set_z_stats(mean, sd);
  return model;
}

fs::path checkpoint_path(const fs::path& out, const std::string& tag) { return out / "checkpoints" / (tag + ".avit"); }

Models load_models(const fs::path& out) {
  Models m;
  auto load = [&](const char* tag) {
    const auto path = checkpoint_path(out, tag);
    const std::string bytes = ckpt::read_file(path);
    m.hashes[tag] = sha256_hex(bytes);
    return ckpt::deserialize(bytes, tag);
  };
  auto [prior, tmpl] = prior_from_checkpoint(load(kTagPrior));
  m.prior = std::move(prior);
  m.tmpl = std::move(tmpl);
  m.align = align_from_checkpoint(load(kTagAlign));
  m.lm = lm_from_checkpoint(load(kTagLM));
  m.bridge = bridge_from_checkpoint(load(kTagBridge));

  const int vocab = m.vocab.size();
  if (m.align->config().vocab_size != vocab || m.lm->config().vocab_size != vocab) {
    throw FormatError("checkpoint vocabulary size does not match this build");
  }
  if (m.prior->config().feature_dim != m.align->config().feature_dim ||
      m.prior->config().style_dim != m.bridge->config().style_dim ||
      m.align->config().embed_dim != m.bridge->config().embed_dim ||
      m.align->config().embed_dim != m.lm->config().embed_dim ||
      m.align->config().num_queries != m.lm->config().num_prefix) {
    throw FormatError("checkpoints were trained with incompatible dimensions");
  }
  return m;
}

// ---------------------------------------------------------------- animation file

json AnimationFile::to_json() const {
  json fr = json::array();
  const Mat& m = frames.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> theta(face::kPoseDim), psi(static_cast<std::size_t>(frames.dim_psi()));
    for (int k = 0; k < face::kPoseDim; ++k) theta[static_cast<std::size_t>(k)] = m(r, k);
    for (int k = 0; k < frames.dim_psi(); ++k) psi[static_cast<std::size_t>(k)] = m(r, face::kPoseDim + k);
    fr.push_back(json{{"theta", theta}, {"psi", psi}});
  }
  return json{{"fps", kFps},
              {"frames", fr},
              {"provenance",
               {{"instruction", instruction},
                {"clip_id", clip_id},
                {"seed", seed},
                {"sample", sample},
                {"checkpoint_hashes", checkpoint_hashes}}}};
}

AnimationFile AnimationFile::from_json(const json& j, int dim_psi) {
  AnimationFile a;
  try {
    if (j.at("fps").get<int>() != kFps) throw FormatError("animation fps must be 25");
    const json& fr = j.at("frames");
    Mat m(static_cast<Eigen::Index>(fr.size()), face::kPoseDim + dim_psi);
    for (std::size_t r = 0; r < fr.size(); ++r) {
      const auto theta = fr[r].at("theta").get<std::vector<double>>();
      const auto psi = fr[r].at("psi").get<std::vector<double>>();
      if (theta.size() != static_cast<std::size_t>(face::kPoseDim) || psi.size() != static_cast<std::size_t>(dim_psi)) {
        throw FormatError("animation frame " + std::to_string(r) + " has wrong dimensions");
      }
      const auto row = static_cast<Eigen::Index>(r);
      for (int k = 0; k < face::kPoseDim; ++k) m(row, k) = theta[static_cast<std::size_t>(k)];
      for (int k = 0; k < dim_psi; ++k) m(row, face::kPoseDim + k) = psi[static_cast<std::size_t>(k)];
    }
    a.frames = face::CoeffSequence(std::move(m), dim_psi);
    const json& p = j.at("provenance");
    a.instruction = p.at("instruction").get<std::string>();
    a.clip_id = p.at("clip_id").get<std::string>();
    a.seed = p.at("seed").get<std::uint64_t>();
    a.sample = p.value("sample", 0);
    a.checkpoint_hashes = p.at("checkpoint_hashes").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("animation file: ") + e.what());
  }
  return a;
}

std::string AnimationFile::serialize() const { return to_json().dump() + "\n"; }

// ---------------------------------------------------------------- output directory

OutputDir::OutputDir(fs::path root) : root_(std::move(root)), manifest_(json::object()) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
  const auto mpath = root_ / "manifest.json";
  if (fs::exists(mpath)) {
    json j = json::parse(ckpt::read_file(mpath), nullptr, false);
    if (j.is_discarded() || !j.contains("artifacts") || !j["artifacts"].is_object()) {
      throw FormatError("corrupt manifest in " + root_.string());
    }
    manifest_ = j["artifacts"];
  }
}

void OutputDir::write(const std::string& name, const std::string& bytes) {
  ckpt::write_file(root_ / name, bytes);
  manifest_[name] = json{{"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}};
  flush();
}

void OutputDir::write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

void OutputDir::flush() const {
  ckpt::write_file(root_ / "manifest.json", json{{"artifacts", manifest_}}.dump(2) + "\n");
}

fs::path default_output_dir() {
  const char* env = std::getenv("AVIT_OUT");
  return (env && *env) ? fs::path(env) : fs::path("avit_out");
}

// ---------------------------------------------------------------- synthesis

SynthResult synth_pipeline(const Models& models, const corpus::CorpusRecord& clip,
                           const std::optional<std::string>& instruction_override, int n_samples,
                           std::uint64_t seed, int template_id) {
  if (n_samples < 1) throw ParameterError("n_samples must be at least 1");
  if (clip.features.cols() != models.prior->config().feature_dim) {
    throw FormatError("clip features do not match the motion prior's d_a");
  }
  SynthResult res;
  if (instruction_override) {
    res.instruction = *instruction_override;
  } else {
    res.instruction = avi::generate_instruction(clip.features, template_id, *models.align, *models.lm, models.vocab).text;
    res.generated = true;
  }
  res.styles = bridge::sample_style(res.instruction, n_samples, seed, *models.bridge, *models.align, models.vocab);
  const Mat content = models.prior->encode_content(clip.features);
  for (int k = 0; k < n_samples; ++k) {
    const auto& z = res.styles[static_cast<std::size_t>(k)];
    if (!z.allFinite()) throw NumericError("non-finite style sample");
    AnimationFile a;
    a.frames = models.prior->generate(content, z);
    if (!a.frames.matrix().allFinite()) throw NumericError("non-finite animation frames");
    a.instruction = res.instruction;
    a.clip_id = clip.record_id;
    a.seed = seed;
    a.sample = k;
    a.checkpoint_hashes = models.hashes;
    res.animations.push_back(std::move(a));
  }
  return res;
}

// ---------------------------------------------------------------- evaluation

namespace {

// Probe on the classes that have enough held-out support; nullopt when fewer than two qualify.
std::optional<double> supported_probe(const std::vector<Eigen::VectorXd>& x, const std::vector<int>& y,
                                      std::uint64_t seed) {
  std::map<int, int> counts;
  for (int v : y) ++counts[v];
  std::vector<Eigen::VectorXd> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (counts[y[i]] >= 10) {
      xs.push_back(x[i]);
      ys.push_back(y[i]);
    }
  }
  std::map<int, int> kept;
  for (int v : ys) ++kept[v];
  if (kept.size() < 2) return std::nullopt;
  return eval::probe_accuracy(xs, ys, seed);
}

}  // namespace

eval::MetricReport evaluate_models(const Models& models, const corpus::Corpus& corpus, std::uint64_t seed) {
  const auto test = corpus.split("test");
  if (test.empty()) throw ParameterError("corpus has no test clips");
  eval::MetricReport rep;
  rep.tag = "eval";
  rep.seed = seed;
  rep.split = "test";

  std::vector<Eigen::VectorXd> styles;
  std::vector<int> emotions, visemes;
  std::vector<eval::Tokens> cands;
  std::vector<std::vector<eval::Tokens>> refs;
  int parsed = 0, emotion_ok = 0, full_ok = 0;
  double rouge = 0.0, lve_matched = 0.0, lve_shuffled = 0.0;

  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& r = *test[i];
    const auto idx = static_cast<std::uint64_t>(i);
    styles.push_back(motion::clip_style(*models.prior, r.coeffs, derive_seed(seed, "eval-style", idx)));
    emotions.push_back(static_cast<int>(r.state.emotion));
    visemes.push_back(eval::majority_viseme(r.phonemes));

    const auto gen = avi::generate_instruction(r.features, 0, *models.align, *models.lm, models.vocab);
    if (auto p = grammar::parse(gen.text)) {
      ++parsed;
      if (p->emotion == r.state.emotion) {
        ++emotion_ok;
        if (p->intensity == r.state.intensity) ++full_ok;
      }
    }
    Rng ref_rng(derive_seed(seed, "eval-refs", idx));
    std::vector<eval::Tokens> rr{grammar::tokenize(r.instruction.text)};
    for (int k = 0; k < 3; ++k) {
      rr.push_back(grammar::tokenize(grammar::generate_text(r.state.emotion, r.state.intensity, ref_rng)));
    }
    cands.push_back(grammar::tokenize(gen.text));
    rouge += eval::rouge_l(cands.back(), rr.front());
    refs.push_back(std::move(rr));

    lve_matched += eval::lip_vertex_error(models.prior->animate(r.features, styles.back()), r.coeffs, models.tmpl);
    Rng shuf_rng(derive_seed(seed, "eval-shuffle", idx));
    const auto perm = permutation(shuf_rng, r.length());
    std::vector<int> shuffled(r.phonemes.size());
    for (std::size_t f = 0; f < shuffled.size(); ++f) shuffled[f] = r.phonemes[static_cast<std::size_t>(perm[f])];
    const Mat feats = corpus::pseudo_features(shuffled, r.state.emotion, r.state.intensity, corpus.embeddings,
                                              corpus.config.feature_noise, shuf_rng);
    lve_shuffled += eval::lip_vertex_error(models.prior->animate(feats, styles.back()), r.coeffs, models.tmpl);
  }

  const double n = static_cast<double>(test.size());
  if (auto a = supported_probe(styles, emotions, derive_seed(seed, "probe-emotion"))) {
    rep.metrics["emotion_probe_accuracy"] = *a;
  }
  if (auto a = supported_probe(styles, visemes, derive_seed(seed, "probe-phoneme"))) {
    rep.metrics["phoneme_probe_accuracy"] = *a;
  }
  rep.metrics["instruction_parse_rate"] = parsed / n;
  rep.metrics["instruction_emotion_accuracy"] = emotion_ok / n;
  rep.metrics["instruction_state_accuracy"] = full_ok / n;
  rep.metrics["bleu_1"] = eval::corpus_bleu(cands, refs, 1);
  rep.metrics["bleu_4"] = eval::corpus_bleu(cands, refs, 4);
  rep.metrics["rouge_l"] = rouge / n;
  rep.metrics["perplexity"] = avi::perplexity(*models.lm, *models.align, test, models.vocab, seed);
  rep.metrics["lve_matched"] = lve_matched / n;
  rep.metrics["lve_shuffled"] = lve_shuffled / n;
  rep.metrics["lve_ratio"] = lve_shuffled > 0 ? lve_matched / lve_shuffled : 0.0;
  rep.metrics["n_test"] = n;
  return rep;
}

// ---------------------------------------------------------------- CLI

corpus::Corpus obtain_corpus(const config::RunConfig& cfg, const fs::path& out) {
  if (!cfg.corpus_path.empty()) return corpus::read_corpus(cfg.corpus_path);
  const auto local = out / "corpus.jsonl";
  if (fs::exists(local)) return corpus::read_corpus(local);
  return corpus::gen_corpus(cfg.corpus);
}

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool quiet = false;
};

struct Context {
  config::RunConfig cfg;
  OutputDir out;
  corpus::Corpus corpus;
  bool quiet;
};

Context make_context(const Common& c) {
  auto cfg = config::load_run_config(c.config_path, c.overrides);
  OutputDir out(c.out.empty() ? default_output_dir() : fs::path(c.out));
  auto corpus = obtain_corpus(cfg, out.root());
  // The stored corpus is authoritative for corpus-derived settings.
  cfg.corpus = corpus.config;
  cfg.resolve(corpus.vocab.size());
  return Context{std::move(cfg), std::move(out), std::move(corpus), c.quiet};
}

std::function<void(int, double)> progress(const Context& ctx, const std::string& stage, int every) {
  if (ctx.quiet) return {};
  return [stage, every](int step, double loss) {
    if (step % every == 0) std::cerr << "[" << stage << "] step " << step << " loss " << loss << "\n";
  };
}

json loss_curve(const std::vector<double>& v, std::size_t stride = 10) {
  json a = json::array();
  for (std::size_t i = 0; i < v.size(); i += stride) a.push_back(v[i]);
  return a;
}

void save_checkpoint(Context& ctx, const ckpt::Checkpoint& c) {
  ctx.out.write("checkpoints/" + c.tag + ".avit", ckpt::serialize(c));
}

ckpt::Checkpoint load_checkpoint(const Context& ctx, const std::string& tag) {
  return ckpt::load(checkpoint_path(ctx.out.root(), tag), tag);
}

const corpus::CorpusRecord& find_clip(const corpus::Corpus& corpus, const std::string& id) {
  const auto* r = corpus.find(id);
  if (!r) throw ParameterError("unknown clip '" + id + "'");
  return *r;
}

void cmd_gen_data(Context& ctx) {
  ctx.out.write("corpus.jsonl", corpus::serialize_corpus(ctx.corpus));
  ctx.out.write_json("vocab.json", ctx.corpus.vocab.to_json());
  if (!ctx.quiet) std::cerr << "wrote " << ctx.corpus.records.size() << " records\n";
}

void cmd_train_prior(Context& ctx) {
  if (ctx.corpus.config.dim_psi != ctx.cfg.motion_prior.dim_psi) throw FormatError("corpus dim_psi mismatch");
  motion::MotionPrior prior(ctx.cfg.motion_prior, ctx.cfg.init_seed("motion_prior"));
  const auto rep = motion::train_prior(prior, ctx.corpus, ctx.cfg.train_prior, progress(ctx, "train-prior", 100));
  const auto& cc = ctx.corpus.config;
  const auto tmpl = face::make_synthetic_template(cc.template_seed, cc.template_vertices, cc.dim_beta, cc.dim_psi);
  save_checkpoint(ctx, prior_checkpoint(prior, tmpl));
  ctx.out.write_json("reports/train_prior.json", json{{"config", ctx.cfg.train_prior.to_json()},
                                                      {"train_loss", loss_curve(rep.train_loss)},
                                                      {"val_initial", rep.val_initial},
                                                      {"val_final", rep.val_final}});
}

void cmd_train_align(Context& ctx) {
  avi::AlignModel align(ctx.cfg.align, ctx.cfg.init_seed("align"));
  const auto rep = avi::train_align(align, ctx.corpus, ctx.cfg.train_align, progress(ctx, "train-align", 100));
  save_checkpoint(ctx, align_checkpoint(align));
  ctx.out.write_json("reports/train_align.json", json{{"config", ctx.cfg.train_align.to_json()},
                                                      {"train_loss", loss_curve(rep.train_loss)},
                                                      {"initial_loss", rep.initial_loss},
                                                      {"final_loss", rep.final_loss},
                                                      {"val_retrieval", rep.val_retrieval}});
}

void cmd_train_lm(Context& ctx) {
  const auto align = align_from_checkpoint(load_checkpoint(ctx, kTagAlign));
  avi::TinyLM lm(ctx.cfg.lm, ctx.cfg.init_seed("lm"));
  std::function<void(const std::string&, int, double)> cb;
  if (!ctx.quiet) {
    cb = [](const std::string& phase, int step, double loss) {
      if (step % 100 == 0) std::cerr << "[train-lm/" << phase << "] step " << step << " loss " << loss << "\n";
    };
  }
  const auto rep = avi::train_lm(lm, *align, ctx.corpus, ctx.cfg.train_lm, cb);
  save_checkpoint(ctx, lm_checkpoint(lm));
  ctx.out.write_json("reports/train_lm.json", json{{"config", ctx.cfg.train_lm.to_json()},
                                                   {"pretrain_loss", loss_curve(rep.pretrain_loss)},
                                                   {"train_loss", loss_curve(rep.train_loss)},
                                                   {"val_perplexity", rep.val_perplexity}});
}

void cmd_train_bridge(Context& ctx) {
  auto [prior, tmpl] = prior_from_checkpoint(load_checkpoint(ctx, kTagPrior));
  const auto align = align_from_checkpoint(load_checkpoint(ctx, kTagAlign));
  bridge::BridgeModel model(ctx.cfg.bridge, ctx.cfg.schedule.build(), ctx.cfg.init_seed("bridge"));
  const auto rep = bridge::train_bridge(model, ctx.corpus, *prior, *align, ctx.cfg.train_bridge,
                                        progress(ctx, "train-bridge", 250));
  save_checkpoint(ctx, bridge_checkpoint(model));
  ctx.out.write_json("reports/train_bridge.json", json{{"config", ctx.cfg.train_bridge.to_json()},
                                                       {"train_loss", loss_curve(rep.train_loss)},
                                                       {"val_diff_initial", rep.val_diff_initial},
                                                       {"val_diff_final", rep.val_diff_final},
                                                       {"val_cont_final", rep.val_cont_final}});
}

struct SynthArgs {
  std::string clip;
  std::string instruction;
  bool has_instruction = false;
  std::uint64_t seed = 0;
  int n = 1;
  int template_id = 0;
};

void cmd_synth(Context& ctx, const SynthArgs& a) {
  const auto models = load_models(ctx.out.root());
  const auto& clip = find_clip(ctx.corpus, a.clip);
  std::optional<std::string> override_text;
  if (a.has_instruction) override_text = a.instruction;
  const auto res = synth_pipeline(models, clip, override_text, a.n, a.seed, a.template_id);
  for (std::size_t k = 0; k < res.animations.size(); ++k) {
    const std::string name = "animations/" + a.clip + "_seed" + std::to_string(a.seed) + "_" + std::to_string(k) + ".json";
    ctx.out.write(name, res.animations[k].serialize());
    std::cout << name << "\n";
  }
  std::cout << "instruction: " << res.instruction << "\n";
}

void cmd_eval(Context& ctx) {
  const auto models = load_models(ctx.out.root());
  auto rep = evaluate_models(models, ctx.corpus, ctx.cfg.ablation.seed);
  rep.config = ctx.cfg.to_json();
  ctx.out.write_json("reports/eval.json", rep.to_json());
  for (const auto& [k, v] : rep.metrics) std::cout << k << " " << v << "\n";
}

void cmd_ablate(Context& ctx) {
  auto [prior, tmpl] = prior_from_checkpoint(load_checkpoint(ctx, kTagPrior));
  const auto align = align_from_checkpoint(load_checkpoint(ctx, kTagAlign));
  const auto full = bridge_from_checkpoint(load_checkpoint(ctx, kTagBridge));
  std::function<void(const std::string&)> cb;
  if (!ctx.quiet) cb = [](const std::string& v) { std::cerr << "[ablate] variant " << v << "\n"; };
  const auto reports = eval::run_ablation_suite(ctx.corpus, *prior, *align, tmpl, ctx.cfg.bridge, ctx.cfg.schedule.build(),
                                                ctx.cfg.train_bridge, ctx.cfg.ablation, full.get(), cb);
  ctx.out.write_json("reports/ablation.json", eval::reports_to_json(reports));
  for (const auto& r : reports) {
    std::cout << r.tag;
    for (const auto& [k, v] : r.metrics) std::cout << " " << k << "=" << v;
    std::cout << "\n";
  }
}

struct ExportArgs {
  std::string animation;
  int frame = 0;
  std::string name = "template.obj";
};

void cmd_export_obj(Context& ctx, const ExportArgs& a) {
  auto [prior, tmpl] = prior_from_checkpoint(load_checkpoint(ctx, kTagPrior));
  face::PoseParams pose;
  face::ExpressionParams psi{Eigen::VectorXd::Zero(tmpl.dim_psi())};
  if (!a.animation.empty()) {
    json j = json::parse(ckpt::read_file(a.animation), nullptr, false);
    if (j.is_discarded()) throw FormatError(a.animation + " is not valid JSON");
    const auto anim = AnimationFile::from_json(j, tmpl.dim_psi());
    if (a.frame < 0 || a.frame >= anim.frames.length()) throw ParameterError("frame index out of range");
    pose = anim.frames.pose(a.frame);
    psi = anim.frames.expression(a.frame);
  }
  const auto mesh = face::flame_forward(tmpl, face::ShapeParams{Eigen::VectorXd::Zero(tmpl.dim_beta())}, pose, psi);
  ctx.out.write("meshes/" + a.name, face::export_obj(mesh));
  std::cout << "meshes/" << a.name << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ParameterError*>(&e)) return kConfigError;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericError;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IoError*>(&e) ||
      dynamic_cast<const TokenizationError*>(&e) || dynamic_cast<const json::exception*>(&e)) {
    return kDataError;
  }
  return 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"avit: two-stage instruction-driven talking-face pipeline"};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config_path, "run configuration JSON");
  app.add_option("--set", common.overrides, "override a config key, e.g. --set train_prior.steps=200");
  app.add_option("-o,--out", common.out, "output directory (default: $AVIT_OUT or ./avit_out)");
  app.add_flag("-q,--quiet", common.quiet, "suppress progress on stderr");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  auto* tp = app.add_subcommand("train-prior", "train the motion prior");
  auto* ta = app.add_subcommand("train-align", "train the audio/instruction aligner");
  auto* tl = app.add_subcommand("train-lm", "train the instruction language model");
  auto* tb = app.add_subcommand("train-bridge", "train the instruction-to-style bridge");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "synthesize animations for a clip");
  synth->add_option("--clip", sa.clip, "clip id")->required();
  auto* instr_opt = synth->add_option("--instruction", sa.instruction, "use this instruction instead of generating one");
  synth->add_option("--seed", sa.seed, "sampling seed");
  synth->add_option("-n,--n-samples", sa.n, "number of style samples")->check(CLI::Range(1, 16));
  synth->add_option("--template", sa.template_id, "prompt template id")->check(CLI::Range(0, 9));

  auto* ev = app.add_subcommand("eval", "evaluate trained models on the test split");
  auto* ab = app.add_subcommand("ablate", "train and evaluate the bridge ablation variants");

  int port = service::kDefaultPort;
  std::string host = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "run the HTTP inference service");
  serve->add_option("--port", port, "listen port");
  serve->add_option("--host", host, "bind address");

  ExportArgs xa;
  auto* xo = app.add_subcommand("export-obj", "write the template or an animation frame as OBJ");
  xo->add_option("--animation", xa.animation, "animation file");
  xo->add_option("--frame", xa.frame, "frame index");
  xo->add_option("--name", xa.name, "output file name under meshes/");

  auto* schema = app.add_subcommand("schema", "print the JSON schema of the run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  if (schema->parsed()) {
    std::cout << config::run_config_schema().dump(2) << "\n";
    return kOk;
  }

  try {
    Context ctx = make_context(common);
    if (gen->parsed()) cmd_gen_data(ctx);
    else if (tp->parsed()) cmd_train_prior(ctx);
    else if (ta->parsed()) cmd_train_align(ctx);
    else if (tl->parsed()) cmd_train_lm(ctx);
    else if (tb->parsed()) cmd_train_bridge(ctx);
    else if (synth->parsed()) {
      sa.has_instruction = instr_opt->count() > 0;
      cmd_synth(ctx, sa);
    } else if (ev->parsed()) cmd_eval(ctx);
    else if (ab->parsed()) cmd_ablate(ctx);
    else if (serve->parsed()) {
      auto models = std::make_shared<const Models>(load_models(ctx.out.root()));
      auto corpus = std::make_shared<const corpus::Corpus>(std::move(ctx.corpus));
      service::Service svc(models, corpus);
      svc.listen(host, port);
    } else if (xo->parsed()) cmd_export_obj(ctx, xa);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"avit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace avit::pipeline

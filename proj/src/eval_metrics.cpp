#include "avit/eval_metrics.hpp"

#include "avit/errors.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace avit::eval {

using nlohmann::json;

double diversity(const std::vector<Eigen::VectorXd>& samples) {
  if (samples.size() < 2) throw ParameterError("diversity needs at least 2 samples");
  double total = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      if (samples[i].size() != samples[j].size()) throw ParameterError("diversity: dimension mismatch");
      total += (samples[i] - samples[j]).norm();
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

namespace {

std::map<Tokens, int> ngram_counts(const Tokens& t, int n) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i) + n)];
  }
  return out;
}

}  // namespace

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references, int n,
                   double epsilon) {
  if (n < 1 || n > 4) throw ParameterError("BLEU order must be in 1..4");
  if (candidates.size() != references.size()) throw ParameterError("one reference set per candidate required");
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0), total(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& refs = references[s];
    if (refs.empty()) throw ParameterError("BLEU needs at least one reference");
    cand_len += static_cast<double>(cand.size());
    // Closest reference length, ties broken toward the shorter one.
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(cand.size())); };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int k = 1; k <= n; ++k) {
      const auto cc = ngram_counts(cand, k);
      std::map<Tokens, int> max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, c] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : cc) {
        auto it = max_ref.find(g);
        matched[static_cast<std::size_t>(k - 1)] += std::min(c, it == max_ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(k - 1)] += c;
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    double m = matched[ku];
    if (total[ku] == 0.0) return 0.0;
    if (m == 0.0) {
      if (epsilon <= 0.0) return 0.0;
      m = epsilon;
    }
    log_p += std::log(m / total[ku]) / n;
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return bp * std::exp(log_p);
}

double bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n, double epsilon) {
  return corpus_bleu({candidate}, {references}, n, epsilon);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (reference.empty()) throw ParameterError("ROUGE-L needs a non-empty reference");
  if (candidate.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

double lip_vertex_error(const face::CoeffSequence& pred, const face::CoeffSequence& gt,
                        const face::HeadTemplate& tmpl) {
  if (pred.length() != gt.length()) throw ParameterError("lip_vertex_error: sequence lengths differ");
  if (pred.length() == 0) throw ParameterError("lip_vertex_error: empty sequences");
  const face::ShapeParams beta{Eigen::VectorXd::Zero(tmpl.dim_beta())};
  double total = 0.0;
  for (int f = 0; f < pred.length(); ++f) {
    const auto a = face::flame_forward(tmpl, beta, pred.pose(f), pred.expression(f));
    const auto b = face::flame_forward(tmpl, beta, gt.pose(f), gt.expression(f));
    const Mat la = face::region_positions(a, tmpl, "lips");
    const Mat lb = face::region_positions(b, tmpl, "lips");
    total += (la - lb).rowwise().norm().mean();
  }
  return total / pred.length();
}

// ---------------------------------------------------------------- probes

void LinearProbe::fit(const Mat& x, const std::vector<int>& labels, int num_classes, std::uint64_t seed, int steps) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size()) || x.rows() == 0) throw ParameterError("probe data mismatch");
  if (num_classes < 2) throw ParameterError("probe needs at least 2 classes");
  mean_ = x.colwise().mean();
  scale_ = ((x.rowwise() - mean_).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index c = 0; c < scale_.size(); ++c) scale_(c) = scale_(c) > 1e-12 ? 1.0 / scale_(c) : 0.0;
  Mat xs = (x.rowwise() - mean_).array().rowwise() * scale_.array();

  Rng rng(seed);
  ParamSet p;
  Var w = p.add("w", init::normal(rng, x.cols(), num_classes, 0.01));
  Var b = p.add("b", Mat::Zero(1, num_classes));
  AdamState opt;
  opt.config.lr = 0.05;
  const Var xv = ad::constant(xs);
  for (int s = 0; s < steps; ++s) {
    p.zero_grad();
    Var logits = ad::add_row(ad::matmul(xv, w), b);
    Var loss = ad::add(ad::cross_entropy(logits, labels), ad::scale(ad::sum(ad::mul(w, w)), 1e-3));
    loss.backward();
    adam_step(p, collect_grads(p), opt);
  }
  w_ = w.value();
  b_ = b.value().row(0);
}

std::vector<int> LinearProbe::predict(const Mat& x) const {
  if (w_.size() == 0) throw ParameterError("probe not fitted");
  const Mat xs = (x.rowwise() - mean_).array().rowwise() * scale_.array();
  const Mat logits = (xs * w_).rowwise() + b_;
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index best;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double LinearProbe::accuracy(const Mat& x, const std::vector<int>& labels) const {
  const auto pred = predict(x);
  int hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double probe_accuracy(const std::vector<Eigen::VectorXd>& embeddings, const std::vector<int>& labels,
                      std::uint64_t seed) {
  if (embeddings.size() != labels.size() || embeddings.empty()) throw ParameterError("probe data mismatch");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw ParameterError("probe labels must be non-negative");
    by_class[labels[i]].push_back(i);
  }
  if (by_class.size() < 2) throw ParameterError("probe needs at least 2 distinct labels");
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < 10) throw ParameterError("probe needs at least 10 samples per class");
  }
  Rng rng(derive_seed(seed, "probe-split"));
  std::vector<std::size_t> train, test;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(idx.size())));
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<long>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<long>(n_test), idx.end());
  }
  const int num_classes = by_class.rbegin()->first + 1;
  auto gather = [&](const std::vector<std::size_t>& idx, Mat& x, std::vector<int>& y) {
    x.resize(static_cast<Eigen::Index>(idx.size()), embeddings.front().size());
    y.clear();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = embeddings[idx[i]].transpose();
      y.push_back(labels[idx[i]]);
    }
  };
  Mat xtr, xte;
  std::vector<int> ytr, yte;
  gather(train, xtr, ytr);
  gather(test, xte, yte);
  LinearProbe probe;
  probe.fit(xtr, ytr, num_classes, derive_seed(seed, "probe-init"));
  return probe.accuracy(xte, yte);
}

// ---------------------------------------------------------------- reports

json MetricReport::to_json() const {
  json m = json::object();
  for (const auto& [k, v] : metrics) {
    if (!std::isfinite(v)) throw NumericError("metric '" + k + "' is not finite");
    m[k] = v;
  }
  return json{{"tag", tag}, {"metrics", m}, {"config", config}, {"seed", seed}, {"split", split}};
}

MetricReport MetricReport::from_json(const json& j) {
  MetricReport r;
  try {
    r.tag = j.at("tag").get<std::string>();
    for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it) {
      r.metrics[it.key()] = it.value().get<double>();
    }
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.split = j.at("split").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metric report: ") + e.what());
  }
  return r;
}

json reports_to_json(const std::vector<MetricReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return json{{"reports", arr}};
}

int majority_viseme(const std::vector<int>& phonemes) {
  std::array<int, corpus::kNumVisemes> counts{};
  for (int p : phonemes) ++counts[static_cast<std::size_t>(p)];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

// ---------------------------------------------------------------- ablations

LinearProbe fit_real_style_probe(const corpus::Corpus& corpus, const motion::MotionPrior& prior, std::uint64_t seed) {
  const auto train = corpus.split("train");
  Mat x(static_cast<Eigen::Index>(train.size()), prior.config().style_dim);
  std::vector<int> y;
  for (std::size_t i = 0; i < train.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) =
        motion::clip_style(prior, train[i]->coeffs, derive_seed(seed, "probe-style", i)).transpose();
    y.push_back(static_cast<int>(train[i]->state.emotion));
  }
  LinearProbe probe;
  probe.fit(x, y, grammar::kNumEmotions, derive_seed(seed, "emotion-probe"));
  return probe;
}

VariantEval evaluate_bridge(const bridge::BridgeModel& model, const corpus::Corpus& corpus,
                            const motion::MotionPrior& prior, const avi::AlignModel& align,
                            const face::HeadTemplate& tmpl, const LinearProbe& emotion_probe,
                            const AblationConfig& cfg) {
  auto test = corpus.split("test");
  if (test.empty()) throw FormatError("corpus has no test records");
  if (static_cast<int>(test.size()) > cfg.max_clips) test.resize(static_cast<std::size_t>(cfg.max_clips));
  VariantEval out;
  std::vector<Eigen::VectorXd> generated;
  std::vector<int> labels;
  double lip = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& r = *test[i];
    const auto z = bridge::sample_style(r.instruction.text, cfg.n_samples, derive_seed(cfg.seed, "ablate", i), model,
                                        align, corpus.vocab);
    out.diversity += cfg.n_samples >= 2 ? diversity(z) : 0.0;
    for (const auto& zi : z) {
      generated.push_back(zi);
      labels.push_back(static_cast<int>(r.state.emotion));
    }
    lip += lip_vertex_error(prior.animate(r.features, z.front()), r.coeffs, tmpl);
  }
  const double n = static_cast<double>(test.size());
  out.diversity /= n;
  out.lip_vertex_error = lip / n;
  Mat x(static_cast<Eigen::Index>(generated.size()), prior.config().style_dim);
  for (std::size_t i = 0; i < generated.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = generated[i].transpose();
  out.emotion_probe = emotion_probe.accuracy(x, labels);
  return out;
}

std::vector<MetricReport> run_ablation_suite(const corpus::Corpus& corpus, const motion::MotionPrior& prior,
                                             const avi::AlignModel& align, const face::HeadTemplate& tmpl,
                                             const bridge::BridgeConfig& bridge_config,
                                             const diffusion::NoiseSchedule& schedule,
                                             const bridge::BridgeTrainConfig& train_config,
                                             const AblationConfig& cfg, const bridge::BridgeModel* full,
                                             const std::function<void(const std::string&)>& on_variant) {
  const LinearProbe probe = fit_real_style_probe(corpus, prior, cfg.seed);
  struct Variant {
    std::string tag;
    bool no_diffusion, no_cont_align, no_aug;
  };
  const std::vector<Variant> variants = {
      {"full", false, false, false},
      {"no_diffusion", true, false, false},
      {"no_cont_align", false, true, false},
      {"no_aug", false, false, true},
  };
  std::vector<MetricReport> reports;
  for (const auto& v : variants) {
    if (on_variant) on_variant(v.tag);
    auto tc = train_config;
    tc.no_diffusion = v.no_diffusion;
    tc.no_cont_align = v.no_cont_align;
    tc.no_aug = v.no_aug;
    VariantEval ev;
    if (v.tag == "full" && full) {
      ev = evaluate_bridge(*full, corpus, prior, align, tmpl, probe, cfg);
    } else {
      bridge::BridgeModel model(bridge_config, schedule, derive_seed(tc.seed, "bridge-init"));
      bridge::train_bridge(model, corpus, prior, align, tc);
      ev = evaluate_bridge(model, corpus, prior, align, tmpl, probe, cfg);
    }
    MetricReport r;
    r.tag = v.tag;
    r.seed = cfg.seed;
    r.split = "test";
    r.config = tc.to_json();
    r.metrics["diversity"] = ev.diversity;
    r.metrics["emotion_probe_accuracy"] = ev.emotion_probe;
    r.metrics["lip_vertex_error"] = ev.lip_vertex_error;
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace avit::eval

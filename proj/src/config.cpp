#include "avit/config.hpp"

#include "avit/checkpoint.hpp"
#include "avit/json_util.hpp"

namespace avit::config {

using nlohmann::json;

diffusion::NoiseSchedule ScheduleConfig::build() const { return diffusion::NoiseSchedule::linear(T, beta_start, beta_end); }

namespace {

json ablation_to_json(const eval::AblationConfig& a) {
  return json{{"n_samples", a.n_samples}, {"max_clips", a.max_clips}, {"seed", a.seed}};
}

eval::AblationConfig ablation_from_json(const json& j) {
  eval::AblationConfig a;
  StrictReader r(j, "ablation");
  r.get("n_samples", a.n_samples).get("max_clips", a.max_clips).get("seed", a.seed);
  r.finish();
  AVIT_REQUIRE(a.n_samples >= 2, "ablation.n_samples must be >= 2");
  AVIT_REQUIRE(a.max_clips >= 1, "ablation.max_clips must be >= 1");
  return a;
}

template <class T>
void section(StrictReader& r, const std::string& key, T& out, T (*parse)(const json&)) {
  if (const json* c = r.child(key)) out = parse(*c);
}

void set_dim(const std::optional<int>& v, std::initializer_list<int*> targets) {
  if (!v) return;
  AVIT_REQUIRE(*v > 0, "dims must be positive");
  for (int* t : targets) *t = *v;
}

json schema_of(const json& value) {
  if (value.is_object()) {
    json props = json::object();
    for (auto it = value.begin(); it != value.end(); ++it) props[it.key()] = schema_of(it.value());
    return json{{"type", "object"}, {"properties", props}, {"additionalProperties", false}};
  }
  if (value.is_boolean()) return json{{"type", "boolean"}};
  if (value.is_number_integer()) return json{{"type", "integer"}};
  if (value.is_number()) return json{{"type", "number"}};
  return json{{"type", "string"}};
}

}  // namespace

void RunConfig::resolve(int vocab_size) {
  set_dim(dims.d_a, {&corpus.feature_dim, &motion_prior.feature_dim, &align.feature_dim});
  set_dim(dims.d_c, {&motion_prior.content_dim});
  set_dim(dims.d_s, {&motion_prior.style_dim, &bridge.style_dim});
  set_dim(dims.l, {&align.embed_dim, &lm.embed_dim, &bridge.embed_dim});
  set_dim(dims.q_a, {&align.num_queries, &lm.num_prefix});
  motion_prior.dim_psi = corpus.dim_psi;
  align.vocab_size = vocab_size;
  lm.vocab_size = vocab_size;

  train_bridge.no_diffusion = train_bridge.no_diffusion || flags.no_diffusion;
  train_bridge.no_cont_align = train_bridge.no_cont_align || flags.no_cont_align;
  train_bridge.no_aug = train_bridge.no_aug || flags.no_aug;
  bridge.no_diffusion = bridge.no_diffusion || flags.no_diffusion;
  train_lm.joint_lm = train_lm.joint_lm || flags.joint_lm;

  if (motion_prior.feature_dim != align.feature_dim) throw ParameterError("motion_prior and align disagree on d_a");
  if (motion_prior.style_dim != bridge.style_dim) throw ParameterError("motion_prior and bridge disagree on d_s");
  if (align.embed_dim != lm.embed_dim || align.embed_dim != bridge.embed_dim) {
    throw ParameterError("align, lm and bridge disagree on l");
  }
  if (align.num_queries != lm.num_prefix) throw ParameterError("align and lm disagree on q_a");

  corpus.validate();
  motion_prior.validate();
  train_prior.validate();
  align.validate();
  train_align.validate();
  lm.validate();
  train_lm.validate();
  bridge.validate();
  train_bridge.validate();
  AVIT_REQUIRE(schedule.T >= 1, "schedule.T must be >= 1");
  schedule.build();
}

std::uint64_t RunConfig::init_seed(const std::string& module) const { return derive_seed(seed, "init." + module, 0); }

json RunConfig::to_json() const {
  json d = json::object();
  if (dims.d_a) d["d_a"] = *dims.d_a;
  if (dims.d_c) d["d_c"] = *dims.d_c;
  if (dims.d_s) d["d_s"] = *dims.d_s;
  if (dims.l) d["l"] = *dims.l;
  if (dims.q_a) d["q_a"] = *dims.q_a;
  return json{{"seed", seed},
              {"corpus", corpus.to_json()},
              {"corpus_path", corpus_path},
              {"schedule", {{"T", schedule.T}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}}},
              {"motion_prior", motion_prior.to_json()},
              {"train_prior", train_prior.to_json()},
              {"align", align.to_json()},
              {"train_align", train_align.to_json()},
              {"lm", lm.to_json()},
              {"train_lm", train_lm.to_json()},
              {"bridge", bridge.to_json()},
              {"train_bridge", train_bridge.to_json()},
              {"ablation", ablation_to_json(ablation)},
              {"dims", d},
              {"flags",
               {{"no_diffusion", flags.no_diffusion},
                {"no_cont_align", flags.no_cont_align},
                {"no_aug", flags.no_aug},
                {"joint_lm", flags.joint_lm}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  r.get("seed", c.seed).get("corpus_path", c.corpus_path);
  section(r, "corpus", c.corpus, &corpus::CorpusConfig::from_json);
  if (const json* s = r.child("schedule")) {
    StrictReader sr(*s, "schedule");
    sr.get("T", c.schedule.T).get("beta_start", c.schedule.beta_start).get("beta_end", c.schedule.beta_end);
    sr.finish();
  }
  section(r, "motion_prior", c.motion_prior, &motion::MotionPriorConfig::from_json);
  section(r, "train_prior", c.train_prior, &motion::PriorTrainConfig::from_json);
  section(r, "align", c.align, &avi::AlignConfig::from_json);
  section(r, "train_align", c.train_align, &avi::AlignTrainConfig::from_json);
  section(r, "lm", c.lm, &avi::LMConfig::from_json);
  section(r, "train_lm", c.train_lm, &avi::LMTrainConfig::from_json);
  section(r, "bridge", c.bridge, &bridge::BridgeConfig::from_json);
  section(r, "train_bridge", c.train_bridge, &bridge::BridgeTrainConfig::from_json);
  section(r, "ablation", c.ablation, &ablation_from_json);
  if (const json* d = r.child("dims")) {
    StrictReader dr(*d, "dims");
    const std::pair<const char*, std::optional<int>*> slots[] = {
        {"d_a", &c.dims.d_a}, {"d_c", &c.dims.d_c}, {"d_s", &c.dims.d_s}, {"l", &c.dims.l}, {"q_a", &c.dims.q_a}};
    for (const auto& [key, slot] : slots) {
      int v = 0;
      dr.get(key, v);
      if (d->contains(key)) *slot = v;
    }
    dr.finish();
  }
  if (const json* f = r.child("flags")) {
    StrictReader fr(*f, "flags");
    fr.get("no_diffusion", c.flags.no_diffusion).get("no_cont_align", c.flags.no_cont_align);
    fr.get("no_aug", c.flags.no_aug).get("joint_lm", c.flags.joint_lm);
    fr.finish();
  }
  r.finish();
  return c;
}

json run_config_schema() {
  RunConfig defaults;
  defaults.dims.d_a = defaults.dims.d_c = defaults.dims.d_s = defaults.dims.l = defaults.dims.q_a = 1;
  json s = schema_of(defaults.to_json());
  s["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  s["title"] = "avit run configuration";
  return s;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ParameterError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ParameterError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) throw ParameterError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::string text;
    try {
      text = ckpt::read_file(path);
    } catch (const IoError& e) {
      throw ParameterError(e.what());
    }
    j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParameterError("config " + path + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

}  // namespace avit::config

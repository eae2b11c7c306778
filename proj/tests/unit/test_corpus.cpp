#include "avit/checkpoint.hpp"
#include "avit/errors.hpp"
#include "avit/synth_corpus.hpp"

#include "support.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace avit;
using namespace avit::corpus;
using grammar::Emotion;

TEST_SUITE("corpus") {
  TEST_CASE("grammar round trip over random realizations") {
    Rng rng(1);
    for (int i = 0; i < 2000; ++i) {
      const auto e = static_cast<Emotion>(uniform_int(rng, 0, 7));
      const int k = uniform_int(rng, 1, 3);
      const auto text = grammar::generate_text(e, k, rng);
      const auto p = grammar::parse(text);
      REQUIRE_MESSAGE(p.has_value(), text);
      CHECK(p->emotion == e);
      if (e != Emotion::neutral) CHECK(p->intensity == k);
      auto want = grammar::action_set(e);
      std::sort(want.begin(), want.end());
      CHECK(p->actions == want);
    }
  }

  TEST_CASE("canonical text and parse failures") {
    const auto t = grammar::canonical_text(Emotion::angry, 3);
    CHECK(t.find("angry") != std::string::npos);
    CHECK(t.find("furrowed strongly") != std::string::npos);
    CHECK_FALSE(grammar::parse("the weather is nice today.").has_value());
    CHECK_FALSE(grammar::parse("").has_value());
  }

  TEST_CASE("every labeled action is reachable from some emotion") {
    for (const auto& a : grammar::all_actions()) {
      bool found = false;
      for (int e = 0; e < grammar::kNumEmotions; ++e) {
        const auto acts = grammar::action_set(static_cast<Emotion>(e));
        found = found || std::find(acts.begin(), acts.end(), a) != acts.end();
      }
      CHECK_MESSAGE(found, grammar::action_label(a));
    }
    CHECK(grammar::action_set(Emotion::neutral).empty());
  }

  TEST_CASE("tokenize and detokenize") {
    const auto toks = grammar::tokenize("The Speaker sounds happy; lip corners are raised strongly.");
    CHECK(toks.front() == "the");
    CHECK(std::count(toks.begin(), toks.end(), ";") == 1);
    CHECK(toks.back() == ".");
    CHECK(grammar::tokenize(grammar::detokenize(toks)) == toks);
  }

  TEST_CASE("prompt templates match the versioned asset") {
    const auto j = nlohmann::json::parse(ckpt::read_file(std::string(AVIT_ASSET_DIR) + "/prompt_templates.json"));
    CHECK(j.at("version").get<int>() == 1);
    CHECK(j.at("templates").get<std::vector<std::string>>() == grammar::prompt_templates());
    CHECK(grammar::prompt_templates().size() == 10);
  }

  TEST_CASE("vocabulary covers grammar and templates, with stable hash") {
    const auto v = Vocabulary::build();
    CHECK(v.token(Vocabulary::kPad) != v.token(Vocabulary::kBos));
    for (const auto& t : grammar::grammar_tokens()) CHECK(v.find(t).has_value());
    for (const auto& p : grammar::prompt_templates()) CHECK(v.count_unknown(p) == 0);
    CHECK(v.hash() == Vocabulary::build().hash());
    CHECK(Vocabulary::from_json(v.to_json()).hash() == v.hash());
    const auto ids = v.encode("the speaker sounds happy.");
    CHECK(v.decode(ids) == "The speaker sounds happy.");
    CHECK_THROWS_AS(v.encode("the speaker sounds zorgish."), TokenizationError);
    CHECK(v.count_unknown("the speaker sounds zorgish.") == 1);
    CHECK(v.encode("zorgish", true) == std::vector<int>{Vocabulary::kUnk});
  }

  TEST_CASE("split arithmetic: 240 records give 48 test clips") {
    CorpusConfig cfg;
    cfg.n_records = 240;
    const auto c = gen_corpus(cfg);
    CHECK(c.split("test").size() == 48);
    CHECK(c.split("val").size() == 24);
    CHECK(c.split("train").size() == 168);
    std::map<std::pair<int, int>, int> cells;
    for (const auto* r : c.split("test")) ++cells[{static_cast<int>(r->state.emotion), r->state.intensity}];
    CHECK(cells.size() == 24);
    for (const auto& [cell, n] : cells) CHECK(n == 2);
    std::set<std::string> ids;
    for (const auto& r : c.records) ids.insert(r.record_id);
    CHECK(ids.size() == c.records.size());
  }

  TEST_CASE("records are consistent with their latent factors") {
    CorpusConfig cfg;
    cfg.n_records = 48;
    const auto c = gen_corpus(cfg);
    for (const auto& r : c.records) {
      CHECK(r.length() >= cfg.min_frames);
      CHECK(r.length() <= cfg.max_frames);
      CHECK(r.features.rows() == r.length());
      CHECK(r.features.cols() == cfg.feature_dim);
      CHECK(r.coeffs.length() == r.length());
      CHECK(r.coeffs.dim_psi() == cfg.dim_psi);
      const auto p = grammar::parse(r.instruction.text);
      REQUIRE(p.has_value());
      CHECK(p->emotion == r.state.emotion);
      // Pose stays neutral and residual channels beyond the lip pair are idle.
      CHECK(r.coeffs.matrix().leftCols(face::kPoseDim).cwiseAbs().maxCoeff() == 0.0);
      for (int ch = 8; ch < cfg.dim_psi; ++ch) CHECK(r.coeffs.channel(ch).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("emotion offsets shift the semantic channels") {
    CorpusConfig cfg;
    const auto emb = FeatureEmbeddings::make(cfg.embedding_seed, cfg.feature_dim);
    const auto vocab = Vocabulary::build();
    SpeakingState happy{Emotion::happy, 3, {}}, sad{Emotion::sad, 3, {}};
    const auto a = gen_record(5, cfg, emb, vocab, &happy);
    const auto b = gen_record(5, cfg, emb, vocab, &sad);
    CHECK(a.coeffs.channel(face::kLipCornerRaise).mean() > 0.1);
    CHECK(b.coeffs.channel(face::kLipCornerRaise).mean() < -0.1);
    CHECK(a.phonemes == b.phonemes);
  }

  TEST_CASE("phoneme tracks have runs of at least 3 frames") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const auto t = gen_phoneme_track(rng, uniform_int(rng, 10, 100));
      int run = 1;
      for (std::size_t f = 1; f <= t.size(); ++f) {
        if (f < t.size() && t[f] == t[f - 1]) {
          ++run;
        } else {
          CHECK(run >= 3);
          run = 1;
        }
      }
    }
  }

  TEST_CASE("serialization round trip is exact") {
    CorpusConfig cfg;
    cfg.n_records = 30;
    const auto c = gen_corpus(cfg);
    const std::string text = serialize_corpus(c);
    const auto back = parse_corpus(text);
    REQUIRE(back.records.size() == c.records.size());
    for (std::size_t i = 0; i < c.records.size(); ++i) {
      CHECK(back.records[i].record_id == c.records[i].record_id);
      CHECK(back.records[i].split == c.records[i].split);
      CHECK((back.records[i].features - c.records[i].features).norm() == 0.0);
      CHECK((back.records[i].coeffs.matrix() - c.records[i].coeffs.matrix()).norm() == 0.0);
      CHECK(back.records[i].instruction.text == c.records[i].instruction.text);
    }
    CHECK(serialize_corpus(back) == text);
    CHECK(serialize_corpus(gen_corpus(cfg)) == text);
  }

  TEST_CASE("malformed corpora are rejected") {
    CHECK_THROWS_AS(parse_corpus("not json\n"), FormatError);
    CorpusConfig cfg;
    cfg.n_records = 24;
    std::string text = serialize_corpus(gen_corpus(cfg));
    const auto pos = text.find("\"vocab_hash\":\"");
    REQUIRE(pos != std::string::npos);
    text[pos + 14] = text[pos + 14] == 'a' ? 'b' : 'a';
    CHECK_THROWS_AS(parse_corpus(text), FormatError);
  }

  TEST_CASE("config validation") {
    CorpusConfig cfg;
    cfg.min_frames = 10;
    cfg.max_frames = 5;
    CHECK_THROWS_AS(cfg.validate(), ParameterError);
    CHECK_THROWS_AS(CorpusConfig::from_json({{"bogus", 1}}), ParameterError);
    CHECK_THROWS_AS(CorpusConfig::from_json({{"n_records", "many"}}), ParameterError);
    CHECK(CorpusConfig::from_json(CorpusConfig{}.to_json()).to_json() == CorpusConfig{}.to_json());
  }
}

#pragma once

// Miniature models and batches for finite-difference gradient checks.

#include "avit/instruction_bridge.hpp"
#include "avit/trainkit.hpp"

#include <functional>
#include <memory>

namespace avit::testing {

struct MiniWorld {
  corpus::Corpus corpus;
  std::unique_ptr<motion::MotionPrior> prior;
  std::unique_ptr<avi::AlignModel> align;
  std::unique_ptr<bridge::BridgeModel> bridge;
  diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::linear(10, 1e-3, 0.3);

  MiniWorld() {
    corpus::CorpusConfig cc;
    cc.n_records = 24;
    cc.min_frames = 12;
    cc.max_frames = 16;
    cc.feature_dim = 6;
    cc.dim_psi = 8;
    cc.template_vertices = 400;
    corpus = corpus::gen_corpus(cc);

    motion::MotionPriorConfig mc;
    mc.feature_dim = 6;
    mc.content_dim = 4;
    mc.style_dim = 3;
    mc.dim_psi = 8;
    mc.kernel = 3;
    mc.width = 4;
    mc.heads = 2;
    mc.ff_hidden = 6;
    mc.style_layers = 1;
    mc.generator_layers = 1;
    mc.num_refs = 4;
    prior = std::make_unique<motion::MotionPrior>(mc, 1);

    avi::AlignConfig ac;
    ac.feature_dim = 6;
    ac.embed_dim = 4;
    ac.num_queries = 2;
    ac.heads = 2;
    ac.ff_hidden = 6;
    ac.qformer_layers = 1;
    ac.text_layers = 1;
    ac.max_text_len = 40;
    ac.vocab_size = corpus.vocab.size();
    align = std::make_unique<avi::AlignModel>(ac, 2);

    bridge::BridgeConfig bc;
    bc.embed_dim = 4;
    bc.style_dim = 3;
    bc.hidden = 6;
    bc.prior_width = 4;
    bc.prior_heads = 2;
    bc.prior_layers = 1;
    bc.prior_ff = 6;
    bridge = std::make_unique<bridge::BridgeModel>(bc, schedule, 3);
  }

  std::vector<const corpus::CorpusRecord*> records(int n) const {
    auto train = corpus.split("train");
    train.resize(static_cast<std::size_t>(n));
    return train;
  }

  std::function<Var()> prior_loss() const {
    motion::PriorTrainConfig pc;
    pc.window_min = 4;
    pc.window_max = 6;
    Rng rng(5);
    auto batch = std::make_shared<motion::PriorBatch>(
        motion::sample_prior_batch(records(6), corpus, pc, prior->config().num_refs, 3, true, rng));
    const auto* p = prior.get();
    return [p, batch] { return motion::prior_batch_loss(*p, *batch, 0.5); };
  }

  std::function<Var()> a2i_loss() const {
    auto batch = std::make_shared<avi::AlignBatch>(avi::make_align_batch(records(3), corpus.vocab, false, nullptr));
    const auto* a = align.get();
    return [a, batch] { return avi::align_batch_loss(*a, *batch, 0.5, false); };
  }

  // Frozen-encoder inputs for the bridge losses.
  Mat instr_batch(int n) const {
    Rng rng(6);
    return init::normal(rng, n, 4, 1.0);
  }
  Mat z_batch(int n) const {
    Rng rng(7);
    return init::normal(rng, n, 3, 1.0);
  }

  std::function<Var()> i2s_loss() const {
    const Mat instr = instr_batch(3), z = z_batch(3);
    const auto* b = bridge.get();
    return [b, instr, z] { return bridge::contrastive_i2s_loss(b->align(ad::constant(instr)), ad::constant(z), b->logit_scale()); };
  }

  std::function<Var()> diffusion_loss() const {
    const Mat instr = instr_batch(3), z = z_batch(3);
    Rng rng(8);
    auto nb = std::make_shared<diffusion::NoisedBatch>(diffusion::noise_batch(z, rng, schedule));
    const auto* b = bridge.get();
    return [b, instr, z, nb] {
      diffusion::VarDenoiser d = [b](const Mat& x, const std::vector<int>& t, const Var& c) { return b->denoise(x, t, c); };
      return diffusion::diffusion_loss(d, *nb, z, b->align(ad::constant(instr)));
    };
  }
};

}  // namespace avit::testing

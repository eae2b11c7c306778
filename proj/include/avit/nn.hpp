#pragma once

// Small neural building blocks over the autograd engine. Each block registers
// its tensors in a ParamSet under a name prefix and keeps handles to them.

#include "avit/autograd.hpp"
#include "avit/trainkit.hpp"

#include <string>
#include <vector>

namespace avit::nn {

using ad::Segment;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, undefined when constructed without bias

  Linear() = default;
  Linear(ParamSet& params, const std::string& name, int in, int out, Rng& rng, bool with_bias = true);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  LayerNorm(ParamSet& params, const std::string& name, int width);
  Var operator()(const Var& x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamSet& params, const std::string& name, int width, int heads, Rng& rng);
  Var operator()(const Var& query_in, const Var& key_value_in, const std::vector<Segment>& q_segments,
                 const std::vector<Segment>& k_segments, bool causal) const;
};

struct FeedForward {
  Linear up, down;

  FeedForward() = default;
  FeedForward(ParamSet& params, const std::string& name, int width, int hidden, Rng& rng);
  Var operator()(const Var& x) const;
};

/// Pre-norm self-attention + feed-forward residual block.
struct TransformerLayer {
  LayerNorm ln_attn, ln_ff;
  MultiHeadAttention attn;
  FeedForward ff;

  TransformerLayer() = default;
  TransformerLayer(ParamSet& params, const std::string& name, int width, int heads, int hidden, Rng& rng);
  Var operator()(const Var& x, const std::vector<Segment>& segments, bool causal) const;
};

/// Query block: self-attention among queries, cross-attention into a
/// context sequence, then feed-forward. All pre-norm residual.
struct CrossAttentionLayer {
  LayerNorm ln_self, ln_cross, ln_context, ln_ff;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ff;

  CrossAttentionLayer() = default;
  CrossAttentionLayer(ParamSet& params, const std::string& name, int width, int heads, int hidden, Rng& rng);
  Var operator()(const Var& queries, const Var& context, const std::vector<Segment>& q_segments,
                 const std::vector<Segment>& c_segments) const;
};

/// Standard sin/cos embedding of an integer position or timestep.
Mat sinusoidal_embedding(const std::vector<int>& positions, int width);

}  // namespace avit::nn

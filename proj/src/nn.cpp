#include "avit/nn.hpp"

#include <cmath>

namespace avit::nn {

Linear::Linear(ParamSet& params, const std::string& name, int in, int out, Rng& rng, bool with_bias) {
  weight = params.add(name + ".w", init::xavier(rng, in, out));
  if (with_bias) bias = params.add(name + ".b", Mat::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_row(y, bias) : y;
}

LayerNorm::LayerNorm(ParamSet& params, const std::string& name, int width) {
  gamma = params.add(name + ".g", Mat::Ones(1, width));
  beta = params.add(name + ".b", Mat::Zero(1, width));
}

Var LayerNorm::operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta); }

MultiHeadAttention::MultiHeadAttention(ParamSet& params, const std::string& name, int width, int n_heads, Rng& rng)
    : q(params, name + ".q", width, width, rng),
      k(params, name + ".k", width, width, rng),
      v(params, name + ".v", width, width, rng),
      o(params, name + ".o", width, width, rng),
      heads(n_heads) {}

Var MultiHeadAttention::operator()(const Var& query_in, const Var& key_value_in,
                                   const std::vector<Segment>& q_segments,
                                   const std::vector<Segment>& k_segments, bool causal) const {
  Var a = ad::attention(q(query_in), k(key_value_in), v(key_value_in), heads, q_segments, k_segments, causal);
  return o(a);
}

FeedForward::FeedForward(ParamSet& params, const std::string& name, int width, int hidden, Rng& rng)
    : up(params, name + ".up", width, hidden, rng), down(params, name + ".down", hidden, width, rng) {}

Var FeedForward::operator()(const Var& x) const { return down(ad::gelu(up(x))); }

TransformerLayer::TransformerLayer(ParamSet& params, const std::string& name, int width, int heads, int hidden,
                                   Rng& rng)
    : ln_attn(params, name + ".ln1", width),
      ln_ff(params, name + ".ln2", width),
      attn(params, name + ".attn", width, heads, rng),
      ff(params, name + ".ff", width, hidden, rng) {}

Var TransformerLayer::operator()(const Var& x, const std::vector<Segment>& segments, bool causal) const {
  Var h = ln_attn(x);
  Var y = ad::add(x, attn(h, h, segments, segments, causal));
  return ad::add(y, ff(ln_ff(y)));
}

CrossAttentionLayer::CrossAttentionLayer(ParamSet& params, const std::string& name, int width, int heads,
                                         int hidden, Rng& rng)
    : ln_self(params, name + ".ln_self", width),
      ln_cross(params, name + ".ln_cross", width),
      ln_context(params, name + ".ln_ctx", width),
      ln_ff(params, name + ".ln_ff", width),
      self_attn(params, name + ".self", width, heads, rng),
      cross_attn(params, name + ".cross", width, heads, rng),
      ff(params, name + ".ff", width, hidden, rng) {}

Var CrossAttentionLayer::operator()(const Var& queries, const Var& context, const std::vector<Segment>& q_segments,
                                    const std::vector<Segment>& c_segments) const {
  Var h = ln_self(queries);
  Var x = ad::add(queries, self_attn(h, h, q_segments, q_segments, false));
  Var ctx = ln_context(context);
  x = ad::add(x, cross_attn(ln_cross(x), ctx, q_segments, c_segments, false));
  return ad::add(x, ff(ln_ff(x)));
}

Mat sinusoidal_embedding(const std::vector<int>& positions, int width) {
  Mat out(static_cast<Eigen::Index>(positions.size()), width);
  const int half = width / 2;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
      out(static_cast<Eigen::Index>(r), i) = std::sin(positions[r] * freq);
      out(static_cast<Eigen::Index>(r), half + i) = std::cos(positions[r] * freq);
    }
    if (width % 2) out(static_cast<Eigen::Index>(r), width - 1) = 0.0;
  }
  return out;
}

}  // namespace avit::nn

#include "avit/diffusion.hpp"

#include "avit/errors.hpp"

#include <cmath>

namespace avit::diffusion {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw ParameterError("schedule needs at least one step");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end)) {
    throw ParameterError("schedule betas must satisfy 0 < start <= end < 1");
  }
  std::vector<double> b(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    b[static_cast<std::size_t>(t)] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
  }
  return from_betas(b);
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw ParameterError("schedule needs at least one step");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.beta.assign(betas.size() + 1, 0.0);
  s.alpha.assign(betas.size() + 1, 1.0);
  s.alpha_bar.assign(betas.size() + 1, 1.0);
  for (std::size_t t = 1; t <= betas.size(); ++t) {
    const double b = betas[t - 1];
    if (!(b > 0 && b < 1)) throw ParameterError("beta_t must lie in (0, 1)");
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

void NoiseSchedule::check_t(int t, int lo) const {
  if (t < lo || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside schedule range");
}

nlohmann::json NoiseSchedule::to_json() const {
  std::vector<double> b(beta.begin() + 1, beta.end());
  return nlohmann::json{{"T", T}, {"beta", b}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  auto s = from_betas(j.at("beta").get<std::vector<double>>());
  if (s.T != j.at("T").get<int>()) throw FormatError("schedule length mismatch");
  return s;
}

Vec forward_step(const Vec& x_prev, int t, const Vec& noise, const NoiseSchedule& s) {
  s.check_t(t, 1);
  if (noise.size() != x_prev.size()) throw ParameterError("noise dimension mismatch");
  const auto i = static_cast<std::size_t>(t);
  return std::sqrt(1.0 - s.beta[i]) * x_prev + std::sqrt(s.beta[i]) * noise;
}

Vec forward_marginal(const Vec& x0, int t, const Vec& noise, const NoiseSchedule& s) {
  s.check_t(t, 0);
  if (noise.size() != x0.size()) throw ParameterError("noise dimension mismatch");
  if (t == 0) return x0;
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

namespace {

struct PosteriorCoeffs {
  double on_x0;
  double on_xt;
};

PosteriorCoeffs posterior(int t, const NoiseSchedule& s) {
  const auto i = static_cast<std::size_t>(t);
  const double ab = s.alpha_bar[i], ab_prev = s.alpha_bar[i - 1];
  return {std::sqrt(ab_prev) * s.beta[i] / (1.0 - ab), std::sqrt(s.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab)};
}

}  // namespace

Vec reverse_step(const Vec& x_t, int t, const Vec& x0_hat, const Vec& noise, const NoiseSchedule& s) {
  s.check_t(t, 1);
  if (x0_hat.size() != x_t.size() || noise.size() != x_t.size()) throw ParameterError("dimension mismatch");
  if (t == 1) return x0_hat;  // alpha_bar_0 = 1: coefficients are exactly (1, 0)
  const auto c = posterior(t, s);
  return c.on_x0 * x0_hat + c.on_xt * x_t + std::sqrt(s.beta[static_cast<std::size_t>(t)]) * noise;
}

NoisedBatch noise_batch(const Mat& x0, Rng& rng, const NoiseSchedule& s) {
  std::vector<int> t(static_cast<std::size_t>(x0.rows()));
  Mat noise(x0.rows(), x0.cols());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    t[static_cast<std::size_t>(r)] = uniform_int(rng, 1, s.T);
    for (Eigen::Index c = 0; c < x0.cols(); ++c) noise(r, c) = normal(rng);
  }
  return noise_batch(x0, t, noise, s);
}

NoisedBatch noise_batch(const Mat& x0, const std::vector<int>& t, const Mat& noise, const NoiseSchedule& s) {
  if (static_cast<Eigen::Index>(t.size()) != x0.rows() || noise.rows() != x0.rows() || noise.cols() != x0.cols()) {
    throw ParameterError("noise batch shape mismatch");
  }
  NoisedBatch b{Mat(x0.rows(), x0.cols()), t, noise};
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    b.x_t.row(r) = forward_marginal(x0.row(r).transpose(), t[static_cast<std::size_t>(r)],
                                    noise.row(r).transpose(), s)
                       .transpose();
  }
  return b;
}

double diffusion_loss(const Denoiser& model, const Mat& x0, const Mat& cond, Rng& rng, const NoiseSchedule& s) {
  if (x0.rows() == 0) throw ParameterError("empty batch");
  const auto b = noise_batch(x0, rng, s);
  const Mat pred = model(b.x_t, b.t, cond);
  if (pred.rows() != x0.rows() || pred.cols() != x0.cols()) throw ParameterError("denoiser output shape mismatch");
  if (!pred.allFinite()) throw NumericError("denoiser produced non-finite output");
  return (x0 - pred).squaredNorm() / static_cast<double>(x0.rows());
}

Var diffusion_loss(const VarDenoiser& model, const NoisedBatch& batch, const Mat& x0, const Var& cond) {
  if (x0.rows() == 0) throw ParameterError("empty batch");
  Var pred = model(batch.x_t, batch.t, cond);
  if (pred.rows() != x0.rows() || pred.cols() != x0.cols()) throw ParameterError("denoiser output shape mismatch");
  if (!pred.value().allFinite()) throw NumericError("denoiser produced non-finite output");
  // mse averages over every entry; rescale to a per-row squared norm.
  return ad::scale(ad::mse(pred, ad::constant(x0)), static_cast<double>(x0.cols()));
}

Var diffusion_loss(const VarDenoiser& model, const Mat& x0, const Var& cond, Rng& rng, const NoiseSchedule& s) {
  return diffusion_loss(model, noise_batch(x0, rng, s), x0, cond);
}

Mat sample(const Denoiser& model, const Mat& cond, int dim, const NoiseSchedule& s, std::vector<Rng>& rngs,
           const SampleOptions& options) {
  if (dim < 1) throw ParameterError("sample dimension must be positive");
  const Eigen::Index n = cond.rows();
  if (static_cast<Eigen::Index>(rngs.size()) != n) throw ParameterError("one rng per sample row required");
  auto draw = [&](Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = options.zero_noise ? 0.0 : normal(rngs[static_cast<std::size_t>(r)]);
      }
    }
  };
  Mat x(n, dim);
  std::vector<int> ts(static_cast<std::size_t>(n), s.T);
  draw(x);
  Mat noise(x.rows(), x.cols());
  for (int t = s.T; t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const Mat x0_hat = model(x, ts, cond);
    if (!x0_hat.allFinite()) throw NumericError("denoiser produced non-finite output during sampling");
    if (t > 1) draw(noise);
    for (Eigen::Index r = 0; r < n; ++r) {
      x.row(r) = reverse_step(x.row(r).transpose(), t, x0_hat.row(r).transpose(),
                              t > 1 ? Vec(noise.row(r).transpose()) : Vec::Zero(x.cols()), s)
                     .transpose();
    }
  }
  return x;
}

Vec sample(const Denoiser& model, const Vec& cond, int dim, const NoiseSchedule& s, Rng& rng,
           const SampleOptions& options) {
  std::vector<Rng> rngs{rng};
  Mat c = cond.transpose();
  Mat out = sample(model, c, dim, s, rngs, options);
  rng = rngs[0];
  return out.row(0).transpose();
}

}  // namespace avit::diffusion

#pragma once

// DDPM noise schedule, forward process and x0-parameterized reverse sampler.
// Timesteps are 1-based; index 0 of alpha_bar holds the convention 1.

#include "avit/autograd.hpp"
#include "avit/rng.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <vector>

namespace avit::diffusion {

using ad::Mat;
using ad::Var;
using Vec = Eigen::VectorXd;

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // size T+1, beta[0] unused (0)
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product, alpha_bar[0] = 1

  /// Linearly spaced beta_1..beta_T.
  static NoiseSchedule linear(int T = 100, double beta_start = 1e-4, double beta_end = 0.1);
  static NoiseSchedule from_betas(const std::vector<double>& betas);

  void check_t(int t, int lo) const;
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

/// sqrt(1 - beta_t) x_prev + sqrt(beta_t) noise, for 1 <= t <= T.
Vec forward_step(const Vec& x_prev, int t, const Vec& noise, const NoiseSchedule& s);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise, for 0 <= t <= T.
Vec forward_marginal(const Vec& x0, int t, const Vec& noise, const NoiseSchedule& s);

/// Posterior mean given the predicted clean sample, plus sqrt(beta_t) noise when t > 1.
Vec reverse_step(const Vec& x_t, int t, const Vec& x0_hat, const Vec& noise, const NoiseSchedule& s);

/// Batched denoiser: row i of x_t is at timestep t[i] with condition row i of cond.
using Denoiser = std::function<Mat(const Mat& x_t, const std::vector<int>& t, const Mat& cond)>;
using VarDenoiser = std::function<Var(const Mat& x_t, const std::vector<int>& t, const Var& cond)>;

struct NoisedBatch {
  Mat x_t;
  std::vector<int> t;
  Mat noise;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) per row, then applies the marginal.
NoisedBatch noise_batch(const Mat& x0, Rng& rng, const NoiseSchedule& s);
/// Same, with given timesteps and noise.
NoisedBatch noise_batch(const Mat& x0, const std::vector<int>& t, const Mat& noise, const NoiseSchedule& s);

/// Mean over rows of ||x0 - model(x_t, t, c)||^2.
double diffusion_loss(const Denoiser& model, const Mat& x0, const Mat& cond, Rng& rng, const NoiseSchedule& s);
Var diffusion_loss(const VarDenoiser& model, const Mat& x0, const Var& cond, Rng& rng, const NoiseSchedule& s);
Var diffusion_loss(const VarDenoiser& model, const NoisedBatch& batch, const Mat& x0, const Var& cond);

struct SampleOptions {
  bool zero_noise = false;
};

/// Ancestral sampling from x_T ~ N(0, I). Row i uses rngs[i] for all of its noise.
Mat sample(const Denoiser& model, const Mat& cond, int dim, const NoiseSchedule& s, std::vector<Rng>& rngs,
           const SampleOptions& options = {});
Vec sample(const Denoiser& model, const Vec& cond, int dim, const NoiseSchedule& s, Rng& rng,
           const SampleOptions& options = {});

}  // namespace avit::diffusion

#include "avit/diffusion.hpp"
#include "avit/errors.hpp"

#include <doctest.h>

#include <cmath>

using namespace avit;
using namespace avit::diffusion;

TEST_SUITE("diffusion") {
  TEST_CASE("default schedule properties") {
    const auto s = NoiseSchedule::linear();
    REQUIRE(s.T == 100);
    CHECK(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= s.T; ++t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.alpha_bar[s.T] < 0.01);
    CHECK(s.beta[1] == doctest::Approx(1e-4));
    CHECK(s.beta[100] == doctest::Approx(0.1));
    // Independent product of (1 - beta_t).
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) prod *= 1.0 - (1e-4 + (0.1 - 1e-4) * (t - 1) / 99.0);
    CHECK(s.alpha_bar[100] == doctest::Approx(prod).epsilon(1e-12));
  }

  TEST_CASE("invalid schedules") {
    CHECK_THROWS_AS(NoiseSchedule::linear(0), ParameterError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.2, 0.1), ParameterError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({0.1, 1.0}), ParameterError);
    const auto s = NoiseSchedule::linear(10, 1e-3, 0.2);
    CHECK_THROWS_AS(s.check_t(11, 1), ParameterError);
    CHECK_THROWS_AS(s.check_t(0, 1), ParameterError);
  }

  TEST_CASE("schedule json round trip") {
    const auto s = NoiseSchedule::linear(20, 1e-3, 0.2);
    const auto back = NoiseSchedule::from_json(s.to_json());
    CHECK(back.T == 20);
    for (int t = 0; t <= 20; ++t) CHECK(back.alpha_bar[t] == s.alpha_bar[t]);
  }

  TEST_CASE("marginal matches iterated forward steps") {
    const auto s = NoiseSchedule::linear(20, 1e-3, 0.2);
    const int n = 10000, t = 15;
    Vec x0(2);
    x0 << 1.5, -0.5;
    Rng rng(7);
    Eigen::MatrixXd it(n, 2), mg(n, 2);
    for (int i = 0; i < n; ++i) {
      Vec x = x0;
      for (int k = 1; k <= t; ++k) x = forward_step(x, k, Vec::NullaryExpr(2, [&] { return normal(rng); }), s);
      it.row(i) = x.transpose();
      mg.row(i) = forward_marginal(x0, t, Vec::NullaryExpr(2, [&] { return normal(rng); }), s).transpose();
    }
    const double var = 1.0 - s.alpha_bar[t];
    const Eigen::RowVector2d m_it = it.colwise().mean(), m_mg = mg.colwise().mean();
    const double se_mean = std::sqrt(2.0 * var / n);
    for (int d = 0; d < 2; ++d) {
      CHECK(std::abs(m_it[d] - m_mg[d]) < 3.0 * se_mean);
      CHECK(std::abs(m_mg[d] - std::sqrt(s.alpha_bar[t]) * x0[d]) < 3.0 * std::sqrt(var / n));
    }
    const Eigen::MatrixXd c_it = (it.rowwise() - m_it).transpose() * (it.rowwise() - m_it) / (n - 1);
    const Eigen::MatrixXd c_mg = (mg.rowwise() - m_mg).transpose() * (mg.rowwise() - m_mg) / (n - 1);
    // Var of a sample variance is 2 sigma^4 / (n-1); off-diagonals sigma^4 / (n-1).
    const double se_var = std::sqrt(2.0 * 2.0 * var * var / (n - 1));
    const double se_cov = std::sqrt(2.0 * var * var / (n - 1));
    CHECK(std::abs(c_it(0, 0) - c_mg(0, 0)) < 3.0 * se_var);
    CHECK(std::abs(c_it(1, 1) - c_mg(1, 1)) < 3.0 * se_var);
    CHECK(std::abs(c_it(0, 1) - c_mg(0, 1)) < 3.0 * se_cov);
  }

  TEST_CASE("marginal at t=0 is the clean sample") {
    const auto s = NoiseSchedule::linear();
    Vec x0 = Vec::LinSpaced(4, -1, 1);
    CHECK((forward_marginal(x0, 0, Vec::Ones(4), s) - x0).norm() == 0.0);
  }

  TEST_CASE("reverse step matches the posterior mean") {
    const auto s = NoiseSchedule::linear(10, 1e-3, 0.2);
    Vec xt(2), x0(2), z(2);
    xt << 0.3, -1.0;
    x0 << 1.0, 2.0;
    z << 0.5, -0.25;
    const int t = 6;
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1], b = s.beta[t], a = 1.0 - b;
    const Vec mean = (std::sqrt(abp) * b / (1.0 - ab)) * x0 + (std::sqrt(a) * (1.0 - abp) / (1.0 - ab)) * xt;
    CHECK((reverse_step(xt, t, x0, z, s) - (mean + std::sqrt(b) * z)).norm() < 1e-12);
    CHECK((reverse_step(xt, 1, x0, z, s) - x0).norm() == 0.0);
  }

  TEST_CASE("zero-noise sampling with a constant stub returns the constant exactly") {
    const auto s = NoiseSchedule::linear();
    Mat k(3, 2);
    k << 0.25, -1.5, 3.0, 0.125, -0.7, 2.2;
    Denoiser stub = [&](const Mat& x, const std::vector<int>&, const Mat&) {
      REQUIRE(x.rows() == 3);
      return Mat(k);
    };
    std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
    const Mat out = sample(stub, Mat::Zero(3, 4), 2, s, rngs, SampleOptions{true});
    CHECK((out - k).cwiseAbs().maxCoeff() == 0.0);
    // With noise the final step still returns the prediction.
    std::vector<Rng> rngs2{Rng(4), Rng(5), Rng(6)};
    CHECK((sample(stub, Mat::Zero(3, 4), 2, s, rngs2) - k).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("per-row rngs make rows independent of batch composition") {
    const auto s = NoiseSchedule::linear(20, 1e-3, 0.2);
    Denoiser shrink = [](const Mat& x, const std::vector<int>&, const Mat& c) { return Mat(0.5 * x + c); };
    Mat cond(2, 2);
    cond << 1.0, 0.0, 0.0, -1.0;
    std::vector<Rng> both{Rng(11), Rng(12)};
    const Mat pair = sample(shrink, cond, 2, s, both);
    Rng one(12);
    const Vec single = sample(shrink, Vec(cond.row(1).transpose()), 2, s, one);
    CHECK((pair.row(1).transpose() - single).norm() < 1e-12);
  }

  TEST_CASE("diffusion loss against a hand computation") {
    const auto s = NoiseSchedule::linear(10, 1e-3, 0.2);
    Mat x0(2, 2), noise(2, 2);
    x0 << 1.0, 0.0, 0.0, 2.0;
    noise << 0.5, 0.5, -1.0, 0.0;
    const auto nb = noise_batch(x0, {3, 7}, noise, s);
    CHECK(nb.x_t(0, 0) == doctest::Approx(std::sqrt(s.alpha_bar[3]) + std::sqrt(1 - s.alpha_bar[3]) * 0.5));
    // Model predicting zeros: loss = mean of squared row norms = (1 + 4) / 2.
    VarDenoiser zero = [](const Mat& x, const std::vector<int>&, const Var&) { return ad::constant(Mat::Zero(x.rows(), x.cols())); };
    CHECK(diffusion_loss(zero, nb, x0, ad::constant(Mat::Zero(2, 1))).item() == doctest::Approx(2.5));
  }
}

#include "avit/errors.hpp"
#include "avit/instruction_bridge.hpp"

#include "mini.hpp"

#include <doctest.h>

#include <cmath>

using namespace avit;

namespace {

Mat mat2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

double row_ce(double pos, double neg) { return -std::log(std::exp(pos) / (std::exp(pos) + std::exp(neg))); }

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("audio-to-instruction InfoNCE on a 2x2 similarity") {
    const Var sim = ad::constant(mat2(0.9, 0.1, 0.2, 0.8));
    const double want = 0.5 * (row_ce(0.9, 0.1) + row_ce(0.8, 0.2));
    CHECK(avi::contrastive_a2i_from_similarity(sim, 1.0).item() == doctest::Approx(want).epsilon(1e-12));
    CHECK(want == doctest::Approx(0.40430).epsilon(1e-4));
    // Temperature divides the logits.
    const double want_t = 0.5 * (row_ce(9.0, 1.0) + row_ce(8.0, 2.0));
    CHECK(avi::contrastive_a2i_from_similarity(sim, 0.1).item() == doctest::Approx(want_t).epsilon(1e-12));
    // Symmetric variant averages in the column direction.
    const double cols = 0.5 * (row_ce(0.9, 0.2) + row_ce(0.8, 0.1));
    CHECK(avi::contrastive_a2i_from_similarity(sim, 1.0, true).item() ==
          doctest::Approx(0.5 * (want + cols)).epsilon(1e-12));
  }

  TEST_CASE("InfoNCE edge cases") {
    CHECK(avi::contrastive_a2i_from_similarity(ad::constant(Mat::Constant(2, 2, 0.3)), 1.0).item() ==
          doctest::Approx(std::log(2.0)));
    CHECK(avi::contrastive_a2i_from_similarity(ad::constant(Mat::Constant(1, 1, 0.7)), 0.1).item() == 0.0);
    Eigen::VectorXd a(3), z = Eigen::VectorXd::Zero(3);
    a << 1.0, 2.0, 2.0;
    CHECK(avi::cosine_similarity(a, a) == doctest::Approx(1.0));
    CHECK(avi::cosine_similarity(a, -a) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(avi::cosine_similarity(a, z), NumericError);
  }

  TEST_CASE("instruction-to-style symmetric loss") {
    const Mat s = mat2(0.6, -0.2, 0.1, 0.4);
    // logit_scale 0 -> multiplier exp(0) = 1.
    const double rows = 0.5 * (row_ce(0.6, -0.2) + row_ce(0.4, 0.1));
    const double cols = 0.5 * (row_ce(0.6, 0.1) + row_ce(0.4, -0.2));
    const Var zero = ad::constant(Mat::Zero(1, 1));
    CHECK(bridge::contrastive_i2s_from_similarity(ad::constant(s), zero).item() ==
          doctest::Approx(0.5 * (rows + cols)).epsilon(1e-12));
    // Scale exp(log 2) = 2.
    const Var two = ad::constant(Mat::Constant(1, 1, std::log(2.0)));
    const double rows2 = 0.5 * (row_ce(1.2, -0.4) + row_ce(0.8, 0.2));
    const double cols2 = 0.5 * (row_ce(1.2, 0.2) + row_ce(0.8, -0.4));
    CHECK(bridge::contrastive_i2s_from_similarity(ad::constant(s), two).item() ==
          doctest::Approx(0.5 * (rows2 + cols2)).epsilon(1e-12));
    CHECK_THROWS_AS(bridge::contrastive_i2s_from_similarity(ad::constant(Mat::Ones(1, 1)), zero), ParameterError);
  }

  TEST_CASE("combined bridge objective") {
    CHECK(bridge::kDefaultLambda == 30.0);
    CHECK(bridge::combine_loss(0.5, 0.1) == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(bridge::combine_loss(0.5, 0.1, 0.0) == 0.5);
    const Var v = bridge::combine_loss(ad::constant(Mat::Constant(1, 1, 0.5)), ad::constant(Mat::Constant(1, 1, 0.1)));
    CHECK(v.item() == doctest::Approx(3.5).epsilon(1e-15));
  }

  TEST_CASE("reconstruction loss includes within-segment velocity") {
    Mat target = Mat::Zero(4, 1);
    Mat pred(4, 1);
    pred << 1.0, 1.0, 0.0, 2.0;
    // Segments {0,2} and {2,2}: velocities pred (0), (2); target zeros.
    const Var l = motion::reconstruction_loss(ad::constant(pred), target, {{0, 2}, {2, 2}}, 0.5);
    const double mse = (1 + 1 + 0 + 4) / 4.0, vel = (0 + 4) / 2.0;
    CHECK(l.item() == doctest::Approx(mse + 0.5 * vel));
  }

  TEST_CASE("gradients of the four training losses on miniature models") {
    testing::MiniWorld w;
    GradCheckOptions opt{1e-5, 200, 3};
    SUBCASE("motion prior") { CHECK(grad_check(w.prior_loss(), w.prior->params(), opt) < 1e-5); }
    SUBCASE("audio-instruction alignment") {
      CHECK(grad_check(w.a2i_loss(), w.align->params(), opt) < 1e-5);
    }
    SUBCASE("instruction-style alignment") {
      CHECK(grad_check(w.i2s_loss(), w.bridge->params(), opt) < 1e-5);
    }
    SUBCASE("diffusion") {
      CHECK(grad_check(w.diffusion_loss(), w.bridge->params(), opt) < 1e-5);
    }
  }
}

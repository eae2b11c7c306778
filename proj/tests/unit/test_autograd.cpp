#include "avit/nn.hpp"
#include "avit/trainkit.hpp"

#include <doctest.h>

#include <cmath>

using namespace avit;
using ad::Mat;
using ad::Segment;

namespace {

Mat randn(Rng& rng, int r, int c, double s = 1.0) { return init::normal(rng, r, c, s); }

// Wraps a loss over a few leaf tensors for the library grad check.
double check(const std::vector<Mat>& leaves, const std::function<Var(const std::vector<Var>&)>& f) {
  ParamSet ps;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < leaves.size(); ++i) vars.push_back(ps.add("x" + std::to_string(i), leaves[i]));
  return grad_check([&] { return f(vars); }, ps);
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("grad_check agrees with an analytic gradient and flags a wrong one") {
    Eigen::VectorXd x0(3);
    x0 << 0.3, -1.2, 2.0;
    auto good = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
      if (g) *g = 2.0 * x;
      return x.squaredNorm();
    };
    auto bad = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
      if (g) *g = 3.0 * x;
      return x.squaredNorm();
    };
    CHECK(grad_check(good, x0) < 1e-8);
    CHECK(grad_check(bad, x0) > 0.1);
  }

  TEST_CASE("elementwise and matrix ops") {
    Rng rng(1);
    const Mat a = randn(rng, 3, 4), b = randn(rng, 4, 2), c = randn(rng, 3, 4), row = randn(rng, 1, 4);
    CHECK(check({a, b}, [](auto& v) { return ad::sum(ad::tanh(ad::matmul(v[0], v[1]))); }) < 1e-7);
    CHECK(check({a, c}, [](auto& v) { return ad::mean(ad::mul(ad::sub(v[0], v[1]), ad::add(v[0], v[1]))); }) < 1e-7);
    CHECK(check({a, row}, [](auto& v) { return ad::sum(ad::gelu(ad::add_row(v[0], v[1]))); }) < 1e-7);
    CHECK(check({a}, [](auto& v) { return ad::sum(ad::exp(ad::scale(ad::transpose(v[0]), 0.3))); }) < 1e-7);
    CHECK(check({a, Mat::Constant(1, 1, 0.4)}, [](auto& v) { return ad::sum(ad::scale_by(v[0], v[1])); }) < 1e-7);
    CHECK(check({Mat::Constant(1, 1, 0.7)}, [](auto& v) { return ad::exp_clamped(v[0], 100.0); }) < 1e-7);
  }

  TEST_CASE("normalization and structural ops") {
    Rng rng(2);
    const Mat x = randn(rng, 5, 6), g = randn(rng, 1, 6), b = randn(rng, 1, 6);
    CHECK(check({x, g, b}, [](auto& v) { return ad::sum(ad::mul(ad::layer_norm(v[0], v[1], v[2]), ad::layer_norm(v[0], v[1], v[2]))); }) < 1e-6);
    CHECK(check({x}, [](auto& v) { return ad::sum(ad::slice_cols(ad::row_normalize(v[0]), 1, 3)); }) < 1e-7);
    CHECK(check({x}, [](auto& v) {
            auto parts = ad::concat_rows({ad::slice_rows(v[0], 0, 2), ad::gather_rows(v[0], {4, 4, 1})});
            return ad::sum(ad::tanh(ad::concat_cols({parts, parts})));
          }) < 1e-7);
    const std::vector<Segment> segs{{0, 2}, {2, 3}};
    CHECK(check({x}, [&](auto& v) { return ad::sum(ad::tanh(ad::segment_mean(v[0], segs))); }) < 1e-7);
    CHECK(check({x}, [&](auto& v) { return ad::sum(ad::tanh(ad::unfold1d(v[0], 3, segs))); }) < 1e-7);
  }

  TEST_CASE("losses") {
    Rng rng(3);
    const Mat p = randn(rng, 4, 3), t = randn(rng, 4, 3);
    CHECK(check({p}, [&](auto& v) { return ad::mse(v[0], ad::constant(t)); }) < 1e-7);
    CHECK(check({p}, [](auto& v) { return ad::cross_entropy(v[0], {0, 2, -1, 1}); }) < 1e-7);
  }

  TEST_CASE("mse and cross entropy values") {
    Mat p(1, 2), t(1, 2);
    p << 1.0, 3.0;
    t << 0.0, 1.0;
    CHECK(ad::mse(ad::constant(p), ad::constant(t)).item() == doctest::Approx(2.5));
    Mat logits(2, 2);
    logits << 0.0, 0.0, 1.0, 0.0;
    // Second row is ignored.
    CHECK(ad::cross_entropy(ad::constant(logits), {1, -1}).item() == doctest::Approx(std::log(2.0)));
  }

  TEST_CASE("attention gradients, segmented and causal") {
    Rng rng(4);
    const Mat q = randn(rng, 5, 4), k = randn(rng, 5, 4), v = randn(rng, 5, 4);
    const std::vector<Segment> segs{{0, 3}, {3, 2}};
    for (bool causal : {false, true}) {
      CHECK(check({q, k, v}, [&](auto& x) { return ad::sum(ad::tanh(ad::attention(x[0], x[1], x[2], 2, segs, segs, causal))); }) < 1e-6);
    }
  }

  TEST_CASE("attention respects segments and causality") {
    Rng rng(5);
    Mat q = randn(rng, 4, 2), k = randn(rng, 4, 2), v = randn(rng, 4, 2);
    const std::vector<Segment> segs{{0, 2}, {2, 2}};
    const Mat base = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 1, segs, segs, true).value();
    // Changing the last row of segment 0 leaves its first query and all of segment 1 untouched.
    v.row(1).setConstant(9.0);
    k.row(1).setConstant(-3.0);
    const Mat moved = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 1, segs, segs, true).value();
    CHECK((moved.row(0) - base.row(0)).norm() < 1e-12);
    CHECK((moved.bottomRows(2) - base.bottomRows(2)).norm() < 1e-12);
    CHECK((moved.row(1) - base.row(1)).norm() > 1e-3);
  }

  TEST_CASE("unfold pads by repeating edge rows") {
    Mat x(3, 1);
    x << 1.0, 2.0, 3.0;
    const Mat u = ad::unfold1d(ad::constant(x), 3, {{0, 3}}).value();
    Mat want(3, 3);
    want << 1, 1, 2, 1, 2, 3, 2, 3, 3;
    CHECK((u - want).norm() == 0.0);
  }

  TEST_CASE("transformer layer and cross attention gradients") {
    Rng rng(6);
    ParamSet ps;
    nn::TransformerLayer layer(ps, "t", 4, 2, 8, rng);
    nn::CrossAttentionLayer cross(ps, "c", 4, 2, 8, rng);
    Var x = ps.add("x", randn(rng, 5, 4));
    Var q = ps.add("q", randn(rng, 2, 4));
    const std::vector<Segment> segs{{0, 2}, {2, 3}};
    const std::vector<Segment> qsegs{{0, 1}, {1, 1}};
    auto loss = [&] {
      Var h = layer(x, segs, true);
      return ad::sum(ad::tanh(cross(q, h, qsegs, segs)));
    };
    CHECK(grad_check(loss, ps, {1e-5, 150, 7}) < 1e-6);
  }

  TEST_CASE("adam converges on a quadratic and clipping bounds the norm") {
    ParamSet ps;
    Var w = ps.add("w", Mat::Constant(1, 3, 5.0));
    AdamState st;
    st.config.lr = 0.1;
    for (int i = 0; i < 500; ++i) {
      ps.zero_grad();
      Var l = ad::sum(ad::mul(w, w));
      l.backward();
      adam_step(ps, collect_grads(ps), st);
    }
    CHECK(w.value().norm() < 1e-2);

    GradMap g{{"a", Mat::Constant(1, 2, 3.0)}, {"b", Mat::Constant(1, 2, 4.0)}};
    clip_grad_norm(g, 1.0);
    CHECK(std::sqrt(g["a"].squaredNorm() + g["b"].squaredNorm()) == doctest::Approx(1.0));
  }

  TEST_CASE("param set flat round trip and duplicate names") {
    Rng rng(7);
    ParamSet ps;
    ps.add("a", randn(rng, 2, 2));
    ps.add("b", randn(rng, 1, 3));
    CHECK(ps.numel() == 7);
    Eigen::VectorXd f = ps.flat_values();
    f *= 2.0;
    ps.set_flat_values(f);
    CHECK((ps.flat_values() - f).norm() == 0.0);
    CHECK_THROWS(ps.add("a", randn(rng, 1, 1)));
    CHECK_THROWS(ps.assign("b", randn(rng, 2, 2)));
  }

  TEST_CASE("derived seeds are stable and distinct") {
    CHECK(derive_seed(1, "x", 0) == derive_seed(1, "x", 0));
    CHECK(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
    CHECK(derive_seed(1, "x", 0) != derive_seed(1, "y", 0));
    CHECK(derive_seed(1, "x", 0) != derive_seed(2, "x", 0));
  }
}

#include "avit/face_model.hpp"
#include "avit/errors.hpp"
#include "avit/rng.hpp"

#include <doctest.h>

#include <numbers>
#include <set>

using namespace avit;
using namespace avit::face;

namespace {

const HeadTemplate& tmpl() {
  static const HeadTemplate t = make_synthetic_template(11, 400, 8, 16);
  return t;
}

Eigen::VectorXd randvec(Rng& rng, int n, double s) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng, 0.0, s);
  return v;
}

Mesh forward(const Eigen::VectorXd& beta, const PoseParams& pose, const Eigen::VectorXd& psi) {
  return flame_forward(tmpl(), ShapeParams{beta}, pose, ExpressionParams{psi});
}

}  // namespace

TEST_SUITE("face_model") {
  TEST_CASE("template structure") {
    const auto& t = tmpl();
    CHECK(t.n_vertices() >= 400);
    CHECK(t.dim_psi() == 16);
    CHECK(t.dim_beta() == 8);
    for (const auto& f : t.faces) {
      for (int v : f) CHECK((v >= 0 && v < t.n_vertices()));
    }
    for (const auto& name : region_names()) {
      REQUIRE(t.region_map.count(name) == 1);
      CHECK(!t.region_map.at(name).empty());
    }
    // Regions are disjoint.
    std::set<int> seen;
    std::size_t total = 0;
    for (const auto& [name, idx] : t.region_map) {
      seen.insert(idx.begin(), idx.end());
      total += idx.size();
    }
    CHECK(seen.size() == total);
    CHECK(t.blendshape_semantics.at(kBrowFurrow) == "brow_furrow");
  }

  TEST_CASE("template is deterministic in its seed") {
    const auto a = make_synthetic_template(11, 400, 8, 16);
    const auto b = make_synthetic_template(12, 400, 8, 16);
    CHECK((a.exp_basis - tmpl().exp_basis).norm() == 0.0);
    CHECK((a.exp_basis.leftCols(6) - b.exp_basis.leftCols(6)).norm() == 0.0);
    CHECK((a.exp_basis.rightCols(10) - b.exp_basis.rightCols(10)).norm() > 0.0);
  }

  TEST_CASE("labeled channels move their own region") {
    const auto& t = tmpl();
    const std::pair<int, const char*> owners[] = {{kJawOpen, "lips"},         {kLipCornerRaise, "lip_corners"},
                                                  {kBrowRaise, "brows"},      {kBrowFurrow, "brows"},
                                                  {kEyeWiden, "eyelids"},     {kCheekRaise, "cheeks"}};
    for (const auto& [ch, region] : owners) {
      const Mat field = t.expression_field(ch);
      double inside = 0.0;
      for (int v : t.region_map.at(region)) inside = std::max(inside, field.row(v).norm());
      CHECK(inside == doctest::Approx(1.0));
    }
    // Brow raise lifts brows; furrow lowers them.
    const Mat raise = t.expression_field(kBrowRaise), furrow = t.expression_field(kBrowFurrow);
    double dr = 0, df = 0;
    for (int v : t.region_map.at("brows")) {
      dr += raise(v, 1);
      df += furrow(v, 1);
    }
    CHECK(dr > 0);
    CHECK(df < 0);
  }

  TEST_CASE("blendshape linearity over 1000 random cases") {
    Rng rng(21);
    const Eigen::VectorXd zero_b = Eigen::VectorXd::Zero(8);
    const Mesh base = forward(zero_b, PoseParams{}, Eigen::VectorXd::Zero(16));
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Eigen::VectorXd p1 = randvec(rng, 16, 1.0), p2 = randvec(rng, 16, 1.0), b = randvec(rng, 8, 1.0);
      const double a = uniform(rng, -2.0, 2.0);
      const Mesh m12 = forward(b, PoseParams{}, p1 + a * p2);
      const Mesh m1 = forward(b, PoseParams{}, p1);
      const Mesh m2 = forward(zero_b, PoseParams{}, p2);
      const Mat lhs = m12.vertices - m1.vertices;
      const Mat rhs = a * (m2.vertices - base.vertices);
      worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-9);
  }

  TEST_CASE("global rotation is an isometry over 1000 random cases") {
    Rng rng(22);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Eigen::VectorXd psi = randvec(rng, 16, 0.5), b = randvec(rng, 8, 0.5);
      PoseParams pose;
      const Mesh ref = forward(b, pose, psi);
      pose.global_rot = randvec(rng, 3, 1.0);
      if (pose.global_rot.norm() > 3.0) pose.global_rot *= 3.0 / pose.global_rot.norm();
      pose.translation = randvec(rng, 3, 0.5);
      const Mesh rot = forward(b, pose, psi);
      for (int k = 0; k < 20; ++k) {
        const int u = uniform_int(rng, 0, tmpl().n_vertices() - 1), v = uniform_int(rng, 0, tmpl().n_vertices() - 1);
        const double d0 = (ref.vertices.row(u) - ref.vertices.row(v)).norm();
        const double d1 = (rot.vertices.row(u) - rot.vertices.row(v)).norm();
        worst = std::max(worst, std::abs(d0 - d1));
      }
    }
    CHECK(worst < 1e-7);
  }

  TEST_CASE("jaw rotation only moves jaw vertices over 1000 random cases") {
    Rng rng(23);
    const auto& jaw = tmpl().region_map.at("jaw");
    const std::set<int> jaw_set(jaw.begin(), jaw.end());
    int violations = 0, moved = 0;
    for (int i = 0; i < 1000; ++i) {
      const Eigen::VectorXd psi = randvec(rng, 16, 0.5), b = randvec(rng, 8, 0.5);
      PoseParams pose;
      const Mesh ref = forward(b, pose, psi);
      pose.jaw_rot = randvec(rng, 3, 0.3);
      const Mesh m = forward(b, pose, psi);
      for (int v = 0; v < tmpl().n_vertices(); ++v) {
        const double d = (m.vertices.row(v) - ref.vertices.row(v)).norm();
        if (!jaw_set.count(v) && d != 0.0) ++violations;
        if (jaw_set.count(v) && d > 0.0) ++moved;
      }
    }
    CHECK(violations == 0);
    CHECK(moved > 0);
  }

  TEST_CASE("OBJ round trip over 1000 random meshes") {
    Rng rng(24);
    double worst = 0.0;
    bool faces_ok = true;
    for (int i = 0; i < 1000; ++i) {
      PoseParams pose;
      pose.global_rot = randvec(rng, 3, 0.3);
      pose.translation = randvec(rng, 3, 0.5);
      const Mesh m = forward(randvec(rng, 8, 0.5), pose, randvec(rng, 16, 0.5));
      const Mesh back = parse_obj(export_obj(m));
      REQUIRE(back.vertices.rows() == m.vertices.rows());
      worst = std::max(worst, (back.vertices - m.vertices).cwiseAbs().maxCoeff());
      faces_ok = faces_ok && back.faces == m.faces;
    }
    CHECK(worst <= 1e-6);
    CHECK(faces_ok);
  }

  TEST_CASE("invalid parameters are rejected") {
    CHECK_THROWS_AS(forward(Eigen::VectorXd::Zero(7), PoseParams{}, Eigen::VectorXd::Zero(16)), ParameterError);
    CHECK_THROWS_AS(forward(Eigen::VectorXd::Zero(8), PoseParams{}, Eigen::VectorXd::Zero(15)), ParameterError);
    Eigen::VectorXd bad = Eigen::VectorXd::Zero(16);
    bad[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(forward(Eigen::VectorXd::Zero(8), PoseParams{}, bad), ParameterError);
    PoseParams big;
    big.global_rot = Eigen::Vector3d(4.0, 0.0, 0.0);
    CHECK_THROWS_AS(forward(Eigen::VectorXd::Zero(8), big, Eigen::VectorXd::Zero(16)), ParameterError);
    CHECK_THROWS_AS(parse_obj("v 1 2\n"), FormatError);
    CHECK_THROWS_AS(make_synthetic_template(1, 100, 8, 16), ParameterError);
  }

  TEST_CASE("coefficient sequence accessors") {
    Mat m = Mat::Zero(2, kPoseDim + 16);
    m(1, 3) = 0.2;   // jaw x
    m(1, kPoseDim + kBrowRaise) = 0.7;
    CoeffSequence seq(m, 16);
    CHECK(seq.length() == 2);
    CHECK(seq.pose(1).jaw_rot.x() == doctest::Approx(0.2));
    CHECK(seq.expression(1).psi[kBrowRaise] == doctest::Approx(0.7));
    CHECK(seq.channel(kBrowRaise)[1] == doctest::Approx(0.7));
  }
}

#include "avit/face_model.hpp"

#include "avit/errors.hpp"
#include "avit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <sstream>

namespace avit::face {

namespace {

constexpr double kRx = 0.8;
constexpr double kRy = 1.0;
constexpr double kRz = 0.9;

bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) { return v.allFinite(); }

// Front-facing surface point of the head ellipsoid at screen position (x, y).
Eigen::Vector3d front_point(double x, double y) {
  const double r = 1.0 - (x * x) / (kRx * kRx) - (y * y) / (kRy * kRy);
  return {x, y, kRz * std::sqrt(std::max(0.0, r))};
}

struct RegionSpec {
  const char* name;
  std::vector<std::pair<double, double>> anchors;
};

// Smooth random field: sum of a few Gaussian bumps with random 3-vectors.
Eigen::VectorXd smooth_field(const Mat& verts, Rng& rng) {
  const int bumps = 4;
  Eigen::VectorXd f = Eigen::VectorXd::Zero(verts.rows() * 3);
  for (int b = 0; b < bumps; ++b) {
    const int c = uniform_int(rng, 0, static_cast<int>(verts.rows()) - 1);
    Eigen::Vector3d dir(normal(rng), normal(rng), normal(rng));
    const double width = uniform(rng, 0.3, 0.7);
    for (Eigen::Index v = 0; v < verts.rows(); ++v) {
      const double d2 = (verts.row(v) - verts.row(c)).squaredNorm();
      const double w = std::exp(-d2 / (2 * width * width));
      f.segment<3>(3 * v) += w * dir;
    }
  }
  return f;
}

double max_vertex_norm(const Eigen::VectorXd& field) {
  double m = 0.0;
  for (Eigen::Index v = 0; v < field.size() / 3; ++v) m = std::max(m, field.segment<3>(3 * v).norm());
  return m;
}

}  // namespace

Mat HeadTemplate::expression_field(int channel) const {
  if (channel < 0 || channel >= dim_psi()) throw ParameterError("expression channel out of range");
  Mat out(n_vertices(), 3);
  for (int v = 0; v < n_vertices(); ++v) out.row(v) = exp_basis.block(3 * v, channel, 3, 1).transpose();
  return out;
}

Eigen::VectorXd PoseParams::flat() const {
  Eigen::VectorXd v(kPoseDim);
  v << global_rot, jaw_rot, translation;
  return v;
}

PoseParams PoseParams::from_flat(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() != kPoseDim) throw ParameterError("pose vector must have 9 entries");
  PoseParams p;
  p.global_rot = v.segment<3>(0);
  p.jaw_rot = v.segment<3>(3);
  p.translation = v.segment<3>(6);
  return p;
}

CoeffSequence::CoeffSequence(Mat coeffs, int dim_psi) : coeffs_(std::move(coeffs)), dim_psi_(dim_psi) {
  if (coeffs_.cols() != kPoseDim + dim_psi) throw ParameterError("coefficient width mismatch");
  if (coeffs_.rows() < 1) throw ParameterError("coefficient sequence must have at least one frame");
}

PoseParams CoeffSequence::pose(int frame) const {
  Eigen::VectorXd row = coeffs_.row(frame).head(kPoseDim).transpose();
  return PoseParams::from_flat(row);
}

ExpressionParams CoeffSequence::expression(int frame) const {
  return {coeffs_.row(frame).tail(dim_psi_).transpose()};
}

Eigen::VectorXd CoeffSequence::channel(int psi_channel) const {
  if (psi_channel < 0 || psi_channel >= dim_psi_) throw ParameterError("channel out of range");
  return coeffs_.col(kPoseDim + psi_channel);
}

Eigen::Matrix3d axis_angle_matrix(const Eigen::Vector3d& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-15) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Mesh flame_forward(const HeadTemplate& tmpl, const ShapeParams& beta, const PoseParams& pose,
                   const ExpressionParams& psi) {
  if (beta.beta.size() != tmpl.dim_beta()) throw ParameterError("beta dimension mismatch");
  if (psi.psi.size() != tmpl.dim_psi()) throw ParameterError("psi dimension mismatch");
  if (!all_finite(beta.beta) || !all_finite(psi.psi) || !all_finite(pose.flat())) {
    throw ParameterError("non-finite face parameters");
  }
  if (pose.global_rot.norm() > std::numbers::pi + 1e-12 || pose.jaw_rot.norm() > std::numbers::pi + 1e-12) {
    throw ParameterError("rotation magnitude exceeds pi");
  }
  const int n = tmpl.n_vertices();
  Eigen::VectorXd offsets = tmpl.exp_basis * psi.psi;
  if (tmpl.dim_beta() > 0) offsets += tmpl.id_basis * beta.beta;

  Mat verts = tmpl.base_vertices;
  for (int v = 0; v < n; ++v) verts.row(v) += offsets.segment<3>(3 * v).transpose();

  if (pose.jaw_rot.squaredNorm() > 0.0) {
    const Eigen::Matrix3d rj = axis_angle_matrix(pose.jaw_rot);
    for (int v : tmpl.region_map.at("jaw")) {
      const Eigen::Vector3d p = verts.row(v).transpose();
      verts.row(v) = (rj * (p - tmpl.jaw_pivot) + tmpl.jaw_pivot).transpose();
    }
  }
  if (pose.global_rot.squaredNorm() > 0.0) {
    const Eigen::Matrix3d rg = axis_angle_matrix(pose.global_rot);
    verts = verts * rg.transpose();
  }
  verts.rowwise() += pose.translation.transpose();
  return {std::move(verts), tmpl.faces};
}

HeadTemplate make_synthetic_template(std::uint64_t seed, int n_v, int dim_beta, int dim_psi) {
  if (n_v < 200) throw ParameterError("template needs at least 200 vertices");
  if (dim_psi < kNumLabeledChannels) throw ParameterError("dim_psi must cover the 6 labeled channels");
  if (dim_beta < 0) throw ParameterError("dim_beta must be non-negative");
  Rng rng(derive_seed(seed, "template"));

  int n_lon = static_cast<int>(std::ceil(std::sqrt(2.0 * (n_v - 2))));
  if (n_lon % 2) ++n_lon;
  const int n_lat = static_cast<int>(std::ceil(static_cast<double>(n_v - 2) / n_lon));
  const int total = n_lat * n_lon + 2;

  HeadTemplate t;
  t.base_vertices.resize(total, 3);
  t.base_vertices.row(0) << 0.0, kRy, 0.0;
  for (int i = 0; i < n_lat; ++i) {
    const double phi = std::numbers::pi * (i + 1) / (n_lat + 1);
    for (int j = 0; j < n_lon; ++j) {
      const double lam = 2.0 * std::numbers::pi * j / n_lon;
      t.base_vertices.row(1 + i * n_lon + j) << kRx * std::sin(phi) * std::sin(lam), kRy * std::cos(phi),
          kRz * std::sin(phi) * std::cos(lam);
    }
  }
  t.base_vertices.row(total - 1) << 0.0, -kRy, 0.0;

  auto ring = [&](int i, int j) { return 1 + i * n_lon + ((j % n_lon) + n_lon) % n_lon; };
  for (int j = 0; j < n_lon; ++j) t.faces.push_back({0, ring(0, j + 1), ring(0, j)});
  for (int i = 0; i + 1 < n_lat; ++i) {
    for (int j = 0; j < n_lon; ++j) {
      t.faces.push_back({ring(i, j), ring(i, j + 1), ring(i + 1, j)});
      t.faces.push_back({ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)});
    }
  }
  for (int j = 0; j < n_lon; ++j) t.faces.push_back({total - 1, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)});

  // Regions: each anchor claims its k nearest unclaimed vertices, in order.
  const int k = std::max(2, total / 100);
  const std::vector<RegionSpec> specs = {
      {"lips", {{0.0, -0.42}, {0.0, -0.54}, {0.09, -0.48}, {-0.09, -0.48}}},
      {"lip_corners", {{0.2, -0.48}, {-0.2, -0.48}}},
      {"jaw", {{0.0, -0.78}, {0.25, -0.72}, {-0.25, -0.72}}},
      {"brows", {{0.3, 0.42}, {-0.3, 0.42}}},
      {"eyelids", {{0.3, 0.2}, {-0.3, 0.2}}},
      {"cheeks", {{0.45, -0.15}, {-0.45, -0.15}}},
  };
  std::vector<bool> claimed(static_cast<std::size_t>(total), false);
  for (const auto& spec : specs) {
    std::vector<int> members;
    for (auto [ax, ay] : spec.anchors) {
      const Eigen::Vector3d a = front_point(ax, ay);
      std::vector<std::pair<double, int>> dist;
      for (int v = 0; v < total; ++v) {
        if (!claimed[static_cast<std::size_t>(v)]) {
          dist.emplace_back((t.base_vertices.row(v).transpose() - a).squaredNorm(), v);
        }
      }
      std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
      for (int i = 0; i < k; ++i) {
        claimed[static_cast<std::size_t>(dist[i].second)] = true;
        members.push_back(dist[i].second);
      }
    }
    std::sort(members.begin(), members.end());
    t.region_map[spec.name] = members;
  }
  t.jaw_pivot = Eigen::Vector3d(0.0, -0.25, -0.2);

  t.blendshape_semantics = {{kJawOpen, "jaw_open"},       {kLipCornerRaise, "lip_corner_raise"},
                            {kBrowRaise, "brow_raise"},   {kBrowFurrow, "brow_furrow"},
                            {kEyeWiden, "eye_widen"},     {kCheekRaise, "cheek_raise"}};

  const auto& V = t.base_vertices;
  auto region_mean_y = [&](const std::string& r) {
    double s = 0.0;
    for (int v : t.region_map[r]) s += V(v, 1);
    return s / static_cast<double>(t.region_map[r].size());
  };
  auto sgn = [](double x) { return x >= 0.0 ? 1.0 : -1.0; };

  std::vector<Eigen::VectorXd> labeled(kNumLabeledChannels, Eigen::VectorXd::Zero(3 * total));
  const double lip_center = region_mean_y("lips");
  for (int v : t.region_map["lips"]) {
    const bool lower = V(v, 1) < lip_center;
    labeled[kJawOpen].segment<3>(3 * v) << 0.0, lower ? -1.0 : -0.15, lower ? -0.2 : 0.0;
    labeled[kLipCornerRaise].segment<3>(3 * v) << 0.3 * V(v, 0), 0.25 + std::abs(V(v, 0)), -0.05;
  }
  for (int v : t.region_map["jaw"]) labeled[kJawOpen].segment<3>(3 * v) << 0.0, -0.8, -0.25;
  for (int v : t.region_map["lip_corners"]) {
    labeled[kLipCornerRaise].segment<3>(3 * v) << 0.4 * sgn(V(v, 0)), 1.0, -0.2;
  }
  for (int v : t.region_map["brows"]) {
    labeled[kBrowRaise].segment<3>(3 * v) << 0.0, 1.0, 0.05;
    labeled[kBrowFurrow].segment<3>(3 * v) << -0.6 * sgn(V(v, 0)), -0.5, 0.1;
  }
  const double eye_center = region_mean_y("eyelids");
  for (int v : t.region_map["eyelids"]) {
    labeled[kEyeWiden].segment<3>(3 * v) << 0.0, V(v, 1) >= eye_center ? 1.0 : -0.5, 0.0;
  }
  for (int v : t.region_map["cheeks"]) labeled[kCheekRaise].segment<3>(3 * v) << 0.15 * sgn(V(v, 0)), 0.7, 0.5;

  t.exp_basis = Mat::Zero(3 * total, dim_psi);
  for (int c = 0; c < kNumLabeledChannels; ++c) {
    t.exp_basis.col(c) = labeled[c] / max_vertex_norm(labeled[c]);
  }
  // Residual channels: smooth random fields, Gram-Schmidt against all earlier columns.
  for (int c = kNumLabeledChannels; c < dim_psi; ++c) {
    Eigen::VectorXd f = smooth_field(V, rng);
    for (int p = 0; p < c; ++p) {
      const Eigen::VectorXd col = t.exp_basis.col(p);
      f -= (f.dot(col) / col.squaredNorm()) * col;
    }
    t.exp_basis.col(c) = f / max_vertex_norm(f);
  }
  t.id_basis = Mat::Zero(3 * total, dim_beta);
  for (int c = 0; c < dim_beta; ++c) {
    Eigen::VectorXd f = smooth_field(V, rng);
    t.id_basis.col(c) = 0.1 * f / max_vertex_norm(f);
  }
  return t;
}

std::string export_obj(const Mesh& mesh) {
  std::string out;
  out.reserve(static_cast<std::size_t>(mesh.vertices.rows()) * 40 + mesh.faces.size() * 20);
  char buf[128];
  for (Eigen::Index v = 0; v < mesh.vertices.rows(); ++v) {
    std::snprintf(buf, sizeof(buf), "v %.6f %.6f %.6f\n", mesh.vertices(v, 0), mesh.vertices(v, 1),
                  mesh.vertices(v, 2));
    out += buf;
  }
  for (const auto& f : mesh.faces) {
    std::snprintf(buf, sizeof(buf), "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += buf;
  }
  return out;
}

Mesh parse_obj(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<Eigen::Vector3d> verts;
  Mesh mesh;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Eigen::Vector3d p;
      if (!(ls >> p.x() >> p.y() >> p.z())) throw FormatError("malformed OBJ vertex line");
      verts.push_back(p);
    } else if (tag == "f") {
      Face f;
      if (!(ls >> f[0] >> f[1] >> f[2])) throw FormatError("malformed OBJ face line");
      for (int& i : f) --i;
      mesh.faces.push_back(f);
    }
  }
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  return mesh;
}

Mat region_positions(const Mesh& mesh, const HeadTemplate& tmpl, const std::string& region) {
  auto it = tmpl.region_map.find(region);
  if (it == tmpl.region_map.end()) throw ParameterError("unknown region: " + region);
  Mat out(static_cast<Eigen::Index>(it->second.size()), 3);
  for (std::size_t i = 0; i < it->second.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = mesh.vertices.row(it->second[i]);
  return out;
}

std::vector<int> lower_lip_indices(const HeadTemplate& tmpl) {
  const auto& lips = tmpl.region_map.at("lips");
  double c = 0.0;
  for (int v : lips) c += tmpl.base_vertices(v, 1);
  c /= static_cast<double>(lips.size());
  std::vector<int> out;
  for (int v : lips) {
    if (tmpl.base_vertices(v, 1) < c) out.push_back(v);
  }
  return out;
}

}  // namespace avit::face

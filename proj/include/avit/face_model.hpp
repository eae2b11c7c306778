#pragma once

// Simplified parametric head: (identity, pose, expression) -> triangle mesh,
// with named vertex regions and semantically labeled expression channels.

#include "avit/autograd.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace avit::face {

using ad::Mat;

inline constexpr int kFps = 25;
// global rotation (3) + one jaw joint (3) + translation (3).
inline constexpr int kPoseDim = 9;

// Labeled expression channels; channels >= kNumLabeledChannels are residual.
enum Channel : int {
  kJawOpen = 0,
  kLipCornerRaise = 1,
  kBrowRaise = 2,
  kBrowFurrow = 3,
  kEyeWiden = 4,
  kCheekRaise = 5,
};
inline constexpr int kNumLabeledChannels = 6;

inline const std::array<std::string, 6>& region_names() {
  static const std::array<std::string, 6> names{"lips", "lip_corners", "brows", "cheeks", "jaw", "eyelids"};
  return names;
}

using Face = std::array<int, 3>;

struct HeadTemplate {
  Mat base_vertices;  // n_v x 3
  std::vector<Face> faces;
  // Rows are vertex-major (3 * v + axis); one column per coefficient.
  Mat id_basis;
  Mat exp_basis;
  std::map<std::string, std::vector<int>> region_map;
  std::map<int, std::string> blendshape_semantics;
  Eigen::Vector3d jaw_pivot = Eigen::Vector3d::Zero();

  int n_vertices() const { return static_cast<int>(base_vertices.rows()); }
  int dim_beta() const { return static_cast<int>(id_basis.cols()); }
  int dim_psi() const { return static_cast<int>(exp_basis.cols()); }
  /// Displacement field of one expression channel as an n_v x 3 matrix.
  Mat expression_field(int channel) const;
};

struct ShapeParams {
  Eigen::VectorXd beta;
};

struct PoseParams {
  Eigen::Vector3d global_rot = Eigen::Vector3d::Zero();  // axis-angle, radians
  Eigen::Vector3d jaw_rot = Eigen::Vector3d::Zero();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::VectorXd flat() const;
  static PoseParams from_flat(const Eigen::Ref<const Eigen::VectorXd>& v);
};

struct ExpressionParams {
  Eigen::VectorXd psi;
};

struct Mesh {
  Mat vertices;
  std::vector<Face> faces;
};

/// Per-frame coefficients at 25 FPS. Row layout: [pose (9) | psi (dim_psi)].
class CoeffSequence {
 public:
  CoeffSequence() = default;
  CoeffSequence(Mat coeffs, int dim_psi);

  int length() const { return static_cast<int>(coeffs_.rows()); }
  int dim_psi() const { return dim_psi_; }
  PoseParams pose(int frame) const;
  ExpressionParams expression(int frame) const;
  Eigen::VectorXd channel(int psi_channel) const;
  const Mat& matrix() const { return coeffs_; }

 private:
  Mat coeffs_;
  int dim_psi_ = 0;
};

/// Rotation matrix from an axis-angle vector.
Eigen::Matrix3d axis_angle_matrix(const Eigen::Vector3d& axis_angle);

Mesh flame_forward(const HeadTemplate& tmpl, const ShapeParams& beta, const PoseParams& pose,
                   const ExpressionParams& psi);

/// Deterministic ellipsoid head with carved facial regions. The vertex count
/// is rounded up to complete a latitude/longitude grid.
HeadTemplate make_synthetic_template(std::uint64_t seed, int n_v = 400, int dim_beta = 8, int dim_psi = 16);

std::string export_obj(const Mesh& mesh);
Mesh parse_obj(const std::string& text);

Mat region_positions(const Mesh& mesh, const HeadTemplate& tmpl, const std::string& region);

/// Vertex indices of the lower half of the lips region (below the lip centroid).
std::vector<int> lower_lip_indices(const HeadTemplate& tmpl);

}  // namespace avit::face

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <utility>
#include <vector>

namespace sparsematch {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole calibration. No distortion model.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;
  int width = 1;
  int height = 1;

  Mat3 matrix() const;
  Mat3 inverse_matrix() const;
  /// Throws InvalidArgument unless fx, fy > 0 and the principal point lies
  /// strictly inside the image.
  void validate() const;
};

/// Rigid transform in the world-to-camera convention: x_cam = R * x_world + t.
/// As a relative pose "pose_ab" it maps points expressed in camera A into
/// camera B.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  Pose inverse() const;
  /// this ∘ other: first apply `other`, then `this`.
  Pose compose(const Pose& other) const;
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  void validate(double tol = 1e-9) const;
};

/// Row-major H×W depth raster; 0 marks "no depth".
struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  DepthMap() = default;
  DepthMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0.0) {}

  double at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
  double& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
  /// Depth of the pixel containing (x, y), or 0 when outside the raster.
  double sample(const Vec2& xy) const;
  void validate() const;
};

struct KeypointSet {
  Eigen::MatrixX2d points;  // N×2, (x, y) in pixels
  int width = 0;
  int height = 0;

  KeypointSet() = default;
  KeypointSet(Eigen::MatrixX2d pts, int w, int h) : points(std::move(pts)), width(w), height(h) {}

  int size() const { return static_cast<int>(points.rows()); }
  Vec2 point(int i) const { return points.row(i).transpose(); }
  void validate() const;
};

struct IndexPair {
  int i = 0;
  int j = 0;
  friend bool operator==(const IndexPair&, const IndexPair&) = default;
  friend auto operator<=>(const IndexPair&, const IndexPair&) = default;
};

/// Ground-truth correspondences, one-to-one on both sides.
using GtMatches = std::vector<IndexPair>;

struct Correspondence {
  Vec2 a;
  Vec2 b;
};
using Correspondences = std::vector<Correspondence>;

/// Camera-matrix forms. A fundamental matrix has rank 2 and unit Frobenius
/// norm; an essential matrix additionally has two equal singular values.
using FundamentalMatrix = Mat3;
using EssentialMatrix = Mat3;

Mat3 skew(const Vec3& v);

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
};

Projection project(const Vec3& point_a, const Pose& pose_ab, const Intrinsics& k_b);

/// Back-projects a pixel at the given z-depth into the camera frame.
Vec3 unproject(const Intrinsics& k, const Vec2& pixel, double depth);

struct GtMatchOptions {
  double pixel_tol = 3.0;
  double rel_depth_tol = 0.05;
};

GtMatches generate_gt_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                              const DepthMap& depth_a, const DepthMap& depth_b,
                              const Intrinsics& k_a, const Intrinsics& k_b,
                              const Pose& pose_ab, const GtMatchOptions& opts = {});

struct MatchabilityTargets {
  std::vector<int> a;
  std::vector<int> b;
};

MatchabilityTargets matchability_targets(const GtMatches& gt, int n_a, int n_b);

enum class EpipolarMode {
  SymmetricMax,  // max of the distances in both images
  TargetOnly,    // distance of x_b to the line F * x_a
};

/// Point-to-epipolar-line distances in pixels. A zero-normal line yields +inf
/// for that pair.
std::vector<double> epipolar_errors(const FundamentalMatrix& f, const Correspondences& corrs,
                                    EpipolarMode mode = EpipolarMode::SymmetricMax);

/// Rank-2 projection followed by Frobenius normalisation (sign fixed so the
/// largest-magnitude entry is positive).
FundamentalMatrix normalize_fundamental(const Mat3& f);
/// Frobenius normalisation and the same sign rule, no rank projection. For
/// matrices already rank 2; a pixel-space SVD costs ~1e-8 px of accuracy.
FundamentalMatrix scale_fundamental(const Mat3& f);

FundamentalMatrix fundamental_from_pose(const Pose& pose_ab, const Intrinsics& k_a,
                                        const Intrinsics& k_b);

EssentialMatrix essential_from_fundamental(const FundamentalMatrix& f, const Intrinsics& k_a,
                                           const Intrinsics& k_b);

/// Picks the (R, t) candidate with the most correspondences in front of both
/// cameras. Correspondences are in pixels; translation is returned unit-norm.
Pose decompose_essential(const EssentialMatrix& e, const Correspondences& corrs,
                         const Intrinsics& k_a, const Intrinsics& k_b);

double rotation_angle_deg(const Mat3& r);
double vector_angle_deg(const Vec3& a, const Vec3& b);

struct PoseErrors {
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
  double max() const { return rotation_deg > translation_deg ? rotation_deg : translation_deg; }
};

PoseErrors pose_errors(const Pose& est, const Pose& gt);
/// max(rotation error, translation direction error) in degrees.
double pose_error(const Pose& est, const Pose& gt);

}  // namespace sparsematch

#pragma once

#include "sparsematch/assignment.hpp"
#include "sparsematch/geometry.hpp"

#include <cstdint>

namespace sparsematch {

/// Random two-view scene with known geometry and descriptors.
struct SyntheticSceneConfig {
  int n_points = 256;              // keypoints per image, inliers plus outliers
  double outlier_fraction = 0.3;   // share of keypoints without a partner
  double descriptor_noise = 0.3;   // σ: expected norm of the per-keypoint noise
  /// Norm of a random offset shared by all descriptors of one image.
  double appearance_shift = 2.0;
  int descriptor_dim = 64;
  double embedding_frequency = 1.0;
  std::uint64_t embedding_seed = 1234;

  int width = 640;
  int height = 480;
  double focal = 500.0;
  double min_depth = 4.0;
  double max_depth = 8.0;
  double max_rotation_deg = 15.0;
  double min_baseline = 0.5;
  double max_baseline = 1.5;
  std::uint64_t seed = 0;
  /// Off skips the depth rasters (left 0×0), e.g. for training batches.
  bool rasterize_depth = true;

  int inlier_count() const;
  void validate() const;
};

struct SyntheticPair {
  KeypointSet kps_a;
  KeypointSet kps_b;
  Matrix desc_a;  // N×d, unit rows
  Matrix desc_b;
  GtMatches gt;   // sorted by i
  Pose pose_ab;
  Intrinsics k_a;
  Intrinsics k_b;
  DepthMap depth_a;  // z at keypoint pixels, 0 elsewhere; see rasterize_depth
  DepthMap depth_b;
};

/// Throws DegenerateScene when 100 attempts fail to place enough visible
/// points.
SyntheticPair synth_pair(const SyntheticSceneConfig& cfg);

/// Noise-free descriptor of a camera-A point: unit-normalised random
/// Fourier features, fixed by the embedding seed.
class PointEmbedding {
 public:
  PointEmbedding(int dim, double frequency, std::uint64_t seed);
  Eigen::VectorXd operator()(const Vec3& x) const;

 private:
  Eigen::MatrixX3d omega_;
  Eigen::VectorXd phase_;
};

}  // namespace sparsematch

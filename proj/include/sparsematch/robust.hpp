#pragma once

#include "sparsematch/geometry.hpp"

#include <cstdint>
#include <vector>

namespace sparsematch {

enum class RansacScoring {
  HardThreshold,    // score = inlier count
  MagsacTruncated,  // score = Σ max(0, 1 - r² / (3τ)²)
};

struct RansacConfig {
  double inlier_threshold = 0.5;  // px
  int max_iterations = 10000;
  double confidence = 0.9999;
  std::uint64_t seed = 0;
  RansacScoring scoring = RansacScoring::MagsacTruncated;
  /// One least-squares refit on the inliers whenever a new best hypothesis
  /// is found.
  bool local_optimization = true;

  void validate() const;
};

struct EstimationResult {
  Mat3 model = Mat3::Zero();
  std::vector<char> inlier_mask;
  double score = 0.0;
  int iterations_run = 0;

  int inlier_count() const;
};

/// Normalised 8-point algorithm (Hartley conditioning, rank-2 projection,
/// unit Frobenius norm). Throws DegenerateConfiguration when the design
/// matrix has rank below 8, e.g. for a planar scene.
FundamentalMatrix eight_point(const Correspondences& corrs);
/// Weighted variant: row k of the design matrix is scaled by weights[k].
FundamentalMatrix eight_point(const Correspondences& corrs, const std::vector<double>& weights);

/// Minimal solver: up to three rank-2 candidates from exactly seven
/// correspondences.
std::vector<FundamentalMatrix> seven_point(const Correspondences& corrs);

/// Normalised DLT, unit Frobenius norm. Maps x_a to x_b.
Mat3 homography_dlt(const Correspondences& corrs);

/// Sampson (first-order geometric) distance in pixels.
double sampson_distance(const FundamentalMatrix& f, const Correspondence& c);

/// Root-mean-square of forward and backward transfer distances in pixels.
double symmetric_transfer_error(const Mat3& h, const Mat3& h_inv, const Correspondence& c);

/// RANSAC over 7-point hypotheses with Sampson residuals and an 8-point
/// refit on the final inlier set. `pair_id` is mixed into the seed so runs
/// over many pairs are independent of scheduling order. `sample_pool`, when
/// non-empty, restricts minimal samples to those indices.
EstimationResult ransac_fundamental(const Correspondences& corrs, const RansacConfig& cfg,
                                    std::uint64_t pair_id = 0,
                                    const std::vector<int>& sample_pool = {});

EstimationResult ransac_homography(const Correspondences& corrs, const RansacConfig& cfg,
                                   std::uint64_t pair_id = 0,
                                   const std::vector<int>& sample_pool = {});

namespace detail {

/// Real roots of c3·x³ + c2·x² + c1·x + c0, ascending. Degenerates
/// gracefully to the quadratic / linear case.
std::vector<double> real_cubic_roots(double c3, double c2, double c1, double c0);

/// Seed for a given (seed, pair) combination.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t pair_id);

}  // namespace detail

}  // namespace sparsematch

#pragma once

#include "sparsematch/assignment.hpp"
#include "sparsematch/dataset.hpp"
#include "sparsematch/geometry.hpp"
#include "sparsematch/matcher.hpp"
#include "sparsematch/robust.hpp"

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace sparsematch {

inline constexpr int kPckMaxThreshold = 20;
inline constexpr double kEvalResolution = 640.0;

/// PCK at integer pixel thresholds 0..20.
using PckCurve = std::array<double, kPckMaxThreshold + 1>;

/// Fraction of errors ≤ t for each integer t. Non-finite errors never count.
PckCurve pck_curve(const std::vector<double>& errors);

/// Maps native pixels of a width×height image to the 640×640 evaluation
/// grid, each axis scaled independently.
Vec2 to_eval_resolution(const Vec2& p, int width, int height);

/// Both images of the pair rescaled to 640×640.
Correspondences to_eval_resolution(const Correspondences& corrs, const ImageRef& a, const ImageRef& b);

/// F-based epipolar PCK of one pair. Fewer than 7 predictions, or a failed
/// estimate, give the all-zero curve. Throws DynamicPairRejected.
PckCurve eval_pair_fmatrix(const PairRecord& record, const Correspondences& predicted, const RansacConfig& ransac);

RansacConfig fmatrix_protocol_ransac();  // τ = 0.25 px, MAGSAC scoring

/// Mean of the curve at thresholds 1..limit.
double maa_at(const PckCurve& curve, int limit = 10);

using MatchFunction =
    std::function<MatchSet(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a, const Matrix& desc_b)>;

inline constexpr std::array<int, 4> kAppendThresholds{5, 10, 15, 20};

struct AppendResult {
  std::vector<double> errors;       // per GT correspondence, 640×640 pixels, +inf when unmatched
  std::array<double, 4> pck{};      // at kAppendThresholds
};

/// Appends the GT A-keypoints (with caller-supplied descriptors) to the
/// detected A-keypoints, matches, and scores each GT keypoint by the
/// distance from its matched B-keypoint to the GT B-location.
AppendResult eval_correspondence_append(const PairRecord& record, const KeypointSet& detected_a,
                                        const Matrix& detected_desc_a, const Matrix& gt_desc_a,
                                        const KeypointSet& kps_b, const Matrix& desc_b, const MatchFunction& match);

/// Normalised area under the recall curve up to each threshold. Errors may
/// be +inf. Throws EmptyInput.
std::vector<double> pose_auc(const std::vector<double>& errors, const std::vector<double>& thresholds = {5.0, 10.0, 20.0});

struct ImcThresholds {
  std::vector<double> rotation_deg;
  std::vector<double> translation_m;
  static ImcThresholds standard();  // ten pairs, 1..10° with 0.2..5 m
};

/// Scene-balanced mean accuracy over threshold pairs. Throws EmptyInput or
/// LengthMismatch.
double imc_maa(const std::vector<double>& rotation_errors_deg, const std::vector<double>& translation_errors_m,
               const std::vector<std::string>& scenes, const ImcThresholds& thresholds = ImcThresholds::standard());

/// Mean distance between the image corners mapped by est_h and by gt_h.
/// Throws SingularHomography.
double homography_corner_error(const Mat3& est_h, const Mat3& gt_h, int width, int height);

std::vector<double> homography_corner_auc(const std::vector<double>& corner_errors,
                                          const std::vector<double>& thresholds = {3.0, 5.0, 10.0});

struct PairEvalRow {
  std::string pair_id;
  std::string group;
  std::string category;
  std::string split;
  PckCurve curve{};
  int predicted = 0;
};

enum class GroupBy { Group, Category, Split };

struct BucketSummary {
  int pairs = 0;
  PckCurve curve{};
  double maa10 = 0.0;
};

struct Aggregate {
  BucketSummary overall;                        // mean over pairs
  std::map<std::string, BucketSummary> buckets;
};

/// Unweighted means of per-pair curves. Throws EmptyInput.
Aggregate aggregate(const std::vector<PairEvalRow>& rows, GroupBy by);

struct SweepPoint {
  int stop_layer = 0;
  int batch_size = 1;
  double pairs_per_second = 0.0;
  double accuracy = 0.0;
  double flops_per_pair = 0.0;
};

struct SweepPair {
  KeypointSet kps_a;
  KeypointSet kps_b;
  Matrix desc_a;
  Matrix desc_b;
};

/// Scores one pair's matches; the mean over pairs is reported.
using AccuracyFunction = std::function<double(std::size_t pair_index, const MatchSet& matches)>;

/// Throughput is the median over `runs` timed passes after one warmup
/// pass. Pairs of a batch are matched concurrently.
std::vector<SweepPoint> pareto_sweep(const std::vector<SweepPair>& pairs, const MatcherWeights<float>& weights,
                                     const MatcherConfig& cfg, const std::vector<int>& stop_layers,
                                     const std::vector<int>& batch_sizes, const AccuracyFunction& accuracy,
                                     int runs = 5);

/// 64-bit FNV-1a hash for per-pair seeds; stable across platforms.
std::uint64_t stable_hash(const std::string& s);

}  // namespace sparsematch

#pragma once

#include "sparsematch/geometry.hpp"
#include "sparsematch/random.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sparsematch {

inline constexpr int kSchemaVersion = 1;

struct ImageRef {
  std::string path;
  int width = 0;
  int height = 0;
};

/// One evaluation pair. Correspondences are native-resolution pixels.
struct PairRecord {
  std::string id;
  ImageRef image_a;
  ImageRef image_b;
  Correspondences gt;
  std::string group;
  std::string category;
  std::string scene;  // defaults to group when empty
  bool dynamic = false;
  std::string split = "test";  // validation | test
  std::optional<Pose> pose_ab;
  std::optional<Intrinsics> intrinsics_a;
  std::optional<Intrinsics> intrinsics_b;
  std::optional<Mat3> homography;  // maps A pixels to B pixels
  /// Tensor container with keypoints_a/b (N×2) and descriptors_a/b (N×d).
  std::string features;
  std::string depth;  // tensor container with depth_a, depth_b

  const std::string& scene_label() const { return scene.empty() ? group : scene; }
  /// Count outside [8, 28] correspondences.
  bool correspondence_count_lint() const;
  void validate() const;
};

nlohmann::json to_json(const PairRecord& r);
PairRecord pair_record_from_json(const nlohmann::json& j);

/// JSON-lines manifest. Errors carry the 1-based line number. Blank lines
/// are skipped.
std::vector<PairRecord> load_pair_manifest(const std::filesystem::path& path);
std::vector<PairRecord> parse_pair_manifest(const std::string& text);
void save_pair_manifest(const std::filesystem::path& path, const std::vector<PairRecord>& records);

struct AnnotatedPoint {
  double xa = 0.0;
  double ya = 0.0;
  double xb = 0.0;
  double yb = 0.0;
  friend bool operator==(const AnnotatedPoint&, const AnnotatedPoint&) = default;
};

struct Annotation {
  std::string pair_id;
  std::vector<ImageRef> images;  // exactly two
  std::vector<AnnotatedPoint> correspondences;
  std::string group;
  std::string category;
  bool dynamic = false;
  std::string split = "test";
  std::string annotator;
  std::string timestamp;
  std::optional<bool> matchable;

  /// Throws InvalidArgument when a point lies outside its image.
  void validate() const;
};

nlohmann::json to_json(const Annotation& a);
Annotation annotation_from_json(const nlohmann::json& j);
Annotation load_annotation(const std::filesystem::path& path);
void save_annotation(const std::filesystem::path& path, const Annotation& a);

struct TrainingPairEntry {
  std::string image_a;
  std::string image_b;
  std::string depth_a;
  std::string depth_b;
  std::optional<Pose> pose_ab;
  std::optional<Intrinsics> intrinsics_a;
  std::optional<Intrinsics> intrinsics_b;
};

struct DatasetManifest {
  std::string name;
  std::string type;  // indoor, outdoor, graphics, mvs, ...
  double weight = 1.0;
  std::vector<TrainingPairEntry> pairs;

  void validate() const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest dataset_manifest_from_json(const nlohmann::json& j);

struct MixtureDraw {
  std::size_t dataset = 0;
  std::size_t pair = 0;
};

/// Picks a dataset with probability weight / Σ weights, then a pair
/// uniformly. Throws EmptyManifest when there is nothing to draw.
MixtureDraw sample_mixture(const std::vector<DatasetManifest>& manifests, Rng& rng);

struct TriageCandidate {
  std::string pair_id;
  std::string category;
  double score = 0.0;  // external maximum confidence in [0, 1]
};

struct TriageConfig {
  double lower = 0.3;
  double upper = 0.9;
  int quota_per_category = 10;  // ≤ 0 disables the cap
  std::uint64_t seed = 0;
};

/// Candidates with lower ≤ score ≤ upper, shuffled, at most the quota per
/// category. Output keeps the shuffled order.
std::vector<TriageCandidate> confidence_triage(const std::vector<TriageCandidate>& candidates,
                                               const TriageConfig& cfg = {});

nlohmann::json to_json(const Pose& p);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Intrinsics& k);
Intrinsics intrinsics_from_json(const nlohmann::json& j);

}  // namespace sparsematch

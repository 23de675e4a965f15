#pragma once

#include "sparsematch/eval.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sparsematch {

/// Report file: {"schema_version", "body", "metadata"}. The body depends only
/// on inputs and seeds; timestamps and timings live in metadata.
struct ReportDocument {
  nlohmann::json body = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static ReportDocument from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ReportDocument load(const std::filesystem::path& path);
};

nlohmann::json curve_json(const PckCurve& c);
nlohmann::json to_json(const PairEvalRow& row);
nlohmann::json to_json(const Aggregate& a);
nlohmann::json to_json(const SweepPoint& p);

/// One line per pair: id, group, category, split, predicted, pck_0..pck_20, maa10.
std::string rows_to_csv(const std::vector<PairEvalRow>& rows);

/// PCK-vs-threshold line chart, one series per entry.
std::string pck_svg(const std::map<std::string, PckCurve>& series, const std::string& title);
/// Throughput (x, log scale) against accuracy (y), labelled by stop layer.
std::string pareto_svg(const std::vector<SweepPoint>& points, const std::string& title);

struct ProtocolOptions {
  std::string protocol = "fmatrix";  // fmatrix | append | pose-auc | imc | homography
  std::optional<double> ransac_threshold;
  std::uint64_t seed = 0;
  std::filesystem::path base_dir;  // resolves relative feature paths
  const MatcherWeights<float>* weights = nullptr;
  MatcherConfig model_cfg;         // used when weights are set
  MatchConfig match;               // raw mutual matching otherwise
};

const std::vector<std::string>& known_protocols();
double default_ransac_threshold(const std::string& protocol);

/// Runs one protocol over a manifest. Throws InvalidArgument for an unknown
/// protocol name.
ReportDocument run_protocol(const std::vector<PairRecord>& records, const ProtocolOptions& opt,
                            std::vector<PairEvalRow>* rows_out = nullptr);

/// Keypoints and descriptors of one pair, loaded from its feature container.
struct PairFeatures {
  KeypointSet kps_a;
  KeypointSet kps_b;
  Matrix desc_a;
  Matrix desc_b;
  Matrix gt_desc_a;  // empty unless stored
};

PairFeatures load_pair_features(const PairRecord& record, const std::filesystem::path& base_dir);

/// Pixel correspondences predicted for a pair (trained matcher when weights
/// are given, raw dual-softmax mutual matching otherwise).
Correspondences predict_correspondences(const PairFeatures& f, const ProtocolOptions& opt, MatchSet* matches = nullptr);

}  // namespace sparsematch

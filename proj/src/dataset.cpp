#include "sparsematch/dataset.hpp"

#include "sparsematch/container.hpp"
#include "sparsematch/error.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace sparsematch {

using nlohmann::json;

namespace {

void check_schema(const json& j) {
  const int v = j.value("schema_version", kSchemaVersion);
  if (v != kSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch,
                "schema_version " + std::to_string(v) + ", expected " + std::to_string(kSchemaVersion));
  }
}

json image_json(const ImageRef& im) { return {{"path", im.path}, {"width", im.width}, {"height", im.height}}; }

ImageRef image_from_json(const json& j) { return {j.value("path", ""), j.at("width").get<int>(), j.at("height").get<int>()}; }

bool inside(double x, double y, const ImageRef& im) {
  return std::isfinite(x) && std::isfinite(y) && x >= 0.0 && y >= 0.0 && x <= im.width && y <= im.height;
}

json mat3_json(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

Mat3 mat3_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 9) throw Error(ErrorCode::InvalidArgument, "3x3 matrix needs 9 entries");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = v[r * 3 + c];
  return m;
}

std::string write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  return text;
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace

json to_json(const Pose& p) {
  return {{"rotation", mat3_json(p.rotation)}, {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

Pose pose_from_json(const json& j) {
  Pose p;
  p.rotation = mat3_from_json(j.at("rotation"));
  const auto t = j.at("translation").get<std::vector<double>>();
  if (t.size() != 3) throw Error(ErrorCode::InvalidArgument, "translation needs 3 entries");
  p.translation = Vec3(t[0], t[1], t[2]);
  p.validate(1e-6);
  return p;
}

json to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

Intrinsics intrinsics_from_json(const json& j) {
  Intrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  k.validate();
  return k;
}

bool PairRecord::correspondence_count_lint() const { return gt.size() < 8 || gt.size() > 28; }

void PairRecord::validate() const {
  if (id.empty()) throw Error(ErrorCode::InvalidArgument, "pair record without id");
  if (image_a.width < 1 || image_a.height < 1 || image_b.width < 1 || image_b.height < 1) {
    throw Error(ErrorCode::InvalidArgument, "pair " + id + ": image dimensions must be positive");
  }
  if (split != "validation" && split != "test") {
    throw Error(ErrorCode::InvalidArgument, "pair " + id + ": split must be 'validation' or 'test'");
  }
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (!inside(gt[k].a.x(), gt[k].a.y(), image_a) || !inside(gt[k].b.x(), gt[k].b.y(), image_b)) {
      throw Error(ErrorCode::InvalidArgument, "pair " + id + ": correspondence " + std::to_string(k) + " outside image bounds");
    }
  }
}

json to_json(const PairRecord& r) {
  json corr = json::array();
  for (const auto& c : r.gt) corr.push_back({{"xa", c.a.x()}, {"ya", c.a.y()}, {"xb", c.b.x()}, {"yb", c.b.y()}});
  json j = {{"schema_version", kSchemaVersion},
            {"id", r.id},
            {"image_a", image_json(r.image_a)},
            {"image_b", image_json(r.image_b)},
            {"correspondences", corr},
            {"group", r.group},
            {"category", r.category},
            {"dynamic", r.dynamic},
            {"split", r.split}};
  if (!r.scene.empty()) j["scene"] = r.scene;
  if (r.pose_ab) j["pose_ab"] = to_json(*r.pose_ab);
  if (r.intrinsics_a) j["intrinsics_a"] = to_json(*r.intrinsics_a);
  if (r.intrinsics_b) j["intrinsics_b"] = to_json(*r.intrinsics_b);
  if (r.homography) j["homography"] = mat3_json(*r.homography);
  if (!r.features.empty()) j["features"] = r.features;
  if (!r.depth.empty()) j["depth"] = r.depth;
  return j;
}

PairRecord pair_record_from_json(const json& j) {
  check_schema(j);
  PairRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.image_a = image_from_json(j.at("image_a"));
    r.image_b = image_from_json(j.at("image_b"));
    for (const auto& c : j.value("correspondences", json::array())) {
      r.gt.push_back({Vec2(c.at("xa").get<double>(), c.at("ya").get<double>()),
                      Vec2(c.at("xb").get<double>(), c.at("yb").get<double>())});
    }
    r.group = j.value("group", "");
    r.category = j.value("category", "");
    r.scene = j.value("scene", "");
    r.dynamic = j.value("dynamic", false);
    r.split = j.value("split", "test");
    if (j.contains("pose_ab")) r.pose_ab = pose_from_json(j.at("pose_ab"));
    if (j.contains("intrinsics_a")) r.intrinsics_a = intrinsics_from_json(j.at("intrinsics_a"));
    if (j.contains("intrinsics_b")) r.intrinsics_b = intrinsics_from_json(j.at("intrinsics_b"));
    if (j.contains("homography")) r.homography = mat3_from_json(j.at("homography"));
    r.features = j.value("features", "");
    r.depth = j.value("depth", "");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed pair record: ") + e.what());
  }
  r.validate();
  return r;
}

std::vector<PairRecord> parse_pair_manifest(const std::string& text) {
  std::vector<PairRecord> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(pair_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ManifestUnreadable, "line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      const ErrorCode code = e.code() == ErrorCode::SchemaVersionMismatch ? e.code() : ErrorCode::ManifestUnreadable;
      throw Error(code, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<PairRecord> load_pair_manifest(const std::filesystem::path& path) {
  return parse_pair_manifest(read_text(path));
}

void save_pair_manifest(const std::filesystem::path& path, const std::vector<PairRecord>& records) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  write_text(path, text);
}

void Annotation::validate() const {
  if (pair_id.empty()) throw Error(ErrorCode::InvalidArgument, "annotation without pair_id");
  if (images.size() != 2) throw Error(ErrorCode::InvalidArgument, "annotation needs exactly two images");
  for (const auto& im : images) {
    if (im.width < 1 || im.height < 1) throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  }
  for (std::size_t k = 0; k < correspondences.size(); ++k) {
    const auto& c = correspondences[k];
    if (!inside(c.xa, c.ya, images[0]) || !inside(c.xb, c.yb, images[1])) {
      throw Error(ErrorCode::InvalidArgument, "annotation " + pair_id + ": correspondence " + std::to_string(k) +
                                                  " outside image bounds");
    }
  }
}

json to_json(const Annotation& a) {
  json corr = json::array();
  for (const auto& c : a.correspondences) corr.push_back({{"xa", c.xa}, {"ya", c.ya}, {"xb", c.xb}, {"yb", c.yb}});
  json images = json::array();
  for (const auto& im : a.images) images.push_back(image_json(im));
  json j = {{"schema_version", kSchemaVersion},
            {"pair_id", a.pair_id},
            {"images", images},
            {"correspondences", corr},
            {"group", a.group},
            {"category", a.category},
            {"dynamic", a.dynamic},
            {"split", a.split},
            {"annotator", a.annotator},
            {"timestamp", a.timestamp}};
  if (a.matchable) j["matchable"] = *a.matchable;
  return j;
}

Annotation annotation_from_json(const json& j) {
  check_schema(j);
  Annotation a;
  try {
    a.pair_id = j.at("pair_id").get<std::string>();
    for (const auto& im : j.at("images")) a.images.push_back(image_from_json(im));
    for (const auto& c : j.value("correspondences", json::array())) {
      a.correspondences.push_back(
          {c.at("xa").get<double>(), c.at("ya").get<double>(), c.at("xb").get<double>(), c.at("yb").get<double>()});
    }
    a.group = j.value("group", "");
    a.category = j.value("category", "");
    a.dynamic = j.value("dynamic", false);
    a.split = j.value("split", "test");
    a.annotator = j.value("annotator", "");
    a.timestamp = j.value("timestamp", "");
    if (j.contains("matchable") && !j.at("matchable").is_null()) a.matchable = j.at("matchable").get<bool>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed annotation: ") + e.what());
  }
  a.validate();
  return a;
}

Annotation load_annotation(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
  }
  return annotation_from_json(j);
}

void save_annotation(const std::filesystem::path& path, const Annotation& a) {
  a.validate();
  write_text(path, to_json(a).dump(2) + "\n");
}

void DatasetManifest::validate() const {
  if (!(weight > 0.0) || !std::isfinite(weight)) {
    throw Error(ErrorCode::InvalidArgument, "dataset " + name + ": sampling weight must be positive");
  }
}

json to_json(const DatasetManifest& m) {
  json pairs = json::array();
  for (const auto& p : m.pairs) {
    json e = {{"image_a", p.image_a}, {"image_b", p.image_b}, {"depth_a", p.depth_a}, {"depth_b", p.depth_b}};
    if (p.pose_ab) e["pose_ab"] = to_json(*p.pose_ab);
    if (p.intrinsics_a) e["intrinsics_a"] = to_json(*p.intrinsics_a);
    if (p.intrinsics_b) e["intrinsics_b"] = to_json(*p.intrinsics_b);
    pairs.push_back(e);
  }
  return {{"schema_version", kSchemaVersion}, {"name", m.name}, {"type", m.type}, {"weight", m.weight}, {"pairs", pairs}};
}

DatasetManifest dataset_manifest_from_json(const json& j) {
  check_schema(j);
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.type = j.value("type", "");
    m.weight = j.value("weight", 1.0);
    for (const auto& e : j.value("pairs", json::array())) {
      TrainingPairEntry p;
      p.image_a = e.value("image_a", "");
      p.image_b = e.value("image_b", "");
      p.depth_a = e.value("depth_a", "");
      p.depth_b = e.value("depth_b", "");
      if (e.contains("pose_ab")) p.pose_ab = pose_from_json(e.at("pose_ab"));
      if (e.contains("intrinsics_a")) p.intrinsics_a = intrinsics_from_json(e.at("intrinsics_a"));
      if (e.contains("intrinsics_b")) p.intrinsics_b = intrinsics_from_json(e.at("intrinsics_b"));
      m.pairs.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed dataset manifest: ") + e.what());
  }
  m.validate();
  return m;
}

MixtureDraw sample_mixture(const std::vector<DatasetManifest>& manifests, Rng& rng) {
  if (manifests.empty()) throw Error(ErrorCode::EmptyManifest, "no datasets to sample from");
  double total = 0.0;
  for (const auto& m : manifests) {
    m.validate();
    if (m.pairs.empty()) throw Error(ErrorCode::EmptyManifest, "dataset " + m.name + " has no pairs");
    total += m.weight;
  }
  const double u = rng.uniform() * total;
  std::size_t chosen = manifests.size() - 1;
  double acc = 0.0;
  for (std::size_t k = 0; k < manifests.size(); ++k) {
    acc += manifests[k].weight;
    if (u < acc) {
      chosen = k;
      break;
    }
  }
  return {chosen, rng.index(manifests[chosen].pairs.size())};
}

std::vector<TriageCandidate> confidence_triage(const std::vector<TriageCandidate>& candidates, const TriageConfig& cfg) {
  std::vector<TriageCandidate> eligible;
  for (const auto& c : candidates) {
    if (c.score >= cfg.lower && c.score <= cfg.upper) eligible.push_back(c);
  }
  Rng rng(cfg.seed);
  for (std::size_t k = eligible.size(); k > 1; --k) std::swap(eligible[k - 1], eligible[rng.index(k)]);
  if (cfg.quota_per_category <= 0) return eligible;
  std::map<std::string, int> taken;
  std::vector<TriageCandidate> out;
  for (auto& c : eligible) {
    if (taken[c.category]++ < cfg.quota_per_category) out.push_back(std::move(c));
  }
  return out;
}

}  // namespace sparsematch

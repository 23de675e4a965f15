#include "sparsematch/error.hpp"
#include "sparsematch/report.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <fstream>

using namespace sparsematch;
using namespace testsupport;

namespace {

std::vector<double> values(const nlohmann::json& obj) {
  std::vector<double> out;
  for (const auto& [k, v] : obj.items()) out.push_back(v.get<double>());
  return out;
}

}  // namespace

TEST_CASE("report document: save/load round trip and schema checks") {
  const auto dir = scratch_dir("report_doc");
  ReportDocument d;
  d.body = {{"protocol", "fmatrix"}, {"x", {1.5, 2.25}}};
  d.metadata = {{"generated_at", "now"}};
  d.save(dir / "r.json");
  const auto back = ReportDocument::load(dir / "r.json");
  CHECK(back.body == d.body);
  CHECK(back.metadata == d.metadata);

  auto j = d.to_json();
  j["schema_version"] = 7;
  try {
    ReportDocument::from_json(j);
    FAIL("version accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaVersionMismatch);
  }
  {
    std::ofstream f(dir / "bad.json");
    f << "{ not json";
  }
  try {
    ReportDocument::load(dir / "bad.json");
    FAIL("corrupt report accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CorruptPayload);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("csv and svg emitters") {
  PairEvalRow r;
  r.pair_id = "a,b";
  r.group = "G \"quoted\"";
  r.category = "c";
  r.split = "test";
  r.curve.fill(1.0);
  r.predicted = 12;
  const auto csv = rows_to_csv({r});
  const auto header_end = csv.find('\n');
  const std::string header = csv.substr(0, header_end);
  CHECK(header.rfind("pair_id,group,category,split,predicted,pck_0,", 0) == 0);
  CHECK(header.find(",pck_20,maa10") != std::string::npos);
  CHECK(csv.find("\"a,b\",\"G \"\"quoted\"\"\",c,test,12,1,") != std::string::npos);

  const auto svg = pck_svg({{"raw <nn>", r.curve}}, "PCK & co");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("raw &lt;nn&gt;") != std::string::npos);
  CHECK(svg.find("<polyline") != std::string::npos);
  SweepPoint p{3, 1, 120.0, 0.7, 1e6};
  SweepPoint q{9, 1, 40.0, 0.8, 3e6};
  const auto psvg = pareto_svg({p, q}, "pareto");
  CHECK(psvg.find("L=3") != std::string::npos);
  CHECK(psvg.find("L=9") != std::string::npos);
  CHECK(pareto_svg({}, "empty").find("</svg>") != std::string::npos);
}

TEST_CASE("protocol registry") {
  CHECK(known_protocols().size() == 5);
  CHECK(default_ransac_threshold("fmatrix") == 0.25);
  CHECK(default_ransac_threshold("pose-auc") == 0.5);
  CHECK(default_ransac_threshold("homography") == 3.0);
  CHECK(default_ransac_threshold("imc") == 0.2);
  CHECK(default_ransac_threshold("append") == 0.5);
  ProtocolOptions opt;
  opt.protocol = "nope";
  PairRecord r;
  CHECK_THROWS_AS(run_protocol({r}, opt), Error);
  opt.protocol = "fmatrix";
  CHECK_THROWS_AS(run_protocol({}, opt), Error);
}

TEST_CASE("fmatrix protocol: noiseless fixture scores 1, dynamic pairs excluded, body deterministic") {
  const auto dir = scratch_dir("report_fm");
  FixtureOptions fo;
  fo.pairs = 5;
  fo.dynamic = {2};
  const auto recs = write_synthetic_fixture(dir, fo);
  ProtocolOptions opt;
  opt.base_dir = dir;
  opt.match.match_threshold = 0.0;
  std::vector<PairEvalRow> rows;
  const auto doc = run_protocol(recs, opt, &rows);
  CHECK(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.pair_id != "fx_2");
    for (int t = 1; t <= 20; ++t) CHECK(r.curve[t] == 1.0);
  }
  const auto& agg = doc.body.at("aggregates");
  CHECK(agg.at("excluded_dynamic") == nlohmann::json::array({"fx_2"}));
  CHECK(agg.at("overall").at("pairs") == 4);
  CHECK(agg.at("overall").at("maa10") == 1.0);
  CHECK(agg.at("by_group").contains("Aerial"));
  CHECK(agg.at("by_split").contains("validation"));
  CHECK(doc.body.at("config").at("ransac_threshold") == 0.25);
  CHECK(doc.metadata.contains("generated_at"));
  for (const auto& p : doc.body.at("pairs")) CHECK(p.at("pair_id") != "fx_2");

  const auto again = run_protocol(recs, opt);
  CHECK(again.body.dump() == doc.body.dump());
  std::filesystem::remove_all(dir);
}

TEST_CASE("append, pose-auc and imc protocols on a noiseless fixture") {
  const auto dir = scratch_dir("report_misc");
  FixtureOptions fo;
  fo.pairs = 4;
  const auto recs = write_synthetic_fixture(dir, fo);
  ProtocolOptions opt;
  opt.base_dir = dir;
  opt.match.match_threshold = 0.0;

  opt.protocol = "append";
  const auto app = run_protocol(recs, opt);
  for (double v : values(app.body.at("aggregates").at("mean_pck"))) CHECK(v == 1.0);

  opt.protocol = "pose-auc";
  const auto pose = run_protocol(recs, opt);
  CHECK(pose.body.at("config").at("ransac_threshold") == 0.5);
  for (double v : values(pose.body.at("aggregates").at("auc"))) CHECK(v > 0.99);

  opt.protocol = "imc";
  const auto imc = run_protocol(recs, opt);
  CHECK(imc.body.at("aggregates").at("maa") == doctest::Approx(1.0));
  for (const auto& p : imc.body.at("pairs")) CHECK(p.at("translation_m").get<double>() < 1e-3);

  PairRecord no_pose = recs[0];
  no_pose.pose_ab.reset();
  opt.protocol = "pose-auc";
  CHECK_THROWS_AS(run_protocol({no_pose}, opt), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("homography protocol on a planar fixture") {
  const auto dir = scratch_dir("report_h");
  const auto recs = write_planar_fixture(dir, 3, 9);
  ProtocolOptions opt;
  opt.protocol = "homography";
  opt.base_dir = dir;
  opt.match.match_threshold = 0.0;
  const auto doc = run_protocol(recs, opt);
  for (const auto& p : doc.body.at("pairs")) CHECK(p.at("corner_error_px").get<double>() < 1e-6);
  for (double v : values(doc.body.at("aggregates").at("auc"))) CHECK(v > 0.999);
  std::filesystem::remove_all(dir);
}

TEST_CASE("feature loading errors") {
  const auto dir = scratch_dir("report_feat");
  const auto recs = write_planar_fixture(dir, 1, 3);
  auto r = recs[0];
  CHECK_NOTHROW(load_pair_features(r, dir));
  r.features = "features/missing.mlw";
  CHECK_THROWS_AS(load_pair_features(r, dir), Error);
  r.features.clear();
  CHECK_THROWS_AS(load_pair_features(r, dir), Error);
  TensorContainer bad;
  const double v[3] = {1, 2, 3};
  bad.tensors["keypoints_a"] = StoredTensor::from_f64({1, 3}, v);
  bad.tensors["keypoints_b"] = StoredTensor::from_f64({1, 3}, v);
  bad.tensors["descriptors_a"] = StoredTensor::from_f64({1, 3}, v);
  bad.tensors["descriptors_b"] = StoredTensor::from_f64({1, 3}, v);
  bad.save(dir / "bad.mlw");
  r.features = "bad.mlw";
  try {
    load_pair_features(r, dir);
    FAIL("bad shape accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
  std::filesystem::remove_all(dir);
}

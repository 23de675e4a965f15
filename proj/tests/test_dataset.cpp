#include "sparsematch/dataset.hpp"
#include "sparsematch/error.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <map>

using namespace sparsematch;
using namespace testsupport;

namespace {

PairRecord sample_record(const std::string& id) {
  PairRecord r;
  r.id = id;
  r.image_a = {"a.png", 800, 600};
  r.image_b = {"b.png", 1024, 768};
  r.gt = {{Vec2(10.5, 20.25), Vec2(30, 40)}, {Vec2(799, 599), Vec2(0, 0)}};
  r.group = "Aerial";
  r.category = "bridges";
  r.split = "validation";
  Rng rng(3);
  r.pose_ab = random_pose(rng);
  r.intrinsics_a = make_k(700, 800, 600);
  r.intrinsics_b = make_k(900, 1024, 768);
  Mat3 h;
  h << 1, 0.1, 3, 0.2, 1, -4, 1e-4, 2e-4, 1;
  r.homography = h;
  r.features = "features/x.mlw";
  return r;
}

DatasetManifest dataset(const std::string& name, double weight, int pairs) {
  DatasetManifest m;
  m.name = name;
  m.type = "outdoor";
  m.weight = weight;
  m.pairs.resize(pairs);
  for (int k = 0; k < pairs; ++k) m.pairs[k].image_a = name + std::to_string(k);
  return m;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("pair record JSON round trip") {
  const auto r = sample_record("p1");
  const auto j = to_json(r);
  CHECK(j["schema_version"] == kSchemaVersion);
  const auto back = pair_record_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.gt[0].a == r.gt[0].a);
  CHECK(back.pose_ab->rotation == r.pose_ab->rotation);
  CHECK(back.homography->isApprox(*r.homography, 0.0));
  CHECK(back.scene_label() == "Aerial");

  auto extra = j;
  extra["unknown_field"] = {1, 2};
  CHECK_NOTHROW(pair_record_from_json(extra));
  auto wrong = j;
  wrong["schema_version"] = 99;
  CHECK(code_of([&] { pair_record_from_json(wrong); }) == ErrorCode::SchemaVersionMismatch);
  auto outside = j;
  outside["correspondences"][0]["xa"] = 801.0;
  CHECK_THROWS_AS(pair_record_from_json(outside), Error);
  auto bad_split = j;
  bad_split["split"] = "train";
  CHECK_THROWS_AS(pair_record_from_json(bad_split), Error);
}

TEST_CASE("correspondence count lint") {
  auto r = sample_record("p");
  CHECK(r.correspondence_count_lint());
  r.gt.assign(8, {Vec2(1, 1), Vec2(1, 1)});
  CHECK_FALSE(r.correspondence_count_lint());
  r.gt.assign(28, {Vec2(1, 1), Vec2(1, 1)});
  CHECK_FALSE(r.correspondence_count_lint());
  r.gt.assign(29, {Vec2(1, 1), Vec2(1, 1)});
  CHECK(r.correspondence_count_lint());
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("manifest: save/load round trip, blank lines, line-numbered errors") {
  const auto dir = scratch_dir("manifest");
  const std::vector<PairRecord> recs{sample_record("a"), sample_record("b")};
  save_pair_manifest(dir / "m.jsonl", recs);
  const auto back = load_pair_manifest(dir / "m.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(to_json(back[1]) == to_json(recs[1]));

  const std::string good = to_json(recs[0]).dump();
  CHECK(parse_pair_manifest(good + "\n\n   \n" + good + "\n").size() == 2);
  try {
    parse_pair_manifest(good + "\n" + good + "\n{not json\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ManifestUnreadable);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  try {
    parse_pair_manifest("\n{\"schema_version\":1}\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK(code_of([&] { load_pair_manifest(dir / "missing.jsonl"); }) == ErrorCode::PathNotFound);
  std::filesystem::remove_all(dir);
}

TEST_CASE("annotation: round trip and bounds validation") {
  Annotation a;
  a.pair_id = "p1";
  a.images = {{"a.png", 640, 480}, {"b.png", 320, 240}};
  a.correspondences = {{1.5, 2.5, 3.25, 4.0}, {639.0, 479.0, 0.0, 0.0}};
  a.group = "Celestial";
  a.category = "moon";
  a.annotator = "ann1";
  a.timestamp = "2026-01-01T00:00:00Z";
  a.matchable = true;
  const auto dir = scratch_dir("annotation");
  save_annotation(dir / "a.json", a);
  const auto back = load_annotation(dir / "a.json");
  CHECK(back.correspondences == a.correspondences);
  CHECK(back.matchable == a.matchable);
  CHECK(to_json(back) == to_json(a));
  const auto j = to_json(a);
  for (const char* key : {"pair_id", "images", "correspondences", "group", "category", "dynamic", "split", "annotator", "timestamp"}) {
    CHECK(j.contains(key));
  }

  auto bad = a;
  bad.correspondences.push_back({10, 10, 400, 10});
  CHECK_THROWS_AS(bad.validate(), Error);
  {
    std::ofstream f(dir / "bad.json");
    f << to_json(bad).dump();
  }
  CHECK_THROWS_AS(load_annotation(dir / "bad.json"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset manifest JSON round trip and validation") {
  auto m = dataset("MegaDepth", 1.0, 2);
  m.pairs[0].pose_ab = Pose::identity();
  m.pairs[0].intrinsics_a = make_k();
  const auto j = to_json(m);
  CHECK(to_json(dataset_manifest_from_json(j)) == j);
  m.weight = 0.0;
  CHECK_THROWS_AS(m.validate(), Error);
  m.weight = -1.0;
  CHECK_THROWS_AS(m.validate(), Error);
}

TEST_CASE("mixture sampling fixtures") {
  Rng rng(1);
  CHECK(code_of([&] { sample_mixture({}, rng); }) == ErrorCode::EmptyManifest);
  CHECK(code_of([&] { sample_mixture({dataset("x", 1, 0)}, rng); }) == ErrorCode::EmptyManifest);
  const std::vector<DatasetManifest> one{dataset("only", 0.3, 4)};
  std::vector<int> counts(4);
  for (int k = 0; k < 4000; ++k) {
    const auto d = sample_mixture(one, rng);
    CHECK(d.dataset == 0);
    ++counts[d.pair];
  }
  for (int c : counts) CHECK(std::abs(c - 1000) < 150);
}

TEST_CASE("mixture sampling: 10:1 ratio and normalised weights within 3 sigma") {
  Rng rng(2);
  const int draws = 1000000;
  {
    const std::vector<DatasetManifest> ms{dataset("a", 1.0, 3), dataset("b", 0.1, 3)};
    long n0 = 0;
    for (int k = 0; k < draws; ++k) n0 += sample_mixture(ms, rng).dataset == 0;
    const double p = 1.0 / 1.1;
    CHECK(std::abs(n0 - draws * p) < 3 * std::sqrt(draws * p * (1 - p)));
  }
  {
    const std::vector<DatasetManifest> ms{dataset("a", 1.0, 1), dataset("b", 0.5, 1), dataset("c", 0.01, 1)};
    const double want[3] = {0.6623, 0.3311, 0.0066};
    std::vector<long> n(3);
    for (int k = 0; k < draws; ++k) ++n[sample_mixture(ms, rng).dataset];
    for (int d = 0; d < 3; ++d) {
      const double p = ms[d].weight / 1.51;
      CHECK(p == doctest::Approx(want[d]).epsilon(1e-3));
      CHECK(std::abs(n[d] - draws * p) < 3 * std::sqrt(draws * p * (1 - p)));
    }
  }
}

TEST_CASE("confidence triage") {
  std::vector<TriageCandidate> c{{"a", "x", 0.1}, {"b", "x", 0.5}, {"c", "x", 0.95}};
  const auto out = confidence_triage(c);
  REQUIRE(out.size() == 1);
  CHECK(out[0].pair_id == "b");
  CHECK(confidence_triage({}).empty());
  CHECK(confidence_triage({{"lo", "x", 0.3}, {"hi", "x", 0.9}}).size() == 2);

  std::vector<TriageCandidate> many;
  for (int k = 0; k < 30; ++k) many.push_back({"p" + std::to_string(k), "cat", 0.5});
  for (int k = 0; k < 5; ++k) many.push_back({"q" + std::to_string(k), "other", 0.6});
  TriageConfig cfg;
  cfg.seed = 9;
  const auto t1 = confidence_triage(many, cfg);
  const auto t2 = confidence_triage(many, cfg);
  std::map<std::string, int> per;
  for (const auto& t : t1) ++per[t.category];
  CHECK(per["cat"] == 10);
  CHECK(per["other"] == 5);
  REQUIRE(t1.size() == t2.size());
  for (std::size_t k = 0; k < t1.size(); ++k) CHECK(t1[k].pair_id == t2[k].pair_id);
  cfg.seed = 10;
  const auto t3 = confidence_triage(many, cfg);
  bool differs = false;
  for (std::size_t k = 0; k < t1.size(); ++k) differs |= t1[k].pair_id != t3[k].pair_id;
  CHECK(differs);
  cfg.quota_per_category = 0;
  CHECK(confidence_triage(many, cfg).size() == 35);
}

TEST_CASE("pose and intrinsics JSON round trip") {
  Rng rng(4);
  const auto p = random_pose(rng);
  const auto back = pose_from_json(to_json(p));
  CHECK(back.rotation == p.rotation);
  CHECK(back.translation == p.translation);
  const auto k = make_k(612.5, 1000, 700);
  const auto kb = intrinsics_from_json(to_json(k));
  CHECK(kb.fx == k.fx);
  CHECK(kb.cy == k.cy);
  CHECK(kb.width == 1000);
}

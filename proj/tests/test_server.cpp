#include "sparsematch/container.hpp"
#include "sparsematch/error.hpp"
#include "sparsematch/eval.hpp"
#include "sparsematch/server.hpp"
#include "fixtures.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>
#include <set>

using namespace sparsematch;
using namespace testsupport;
using nlohmann::json;

namespace {

struct ServerFixture {
  std::filesystem::path dir;
  std::vector<PairRecord> records;
  ServerConfig cfg;

  explicit ServerFixture(const std::string& name, bool with_weights = false) {
    dir = scratch_dir(name);
    FixtureOptions fo;
    fo.pairs = 3;
    fo.gt_count = 10;
    fo.dynamic = {1};
    records = write_synthetic_fixture(dir, fo);
    records[0].image_a.path = "a.png";
    records[0].image_b.width = 1280;  // anisotropic rescale for verification
    records[0].image_b.height = 480;
    save_pair_manifest(dir / "manifest.jsonl", records);
    std::ofstream(dir / "a.png", std::ios::binary) << "\x89PNG fake";
    cfg.manifest = dir / "manifest.jsonl";
    cfg.verify_batch = 5;
    cfg.seed = 3;
    if (with_weights) {
      auto mc = MatcherConfig::toy();
      mc.num_blocks = 3;
      mc.stop_layer = 3;
      save_weights(dir / "w.mlw", mc, MatcherWeights<float>::random(mc, 1));
      cfg.weights = dir / "w.mlw";
    }
  }
  ~ServerFixture() { std::filesystem::remove_all(dir); }
};

json body_of(const ApiResponse& r) { return json::parse(r.body); }

}  // namespace

TEST_CASE("annotation store: replay, torn lines, compaction, exclusive lock") {
  const auto dir = scratch_dir("store");
  {
    AnnotationStore s(dir);
    s.set_label("p1", true);
    s.set_label("p2", false);
    s.set_label("p1", false);
    s.set_correspondences("p1", {{1.25, 2.5, 3, 4}});
    s.record_verification({"p1#0", "p1", 0, "v", 3, 4, 0.0});
    CHECK_THROWS_AS(AnnotationStore{dir}, Error);
  }
  {
    std::ofstream log(dir / "events.log", std::ios::app);
    log << "{\"type\":\"label\",\"pair_id\":\"p3\",\"match";
  }
  {
    AnnotationStore s(dir);
    CHECK(s.label("p1") == false);
    CHECK(s.label("p2") == false);
    CHECK_FALSE(s.label("p3").has_value());
    REQUIRE(s.correspondences("p1") != nullptr);
    CHECK(s.correspondences("p1")->at(0) == AnnotatedPoint{1.25, 2.5, 3, 4});
    CHECK(s.verifications().size() == 1);
    s.compact();
    CHECK(std::filesystem::file_size(dir / "events.log") == 0);
    s.set_label("p4", true);
  }
  AnnotationStore s(dir);
  CHECK(s.label("p1") == false);
  CHECK(s.label("p4") == true);
  CHECK(s.correspondences("p1")->size() == 1);
  CHECK(s.verifications().at(0).task_id == "p1#0");
  std::filesystem::remove_all(dir);
}

TEST_CASE("server: unreadable manifest") {
  ServerConfig cfg;
  cfg.manifest = "/nonexistent/manifest.jsonl";
  try {
    AnnotationServer s(cfg);
    FAIL("constructed without a manifest");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ManifestUnreadable);
  }
}

TEST_CASE("server: pair listing, detail, images") {
  ServerFixture fx("srv_pairs");
  AnnotationServer srv(fx.cfg);
  const auto list = body_of(srv.handle("GET", "/api/pairs", ""));
  REQUIRE(list.size() == 3);
  CHECK(list[0]["id"] == "fx_0");
  CHECK(list[1]["dynamic"] == true);
  CHECK(list[0]["correspondence_count"] == 10);

  const auto detail = srv.handle("GET", "/api/pairs/fx_0", "");
  CHECK(detail.status == 200);
  const auto d = body_of(detail);
  CHECK(d["image_urls"]["a"] == "/api/pairs/fx_0/image/a");
  CHECK(d["lint"]["ok"] == true);
  CHECK(d["correspondences"].size() == 10);
  CHECK(srv.handle("GET", "/api/pairs/nope", "").status == 404);

  const auto img = srv.handle("GET", "/api/pairs/fx_0/image/a", "");
  CHECK(img.status == 200);
  CHECK(img.content_type == "image/png");
  CHECK(img.body.rfind("\x89PNG", 0) == 0);
  CHECK(srv.handle("GET", "/api/pairs/fx_0/image/b", "").status == 404);
  CHECK(srv.handle("GET", "/api/pairs/fx_0/image/c", "").status == 404);
  CHECK(srv.handle("GET", "/api/unknown", "").status == 404);
}

TEST_CASE("server: labels and correspondences persist across restarts") {
  ServerFixture fx("srv_persist");
  std::vector<json> saved;
  {
    AnnotationServer srv(fx.cfg);
    CHECK(srv.handle("POST", "/api/pairs/fx_0/label", R"({"matchable": true})").status == 200);
    CHECK(srv.handle("POST", "/api/pairs/fx_2/label", R"({"matchable": false})").status == 200);
    CHECK(srv.handle("POST", "/api/pairs/fx_0/label", R"({"matchable": "yes"})").status == 400);
    CHECK(srv.handle("POST", "/api/pairs/fx_0/label", "not json").status == 400);

    json pts = json::array();
    for (int k = 0; k < 5; ++k) pts.push_back({{"xa", 10.125 + k}, {"ya", 20.5}, {"xb", 1000.75}, {"yb", 30.0 + k}});
    const auto r = srv.handle("POST", "/api/pairs/fx_0/correspondences", json{{"correspondences", pts}}.dump());
    CHECK(r.status == 200);
    CHECK(body_of(r)["lint"]["ok"] == false);
    CHECK(body_of(r)["lint"].contains("message"));
    saved = pts;

    json outside = pts;
    outside[0]["xa"] = 641.0;
    CHECK(srv.handle("POST", "/api/pairs/fx_0/correspondences", outside.dump()).status == 400);
    json malformed = json::array({{{"xa", 1}}});
    CHECK(srv.handle("POST", "/api/pairs/fx_0/correspondences", malformed.dump()).status == 400);
    srv.stop();
  }
  AnnotationServer srv(fx.cfg);
  const auto got = body_of(srv.handle("GET", "/api/pairs/fx_0/correspondences", ""));
  REQUIRE(got["correspondences"].size() == 5);
  for (int k = 0; k < 5; ++k) {
    CHECK(got["correspondences"][k]["xa"].get<double>() == saved[k]["xa"].get<double>());
    CHECK(got["correspondences"][k]["yb"].get<double>() == saved[k]["yb"].get<double>());
  }
  const auto list = body_of(srv.handle("GET", "/api/pairs", ""));
  CHECK(list[0]["matchable"] == true);
  CHECK(list[2]["matchable"] == false);
  const auto st = body_of(srv.handle("GET", "/api/stats", ""));
  CHECK(st["groups"]["Celestial"]["matchable"] == 1);
  CHECK(st["groups"]["Celestial"]["unmatchable"] == 1);
  CHECK(st["groups"]["Celestial"]["annotated"] == 1);
  CHECK(st["groups"]["Aerial"]["dynamic"] == 1);
  CHECK(st["groups"]["Aerial"]["unlabeled"] == 1);
}

TEST_CASE("server: verification tasks, exact click is 0 px, errors at 640x640") {
  ServerFixture fx("srv_verify");
  AnnotationServer srv(fx.cfg);
  std::set<std::string> seen;
  json first;
  for (int k = 0; k < 5; ++k) {
    const auto r = srv.handle("GET", "/api/verify/next", "", {{"verifier", "alice"}});
    REQUIRE(r.status == 200);
    const auto t = body_of(r);
    CHECK(seen.insert(t["task_id"].get<std::string>()).second);
    if (k == 0) first = t;
  }
  CHECK(srv.handle("GET", "/api/verify/next", "", {{"verifier", "alice"}}).status == 429);
  const auto bob = body_of(srv.handle("GET", "/api/verify/next", "", {{"verifier", "bob"}}));
  CHECK(seen.count(bob["task_id"].get<std::string>()) == 0);

  // Locate the GT B-point of each assigned task.
  auto truth = [&](const json& task) {
    const auto& id = task["task_id"].get<std::string>();
    const auto pair = id.substr(0, id.find('#'));
    const int k = std::stoi(id.substr(id.find('#') + 1));
    for (const auto& r : fx.records) {
      if (r.id == pair) return std::make_pair(r, r.gt[k]);
    }
    FAIL("task for unknown pair");
    return std::make_pair(fx.records[0], fx.records[0].gt[0]);
  };
  const auto [rec, gt] = truth(first);
  CHECK(first["xa"].get<double>() == gt.a.x());
  const std::string path = "/api/verify/" + first["task_id"].get<std::string>();
  const auto exact = srv.handle("POST", path, json{{"xb", gt.b.x()}, {"yb", gt.b.y()}}.dump());
  REQUIRE(exact.status == 200);
  CHECK(body_of(exact)["error_px"] == 0.0);
  CHECK(srv.handle("POST", path, json{{"xb", 0}, {"yb", 0}}.dump()).status == 409);

  // A 10 px horizontal miss scales by 640 / width of image B (5 px on the
  // 1280-wide image of fx_0, 10 px elsewhere).
  for (const auto& id : seen) {
    if (id == first["task_id"]) continue;
    const auto [r0, g0] = truth(json{{"task_id", id}});
    const auto miss = srv.handle("POST", "/api/verify/" + id, json{{"xb", g0.b.x() + 10}, {"yb", g0.b.y()}}.dump());
    REQUIRE(miss.status == 200);
    CHECK(body_of(miss)["error_px"].get<double>() == doctest::Approx(10.0 * 640.0 / r0.image_b.width));
  }
  CHECK(srv.handle("POST", "/api/verify/fx_9#0", R"({"xb":1,"yb":1})").status == 404);
  CHECK(srv.handle("POST", path, R"({"xb":"a"})").status == 409);

  const auto st = body_of(srv.handle("GET", "/api/stats", ""));
  CHECK(st["human_baseline"]["count"].get<int>() >= 1);
  CHECK(st["human_baseline"]["histogram_1px"].size() == 21);
  CHECK(st["human_baseline"]["histogram_1px"][0].get<int>() >= 1);
  CHECK(st["verification_tasks"]["submitted"].get<int>() >= 1);
}

TEST_CASE("server: submitted tasks are never reassigned after restart") {
  ServerFixture fx("srv_reassign");
  fx.cfg.verify_batch = 100;
  std::string done;
  {
    AnnotationServer srv(fx.cfg);
    const auto t = body_of(srv.handle("GET", "/api/verify/next", "", {{"verifier", "v"}}));
    done = t["task_id"];
    CHECK(srv.handle("POST", "/api/verify/" + done, R"({"xb":1,"yb":1})").status == 200);
    const auto unassigned = body_of(srv.handle("GET", "/api/verify/next", "", {{"verifier", "w"}}))["task_id"];
    CHECK(unassigned != done);
    srv.stop();
  }
  AnnotationServer srv(fx.cfg);
  int count = 0;
  while (true) {
    const auto r = srv.handle("GET", "/api/verify/next", "", {{"verifier", "z"}});
    if (r.status != 200) {
      CHECK(r.status == 404);
      break;
    }
    CHECK(body_of(r)["task_id"] != done);
    ++count;
  }
  CHECK(count == 29);
}

TEST_CASE("server: match overlay requires a model and validates stop_layer") {
  {
    ServerFixture fx("srv_nomodel");
    AnnotationServer srv(fx.cfg);
    CHECK(srv.handle("GET", "/api/pairs/fx_0/matches", "").status == 503);
  }
  ServerFixture fx("srv_model", true);
  AnnotationServer srv(fx.cfg);
  const auto r = srv.handle("GET", "/api/pairs/fx_0/matches", "", {{"stop_layer", "2"}});
  REQUIRE(r.status == 200);
  const auto j = body_of(r);
  CHECK(j["stop_layer"] == 2);
  std::set<int> rows;
  for (const auto& m : j["matches"]) {
    CHECK(rows.insert(m["i"].get<int>()).second);
    CHECK(m.contains("inlier"));
    CHECK(m["score"].get<double>() >= 0.0);
  }
  CHECK(srv.handle("GET", "/api/pairs/fx_0/matches", "", {{"stop_layer", "4"}}).status == 400);
  CHECK(srv.handle("GET", "/api/pairs/fx_0/matches", "", {{"stop_layer", "x"}}).status == 400);
}

TEST_CASE("server: real HTTP round trip and port conflicts") {
  ServerFixture fx("srv_http");
  fx.cfg.port = 0;
  {
  AnnotationServer srv(fx.cfg);
  srv.start();
  REQUIRE(srv.port() > 0);
  httplib::Client cli("127.0.0.1", srv.port());
  const auto pairs = cli.Get("/api/pairs");
  REQUIRE(pairs);
  CHECK(pairs->status == 200);
  CHECK(json::parse(pairs->body).size() == 3);
  const auto post = cli.Post("/api/pairs/fx_2/label", R"({"matchable": true})", "application/json");
  REQUIRE(post);
  CHECK(post->status == 200);
  const auto next = cli.Get("/api/verify/next?verifier=http");
  REQUIRE(next);
  CHECK(next->status == 200);
  CHECK(json::parse(next->body).contains("task_id"));

  ServerFixture other("srv_http2");
  other.cfg.port = srv.port();
  AnnotationServer second(other.cfg);
  try {
    second.start();
    FAIL("bound an occupied port");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::PortInUse);
  }
  srv.stop();
  }
  AnnotationStore reopened(fx.cfg.manifest.string() + ".annotations");
  CHECK(reopened.label("fx_2") == true);
}

#include "sparsematch/error.hpp"
#include "sparsematch/robust.hpp"
#include "support.hpp"

#include <doctest.h>

#include <numeric>

using namespace sparsematch;
using namespace testsupport;

namespace {

double max_epipolar(const Mat3& f, const Correspondences& c) {
  double m = 0.0;
  for (double e : epipolar_errors(f, c)) m = std::max(m, e);
  return m;
}

Vec2 apply_h(const Mat3& h, const Vec2& p) { return (h * p.homogeneous()).hnormalized(); }

Pose pose_from_ransac(const EstimationResult& r, const Correspondences& corrs, const Scene& s) {
  Correspondences inl;
  for (std::size_t k = 0; k < corrs.size(); ++k) {
    if (r.inlier_mask[k]) inl.push_back(corrs[k]);
  }
  return decompose_essential(essential_from_fundamental(r.model, s.k_a, s.k_b), inl, s.k_a, s.k_b);
}

Mat3 random_homography(Rng& rng) {
  Mat3 h = Mat3::Identity();
  h(0, 0) = rng.uniform(0.8, 1.2);
  h(1, 1) = rng.uniform(0.8, 1.2);
  h(0, 1) = rng.uniform(-0.2, 0.2);
  h(1, 0) = rng.uniform(-0.2, 0.2);
  h(0, 2) = rng.uniform(-40, 40);
  h(1, 2) = rng.uniform(-40, 40);
  h(2, 0) = rng.uniform(-2e-4, 2e-4);
  h(2, 1) = rng.uniform(-2e-4, 2e-4);
  return h;
}

double corner_error(const Mat3& est, const Mat3& gt) {
  double sum = 0.0;
  for (const Vec2& c : {Vec2(0, 0), Vec2(639, 0), Vec2(639, 479), Vec2(0, 479)}) {
    sum += (apply_h(est, c) - apply_h(gt, c)).norm();
  }
  return sum / 4.0;
}

Correspondences homography_corrs(Rng& rng, const Mat3& h, int n) {
  Correspondences out;
  while (static_cast<int>(out.size()) < n) {
    const Vec2 a(rng.uniform(0, 640), rng.uniform(0, 480));
    const Vec2 b = apply_h(h, a);
    if (b.x() < -50 || b.x() > 690 || b.y() < -50 || b.y() > 530) continue;
    out.push_back({a, b});
  }
  return out;
}

}  // namespace

TEST_CASE("real_cubic_roots") {
  auto r = detail::real_cubic_roots(1, -6, 11, -6);  // (x-1)(x-2)(x-3)
  REQUIRE(r.size() == 3);
  CHECK(r[0] == doctest::Approx(1.0));
  CHECK(r[1] == doctest::Approx(2.0));
  CHECK(r[2] == doctest::Approx(3.0));
  r = detail::real_cubic_roots(1, 0, 1, 0);  // x(x² + 1)
  REQUIRE(r.size() == 1);
  CHECK(std::abs(r[0]) < 1e-12);
  r = detail::real_cubic_roots(0, 1, -3, 2);  // quadratic
  REQUIRE(r.size() == 2);
  CHECK(r[0] == doctest::Approx(1.0));
  CHECK(r[1] == doctest::Approx(2.0));
}

TEST_CASE("eight_point: noiseless synthetic correspondences") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto s = random_scene(rng, 20);
    const Mat3 f = eight_point(s.corrs);
    CHECK(f.norm() == doctest::Approx(1.0));
    CHECK(std::abs(f.determinant()) < 1e-12);
    CHECK(max_epipolar(f, s.corrs) < 1e-8);
  }
  CHECK_THROWS_AS(eight_point(Correspondences(7)), Error);
}

TEST_CASE("eight_point: rectified pair gives skew(e_x)") {
  Rng rng(2);
  const auto k = make_k();
  Pose p;
  p.translation = Vec3(1, 0, 0);
  Correspondences c;
  for (int i = 0; i < 8; ++i) {
    const Vec3 x = unproject(k, Vec2(rng.uniform(100, 540), rng.uniform(50, 430)), rng.uniform(4, 8));
    c.push_back({project(x, Pose::identity(), k).pixel, project(x, p, k).pixel});
  }
  const Mat3 f = eight_point(c);
  const Mat3 want = skew(Vec3(1, 0, 0)).normalized();
  CHECK(std::min((f - want).norm(), (f + want).norm()) < 1e-8);
}

TEST_CASE("eight_point: planar scene is degenerate") {
  Rng rng(3);
  const auto k = make_k();
  const Pose p = random_pose(rng);
  Correspondences c;
  for (int i = 0; i < 30; ++i) {
    const Vec2 px(rng.uniform(0, 640), rng.uniform(0, 480));
    const Vec3 x = unproject(k, px, 6.0);  // fronto-parallel plane z = 6
    c.push_back({px, project(x, p, k).pixel});
  }
  try {
    eight_point(c);
    FAIL("planar scene accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateConfiguration);
  }
}

TEST_CASE("seven_point: candidates satisfy the constraints") {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_scene(rng, 7);
    const auto cands = seven_point(s.corrs);
    REQUIRE(!cands.empty());
    CHECK(cands.size() <= 3);
    double best = INFINITY;
    for (const auto& f : cands) {
      CHECK(std::abs(f.determinant()) < 1e-10);
      best = std::min(best, max_epipolar(f, s.corrs));
    }
    CHECK(best < 1e-8);
  }
  CHECK_THROWS_AS(seven_point(Correspondences(8)), Error);
}

TEST_CASE("homography_dlt fixtures") {
  Mat3 affine;
  affine << 1.5, 0.2, 10, -0.3, 0.8, -5, 0, 0, 1;
  Correspondences sq;
  for (const Vec2& p : {Vec2(0, 0), Vec2(100, 0), Vec2(100, 100), Vec2(0, 100)}) sq.push_back({p, apply_h(affine, p)});
  const Mat3 h = homography_dlt(sq);
  const Mat3 want = affine / affine.norm();
  CHECK(std::min((h - want).norm(), (h + want).norm()) < 1e-9);

  Correspondences ident;
  for (const Vec2& p : {Vec2(3, 4), Vec2(300, 20), Vec2(500, 400), Vec2(20, 300), Vec2(200, 200)}) ident.push_back({p, p});
  const Mat3 hi = homography_dlt(ident);
  const Mat3 wi = Mat3::Identity() / std::sqrt(3.0);
  CHECK((hi - wi).norm() < 1e-9);

  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const Mat3 g = random_homography(rng);
    const auto c = homography_corrs(rng, g, 10);
    const Mat3 est = homography_dlt(c);
    for (const auto& x : c) CHECK((apply_h(est, x.a) - x.b).norm() < 1e-8);
  }
  CHECK_THROWS_AS(homography_dlt(Correspondences(3)), Error);
}

TEST_CASE("sampson and transfer distances") {
  const Mat3 f = skew(Vec3(1, 0, 0));
  // Rectified: Sampson = |y_b - y_a| / sqrt(2).
  CHECK(sampson_distance(f, {Vec2(10, 10), Vec2(40, 12)}) == doctest::Approx(2.0 / std::sqrt(2.0)));
  const Mat3 h = Mat3::Identity();
  CHECK(symmetric_transfer_error(h, h, {Vec2(1, 1), Vec2(4, 5)}) == doctest::Approx(5.0));
}

TEST_CASE("ransac_fundamental: clean data recovers pose") {
  Rng rng(6);
  RansacConfig cfg;
  cfg.inlier_threshold = 0.5;
  for (int t = 0; t < 20; ++t) {
    const auto s = random_scene(rng, 100);
    const auto r = ransac_fundamental(s.corrs, cfg, t);
    CHECK(r.inlier_count() == 100);
    CHECK(pose_error(pose_from_ransac(r, s.corrs, s), s.pose_ab) < 0.1);
  }
  CHECK_THROWS_AS(ransac_fundamental(Correspondences(6), cfg), Error);
}

TEST_CASE("ransac_fundamental: 50% outliers with 0.5 px noise") {
  Rng rng(7);
  RansacConfig cfg;
  cfg.inlier_threshold = 0.5;
  int ok = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    // Baselines below ~1/8 of the depth leave translation too weakly
    // constrained at this noise level for any linear F fit.
    const auto s = random_scene(rng, 100, 15.0, 1.0, 2.0);
    const auto corrs = contaminate(rng, s.corrs, 100, 0.5);
    const auto r = ransac_fundamental(corrs, cfg, t);
    try {
      ok += pose_error(pose_from_ransac(r, corrs, s), s.pose_ab) < 2.0;
    } catch (const Error&) {
    }
  }
  CHECK(ok >= 0.95 * trials);
}

TEST_CASE("ransac: determinism under a fixed seed") {
  Rng rng(8);
  const auto s = random_scene(rng, 60);
  const auto corrs = contaminate(rng, s.corrs, 60, 0.5);
  RansacConfig cfg;
  cfg.seed = 42;
  const auto a = ransac_fundamental(corrs, cfg, 5);
  const auto b = ransac_fundamental(corrs, cfg, 5);
  CHECK(a.model == b.model);
  CHECK(a.inlier_mask == b.inlier_mask);
  CHECK(a.score == b.score);
  CHECK(a.iterations_run == b.iterations_run);
  const Mat3 g = random_homography(rng);
  const auto hc = contaminate(rng, homography_corrs(rng, g, 50), 20, 0.3);
  const auto ha = ransac_homography(hc, cfg, 9), hb = ransac_homography(hc, cfg, 9);
  CHECK(ha.model == hb.model);
  CHECK(ha.inlier_mask == hb.inlier_mask);
}

TEST_CASE("ransac: inlier mask agrees with the hypothesis when no refit applies") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto s = random_scene(rng, 7);
    auto corrs = s.corrs;
    corrs[0].b += Vec2(5, -7);  // at most six inliers: no 8-point refit
    RansacConfig cfg;
    cfg.inlier_threshold = 0.5;
    EstimationResult r;
    try {
      r = ransac_fundamental(corrs, cfg, t);
    } catch (const Error&) {
      continue;
    }
    for (std::size_t k = 0; k < corrs.size(); ++k) {
      const double res = sampson_distance(r.model, corrs[k]);
      CHECK(static_cast<bool>(r.inlier_mask[k]) == (res <= cfg.inlier_threshold));
    }
  }
}

TEST_CASE("ransac: hard-threshold score never drops when a perfect inlier is added") {
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const auto s = random_scene(rng, 61);
    Correspondences base(s.corrs.begin(), s.corrs.end() - 1);
    base = contaminate(rng, base, 40, 0.3);
    Correspondences more = base;
    more.push_back(s.corrs.back());
    std::vector<int> pool(base.size());
    std::iota(pool.begin(), pool.end(), 0);
    RansacConfig cfg;
    cfg.scoring = RansacScoring::HardThreshold;
    cfg.local_optimization = false;
    cfg.max_iterations = 300;
    cfg.confidence = 1.0 - 1e-12;
    cfg.seed = 77;
    const auto a = ransac_fundamental(base, cfg, 1, pool);
    const auto b = ransac_fundamental(more, cfg, 1, pool);
    CHECK(b.score >= a.score);
  }
}

TEST_CASE("ransac: scaling pixels and threshold keeps the inlier mask") {
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    const auto s = random_scene(rng, 80);
    const auto corrs = contaminate(rng, s.corrs, 40, 0.4);
    RansacConfig cfg;
    cfg.inlier_threshold = 0.5;
    const auto ref = ransac_fundamental(corrs, cfg, t);
    for (double scale : {2.0, 0.5}) {
      Correspondences scaled;
      for (const auto& c : corrs) scaled.push_back({c.a * scale, c.b * scale});
      RansacConfig sc = cfg;
      sc.inlier_threshold = cfg.inlier_threshold * scale;
      const auto r = ransac_fundamental(scaled, sc, t);
      CHECK(r.inlier_mask == ref.inlier_mask);
    }
  }
}

TEST_CASE("ransac_homography: noiseless, outliers and collinear samples") {
  Rng rng(12);
  RansacConfig cfg;
  cfg.inlier_threshold = 1.0;
  const Mat3 g = random_homography(rng);
  const auto clean = homography_corrs(rng, g, 40);
  const auto r = ransac_homography(clean, cfg);
  CHECK(r.inlier_count() == 40);
  CHECK(corner_error(r.model, g) < 1e-6);

  int ok = 0;
  for (int t = 0; t < 50; ++t) {
    const Mat3 h = random_homography(rng);
    const auto corrs = contaminate(rng, homography_corrs(rng, h, 70), 30, 0.0);
    const auto est = ransac_homography(corrs, cfg, t);
    ok += corner_error(est.model, h) < 0.5;
  }
  CHECK(ok >= 48);

  // Half the points on one line: minimal samples drawn from it are skipped.
  Correspondences mixed;
  for (int k = 0; k < 10; ++k) {
    const Vec2 a(50.0 + 50 * k, 100.0 + 20 * k);
    mixed.push_back({a, apply_h(g, a)});
  }
  for (const auto& c : homography_corrs(rng, g, 6)) mixed.push_back(c);
  const auto rm = ransac_homography(mixed, cfg, 3);
  CHECK(rm.inlier_count() == 16);
  CHECK(corner_error(rm.model, g) < 1e-6);
}

TEST_CASE("ransac: sample pool restricts hypotheses") {
  Rng rng(13);
  const auto s = random_scene(rng, 40);
  RansacConfig cfg;
  CHECK_THROWS_AS(ransac_fundamental(s.corrs, cfg, 0, {0, 1, 2}), Error);
  CHECK_THROWS_AS(ransac_fundamental(s.corrs, cfg, 0, {0, 1, 2, 3, 4, 5, 99}), Error);
  const auto r = ransac_fundamental(s.corrs, cfg, 0, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(r.inlier_count() == 40);
}

TEST_CASE("ransac config validation") {
  RansacConfig cfg;
  cfg.inlier_threshold = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.confidence = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

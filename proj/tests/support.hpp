#pragma once

#include "sparsematch/geometry.hpp"
#include "sparsematch/random.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <unistd.h>
#include <filesystem>
#include <string>
#include <vector>

namespace testsupport {

using namespace sparsematch;

inline Intrinsics make_k(double f = 500.0, int w = 640, int h = 480) {
  Intrinsics k;
  k.fx = k.fy = f;
  k.cx = w / 2.0;
  k.cy = h / 2.0;
  k.width = w;
  k.height = h;
  return k;
}

inline Mat3 random_rotation(Rng& rng, double max_deg) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const double angle = rng.uniform(-max_deg, max_deg) * M_PI / 180.0;
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

inline Pose random_pose(Rng& rng, double max_deg = 15.0, double min_baseline = 0.5, double max_baseline = 1.5) {
  Pose p;
  p.rotation = random_rotation(rng, max_deg);
  Vec3 t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.3, 0.3));
  p.translation = t.normalized() * rng.uniform(min_baseline, max_baseline);
  return p;
}

struct Scene {
  Pose pose_ab;
  Intrinsics k_a;
  Intrinsics k_b;
  std::vector<Vec3> points;  // camera A frame
  Correspondences corrs;     // exact projections
};

// Points in general position (random depths), visible in both images.
inline Scene random_scene(Rng& rng, int n, double max_deg = 15.0, double min_baseline = 0.5,
                          double max_baseline = 1.5) {
  Scene s;
  s.k_a = make_k();
  s.k_b = make_k(520.0);
  s.pose_ab = random_pose(rng, max_deg, min_baseline, max_baseline);
  while (static_cast<int>(s.corrs.size()) < n) {
    const Vec2 px(rng.uniform(0, 640), rng.uniform(0, 480));
    const Vec3 x = unproject(s.k_a, px, rng.uniform(4.0, 8.0));
    const Vec3 xb = s.pose_ab.apply(x);
    if (xb.z() < 0.5) continue;
    const Vec2 pb(s.k_b.fx * xb.x() / xb.z() + s.k_b.cx, s.k_b.fy * xb.y() / xb.z() + s.k_b.cy);
    if (pb.x() < 0 || pb.x() > 640 || pb.y() < 0 || pb.y() > 480) continue;
    s.points.push_back(x);
    s.corrs.push_back({px, pb});
  }
  return s;
}

// F from the textbook formula K_b^-T [t]x R K_a^-1, unnormalised.
inline Mat3 reference_fundamental(const Pose& p, const Intrinsics& ka, const Intrinsics& kb) {
  return kb.matrix().inverse().transpose() * skew(p.translation) * p.rotation * ka.matrix().inverse();
}

inline double angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sparsematch_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport

namespace testsupport {

// Inlier projections with Gaussian pixel noise plus uniformly random outlier
// pairs, shuffled together.
inline Correspondences contaminate(Rng& rng, const Correspondences& clean, int n_outliers, double sigma) {
  Correspondences out;
  for (const auto& c : clean) {
    out.push_back({c.a + Vec2(sigma * rng.normal(), sigma * rng.normal()),
                   c.b + Vec2(sigma * rng.normal(), sigma * rng.normal())});
  }
  for (int k = 0; k < n_outliers; ++k) {
    out.push_back({Vec2(rng.uniform(0, 640), rng.uniform(0, 480)), Vec2(rng.uniform(0, 640), rng.uniform(0, 480))});
  }
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
  return out;
}

}  // namespace testsupport

#include "sparsematch/synth.hpp"

#include "sparsematch/error.hpp"
#include "sparsematch/random.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace sparsematch {

int SyntheticSceneConfig::inlier_count() const {
  return static_cast<int>(std::lround(n_points * (1.0 - outlier_fraction)));
}

void SyntheticSceneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
  if (n_points < 1) fail("n_points must be positive");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) fail("outlier fraction must lie in [0, 1]");
  if (!(descriptor_noise >= 0.0)) fail("descriptor noise must be non-negative");
  if (!(appearance_shift >= 0.0)) fail("appearance shift must be non-negative");
  if (descriptor_dim < 2) fail("descriptor_dim must be >= 2");
  if (width < 2 || height < 2) fail("image must be at least 2x2 pixels");
  if (static_cast<long long>(n_points) * 2 > static_cast<long long>(width) * height) fail("too many points for the image");
  if (!(focal > 0.0)) fail("focal length must be positive");
  if (!(min_depth > 0.0 && max_depth >= min_depth)) fail("invalid depth range");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) fail("invalid rotation range");
  if (!(min_baseline >= 0.0 && max_baseline >= min_baseline)) fail("invalid baseline range");
}

PointEmbedding::PointEmbedding(int dim, double frequency, std::uint64_t seed) : omega_(dim, 3), phase_(dim) {
  Rng rng(seed);
  for (int r = 0; r < dim; ++r) {
    for (int c = 0; c < 3; ++c) omega_(r, c) = frequency * rng.normal();
  }
  for (int r = 0; r < dim; ++r) phase_(r) = rng.uniform(0.0, 2.0 * std::numbers::pi);
}

Eigen::VectorXd PointEmbedding::operator()(const Vec3& x) const {
  Eigen::VectorXd e = ((omega_ * x) + phase_).array().sin().matrix();
  const double n = e.norm();
  return n > 0.0 ? Eigen::VectorXd(e / n) : e;
}

namespace {

Pose random_pose(const SyntheticSceneConfig& cfg, Rng& rng) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  if (axis.norm() < 1e-12) axis = Vec3::UnitY();
  const double angle = rng.uniform(0.0, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
  Pose p;
  p.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
  Vec3 t(rng.normal(), rng.normal(), 0.3 * rng.normal());
  if (t.norm() < 1e-12) t = Vec3::UnitX();
  p.translation = t.normalized() * rng.uniform(cfg.min_baseline, cfg.max_baseline);
  return p;
}

std::int64_t pixel_key(const Vec2& xy, int width) {
  return static_cast<std::int64_t>(std::floor(xy.y())) * width + static_cast<std::int64_t>(std::floor(xy.x()));
}

Eigen::VectorXd random_unit(int d, Rng& rng) {
  Eigen::VectorXd v(d);
  do {
    for (int k = 0; k < d; ++k) v(k) = rng.normal();
  } while (v.norm() < 1e-12);
  return v.normalized();
}

std::vector<int> permutation(int n, Rng& rng) {
  std::vector<int> p(n);
  for (int k = 0; k < n; ++k) p[k] = k;
  for (int k = n - 1; k > 0; --k) std::swap(p[k], p[rng.index(static_cast<std::size_t>(k) + 1)]);
  return p;
}

struct Placed {
  std::vector<Vec2> pix_a, pix_b;
  std::vector<double> z_a, z_b;
  std::vector<Vec3> points;
};

}  // namespace

SyntheticPair synth_pair(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_points;
  const int n_in = cfg.inlier_count();
  const int d = cfg.descriptor_dim;
  Rng rng(cfg.seed);

  Intrinsics k;
  k.fx = k.fy = cfg.focal;
  k.cx = 0.5 * cfg.width;
  k.cy = 0.5 * cfg.height;
  k.width = cfg.width;
  k.height = cfg.height;

  for (int attempt = 0; attempt < 100; ++attempt) {
    const Pose pose = random_pose(cfg, rng);
    Placed placed;
    std::unordered_set<std::int64_t> used_a, used_b;
    const long long max_draws = 50LL * std::max(n_in, 1);
    for (long long draw = 0; draw < max_draws && static_cast<int>(placed.points.size()) < n_in; ++draw) {
      const Vec2 pa(rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height));
      const double z = rng.uniform(cfg.min_depth, cfg.max_depth);
      const Vec3 x = unproject(k, pa, z);
      const Vec3 y = pose.apply(x);
      if (y.z() <= 0.1) continue;
      const Vec2 pb(k.fx * y.x() / y.z() + k.cx, k.fy * y.y() / y.z() + k.cy);
      if (!(pb.x() >= 0.0 && pb.x() < cfg.width && pb.y() >= 0.0 && pb.y() < cfg.height)) continue;
      const auto ka = pixel_key(pa, cfg.width);
      const auto kb = pixel_key(pb, cfg.width);
      if (used_a.count(ka) || used_b.count(kb)) continue;
      used_a.insert(ka);
      used_b.insert(kb);
      placed.pix_a.push_back(pa);
      placed.pix_b.push_back(pb);
      placed.z_a.push_back(z);
      placed.z_b.push_back(y.z());
      placed.points.push_back(x);
    }
    if (static_cast<int>(placed.points.size()) < n_in) continue;

    const PointEmbedding embed(d, cfg.embedding_frequency, cfg.embedding_seed);
    Matrix clean(n_in, d);
    for (int i = 0; i < n_in; ++i) clean.row(i) = embed(placed.points[i]).transpose();

    auto make_image = [&](const std::vector<Vec2>& pix, std::unordered_set<std::int64_t>& used, Matrix& desc,
                          Eigen::MatrixX2d& pts) {
      Eigen::VectorXd shift = Eigen::VectorXd::Zero(d);
      if (cfg.appearance_shift > 0.0) shift = random_unit(d, rng) * cfg.appearance_shift;
      desc.resize(n, d);
      pts.resize(n, 2);
      for (int i = 0; i < n_in; ++i) {
        desc.row(i) = clean.row(i);
        pts.row(i) = pix[i].transpose();
      }
      for (int i = n_in; i < n; ++i) {
        desc.row(i) = random_unit(d, rng).transpose();
        Vec2 p;
        do {
          p = Vec2(rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height));
        } while (used.count(pixel_key(p, cfg.width)));
        used.insert(pixel_key(p, cfg.width));
        pts.row(i) = p.transpose();
      }
      const double per_component = cfg.descriptor_noise / std::sqrt(static_cast<double>(d));
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < d; ++c) desc(i, c) += shift(c) + per_component * rng.normal();
        const double norm = desc.row(i).norm();
        if (norm < 1e-12) throw Error(ErrorCode::DegenerateScene, "descriptor collapsed to zero");
        desc.row(i) /= norm;
      }
    };
    Matrix desc_a, desc_b;
    Eigen::MatrixX2d pts_a, pts_b;
    make_image(placed.pix_a, used_a, desc_a, pts_a);
    make_image(placed.pix_b, used_b, desc_b, pts_b);

    // Shuffle so that index order carries no information.
    const auto perm_a = permutation(n, rng);
    const auto perm_b = permutation(n, rng);
    std::vector<int> where_a(n), where_b(n);
    SyntheticPair out;
    out.desc_a.resize(n, d);
    out.desc_b.resize(n, d);
    Eigen::MatrixX2d sa(n, 2), sb(n, 2);
    for (int r = 0; r < n; ++r) {
      out.desc_a.row(r) = desc_a.row(perm_a[r]);
      sa.row(r) = pts_a.row(perm_a[r]);
      where_a[perm_a[r]] = r;
      out.desc_b.row(r) = desc_b.row(perm_b[r]);
      sb.row(r) = pts_b.row(perm_b[r]);
      where_b[perm_b[r]] = r;
    }
    out.kps_a = KeypointSet(std::move(sa), cfg.width, cfg.height);
    out.kps_b = KeypointSet(std::move(sb), cfg.width, cfg.height);
    if (cfg.rasterize_depth) {
      out.depth_a = DepthMap(cfg.height, cfg.width);
      out.depth_b = DepthMap(cfg.height, cfg.width);
    }
    for (int i = 0; i < n_in; ++i) {
      out.gt.push_back({where_a[i], where_b[i]});
      if (!cfg.rasterize_depth) continue;
      out.depth_a.at(static_cast<int>(std::floor(placed.pix_a[i].y())), static_cast<int>(std::floor(placed.pix_a[i].x()))) =
          placed.z_a[i];
      out.depth_b.at(static_cast<int>(std::floor(placed.pix_b[i].y())), static_cast<int>(std::floor(placed.pix_b[i].x()))) =
          placed.z_b[i];
    }
    std::sort(out.gt.begin(), out.gt.end());
    out.pose_ab = pose;
    out.k_a = k;
    out.k_b = k;
    return out;
  }
  throw Error(ErrorCode::DegenerateScene, "could not place " + std::to_string(n_in) + " visible points in 100 attempts");
}

}  // namespace sparsematch

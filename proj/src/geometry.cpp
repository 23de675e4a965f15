#include "sparsematch/geometry.hpp"

#include "sparsematch/error.hpp"

#include <Eigen/SVD>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>

namespace sparsematch {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DegenerateLine: return "DegenerateLine";
    case ErrorCode::CheiralityAmbiguous: return "CheiralityAmbiguous";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NotEnoughCorrespondences: return "NotEnoughCorrespondences";
    case ErrorCode::NoModelFound: return "NoModelFound";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::StateMissing: return "StateMissing";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DynamicPairRejected: return "DynamicPairRejected";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::SingularHomography: return "SingularHomography";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::DegenerateScene: return "DegenerateScene";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::PathNotFound: return "PathNotFound";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::ManifestUnreadable: return "ManifestUnreadable";
  }
  return "Unknown";
}

Mat3 Intrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Mat3 Intrinsics::inverse_matrix() const {
  Mat3 k;
  k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
  return k;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw Error(ErrorCode::InvalidArgument, "focal lengths must be positive");
  if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height)) {
    throw Error(ErrorCode::InvalidArgument, "principal point outside the image");
  }
}

Pose Pose::inverse() const {
  Pose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

Pose Pose::compose(const Pose& other) const {
  Pose out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

void Pose::validate(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = rotation.determinant();
  if (ortho > tol || std::abs(det - 1.0) > tol) {
    throw Error(ErrorCode::InvalidArgument, "rotation is not orthonormal");
  }
  if (!translation.allFinite()) throw Error(ErrorCode::InvalidArgument, "translation not finite");
}

double DepthMap::sample(const Vec2& xy) const {
  const double fx = std::floor(xy.x());
  const double fy = std::floor(xy.y());
  if (!(fx >= 0.0 && fy >= 0.0 && fx < width && fy < height)) return 0.0;
  return at(static_cast<int>(fy), static_cast<int>(fx));
}

void DepthMap::validate() const {
  if (height < 0 || width < 0 ||
      values.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw Error(ErrorCode::DimensionMismatch, "depth raster size does not match its dimensions");
  }
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) throw Error(ErrorCode::InvalidArgument, "depth values must be finite and >= 0");
  }
}

void KeypointSet::validate() const {
  for (int i = 0; i < size(); ++i) {
    const double x = points(i, 0);
    const double y = points(i, 1);
    if (!(x >= 0.0 && x < width && y >= 0.0 && y < height)) {
      throw Error(ErrorCode::InvalidArgument, "keypoint " + std::to_string(i) + " outside image bounds");
    }
  }
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Projection project(const Vec3& point_a, const Pose& pose_ab, const Intrinsics& k_b) {
  const Vec3 pb = pose_ab.apply(point_a);
  if (!(pb.z() > 1e-9)) throw Error(ErrorCode::NonPositiveDepth, "point projects behind camera");
  return {Vec2(k_b.fx * pb.x() / pb.z() + k_b.cx, k_b.fy * pb.y() / pb.z() + k_b.cy), pb.z()};
}

Vec3 unproject(const Intrinsics& k, const Vec2& pixel, double depth) {
  return Vec3((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
}

namespace {

// Reprojection of every keypoint of one image into the other, or an invalid
// marker when its depth is missing or it lands behind the other camera.
struct Reprojected {
  std::vector<Vec2> pixel;
  std::vector<double> depth;
  std::vector<char> valid;
};

Reprojected reproject_all(const KeypointSet& kps, const DepthMap& depth, const Intrinsics& k_src,
                          const Intrinsics& k_dst, const Pose& pose) {
  Reprojected out;
  const auto n = static_cast<std::size_t>(kps.size());
  out.pixel.assign(n, Vec2::Zero());
  out.depth.assign(n, 0.0);
  out.valid.assign(n, 0);
  for (int i = 0; i < kps.size(); ++i) {
    const double d = depth.sample(kps.point(i));
    if (!(d > 0.0)) continue;
    const Vec3 p = pose.apply(unproject(k_src, kps.point(i), d));
    if (!(p.z() > 1e-9)) continue;
    out.pixel[i] = Vec2(k_dst.fx * p.x() / p.z() + k_dst.cx, k_dst.fy * p.y() / p.z() + k_dst.cy);
    out.depth[i] = p.z();
    out.valid[i] = 1;
  }
  return out;
}

// Uniform bucket grid over keypoint positions for radius queries.
class PointGrid {
 public:
  PointGrid(const KeypointSet& kps, double cell) : kps_(kps), cell_(cell) {
    for (int i = 0; i < kps.size(); ++i) buckets_[key(cell_index(kps.points(i, 0)), cell_index(kps.points(i, 1)))].push_back(i);
  }

  template <typename Fn>
  void for_each_near(const Vec2& p, Fn&& fn) const {
    const long cx = cell_index(p.x());
    const long cy = cell_index(p.y());
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        auto it = buckets_.find(key(cx + dx, cy + dy));
        if (it == buckets_.end()) continue;
        for (int j : it->second) fn(j);
      }
    }
  }

 private:
  long cell_index(double v) const { return static_cast<long>(std::floor(v / cell_)); }
  static long long key(long x, long y) { return (static_cast<long long>(x) << 32) ^ static_cast<unsigned long>(y & 0xffffffffL); }

  const KeypointSet& kps_;
  double cell_;
  std::unordered_map<long long, std::vector<int>> buckets_;
};

bool depth_agrees(double projected, double observed, double rel_tol) {
  return observed > 0.0 && std::abs(projected - observed) <= rel_tol * observed;
}

}  // namespace

GtMatches generate_gt_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                              const DepthMap& depth_a, const DepthMap& depth_b,
                              const Intrinsics& k_a, const Intrinsics& k_b,
                              const Pose& pose_ab, const GtMatchOptions& opts) {
  if (depth_a.width != kps_a.width || depth_a.height != kps_a.height ||
      depth_b.width != kps_b.width || depth_b.height != kps_b.height ||
      k_a.width != kps_a.width || k_a.height != kps_a.height ||
      k_b.width != kps_b.width || k_b.height != kps_b.height) {
    throw Error(ErrorCode::DimensionMismatch, "depth maps, intrinsics and keypoint images disagree in size");
  }
  if (!(opts.pixel_tol > 0.0 && opts.rel_depth_tol > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "tolerances must be positive");
  }

  const Reprojected a_in_b = reproject_all(kps_a, depth_a, k_a, k_b, pose_ab);
  const Reprojected b_in_a = reproject_all(kps_b, depth_b, k_b, k_a, pose_ab.inverse());
  const double tol2 = opts.pixel_tol * opts.pixel_tol;

  auto consistent = [&](int i, int j) {
    if (!a_in_b.valid[i] || !b_in_a.valid[j]) return false;
    if ((a_in_b.pixel[i] - kps_b.point(j)).squaredNorm() > tol2) return false;
    if ((b_in_a.pixel[j] - kps_a.point(i)).squaredNorm() > tol2) return false;
    return depth_agrees(a_in_b.depth[i], depth_b.sample(kps_b.point(j)), opts.rel_depth_tol) &&
           depth_agrees(b_in_a.depth[j], depth_a.sample(kps_a.point(i)), opts.rel_depth_tol);
  };

  const PointGrid grid_b(kps_b, opts.pixel_tol);
  const PointGrid grid_a(kps_a, opts.pixel_tol);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  std::vector<int> best_b(kps_a.size(), -1);
  for (int i = 0; i < kps_a.size(); ++i) {
    if (!a_in_b.valid[i]) continue;
    double best = kInf;
    grid_b.for_each_near(a_in_b.pixel[i], [&](int j) {
      if (!consistent(i, j)) return;
      const double d = (a_in_b.pixel[i] - kps_b.point(j)).squaredNorm();
      if (d < best || (d == best && j < best_b[i])) {
        best = d;
        best_b[i] = j;
      }
    });
  }
  std::vector<int> best_a(kps_b.size(), -1);
  for (int j = 0; j < kps_b.size(); ++j) {
    if (!b_in_a.valid[j]) continue;
    double best = kInf;
    grid_a.for_each_near(b_in_a.pixel[j], [&](int i) {
      if (!consistent(i, j)) return;
      const double d = (b_in_a.pixel[j] - kps_a.point(i)).squaredNorm();
      if (d < best || (d == best && i < best_a[j])) {
        best = d;
        best_a[j] = i;
      }
    });
  }

  GtMatches out;
  for (int i = 0; i < kps_a.size(); ++i) {
    const int j = best_b[i];
    if (j >= 0 && best_a[j] == i) out.push_back({i, j});
  }
  return out;
}

MatchabilityTargets matchability_targets(const GtMatches& gt, int n_a, int n_b) {
  MatchabilityTargets t{std::vector<int>(n_a, 0), std::vector<int>(n_b, 0)};
  for (const auto& m : gt) {
    if (m.i < 0 || m.i >= n_a || m.j < 0 || m.j >= n_b) {
      throw Error(ErrorCode::IndexOutOfRange, "match (" + std::to_string(m.i) + ", " + std::to_string(m.j) + ") out of range");
    }
    t.a[m.i] = 1;
    t.b[m.j] = 1;
  }
  return t;
}

std::vector<double> epipolar_errors(const FundamentalMatrix& f, const Correspondences& corrs,
                                    EpipolarMode mode) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> out;
  out.reserve(corrs.size());
  for (const auto& c : corrs) {
    const Vec3 xa = c.a.homogeneous();
    const Vec3 xb = c.b.homogeneous();
    const Vec3 line_b = f * xa;
    const double alg = xb.dot(line_b);
    const double nb = std::hypot(line_b.x(), line_b.y());
    const double dist_b = nb > 0.0 ? std::abs(alg) / nb : kInf;
    if (mode == EpipolarMode::TargetOnly) {
      out.push_back(dist_b);
      continue;
    }
    const Vec3 line_a = f.transpose() * xb;
    const double na = std::hypot(line_a.x(), line_a.y());
    const double dist_a = na > 0.0 ? std::abs(alg) / na : kInf;
    out.push_back(std::max(dist_a, dist_b));
  }
  return out;
}

FundamentalMatrix normalize_fundamental(const Mat3& f) {
  Eigen::JacobiSVD<Mat3> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = svd.singularValues();
  s(2) = 0.0;
  return scale_fundamental(svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose());
}

FundamentalMatrix scale_fundamental(const Mat3& f) {
  Mat3 out = f;
  const double norm = out.norm();
  if (!(norm > 0.0)) throw Error(ErrorCode::DegenerateConfiguration, "zero fundamental matrix");
  out /= norm;
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  out.cwiseAbs().maxCoeff(&r, &c);
  if (out(r, c) < 0.0) out = -out;
  return out;
}

FundamentalMatrix fundamental_from_pose(const Pose& pose_ab, const Intrinsics& k_a,
                                        const Intrinsics& k_b) {
  const Mat3 e = skew(pose_ab.translation) * pose_ab.rotation;
  return scale_fundamental(k_b.inverse_matrix().transpose() * e * k_a.inverse_matrix());
}

EssentialMatrix essential_from_fundamental(const FundamentalMatrix& f, const Intrinsics& k_a,
                                           const Intrinsics& k_b) {
  const Mat3 e = k_b.matrix().transpose() * f * k_a.matrix();
  Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  const double mean = 0.5 * (s(0) + s(1));
  return svd.matrixU() * Vec3(mean, mean, 0.0).asDiagonal() * svd.matrixV().transpose();
}

namespace {

// Linear two-view triangulation with P_a = [I | 0] and P_b = [R | t]; returns
// the depths in both cameras.
std::pair<double, double> triangulate_depths(const Vec3& xa, const Vec3& xb, const Pose& pose) {
  Eigen::Matrix<double, 3, 4> pb;
  pb.leftCols<3>() = pose.rotation;
  pb.col(3) = pose.translation;
  Eigen::Matrix<double, 3, 4> pa = Eigen::Matrix<double, 3, 4>::Zero();
  pa.leftCols<3>().setIdentity();
  Eigen::Matrix4d a;
  a.row(0) = xa.x() * pa.row(2) - pa.row(0);
  a.row(1) = xa.y() * pa.row(2) - pa.row(1);
  a.row(2) = xb.x() * pb.row(2) - pb.row(0);
  a.row(3) = xb.y() * pb.row(2) - pb.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x(3)) < 1e-15) return {-1.0, -1.0};
  const Vec3 p = x.head<3>() / x(3);
  return {p.z(), pose.apply(p).z()};
}

}  // namespace

Pose decompose_essential(const EssentialMatrix& e, const Correspondences& corrs,
                         const Intrinsics& k_a, const Intrinsics& k_b) {
  if (corrs.empty()) throw Error(ErrorCode::CheiralityAmbiguous, "no correspondences for cheirality test");
  Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if (u.determinant() < 0.0) u = -u;
  if (v.determinant() < 0.0) v = -v;
  Mat3 w;
  w << 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0;
  const Mat3 r1 = u * w * v.transpose();
  const Mat3 r2 = u * w.transpose() * v.transpose();
  const Vec3 t = u.col(2).normalized();

  const std::array<Pose, 4> candidates{Pose{r1, t}, Pose{r1, -t}, Pose{r2, t}, Pose{r2, -t}};
  const Mat3 ka_inv = k_a.inverse_matrix();
  const Mat3 kb_inv = k_b.inverse_matrix();
  std::array<int, 4> votes{};
  for (const auto& c : corrs) {
    const Vec3 xa = ka_inv * c.a.homogeneous();
    const Vec3 xb = kb_inv * c.b.homogeneous();
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      const auto [za, zb] = triangulate_depths(xa, xb, candidates[k]);
      if (za > 0.0 && zb > 0.0) ++votes[k];
    }
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < votes.size(); ++k) {
    if (votes[k] > votes[best]) best = k;
  }
  for (std::size_t k = 0; k < votes.size(); ++k) {
    if (k != best && votes[k] == votes[best]) {
      throw Error(ErrorCode::CheiralityAmbiguous, "two pose candidates tie on cheirality votes");
    }
  }
  return candidates[best];
}

double rotation_angle_deg(const Mat3& r) {
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double angle = std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
  return angle * 180.0 / std::numbers::pi;
}

double vector_angle_deg(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / std::numbers::pi;
}

PoseErrors pose_errors(const Pose& est, const Pose& gt) {
  PoseErrors e;
  e.rotation_deg = rotation_angle_deg(est.rotation.transpose() * gt.rotation);
  if (est.translation.norm() < 1e-9 || gt.translation.norm() < 1e-9) {
    e.translation_deg = 0.0;
  } else {
    e.translation_deg = vector_angle_deg(est.translation, gt.translation);
  }
  return e;
}

double pose_error(const Pose& est, const Pose& gt) { return pose_errors(est, gt).max(); }

}  // namespace sparsematch

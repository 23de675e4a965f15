#include "sparsematch/robust.hpp"

#include "sparsematch/error.hpp"
#include "sparsematch/random.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace sparsematch {

void RansacConfig::validate() const {
  if (!(inlier_threshold > 0.0)) throw Error(ErrorCode::InvalidArgument, "inlier threshold must be positive");
  if (!(confidence > 0.0 && confidence < 1.0)) throw Error(ErrorCode::InvalidArgument, "confidence must lie in (0, 1)");
  if (max_iterations < 1) throw Error(ErrorCode::InvalidArgument, "max_iterations must be >= 1");
}

int EstimationResult::inlier_count() const {
  return static_cast<int>(std::count(inlier_mask.begin(), inlier_mask.end(), 1));
}

namespace detail {

std::vector<double> real_cubic_roots(double c3, double c2, double c1, double c0) {
  const double scale = std::max({std::abs(c3), std::abs(c2), std::abs(c1), std::abs(c0)});
  std::vector<double> roots;
  if (scale == 0.0) return roots;
  if (std::abs(c3) <= 1e-14 * scale) {
    if (std::abs(c2) <= 1e-14 * scale) {
      if (std::abs(c1) > 0.0) roots.push_back(-c0 / c1);
      return roots;
    }
    const double disc = c1 * c1 - 4.0 * c2 * c0;
    if (disc < 0.0) return roots;
    const double q = -0.5 * (c1 + std::copysign(std::sqrt(disc), c1));
    roots.push_back(q / c2);
    if (q != 0.0) roots.push_back(c0 / q);
  } else {
    const double a = c2 / c3;
    const double b = c1 / c3;
    const double c = c0 / c3;
    const double q = (a * a - 3.0 * b) / 9.0;
    const double r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
    if (r * r < q * q * q) {
      const double theta = std::acos(std::clamp(r / std::sqrt(q * q * q), -1.0, 1.0));
      const double sq = -2.0 * std::sqrt(q);
      for (double shift : {0.0, 2.0 * std::numbers::pi, -2.0 * std::numbers::pi}) {
        roots.push_back(sq * std::cos((theta + shift) / 3.0) - a / 3.0);
      }
    } else {
      const double big = -std::copysign(std::cbrt(std::abs(r) + std::sqrt(r * r - q * q * q)), r);
      const double small = big != 0.0 ? q / big : 0.0;
      roots.push_back(big + small - a / 3.0);
    }
    for (double& x : roots) {
      for (int it = 0; it < 2; ++it) {
        const double f = ((c3 * x + c2) * x + c1) * x + c0;
        const double df = (3.0 * c3 * x + 2.0 * c2) * x + c1;
        if (df == 0.0) break;
        x -= f / df;
      }
    }
  }
  std::sort(roots.begin(), roots.end());
  return roots;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t pair_id) {
  // splitmix64 finaliser over both words.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(pair_id));
}

}  // namespace detail

namespace {

using Mat9 = Eigen::Matrix<double, Eigen::Dynamic, 9>;

// Similarity transform moving the centroid to the origin with mean distance
// sqrt(2).
Mat3 conditioning(const Correspondences& corrs, bool side_b) {
  Vec2 mean = Vec2::Zero();
  for (const auto& c : corrs) mean += side_b ? c.b : c.a;
  mean /= static_cast<double>(corrs.size());
  double dist = 0.0;
  for (const auto& c : corrs) dist += ((side_b ? c.b : c.a) - mean).norm();
  dist /= static_cast<double>(corrs.size());
  const double s = dist > 0.0 ? std::numbers::sqrt2 / dist : 1.0;
  Mat3 t;
  t << s, 0.0, -s * mean.x(), 0.0, s, -s * mean.y(), 0.0, 0.0, 1.0;
  return t;
}

Mat9 epipolar_design(const Correspondences& corrs, const Mat3& ta, const Mat3& tb) {
  Mat9 a(static_cast<Eigen::Index>(corrs.size()), 9);
  for (std::size_t k = 0; k < corrs.size(); ++k) {
    const Vec3 pa = ta * corrs[k].a.homogeneous();
    const Vec3 pb = tb * corrs[k].b.homogeneous();
    const auto r = static_cast<Eigen::Index>(k);
    a.row(r) << pb.x() * pa.x(), pb.x() * pa.y(), pb.x(), pb.y() * pa.x(), pb.y() * pa.y(), pb.y(),
        pa.x(), pa.y(), 1.0;
  }
  return a;
}

Mat3 reshape(const Eigen::Matrix<double, 9, 1>& v) {
  Mat3 m;
  m << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
  return m;
}

Mat3 sign_normalized(Mat3 m) {
  m /= m.norm();
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  m.cwiseAbs().maxCoeff(&r, &c);
  if (m(r, c) < 0.0) m = -m;
  return m;
}

double triangle_area2(const Vec2& p, const Vec2& q, const Vec2& r) {
  return std::abs((q - p).x() * (r - p).y() - (q - p).y() * (r - p).x());
}

bool has_collinear_triple(const Correspondences& corrs, bool side_b) {
  const std::size_t n = corrs.size();
  double extent = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      extent = std::max(extent, ((side_b ? corrs[i].b : corrs[i].a) - (side_b ? corrs[j].b : corrs[j].a)).squaredNorm());
    }
  }
  if (extent == 0.0) return true;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t k = j + 1; k < n; ++k) {
        const auto& p = side_b ? corrs[i].b : corrs[i].a;
        const auto& q = side_b ? corrs[j].b : corrs[j].a;
        const auto& r = side_b ? corrs[k].b : corrs[k].a;
        if (triangle_area2(p, q, r) <= 1e-9 * extent) return true;
      }
    }
  }
  return false;
}

}  // namespace

FundamentalMatrix eight_point(const Correspondences& corrs) { return eight_point(corrs, {}); }

FundamentalMatrix eight_point(const Correspondences& corrs, const std::vector<double>& weights) {
  if (corrs.size() < 8) throw Error(ErrorCode::NotEnoughCorrespondences, "eight_point needs >= 8 correspondences");
  if (!weights.empty() && weights.size() != corrs.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one weight per correspondence required");
  }
  const Mat3 ta = conditioning(corrs, false);
  const Mat3 tb = conditioning(corrs, true);
  Mat9 a = epipolar_design(corrs, ta, tb);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] >= 0.0)) throw Error(ErrorCode::InvalidArgument, "weights must be non-negative");
    a.row(static_cast<Eigen::Index>(k)) *= weights[k];
  }
  Eigen::JacobiSVD<Mat9> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (!(s(0) > 0.0) || s(7) <= 1e-9 * s(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "epipolar design matrix has rank < 8");
  }
  const Mat3 fn = normalize_fundamental(reshape(svd.matrixV().col(8)));
  return scale_fundamental(tb.transpose() * fn * ta);
}

std::vector<FundamentalMatrix> seven_point(const Correspondences& corrs) {
  if (corrs.size() != 7) throw Error(ErrorCode::InvalidArgument, "seven_point needs exactly 7 correspondences");
  const Mat3 ta = conditioning(corrs, false);
  const Mat3 tb = conditioning(corrs, true);
  const Mat9 a = epipolar_design(corrs, ta, tb);
  Eigen::JacobiSVD<Mat9> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (!(s(0) > 0.0) || s(6) <= 1e-10 * s(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "epipolar design matrix has rank < 7");
  }
  const Mat3 f1 = reshape(svd.matrixV().col(7));
  const Mat3 f2 = reshape(svd.matrixV().col(8));
  const Mat3 diff = f1 - f2;
  // det(f2 + x·diff) sampled at four points determines the cubic exactly.
  auto det_at = [&](double x) { return (f2 + x * diff).determinant(); };
  const double p0 = det_at(0.0);
  const double p1 = det_at(1.0);
  const double pm1 = det_at(-1.0);
  const double p2 = det_at(2.0);
  const double c0 = p0;
  const double c2 = 0.5 * (p1 + pm1) - c0;
  const double odd = 0.5 * (p1 - pm1);
  const double c3 = (p2 - 4.0 * c2 - c0 - 2.0 * odd) / 6.0;
  const double c1 = odd - c3;

  std::vector<FundamentalMatrix> out;
  for (double x : detail::real_cubic_roots(c3, c2, c1, c0)) {
    const Mat3 fn = f2 + x * diff;
    const Mat3 f = tb.transpose() * fn * ta;
    if (!(f.norm() > 0.0) || !f.allFinite()) continue;
    out.push_back(normalize_fundamental(f));
  }
  if (out.empty()) throw Error(ErrorCode::DegenerateConfiguration, "no real solution for the 7-point cubic");
  return out;
}

Mat3 homography_dlt(const Correspondences& corrs) {
  if (corrs.size() < 4) throw Error(ErrorCode::NotEnoughCorrespondences, "homography needs >= 4 correspondences");
  if (corrs.size() == 4 && (has_collinear_triple(corrs, false) || has_collinear_triple(corrs, true))) {
    throw Error(ErrorCode::DegenerateConfiguration, "three collinear points in a minimal homography sample");
  }
  const Mat3 ta = conditioning(corrs, false);
  const Mat3 tb = conditioning(corrs, true);
  Mat9 a(2 * static_cast<Eigen::Index>(corrs.size()), 9);
  for (std::size_t k = 0; k < corrs.size(); ++k) {
    const Vec3 pa = ta * corrs[k].a.homogeneous();
    const Vec3 pb = tb * corrs[k].b.homogeneous();
    const auto r = 2 * static_cast<Eigen::Index>(k);
    a.row(r) << 0.0, 0.0, 0.0, -pa.x(), -pa.y(), -1.0, pb.y() * pa.x(), pb.y() * pa.y(), pb.y();
    a.row(r + 1) << pa.x(), pa.y(), 1.0, 0.0, 0.0, 0.0, -pb.x() * pa.x(), -pb.x() * pa.y(), -pb.x();
  }
  Eigen::JacobiSVD<Mat9> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (!(s(0) > 0.0) || s(7) <= 1e-10 * s(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "homography design matrix has rank < 8");
  }
  const Mat3 hn = reshape(svd.matrixV().col(8));
  const Mat3 h = tb.inverse() * hn * ta;
  if (!h.allFinite() || std::abs(h.determinant()) <= 1e-14 * std::pow(h.norm(), 3)) {
    throw Error(ErrorCode::DegenerateConfiguration, "singular homography");
  }
  return sign_normalized(h);
}

double sampson_distance(const FundamentalMatrix& f, const Correspondence& c) {
  const Vec3 xa = c.a.homogeneous();
  const Vec3 xb = c.b.homogeneous();
  const Vec3 fa = f * xa;
  const Vec3 fb = f.transpose() * xb;
  const double num = xb.dot(fa);
  const double den = fa.x() * fa.x() + fa.y() * fa.y() + fb.x() * fb.x() + fb.y() * fb.y();
  if (!(den > 0.0)) return std::numeric_limits<double>::infinity();
  return std::abs(num) / std::sqrt(den);
}

double symmetric_transfer_error(const Mat3& h, const Mat3& h_inv, const Correspondence& c) {
  const Vec3 fwd = h * c.a.homogeneous();
  const Vec3 bwd = h_inv * c.b.homogeneous();
  if (fwd.z() == 0.0 || bwd.z() == 0.0) return std::numeric_limits<double>::infinity();
  const double d1 = (fwd.hnormalized() - c.b).squaredNorm();
  const double d2 = (bwd.hnormalized() - c.a).squaredNorm();
  return std::sqrt(0.5 * (d1 + d2));
}

namespace {

constexpr double kTruncationFactor = 3.0;
constexpr int kMaxPruneRounds = 20;

struct FundamentalKernel {
  static constexpr int kMinimal = 7;
  static constexpr int kRefit = 8;
  std::vector<Mat3> solve_minimal(const Correspondences& s) const { return seven_point(s); }
  Mat3 refit(const Correspondences& s) const { return eight_point(s); }

  // Drops, one per round, the point whose residual under a fit without it is
  // largest, while that residual exceeds `limit`. A mismatch far from the
  // inlier support can otherwise pull the least-squares fit onto itself.
  // Leave-one-out fits downdate the 9x9 normal matrix.
  Correspondences prune(Correspondences s, double limit) const {
    using Mat99 = Eigen::Matrix<double, 9, 9>;
    Eigen::SelfAdjointEigenSolver<Mat99> eig;
    for (int round = 0; round < kMaxPruneRounds && static_cast<int>(s.size()) > kRefit; ++round) {
      const Mat3 ta = conditioning(s, false);
      const Mat3 tb = conditioning(s, true);
      const Mat9 a = epipolar_design(s, ta, tb);
      const Mat99 normal = a.transpose() * a;
      double worst = limit;
      std::ptrdiff_t worst_k = -1;
      for (Eigen::Index k = 0; k < a.rows(); ++k) {
        eig.compute(normal - a.row(k).transpose() * a.row(k));
        if (eig.info() != Eigen::Success) continue;
        const Mat3 fn = reshape(eig.eigenvectors().col(0));
        if (!fn.allFinite() || fn.norm() == 0.0) continue;
        const double d = sampson_distance(tb.transpose() * normalize_fundamental(fn) * ta, s[static_cast<std::size_t>(k)]);
        if (d > worst) {
          worst = d;
          worst_k = k;
        }
      }
      if (worst_k < 0) break;
      s.erase(s.begin() + worst_k);
    }
    return s;
  }
  struct Evaluator {
    Mat3 f;
    double operator()(const Correspondence& c) const { return sampson_distance(f, c); }
  };
  Evaluator evaluator(const Mat3& m) const { return {m}; }
};

struct HomographyKernel {
  static constexpr int kMinimal = 4;
  static constexpr int kRefit = 4;
  std::vector<Mat3> solve_minimal(const Correspondences& s) const { return {homography_dlt(s)}; }
  Mat3 refit(const Correspondences& s) const { return homography_dlt(s); }
  Correspondences prune(Correspondences s, double) const { return s; }
  struct Evaluator {
    Mat3 h;
    Mat3 h_inv;
    double operator()(const Correspondence& c) const { return symmetric_transfer_error(h, h_inv, c); }
  };
  Evaluator evaluator(const Mat3& m) const { return {m, m.inverse()}; }
};


struct Scored {
  double score = -1.0;
  int inliers = 0;
};

template <typename Kernel>
Scored score_model(const Kernel& kernel, const Mat3& model, const Correspondences& corrs,
                   const RansacConfig& cfg, std::vector<char>* mask) {
  const auto eval = kernel.evaluator(model);
  const double tau = cfg.inlier_threshold;
  const double trunc2 = kTruncationFactor * kTruncationFactor * tau * tau;
  Scored s{0.0, 0};
  if (mask) mask->assign(corrs.size(), 0);
  for (std::size_t k = 0; k < corrs.size(); ++k) {
    const double r = eval(corrs[k]);
    if (r <= tau) {
      ++s.inliers;
      if (mask) (*mask)[k] = 1;
    }
    if (cfg.scoring == RansacScoring::HardThreshold) continue;
    if (r * r < trunc2) s.score += 1.0 - r * r / trunc2;
  }
  if (cfg.scoring == RansacScoring::HardThreshold) s.score = s.inliers;
  return s;
}

template <typename Kernel>
Correspondences gather(const Correspondences& corrs, const std::vector<char>& mask) {
  Correspondences out;
  for (std::size_t k = 0; k < corrs.size(); ++k) {
    if (mask[k]) out.push_back(corrs[k]);
  }
  return out;
}

template <typename Kernel>
EstimationResult run_ransac(const Kernel& kernel, const Correspondences& corrs, const RansacConfig& cfg,
                            std::uint64_t pair_id, const std::vector<int>& sample_pool) {
  cfg.validate();
  constexpr int m = Kernel::kMinimal;
  if (static_cast<int>(corrs.size()) < m) {
    throw Error(ErrorCode::NotEnoughCorrespondences,
                "need at least " + std::to_string(m) + " correspondences, got " + std::to_string(corrs.size()));
  }
  std::vector<int> pool = sample_pool;
  if (pool.empty()) {
    pool.resize(corrs.size());
    for (std::size_t k = 0; k < corrs.size(); ++k) pool[k] = static_cast<int>(k);
  }
  for (int idx : pool) {
    if (idx < 0 || idx >= static_cast<int>(corrs.size())) throw Error(ErrorCode::IndexOutOfRange, "sample pool index out of range");
  }
  if (static_cast<int>(pool.size()) < m) throw Error(ErrorCode::NotEnoughCorrespondences, "sample pool smaller than minimal sample");

  Rng sampler(detail::mix_seed(cfg.seed, pair_id));
  const double n = static_cast<double>(corrs.size());
  const double log_fail = std::log(1.0 - cfg.confidence);

  Mat3 best_model = Mat3::Zero();
  Scored best;
  bool found = false;
  long long needed = cfg.max_iterations;
  int it = 0;
  std::array<int, m> idx{};
  Correspondences sample(m);

  auto update_needed = [&](int inliers) {
    const double w = inliers / n;
    const double p_good = std::pow(w, m);
    if (p_good >= 1.0) {
      needed = 0;
    } else if (p_good > 0.0) {
      const double k = log_fail / std::log1p(-p_good);
      needed = std::min<long long>(needed, static_cast<long long>(std::ceil(k)));
    }
  };

  auto consider = [&](const Mat3& model) {
    if (!model.allFinite()) return false;
    const Scored s = score_model(kernel, model, corrs, cfg, nullptr);
    if (s.score > best.score) {
      best = s;
      best_model = model;
      found = true;
      return true;
    }
    return false;
  };

  while (it < needed && it < cfg.max_iterations) {
    ++it;
    for (int k = 0; k < m; ++k) {
      int cand = 0;
      bool dup = true;
      while (dup) {
        cand = pool[sampler.index(pool.size())];
        dup = std::find(idx.begin(), idx.begin() + k, cand) != idx.begin() + k;
      }
      idx[k] = cand;
      sample[k] = corrs[cand];
    }
    std::vector<Mat3> models;
    try {
      models = kernel.solve_minimal(sample);
    } catch (const Error&) {
      continue;  // degenerate sample
    }
    bool improved = false;
    for (const auto& h : models) improved = consider(h) || improved;
    if (!improved) continue;
    if (cfg.local_optimization && best.inliers >= Kernel::kRefit) {
      std::vector<char> mask;
      score_model(kernel, best_model, corrs, cfg, &mask);
      try {
        consider(kernel.refit(gather<Kernel>(corrs, mask)));
      } catch (const Error&) {
      }
    }
    update_needed(best.inliers);
  }

  if (!found) throw Error(ErrorCode::NoModelFound, "every RANSAC hypothesis was degenerate");

  // Final refit on everything inside the scoring support: the truncation
  // band for the soft score, the inlier threshold for hard counting.
  const double support_limit = cfg.scoring == RansacScoring::HardThreshold
                                   ? cfg.inlier_threshold
                                   : kTruncationFactor * cfg.inlier_threshold;
  Mat3 final_model = best_model;
  {
    const auto eval = kernel.evaluator(best_model);
    Correspondences support;
    for (const auto& c : corrs) {
      if (eval(c) <= support_limit) support.push_back(c);
    }
    if (static_cast<int>(support.size()) >= Kernel::kRefit) {
      try {
        const Mat3 refined = kernel.refit(kernel.prune(std::move(support), support_limit));
        if (refined.allFinite()) final_model = refined;
      } catch (const Error&) {
      }
    }
  }

  EstimationResult result;
  result.iterations_run = it;
  result.model = final_model;
  result.score = score_model(kernel, final_model, corrs, cfg, &result.inlier_mask).score;
  return result;
}

}  // namespace

EstimationResult ransac_fundamental(const Correspondences& corrs, const RansacConfig& cfg,
                                    std::uint64_t pair_id, const std::vector<int>& sample_pool) {
  return run_ransac(FundamentalKernel{}, corrs, cfg, pair_id, sample_pool);
}

EstimationResult ransac_homography(const Correspondences& corrs, const RansacConfig& cfg,
                                   std::uint64_t pair_id, const std::vector<int>& sample_pool) {
  return run_ransac(HomographyKernel{}, corrs, cfg, pair_id, sample_pool);
}

}  // namespace sparsematch

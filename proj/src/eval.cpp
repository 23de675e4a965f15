#include "sparsematch/eval.hpp"

#include "sparsematch/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <thread>

namespace sparsematch {

PckCurve pck_curve(const std::vector<double>& errors) {
  PckCurve curve{};
  if (errors.empty()) return curve;
  for (double e : errors) {
    if (!std::isfinite(e)) continue;
    for (int t = 0; t <= kPckMaxThreshold; ++t) {
      if (e <= t) curve[t] += 1.0;
    }
  }
  for (double& v : curve) v /= static_cast<double>(errors.size());
  return curve;
}

Vec2 to_eval_resolution(const Vec2& p, int width, int height) {
  return {p.x() * kEvalResolution / width, p.y() * kEvalResolution / height};
}

Correspondences to_eval_resolution(const Correspondences& corrs, const ImageRef& a, const ImageRef& b) {
  Correspondences out;
  out.reserve(corrs.size());
  for (const auto& c : corrs) {
    out.push_back({to_eval_resolution(c.a, a.width, a.height), to_eval_resolution(c.b, b.width, b.height)});
  }
  return out;
}

RansacConfig fmatrix_protocol_ransac() {
  RansacConfig cfg;
  cfg.inlier_threshold = 0.25;
  cfg.scoring = RansacScoring::MagsacTruncated;
  return cfg;
}

std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

PckCurve eval_pair_fmatrix(const PairRecord& record, const Correspondences& predicted, const RansacConfig& ransac) {
  if (record.dynamic) throw Error(ErrorCode::DynamicPairRejected, "pair " + record.id + " is dynamic");
  if (record.gt.empty()) throw Error(ErrorCode::EmptyInput, "pair " + record.id + " has no ground-truth correspondences");
  if (predicted.size() < 7) return PckCurve{};
  const auto pred = to_eval_resolution(predicted, record.image_a, record.image_b);
  const auto gt = to_eval_resolution(record.gt, record.image_a, record.image_b);
  FundamentalMatrix f;
  try {
    f = ransac_fundamental(pred, ransac, stable_hash(record.id)).model;
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::NoModelFound:
      case ErrorCode::DegenerateConfiguration:
      case ErrorCode::NotEnoughCorrespondences:
        return PckCurve{};
      default:
        throw;
    }
  }
  return pck_curve(epipolar_errors(f, gt));
}

double maa_at(const PckCurve& curve, int limit) {
  if (limit < 1 || limit > kPckMaxThreshold) throw Error(ErrorCode::InvalidArgument, "mAA limit must lie in [1, 20]");
  double sum = 0.0;
  for (int t = 1; t <= limit; ++t) sum += curve[t];
  return sum / limit;
}

AppendResult eval_correspondence_append(const PairRecord& record, const KeypointSet& detected_a,
                                        const Matrix& detected_desc_a, const Matrix& gt_desc_a,
                                        const KeypointSet& kps_b, const Matrix& desc_b, const MatchFunction& match) {
  const int n_det = detected_a.size();
  const int n_gt = static_cast<int>(record.gt.size());
  if (gt_desc_a.rows() != n_gt || detected_desc_a.rows() != n_det) {
    throw Error(ErrorCode::ShapeMismatch, "descriptor rows do not match keypoint counts");
  }
  if (n_gt > 0 && n_det > 0 && gt_desc_a.cols() != detected_desc_a.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "descriptor dimensions differ");
  }
  Eigen::MatrixX2d pts(n_det + n_gt, 2);
  if (n_det > 0) pts.topRows(n_det) = detected_a.points;
  for (int k = 0; k < n_gt; ++k) pts.row(n_det + k) = record.gt[k].a.transpose();
  Matrix desc(n_det + n_gt, n_gt > 0 ? gt_desc_a.cols() : detected_desc_a.cols());
  if (n_det > 0) desc.topRows(n_det) = detected_desc_a;
  if (n_gt > 0) desc.bottomRows(n_gt) = gt_desc_a;
  const KeypointSet augmented(std::move(pts), record.image_a.width, record.image_a.height);

  AppendResult out;
  out.errors.assign(n_gt, std::numeric_limits<double>::infinity());
  const MatchSet matches = match(augmented, kps_b, desc, desc_b);
  for (const auto& m : matches) {
    const int k = m.i - n_det;
    if (k < 0 || k >= n_gt) continue;
    if (m.j < 0 || m.j >= kps_b.size()) throw Error(ErrorCode::IndexOutOfRange, "match index outside image B");
    const Vec2 found = to_eval_resolution(kps_b.point(m.j), record.image_b.width, record.image_b.height);
    const Vec2 want = to_eval_resolution(record.gt[k].b, record.image_b.width, record.image_b.height);
    out.errors[k] = (found - want).norm();
  }
  for (std::size_t t = 0; t < kAppendThresholds.size(); ++t) {
    if (n_gt == 0) break;
    const auto hits = std::count_if(out.errors.begin(), out.errors.end(),
                                    [&](double e) { return e <= kAppendThresholds[t]; });
    out.pck[t] = static_cast<double>(hits) / n_gt;
  }
  return out;
}

std::vector<double> pose_auc(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw Error(ErrorCode::EmptyInput, "pose AUC of an empty error list");
  std::vector<double> e;
  e.reserve(errors.size() + 1);
  e.push_back(0.0);
  for (double v : errors) {
    if (std::isnan(v)) v = std::numeric_limits<double>::infinity();
    if (v < 0.0) throw Error(ErrorCode::InvalidArgument, "negative pose error");
    e.push_back(v);
  }
  std::sort(e.begin() + 1, e.end());
  const double n = static_cast<double>(errors.size());
  std::vector<double> out;
  for (double t : thresholds) {
    if (!(t > 0.0)) throw Error(ErrorCode::InvalidArgument, "AUC threshold must be positive");
    // First index whose error reaches t.
    const auto last = static_cast<std::size_t>(std::lower_bound(e.begin(), e.end(), t) - e.begin());
    double area = 0.0;
    for (std::size_t k = 1; k < last; ++k) {
      const double r0 = static_cast<double>(k - 1) / n;
      const double r1 = static_cast<double>(k) / n;
      area += 0.5 * (r0 + r1) * (e[k] - e[k - 1]);
    }
    area += static_cast<double>(last - 1) / n * (t - e[last - 1]);
    out.push_back(area / t);
  }
  return out;
}

ImcThresholds ImcThresholds::standard() {
  ImcThresholds t;
  for (int k = 0; k < 10; ++k) {
    t.rotation_deg.push_back(1.0 + k * (10.0 - 1.0) / 9.0);
    t.translation_m.push_back(0.2 + k * (5.0 - 0.2) / 9.0);
  }
  return t;
}

double imc_maa(const std::vector<double>& rotation_errors_deg, const std::vector<double>& translation_errors_m,
               const std::vector<std::string>& scenes, const ImcThresholds& thresholds) {
  if (rotation_errors_deg.empty()) throw Error(ErrorCode::EmptyInput, "IMC mAA of an empty error list");
  if (rotation_errors_deg.size() != translation_errors_m.size() || scenes.size() != rotation_errors_deg.size()) {
    throw Error(ErrorCode::LengthMismatch, "error lists and scene labels differ in length");
  }
  if (thresholds.rotation_deg.empty() || thresholds.rotation_deg.size() != thresholds.translation_m.size()) {
    throw Error(ErrorCode::LengthMismatch, "threshold lists must be non-empty and paired");
  }
  std::map<std::string, std::vector<std::size_t>> by_scene;
  for (std::size_t k = 0; k < scenes.size(); ++k) by_scene[scenes[k]].push_back(k);
  double total = 0.0;
  for (const auto& [scene, idx] : by_scene) {
    double scene_acc = 0.0;
    for (std::size_t t = 0; t < thresholds.rotation_deg.size(); ++t) {
      std::size_t hits = 0;
      for (auto k : idx) {
        if (rotation_errors_deg[k] < thresholds.rotation_deg[t] && translation_errors_m[k] < thresholds.translation_m[t]) ++hits;
      }
      scene_acc += static_cast<double>(hits) / idx.size();
    }
    total += scene_acc / thresholds.rotation_deg.size();
  }
  return total / by_scene.size();
}

namespace {

Vec2 apply_homography(const Mat3& h, const Vec2& p) {
  const Vec3 q = h * p.homogeneous();
  if (std::abs(q.z()) < 1e-12) throw Error(ErrorCode::SingularHomography, "corner maps to infinity");
  return q.hnormalized();
}

void check_invertible(const Mat3& h) {
  const double scale = h.norm();
  if (!h.allFinite() || !(scale > 0.0) || std::abs(h.determinant()) < 1e-12 * scale * scale * scale) {
    throw Error(ErrorCode::SingularHomography, "homography is singular");
  }
}

}  // namespace

double homography_corner_error(const Mat3& est_h, const Mat3& gt_h, int width, int height) {
  check_invertible(est_h);
  check_invertible(gt_h);
  const double w = width - 1.0;
  const double h = height - 1.0;
  const Vec2 corners[4] = {{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}};
  double sum = 0.0;
  for (const auto& c : corners) sum += (apply_homography(est_h, c) - apply_homography(gt_h, c)).norm();
  return sum / 4.0;
}

std::vector<double> homography_corner_auc(const std::vector<double>& corner_errors, const std::vector<double>& thresholds) {
  return pose_auc(corner_errors, thresholds);
}

Aggregate aggregate(const std::vector<PairEvalRow>& rows, GroupBy by) {
  if (rows.empty()) throw Error(ErrorCode::EmptyInput, "nothing to aggregate");
  auto key = [by](const PairEvalRow& r) -> const std::string& {
    switch (by) {
      case GroupBy::Group:
        return r.group;
      case GroupBy::Category:
        return r.category;
      case GroupBy::Split:
        break;
    }
    return r.split;
  };
  Aggregate out;
  auto add = [](BucketSummary& b, const PckCurve& c) {
    ++b.pairs;
    for (int t = 0; t <= kPckMaxThreshold; ++t) b.curve[t] += c[t];
  };
  auto finish = [](BucketSummary& b) {
    for (double& v : b.curve) v /= b.pairs;
    b.maa10 = maa_at(b.curve, 10);
  };
  for (const auto& r : rows) {
    add(out.overall, r.curve);
    add(out.buckets[key(r)], r.curve);
  }
  finish(out.overall);
  for (auto& [name, b] : out.buckets) finish(b);
  return out;
}

std::vector<SweepPoint> pareto_sweep(const std::vector<SweepPair>& pairs, const MatcherWeights<float>& weights,
                                     const MatcherConfig& cfg, const std::vector<int>& stop_layers,
                                     const std::vector<int>& batch_sizes, const AccuracyFunction& accuracy, int runs) {
  if (pairs.empty() || stop_layers.empty() || batch_sizes.empty()) {
    throw Error(ErrorCode::EmptyInput, "sweep needs pairs, stop layers and batch sizes");
  }
  if (runs < 1) throw Error(ErrorCode::InvalidArgument, "runs must be >= 1");
  using clock = std::chrono::steady_clock;
  const std::size_t cores = std::max(1u, std::thread::hardware_concurrency());
  std::vector<SweepPoint> out;
  for (int stop : stop_layers) {
    MatcherConfig c = cfg;
    c.stop_layer = stop;
    c.validate();
    double flops = 0.0;
    for (const auto& p : pairs) flops += forward_flops(c, p.kps_a.size(), p.kps_b.size(), stop);
    flops /= static_cast<double>(pairs.size());
    for (int batch : batch_sizes) {
      if (batch < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
      std::vector<MatchSet> results(pairs.size());
      auto pass = [&]() {
        for (std::size_t start = 0; start < pairs.size(); start += batch) {
          const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(batch));
          const std::size_t workers = std::min<std::size_t>(cores, end - start);
          auto work = [&](std::size_t w) {
            for (std::size_t k = start + w; k < end; k += workers) {
              const auto& p = pairs[k];
              results[k] = match_pair(p.kps_a, p.kps_b, p.desc_a, p.desc_b, weights, c);
            }
          };
          if (workers <= 1) {
            work(0);
            continue;
          }
          std::vector<std::thread> pool;
          for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
          for (auto& t : pool) t.join();
        }
      };
      pass();  // warmup
      std::vector<double> rates;
      for (int r = 0; r < runs; ++r) {
        const auto t0 = clock::now();
        pass();
        const double secs = std::chrono::duration<double>(clock::now() - t0).count();
        rates.push_back(static_cast<double>(pairs.size()) / std::max(secs, 1e-12));
      }
      std::sort(rates.begin(), rates.end());
      SweepPoint pt;
      pt.stop_layer = stop;
      pt.batch_size = batch;
      pt.pairs_per_second = rates[rates.size() / 2];
      pt.flops_per_pair = flops;
      double acc = 0.0;
      for (std::size_t k = 0; k < pairs.size(); ++k) acc += accuracy ? accuracy(k, results[k]) : 0.0;
      pt.accuracy = acc / static_cast<double>(pairs.size());
      out.push_back(pt);
    }
  }
  return out;
}

}  // namespace sparsematch

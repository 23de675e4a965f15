#pragma once

#include "sparsematch/container.hpp"
#include "sparsematch/dataset.hpp"
#include "sparsematch/synth.hpp"
#include "support.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace testsupport {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FixtureOptions {
  int pairs = 4;
  int points = 96;
  int gt_count = 12;
  double noise = 0.0;
  double outliers = 0.0;
  double appearance_shift = 0.0;
  std::uint64_t seed = 1;
  std::vector<int> dynamic;  // indices flagged dynamic
};

// Synthetic manifest with feature containers. The GT subset of A keypoints
// is held out of the detected set and stored as gt_descriptors_a.
inline std::vector<PairRecord> write_synthetic_fixture(const std::filesystem::path& dir, const FixtureOptions& o) {
  std::filesystem::create_directories(dir / "features");
  std::vector<PairRecord> records;
  for (int k = 0; k < o.pairs; ++k) {
    SyntheticSceneConfig c;
    c.n_points = o.points;
    c.descriptor_noise = o.noise;
    c.outlier_fraction = o.outliers;
    c.appearance_shift = o.appearance_shift;
    c.rasterize_depth = false;
    c.seed = o.seed * 1000 + k;
    const auto p = synth_pair(c);
    const int n_gt = std::min<int>(o.gt_count, static_cast<int>(p.gt.size()));
    std::vector<char> held(p.kps_a.size(), 0);
    PairRecord r;
    r.id = "fx_" + std::to_string(k);
    r.image_a = {"", c.width, c.height};
    r.image_b = {"", c.width, c.height};
    RowMat gt_desc(n_gt, p.desc_a.cols());
    for (int g = 0; g < n_gt; ++g) {
      held[p.gt[g].i] = 1;
      gt_desc.row(g) = p.desc_a.row(p.gt[g].i);
      r.gt.push_back({p.kps_a.point(p.gt[g].i), p.kps_b.point(p.gt[g].j)});
    }
    RowMat ka(p.kps_a.size() - n_gt, 2), da(p.kps_a.size() - n_gt, p.desc_a.cols());
    for (int i = 0, row = 0; i < p.kps_a.size(); ++i) {
      if (held[i]) continue;
      ka.row(row) = p.kps_a.points.row(i);
      da.row(row) = p.desc_a.row(i);
      ++row;
    }
    r.group = k % 2 ? "Aerial" : "Celestial";
    r.category = "cat" + std::to_string(k % 3);
    r.scene = "scene" + std::to_string(k % 2);
    r.split = k % 4 == 0 ? "validation" : "test";
    r.dynamic = std::find(o.dynamic.begin(), o.dynamic.end(), k) != o.dynamic.end();
    r.pose_ab = p.pose_ab;
    r.intrinsics_a = p.k_a;
    r.intrinsics_b = p.k_b;
    r.features = "features/" + r.id + ".mlw";
    TensorContainer f;
    f.tensors["keypoints_a"] = StoredTensor::from_matrix<double>(ka);
    f.tensors["descriptors_a"] = StoredTensor::from_matrix<double>(da);
    f.tensors["gt_descriptors_a"] = StoredTensor::from_matrix<double>(gt_desc);
    f.tensors["keypoints_b"] = StoredTensor::from_matrix<double>(RowMat(p.kps_b.points));
    f.tensors["descriptors_b"] = StoredTensor::from_matrix<double>(RowMat(p.desc_b));
    f.save(dir / r.features);
    records.push_back(r);
  }
  save_pair_manifest(dir / "manifest.jsonl", records);
  return records;
}

// Planar pairs related by a known homography, with shared random unit
// descriptors so raw mutual matching recovers every correspondence.
inline std::vector<PairRecord> write_planar_fixture(const std::filesystem::path& dir, int pairs, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "features");
  Rng rng(seed);
  std::vector<PairRecord> records;
  for (int k = 0; k < pairs; ++k) {
    Mat3 h;
    h << 1 + rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-20, 20), rng.uniform(-0.1, 0.1),
        1 + rng.uniform(-0.1, 0.1), rng.uniform(-20, 20), rng.uniform(-1e-4, 1e-4), rng.uniform(-1e-4, 1e-4), 1;
    const int n = 60;
    RowMat ka(n, 2), kb(n, 2), desc(n, 32);
    for (int i = 0; i < n; ++i) {
      const Vec2 a(rng.uniform(40, 600), rng.uniform(40, 440));
      ka.row(i) = a.transpose();
      kb.row(i) = (h * a.homogeneous()).hnormalized().transpose();
      for (int d = 0; d < 32; ++d) desc(i, d) = rng.normal();
      desc.row(i).normalize();
    }
    PairRecord r;
    r.id = "plane_" + std::to_string(k);
    r.image_a = {"", 640, 480};
    r.image_b = {"", 800, 600};
    r.homography = h;
    r.group = "HPatches";
    r.features = "features/" + r.id + ".mlw";
    TensorContainer f;
    f.tensors["keypoints_a"] = StoredTensor::from_matrix<double>(ka);
    f.tensors["descriptors_a"] = StoredTensor::from_matrix<double>(desc);
    f.tensors["keypoints_b"] = StoredTensor::from_matrix<double>(kb);
    f.tensors["descriptors_b"] = StoredTensor::from_matrix<double>(desc);
    f.save(dir / r.features);
    records.push_back(r);
  }
  save_pair_manifest(dir / "manifest.jsonl", records);
  return records;
}

}  // namespace testsupport

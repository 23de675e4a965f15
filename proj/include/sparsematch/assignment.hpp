#pragma once

#include "sparsematch/geometry.hpp"

#include <Eigen/Core>

#include <vector>

namespace sparsematch {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Descriptor sets are N×d matrices with unit-norm rows.
void validate_descriptors(const Matrix& desc, double tol = 1e-6);

struct MatchConfig {
  double inv_temperature = 20.0;
  double match_threshold = 0.1;  // μ

  void validate() const;
};

struct Match {
  int i = 0;
  int j = 0;
  double score = 0.0;
};
using MatchSet = std::vector<Match>;

/// S = A·Bᵀ, entry (i, j) the inner product of descriptor i in A and j in B.
Matrix similarity(const Matrix& desc_a, const Matrix& desc_b);

/// Element-wise product of the row-wise and column-wise softmax of τ⁻¹·S.
Matrix dual_softmax(const Matrix& s, double inv_temperature);

/// Mutual arg-max pairs with score ≥ μ. Each row's arg-max is taken at the
/// lowest column among exact ties and each column's at the lowest row.
/// Sorted by i.
MatchSet mutual_matches(const Matrix& p, double mu);

/// Dual-softmax contrastive loss summed over ground-truth pairs. When
/// `grad_s` is given it receives dL/dS.
double descriptor_loss(const Matrix& s, const GtMatches& gt, double inv_temperature,
                       Matrix* grad_s = nullptr);

/// Mean binary cross-entropy over both images' keypoints, from logits.
/// Optional outputs receive dL/dlogit.
double matchability_loss(const Vector& logits_a, const Vector& logits_b,
                         const std::vector<int>& targets_a, const std::vector<int>& targets_b,
                         Vector* grad_a = nullptr, Vector* grad_b = nullptr);

struct LayerTerm {
  Matrix similarity;
  Vector logits_a;
  Vector logits_b;
};

struct LayerTermGrad {
  Matrix similarity;
  Vector logits_a;
  Vector logits_b;
};

struct LayerwiseLossConfig {
  double inv_temperature = 20.0;
  double match_weight = 1.0;  // λ on the matchability term
};

/// Mean over layers of (descriptor loss / |gt|) + λ·matchability loss.
double layerwise_loss(const std::vector<LayerTerm>& layers, const GtMatches& gt,
                      const LayerwiseLossConfig& cfg, std::vector<LayerTermGrad>* grads = nullptr);

}  // namespace sparsematch

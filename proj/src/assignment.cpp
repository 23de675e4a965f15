#include "sparsematch/assignment.hpp"

#include "sparsematch/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sparsematch {

void validate_descriptors(const Matrix& desc, double tol) {
  if (!desc.allFinite()) throw Error(ErrorCode::InvalidArgument, "descriptors contain non-finite values");
  for (Eigen::Index r = 0; r < desc.rows(); ++r) {
    if (std::abs(desc.row(r).norm() - 1.0) > tol) {
      throw Error(ErrorCode::InvalidArgument, "descriptor " + std::to_string(r) + " is not unit norm");
    }
  }
}

void MatchConfig::validate() const {
  if (!(inv_temperature > 0.0)) throw Error(ErrorCode::InvalidArgument, "inverse temperature must be positive");
  if (!(match_threshold >= 0.0 && match_threshold < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "match threshold must lie in [0, 1)");
  }
}

Matrix similarity(const Matrix& desc_a, const Matrix& desc_b) {
  if (desc_a.cols() != desc_b.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "descriptor dimensions differ: " + std::to_string(desc_a.cols()) +
                                                  " vs " + std::to_string(desc_b.cols()));
  }
  return desc_a * desc_b.transpose();
}

namespace {

// Row-wise softmax of t·S (each row sums to one).
Matrix row_softmax(const Matrix& s, double t) {
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    out.row(i) = ((s.row(i).array() - mx) * t).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix col_softmax(const Matrix& s, double t) {
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    const double mx = s.col(j).maxCoeff();
    out.col(j) = ((s.col(j).array() - mx) * t).exp();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

}  // namespace

Matrix dual_softmax(const Matrix& s, double inv_temperature) {
  if (s.size() == 0) return Matrix(s.rows(), s.cols());
  return row_softmax(s, inv_temperature).cwiseProduct(col_softmax(s, inv_temperature));
}

MatchSet mutual_matches(const Matrix& p, double mu) {
  MatchSet out;
  if (p.size() == 0) return out;
  std::vector<Eigen::Index> row_best(p.rows());
  std::vector<Eigen::Index> col_best(p.cols(), 0);
  for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i).maxCoeff(&row_best[i]);
  for (Eigen::Index j = 0; j < p.cols(); ++j) p.col(j).maxCoeff(&col_best[j]);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Eigen::Index j = row_best[i];
    if (col_best[j] == i && p(i, j) >= mu) out.push_back({static_cast<int>(i), static_cast<int>(j), p(i, j)});
  }
  return out;
}

double descriptor_loss(const Matrix& s, const GtMatches& gt, double inv_temperature, Matrix* grad_s) {
  for (const auto& m : gt) {
    if (m.i < 0 || m.i >= s.rows() || m.j < 0 || m.j >= s.cols()) {
      throw Error(ErrorCode::IndexOutOfRange, "ground-truth pair outside the similarity matrix");
    }
  }
  if (grad_s) grad_s->setZero(s.rows(), s.cols());
  if (gt.empty()) return 0.0;
  const double t = inv_temperature;

  // Log-sum-exp per row (softmax over j) and per column (softmax over i),
  // computed only where a ground-truth pair needs it.
  std::vector<double> row_lse(s.rows(), 0.0);
  std::vector<double> col_lse(s.cols(), 0.0);
  std::vector<char> row_done(s.rows(), 0);
  std::vector<char> col_done(s.cols(), 0);
  double loss = 0.0;
  for (const auto& m : gt) {
    if (!row_done[m.i]) {
      const double mx = t * s.row(m.i).maxCoeff();
      row_lse[m.i] = mx + std::log(((s.row(m.i).array() * t) - mx).exp().sum());
      row_done[m.i] = 1;
    }
    if (!col_done[m.j]) {
      const double mx = t * s.col(m.j).maxCoeff();
      col_lse[m.j] = mx + std::log(((s.col(m.j).array() * t) - mx).exp().sum());
      col_done[m.j] = 1;
    }
    const double logit = t * s(m.i, m.j);
    loss -= (logit - row_lse[m.i]) + (logit - col_lse[m.j]);
    if (grad_s) {
      // d/dS of -log softmax_j at (i, j) is t·(softmax_row - e_j) on row i;
      // likewise on column j.
      grad_s->row(m.i).array() += t * ((s.row(m.i).array() * t) - row_lse[m.i]).exp();
      grad_s->col(m.j).array() += t * ((s.col(m.j).array() * t) - col_lse[m.j]).exp();
      (*grad_s)(m.i, m.j) -= 2.0 * t;
    }
  }
  return loss;
}

namespace {

double bce_with_logit(double z, int target) {
  return std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double matchability_loss(const Vector& logits_a, const Vector& logits_b,
                         const std::vector<int>& targets_a, const std::vector<int>& targets_b,
                         Vector* grad_a, Vector* grad_b) {
  if (static_cast<std::size_t>(logits_a.size()) != targets_a.size() ||
      static_cast<std::size_t>(logits_b.size()) != targets_b.size()) {
    throw Error(ErrorCode::LengthMismatch, "logit and target lengths differ");
  }
  const Eigen::Index n = logits_a.size() + logits_b.size();
  if (grad_a) grad_a->setZero(logits_a.size());
  if (grad_b) grad_b->setZero(logits_b.size());
  if (n == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Eigen::Index k = 0; k < logits_a.size(); ++k) {
    total += bce_with_logit(logits_a(k), targets_a[k]);
    if (grad_a) (*grad_a)(k) = (sigmoid(logits_a(k)) - targets_a[k]) * inv_n;
  }
  for (Eigen::Index k = 0; k < logits_b.size(); ++k) {
    total += bce_with_logit(logits_b(k), targets_b[k]);
    if (grad_b) (*grad_b)(k) = (sigmoid(logits_b(k)) - targets_b[k]) * inv_n;
  }
  return total * inv_n;
}

double layerwise_loss(const std::vector<LayerTerm>& layers, const GtMatches& gt,
                      const LayerwiseLossConfig& cfg, std::vector<LayerTermGrad>* grads) {
  if (layers.empty()) throw Error(ErrorCode::EmptyInput, "layerwise loss needs at least one layer");
  const double inv_layers = 1.0 / static_cast<double>(layers.size());
  const double inv_gt = gt.empty() ? 0.0 : 1.0 / static_cast<double>(gt.size());
  if (grads) grads->assign(layers.size(), {});
  double total = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const auto targets = matchability_targets(gt, static_cast<int>(layer.similarity.rows()),
                                              static_cast<int>(layer.similarity.cols()));
    Matrix gs;
    Vector ga;
    Vector gb;
    const double desc = descriptor_loss(layer.similarity, gt, cfg.inv_temperature, grads ? &gs : nullptr);
    const double match = matchability_loss(layer.logits_a, layer.logits_b, targets.a, targets.b,
                                           grads ? &ga : nullptr, grads ? &gb : nullptr);
    total += desc * inv_gt + cfg.match_weight * match;
    if (grads) {
      auto& g = (*grads)[l];
      g.similarity = gs * (inv_gt * inv_layers);
      g.logits_a = ga * (cfg.match_weight * inv_layers);
      g.logits_b = gb * (cfg.match_weight * inv_layers);
    }
  }
  return total * inv_layers;
}

}  // namespace sparsematch

#pragma once

#include "sparsematch/matcher.hpp"
#include "sparsematch/random.hpp"
#include "sparsematch/synth.hpp"

#include <algorithm>
#include <string>

namespace testsupport {

using namespace sparsematch;

struct GradCheckResult {
  double worst = 0.0;
  std::string worst_tensor;
  int tensors = 0;
};

// Per-tensor ‖analytic − central FD‖ / max(‖analytic‖ + ‖FD‖, floor). The
// floor covers tensors whose true gradient vanishes (key biases cancel in the
// softmax), where FD returns pure round-off.
inline GradCheckResult check_gradients(const MatcherConfig& cfg, int n_points, std::uint64_t seed,
                                       double step = 1e-5, double floor = 1e-5) {
  SyntheticSceneConfig sc;
  sc.n_points = n_points;
  sc.descriptor_dim = cfg.d_desc;
  sc.seed = seed;
  sc.rasterize_depth = false;
  const auto pair = synth_pair(sc);
  const auto in = make_inputs<double>(pair.kps_a, pair.kps_b, pair.desc_a, pair.desc_b);

  auto w = MatcherWeights<double>::random(cfg, seed ^ 0x5eedULL);
  // Move gains and biases off their initial values so their gradients are
  // generic.
  Rng rng(seed + 17);
  for (auto& [name, t] : w.tensors()) {
    if (name.find("gain") != std::string::npos || name.find("bias") != std::string::npos) {
      for (Eigen::Index k = 0; k < t->size(); ++k) t->data()[k] += 0.3 * rng.normal();
    }
  }

  LayerwiseLossConfig lc;
  lc.inv_temperature = 5.0;
  MatcherWeights<double> grad;
  pair_loss(in, pair.gt, w, cfg, lc, &grad);

  GradCheckResult out;
  auto wt = w.tensors();
  const auto gt = grad.tensors();
  for (std::size_t k = 0; k < wt.size(); ++k) {
    Tensor<double>& t = *wt[k].second;
    Tensor<double> fd(t.rows(), t.cols());
    for (Eigen::Index e = 0; e < t.size(); ++e) {
      const double orig = t.data()[e];
      t.data()[e] = orig + step;
      const double lp = pair_loss(in, pair.gt, w, cfg, lc);
      t.data()[e] = orig - step;
      const double lm = pair_loss(in, pair.gt, w, cfg, lc);
      t.data()[e] = orig;
      fd.data()[e] = (lp - lm) / (2 * step);
    }
    const Tensor<double>& an = *gt[k].second;
    const double err = (an - fd).norm() / std::max(an.norm() + fd.norm(), floor);
    if (err > out.worst) {
      out.worst = err;
      out.worst_tensor = wt[k].first;
    }
    ++out.tensors;
  }
  return out;
}

// Tiny random configuration: N ≤ 8, d_emb ≤ 16, L ≤ 2.
inline MatcherConfig tiny_config(Rng& rng) {
  MatcherConfig c;
  c.head_dim = rng.index(2) ? 4 : 8;
  const int heads = c.head_dim == 4 ? 1 + static_cast<int>(rng.index(4)) : 1 + static_cast<int>(rng.index(2));
  c.d_emb = c.head_dim * heads;
  c.d_desc = rng.index(2) ? c.d_emb : 4 + static_cast<int>(rng.index(9));
  c.num_blocks = 1 + static_cast<int>(rng.index(2));
  c.stop_layer = c.num_blocks;
  c.ff_expansion = 1 + static_cast<int>(rng.index(2));
  return c;
}

}  // namespace testsupport

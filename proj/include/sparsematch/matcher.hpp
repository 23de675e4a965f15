#pragma once

#include "sparsematch/assignment.hpp"
#include "sparsematch/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace sparsematch {

template <typename T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

struct MatcherConfig {
  int num_blocks = 3;  // one block = one self-attention + one cross-attention layer
  int d_emb = 64;
  int d_desc = 64;
  int head_dim = 64;
  int ff_expansion = 2;
  int stop_layer = 3;
  MatchConfig match;
  /// RoPE angular frequencies are rope_scale · rope_base^(-k / (head_dim/4)),
  /// k = 0 .. head_dim/4 - 1, applied to keypoints normalised to [-1, 1].
  double rope_base = 10000.0;
  double rope_scale = 100.0;
  double norm_eps = 1e-5;

  bool has_input_projection() const { return d_desc != d_emb; }
  int num_heads() const { return d_emb / head_dim; }
  void validate() const;

  /// Released model family: 9 blocks, 64-wide heads.
  static MatcherConfig base(int d_desc = 256);    // d_emb 256
  static MatcherConfig large(int d_desc = 256);   // d_emb 512
  static MatcherConfig giant(int d_desc = 256);   // d_emb 1024
  static MatcherConfig toy();                     // d_emb 64, 3 blocks
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // in × out
  Tensor<T> bias;    // 1 × out
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;  // 1 × d
  Tensor<T> bias;  // 1 × d
};

/// Pre-normalised attention layer followed by its feed-forward half.
template <typename T>
struct AttentionLayer {
  LayerNormParams<T> norm1;
  Linear<T> q, k, v, out;
  LayerNormParams<T> norm2;
  Linear<T> ff1, ff2;
};

template <typename T>
struct Block {
  AttentionLayer<T> self;
  AttentionLayer<T> cross;
};

template <typename T>
struct LayerHead {
  Linear<T> desc;   // d_emb × d_desc, output unit-normalised
  Linear<T> match;  // d_emb × 1, matchability logit
};

template <typename T>
struct MatcherWeights {
  std::optional<Linear<T>> input_proj;
  std::vector<Block<T>> blocks;
  std::vector<LayerHead<T>> heads;

  /// Every tensor with its stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>*>> tensors();
  std::vector<std::pair<std::string, const Tensor<T>*>> tensors() const;

  /// Every tensor zero, gains included (gradient and moment buffers).
  static MatcherWeights zeros(const MatcherConfig& cfg);
  /// Uniform(±1/sqrt(fan_in)) weights, zero biases, unit gains.
  static MatcherWeights random(const MatcherConfig& cfg, std::uint64_t seed);

  NamedTensors<T> to_named() const;
  static MatcherWeights from_named(const MatcherConfig& cfg, const NamedTensors<T>& named);

  template <typename U>
  MatcherWeights<U> cast() const;

  void check_shapes(const MatcherConfig& cfg) const;
  bool all_finite() const;
};

/// Keypoints in pixels → aspect-preserving coordinates in [-1, 1].
Eigen::MatrixX2d normalize_keypoints(const KeypointSet& kps);

template <typename T>
struct MatcherInputs {
  Tensor<T> pos_a;   // N_a × 2, normalised
  Tensor<T> pos_b;
  Tensor<T> desc_a;  // N_a × d_desc
  Tensor<T> desc_b;
};

template <typename T>
MatcherInputs<T> make_inputs(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a,
                             const Matrix& desc_b);

template <typename T>
struct LayerOutput {
  Tensor<T> refined_a;  // N_a × d_emb
  Tensor<T> refined_b;
  Tensor<T> desc_a;     // N_a × d_desc, unit rows
  Tensor<T> desc_b;
  ColVec<T> logits_a;
  ColVec<T> logits_b;
};

template <typename T>
struct LayerOutputs {
  std::vector<LayerOutput<T>> layers;
};

template <typename T>
struct ForwardState;

/// Runs cfg.stop_layer blocks. When `state` is non-null the activations
/// needed by `backward` are retained in it.
template <typename T>
LayerOutputs<T> forward(const MatcherInputs<T>& in, const MatcherWeights<T>& w, const MatcherConfig& cfg,
                        ForwardState<T>* state = nullptr);

template <typename T>
struct LayerGrad {
  Tensor<T> desc_a;  // dL/d(head descriptors)
  Tensor<T> desc_b;
  ColVec<T> logits_a;
  ColVec<T> logits_b;
};

/// Reverse-mode gradients for every weight tensor. One LayerGrad per layer
/// that was run forward.
template <typename T>
MatcherWeights<T> backward(const ForwardState<T>& state, const std::vector<LayerGrad<T>>& grads);

/// Same as `backward` but returns named gradients, omitting frozen tensors.
template <typename T>
NamedTensors<T> backward_named(const ForwardState<T>& state, const std::vector<LayerGrad<T>>& grads,
                               const std::set<std::string>& frozen = {});

/// Layer-wise loss of one pair and, optionally, gradients for every weight.
template <typename T>
double pair_loss(const MatcherInputs<T>& in, const GtMatches& gt, const MatcherWeights<T>& w,
                 const MatcherConfig& cfg, const LayerwiseLossConfig& loss_cfg,
                 MatcherWeights<T>* grad = nullptr);

/// Forward to cfg.stop_layer, then dual-softmax + mutual matching on the
/// last layer's head descriptors.
template <typename T>
MatchSet match_pair(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a,
                    const Matrix& desc_b, const MatcherWeights<T>& w, const MatcherConfig& cfg);

/// Multiply-add count ×2 for a forward pass to `stop_layer`.
double forward_flops(const MatcherConfig& cfg, int n_a, int n_b, int stop_layer);

// Internal activation caches, exposed for the backward pass.
template <typename T>
struct NormCache {
  Tensor<T> xhat;
  ColVec<T> inv_std;
};

template <typename T>
struct AttentionSideCache {
  NormCache<T> norm1;
  Tensor<T> normed;  // LN1 output
  Tensor<T> q, k, v;  // projected (q, k rotated when RoPE applies)
};

template <typename T>
struct FeedForwardCache {
  NormCache<T> norm2;
  Tensor<T> normed;
  Tensor<T> hidden_pre;
  Tensor<T> hidden;
};

template <typename T>
struct DirectionCache {
  std::vector<Tensor<T>> probs;  // per head, N_query × N_key
  Tensor<T> context;             // concatenated heads before the output projection
};

template <typename T>
struct SelfLayerCache {
  AttentionSideCache<T> side;
  DirectionCache<T> dir;
  Tensor<T> rope_cos, rope_sin;  // N × head_dim/2
  FeedForwardCache<T> ff;
};

template <typename T>
struct CrossLayerCache {
  AttentionSideCache<T> side_a, side_b;
  DirectionCache<T> a_to_b, b_to_a;
  FeedForwardCache<T> ff_a, ff_b;
};

template <typename T>
struct HeadCache {
  Tensor<T> input_a, input_b;
  Tensor<T> raw_a, raw_b;  // head output before normalisation
  Tensor<T> unit_a, unit_b;
};

template <typename T>
struct ForwardState {
  const MatcherWeights<T>* weights = nullptr;
  MatcherConfig cfg;
  bool retained = false;
  Tensor<T> desc_a, desc_b;
  std::vector<SelfLayerCache<T>> self_a, self_b;
  std::vector<CrossLayerCache<T>> cross;
  std::vector<HeadCache<T>> heads;
};

}  // namespace sparsematch

#pragma once

#include "sparsematch/matcher.hpp"
#include "sparsematch/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace sparsematch {

struct TrainConfig {
  double peak_lr = 2e-4;
  int warmup_steps = -1;  // negative: 1% of total_steps, at least one step
  double weight_decay = 5e-5;
  double ema_decay = 0.999;
  int batch_size = 16;
  int total_steps = 2000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LayerwiseLossConfig loss;

  int effective_warmup() const;
  void validate() const;
};

/// Linear warmup from 0 to peak_lr, then cosine decay to 0 at total_steps.
double learning_rate(const TrainConfig& cfg, int step);

struct TrainingPair {
  KeypointSet kps_a;
  KeypointSet kps_b;
  Matrix desc_a;
  Matrix desc_b;
  GtMatches gt;
};

TrainingPair to_training_pair(const SyntheticPair& p);

template <typename T>
struct TrainState {
  MatcherConfig model_cfg;  // stop_layer is ignored; every layer is supervised
  MatcherWeights<T> model;
  MatcherWeights<T> ema;
  MatcherWeights<T> adam_m;
  MatcherWeights<T> adam_v;
  int step = 0;

  static TrainState init(const MatcherConfig& cfg, std::uint64_t seed);
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

/// One AdamW step on the batch mean of the layer-wise loss, then the EMA
/// update. Throws NonFiniteLoss, leaving the state untouched.
template <typename T>
StepResult train_step(TrainState<T>& state, const std::vector<TrainingPair>& batch, const TrainConfig& cfg);

/// ema ← α·ema + (1-α)·model for every tensor.
template <typename T>
void ema_update(MatcherWeights<T>& ema, const MatcherWeights<T>& model, double alpha);

/// Synthetic batch for a given step. Pair seeds depend only on (seed, step,
/// slot), so resumed runs see the same data.
std::vector<TrainingPair> synthetic_batch(const SyntheticSceneConfig& scene, std::uint64_t seed, int step,
                                          int batch_size);

using StepCallback = std::function<void(int step, const StepResult&)>;

/// Runs steps until state.step == until_step (or cfg.total_steps when
/// negative) on synthetic batches. Returns the per-step losses.
std::vector<double> train_synthetic(TrainState<float>& state, const TrainConfig& cfg,
                                    const SyntheticSceneConfig& scene, int until_step = -1,
                                    const StepCallback& on_step = {});

/// Model, EMA and optimiser moments in one container, plus the step.
void save_checkpoint(const std::filesystem::path& path, const TrainState<float>& state);
TrainState<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sparsematch

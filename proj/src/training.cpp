#include "sparsematch/training.hpp"

#include "sparsematch/container.hpp"
#include "sparsematch/error.hpp"
#include "sparsematch/robust.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace sparsematch {

int TrainConfig::effective_warmup() const {
  if (warmup_steps >= 0) return warmup_steps;
  return std::max(1, total_steps / 100);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
  if (!(peak_lr > 0.0)) fail("peak_lr must be positive");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in (0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (total_steps < 1) fail("total_steps must be >= 1");
  if (effective_warmup() >= total_steps) fail("warmup must be shorter than the run");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

double learning_rate(const TrainConfig& cfg, int step) {
  const int warmup = cfg.effective_warmup();
  if (step <= 0) return 0.0;
  if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / warmup;
  if (step >= cfg.total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainingPair to_training_pair(const SyntheticPair& p) { return {p.kps_a, p.kps_b, p.desc_a, p.desc_b, p.gt}; }

template <typename T>
TrainState<T> TrainState<T>::init(const MatcherConfig& cfg, std::uint64_t seed) {
  TrainState<T> s;
  s.model_cfg = cfg;
  s.model_cfg.stop_layer = cfg.num_blocks;
  s.model = MatcherWeights<T>::random(s.model_cfg, seed);
  s.ema = s.model;
  s.adam_m = MatcherWeights<T>::zeros(s.model_cfg);
  s.adam_v = MatcherWeights<T>::zeros(s.model_cfg);
  return s;
}

template <typename T>
void ema_update(MatcherWeights<T>& ema, const MatcherWeights<T>& model, double alpha) {
  auto dst = ema.tensors();
  const auto src = model.tensors();
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  for (std::size_t k = 0; k < dst.size(); ++k) *dst[k].second = a * *dst[k].second + b * *src[k].second;
}

namespace {

bool is_decayed(const std::string& name) {
  return name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

}  // namespace

template <typename T>
StepResult train_step(TrainState<T>& state, const std::vector<TrainingPair>& batch, const TrainConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw Error(ErrorCode::EmptyInput, "training batch is empty");
  const MatcherConfig& mcfg = state.model_cfg;

  MatcherWeights<T> grad_sum = MatcherWeights<T>::zeros(mcfg);
  auto sum_tensors = grad_sum.tensors();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& p = batch[b];
    const auto in = make_inputs<T>(p.kps_a, p.kps_b, p.desc_a, p.desc_b);
    MatcherWeights<T> g;
    double l = 0.0;
    try {
      l = pair_loss(in, p.gt, state.model, mcfg, cfg.loss, &g);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteActivation) throw;
      l = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(l) || !g.all_finite()) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << state.step << ", batch slot " << b << " (loss " << l << ", "
          << p.kps_a.size() << "x" << p.kps_b.size() << " keypoints, " << p.gt.size() << " gt pairs)";
      throw Error(ErrorCode::NonFiniteLoss, msg.str());
    }
    loss += l;
    const auto gt = g.tensors();
    for (std::size_t k = 0; k < gt.size(); ++k) *sum_tensors[k].second += *gt[k].second;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  loss *= inv_b;

  const double lr = learning_rate(cfg, state.step);
  const int t = state.step + 1;
  const T lr_t = static_cast<T>(lr);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bias1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bias2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T eps = static_cast<T>(cfg.adam_eps);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T scale = static_cast<T>(inv_b);

  auto params = state.model.tensors();
  auto ms = state.adam_m.tensors();
  auto vs = state.adam_v.tensors();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = *params[k].second;
    auto& m = *ms[k].second;
    auto& v = *vs[k].second;
    const auto& g = *sum_tensors[k].second;
    const bool decayed = is_decayed(params[k].first);
    for (Eigen::Index e = 0; e < w.size(); ++e) {
      const T ge = g.data()[e] * scale;
      T& me = m.data()[e];
      T& ve = v.data()[e];
      me = b1 * me + (T(1) - b1) * ge;
      ve = b2 * ve + (T(1) - b2) * ge * ge;
      const T m_hat = me / bias1;
      const T v_hat = ve / bias2;
      T& we = w.data()[e];
      if (decayed) we *= decay;
      we -= lr_t * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  ema_update(state.ema, state.model, cfg.ema_decay);
  ++state.step;
  return {loss, lr};
}

std::vector<TrainingPair> synthetic_batch(const SyntheticSceneConfig& scene, std::uint64_t seed, int step,
                                          int batch_size) {
  std::vector<TrainingPair> batch;
  batch.reserve(batch_size);
  for (int slot = 0; slot < batch_size; ++slot) {
    SyntheticSceneConfig c = scene;
    c.rasterize_depth = false;
    c.seed = detail::mix_seed(seed, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size) + slot);
    batch.push_back(to_training_pair(synth_pair(c)));
  }
  return batch;
}

std::vector<double> train_synthetic(TrainState<float>& state, const TrainConfig& cfg,
                                    const SyntheticSceneConfig& scene, int until_step, const StepCallback& on_step) {
  const int stop = until_step < 0 ? cfg.total_steps : std::min(until_step, cfg.total_steps);
  std::vector<double> losses;
  while (state.step < stop) {
    const int step = state.step;
    const auto batch = synthetic_batch(scene, cfg.seed, step, cfg.batch_size);
    const StepResult r = train_step(state, batch, cfg);
    losses.push_back(r.loss);
    if (on_step) on_step(step, r);
  }
  return losses;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState<float>& state) {
  TensorContainer c;
  auto add = [&](const std::string& prefix, const MatcherWeights<float>& w) {
    for (const auto& [name, t] : w.tensors()) c.tensors.emplace(prefix + name, StoredTensor::from_matrix(*t));
  };
  add("model/", state.model);
  add("ema/", state.ema);
  add("adam_m/", state.adam_m);
  add("adam_v/", state.adam_v);
  c.metadata = {{"kind", "checkpoint"}, {"config", to_json(state.model_cfg)}, {"step", state.step}};
  c.save(path);
}

TrainState<float> load_checkpoint(const std::filesystem::path& path) {
  const TensorContainer c = TensorContainer::load(path);
  if (!c.metadata.is_object() || c.metadata.value("kind", "") != "checkpoint") {
    throw Error(ErrorCode::ShapeMismatch, path.string() + " is not a training checkpoint");
  }
  TrainState<float> s;
  s.model_cfg = matcher_config_from_json(c.metadata.at("config"));
  s.step = c.metadata.at("step").get<int>();
  auto take = [&](const std::string& prefix) {
    NamedTensors<float> named;
    for (const auto& [name, t] : c.tensors) {
      if (name.rfind(prefix, 0) != 0) continue;
      const auto values = t.to_f32();
      named.emplace(name.substr(prefix.size()), Eigen::Map<const Tensor<float>>(values.data(), t.shape.at(0), t.shape.at(1)));
    }
    return MatcherWeights<float>::from_named(s.model_cfg, named);
  };
  s.model = take("model/");
  s.ema = take("ema/");
  s.adam_m = take("adam_m/");
  s.adam_v = take("adam_v/");
  return s;
}

template struct TrainState<float>;
template struct TrainState<double>;
template StepResult train_step<float>(TrainState<float>&, const std::vector<TrainingPair>&, const TrainConfig&);
template StepResult train_step<double>(TrainState<double>&, const std::vector<TrainingPair>&, const TrainConfig&);
template void ema_update<float>(MatcherWeights<float>&, const MatcherWeights<float>&, double);
template void ema_update<double>(MatcherWeights<double>&, const MatcherWeights<double>&, double);

}  // namespace sparsematch

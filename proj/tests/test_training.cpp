#include "sparsematch/error.hpp"
#include "sparsematch/training.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace sparsematch;
using namespace testsupport;

namespace {

MatcherConfig tiny() {
  MatcherConfig c;
  c.num_blocks = 2;
  c.stop_layer = 2;
  c.d_emb = 16;
  c.d_desc = 16;
  c.head_dim = 8;
  return c;
}

SyntheticSceneConfig tiny_scene() {
  SyntheticSceneConfig s;
  s.n_points = 24;
  s.descriptor_dim = 16;
  return s;
}

TrainConfig short_run() {
  TrainConfig t;
  t.total_steps = 20;
  t.batch_size = 2;
  t.peak_lr = 1e-3;
  t.seed = 5;
  return t;
}

bool same_weights(const MatcherWeights<float>& a, const MatcherWeights<float>& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    const auto& x = *ta[k].second;
    const auto& y = *tb[k].second;
    if (x.size() != y.size() || !std::equal(x.data(), x.data() + x.size(), y.data())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("learning rate: warmup and cosine fixtures") {
  TrainConfig c;
  c.peak_lr = 1e-3;
  c.total_steps = 1000;
  c.warmup_steps = 100;
  CHECK(learning_rate(c, 0) == 0.0);
  CHECK(learning_rate(c, 50) == doctest::Approx(5e-4));
  CHECK(learning_rate(c, 100) == doctest::Approx(1e-3));
  CHECK(learning_rate(c, 550) == doctest::Approx(5e-4));
  CHECK(learning_rate(c, 1000) == 0.0);
  CHECK(learning_rate(c, 5000) == 0.0);
  for (int s = 100; s < 999; ++s) CHECK(learning_rate(c, s + 1) <= learning_rate(c, s));
  for (int s = 0; s < 100; ++s) CHECK(learning_rate(c, s + 1) > learning_rate(c, s));
  c.warmup_steps = -1;
  CHECK(c.effective_warmup() == 10);
  c.total_steps = 50;
  CHECK(c.effective_warmup() == 1);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.warmup_steps = c.total_steps;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.peak_lr = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("ema update closed form") {
  auto a = MatcherWeights<float>::random(tiny(), 1);
  const auto b = MatcherWeights<float>::random(tiny(), 2);
  auto ema = a;
  const double alpha = 0.9;
  for (int k = 0; k < 5; ++k) ema_update(ema, b, alpha);
  const double keep = std::pow(alpha, 5);
  const auto te = ema.tensors();
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t k = 0; k < te.size(); ++k) {
    const Tensor<float> want = (keep * ta[k].second->cast<double>() + (1 - keep) * tb[k].second->cast<double>()).cast<float>();
    CHECK((*te[k].second - want).cwiseAbs().maxCoeff() < 1e-5f);
  }
  ema = a;
  ema_update(ema, b, 1.0);
  CHECK(same_weights(ema, a));
  ema_update(ema, b, 0.0);
  CHECK(same_weights(ema, b));
}

TEST_CASE("zero learning rate leaves the weights unchanged") {
  // The schedule gives lr = 0 at step 0, so the first update is a no-op.
  auto st = TrainState<float>::init(tiny(), 3);
  const auto before = st.model;
  auto cfg = short_run();
  cfg.weight_decay = 0.0;
  REQUIRE(learning_rate(cfg, 0) == 0.0);
  train_synthetic(st, cfg, tiny_scene(), 1);
  CHECK(st.step == 1);
  CHECK(same_weights(st.model, before));
}

TEST_CASE("training is deterministic and reduces the loss") {
  auto a = TrainState<float>::init(tiny(), 4);
  auto b = TrainState<float>::init(tiny(), 4);
  const auto la = train_synthetic(a, short_run(), tiny_scene());
  const auto lb = train_synthetic(b, short_run(), tiny_scene());
  CHECK(la == lb);
  CHECK(same_weights(a.model, b.model));
  CHECK(same_weights(a.ema, b.ema));
  CHECK(la.size() == 20);
  for (double l : la) CHECK(std::isfinite(l));
  CHECK(!same_weights(a.model, a.ema));

  const auto b1 = synthetic_batch(tiny_scene(), 7, 3, 4);
  const auto b2 = synthetic_batch(tiny_scene(), 7, 3, 4);
  REQUIRE(b1.size() == 4);
  CHECK(b1[2].gt == b2[2].gt);
  CHECK(b1[2].desc_a == b2[2].desc_a);
  CHECK(synthetic_batch(tiny_scene(), 7, 4, 4)[0].desc_a != b1[0].desc_a);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run") {
  const auto dir = scratch_dir("ckpt");
  auto whole = TrainState<float>::init(tiny(), 6);
  const auto lw = train_synthetic(whole, short_run(), tiny_scene());

  auto first = TrainState<float>::init(tiny(), 6);
  const auto l1 = train_synthetic(first, short_run(), tiny_scene(), 8);
  save_checkpoint(dir / "c.mlw", first);
  auto resumed = load_checkpoint(dir / "c.mlw");
  CHECK(resumed.step == 8);
  CHECK(same_weights(resumed.model, first.model));
  CHECK(same_weights(resumed.adam_v, first.adam_v));
  const auto l2 = train_synthetic(resumed, short_run(), tiny_scene());
  REQUIRE(l1.size() + l2.size() == lw.size());
  for (std::size_t k = 0; k < l1.size(); ++k) CHECK(l1[k] == lw[k]);
  for (std::size_t k = 0; k < l2.size(); ++k) CHECK(l2[k] == lw[l1.size() + k]);
  CHECK(same_weights(resumed.model, whole.model));
  CHECK(same_weights(resumed.ema, whole.ema));
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.mlw"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train_step rejects a non-finite loss and keeps the state") {
  auto st = TrainState<float>::init(tiny(), 8);
  auto batch = synthetic_batch(tiny_scene(), 1, 0, 1);
  batch[0].desc_a(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto before = st.model;
  CHECK_THROWS_AS(train_step(st, batch, short_run()), Error);
  CHECK(st.step == 0);
  CHECK(same_weights(st.model, before));
}

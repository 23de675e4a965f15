#include "sparsematch/matcher.hpp"

#include "sparsematch/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace sparsematch {

void MatcherConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
  if (num_blocks < 1) fail("num_blocks must be >= 1");
  if (d_emb < 1 || d_desc < 1 || head_dim < 1) fail("dimensions must be positive");
  if (d_emb % head_dim != 0) fail("d_emb must be divisible by head_dim");
  if (head_dim % 4 != 0) fail("head_dim must be divisible by 4 for 2-D rotary embeddings");
  if (ff_expansion < 1) fail("ff_expansion must be >= 1");
  if (stop_layer < 1 || stop_layer > num_blocks) fail("stop_layer must lie in [1, num_blocks]");
  if (!(rope_base > 1.0 && rope_scale > 0.0)) fail("invalid rotary frequency parameters");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  match.validate();
}

namespace {

MatcherConfig family_member(int d_emb, int d_desc) {
  MatcherConfig c;
  c.num_blocks = 9;
  c.stop_layer = 9;
  c.d_emb = d_emb;
  c.d_desc = d_desc;
  c.head_dim = 64;
  return c;
}

}  // namespace

MatcherConfig MatcherConfig::base(int d_desc) { return family_member(256, d_desc); }
MatcherConfig MatcherConfig::large(int d_desc) { return family_member(512, d_desc); }
MatcherConfig MatcherConfig::giant(int d_desc) { return family_member(1024, d_desc); }
MatcherConfig MatcherConfig::toy() { return MatcherConfig{}; }

// ---------------------------------------------------------------------------
// Weight containers

namespace {

template <typename T, typename Fn>
void visit_linear(const std::string& prefix, Linear<T>& l, Fn&& fn) {
  fn(prefix + ".weight", l.weight);
  fn(prefix + ".bias", l.bias);
}

template <typename T, typename Fn>
void visit_norm(const std::string& prefix, LayerNormParams<T>& n, Fn&& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".bias", n.bias);
}

template <typename T, typename Fn>
void visit_attention(const std::string& prefix, AttentionLayer<T>& a, Fn&& fn) {
  visit_norm(prefix + ".norm1", a.norm1, fn);
  visit_linear(prefix + ".q", a.q, fn);
  visit_linear(prefix + ".k", a.k, fn);
  visit_linear(prefix + ".v", a.v, fn);
  visit_linear(prefix + ".out", a.out, fn);
  visit_norm(prefix + ".norm2", a.norm2, fn);
  visit_linear(prefix + ".ff1", a.ff1, fn);
  visit_linear(prefix + ".ff2", a.ff2, fn);
}

template <typename T, typename Fn>
void visit_all(MatcherWeights<T>& w, Fn&& fn) {
  if (w.input_proj) visit_linear("input_proj", *w.input_proj, fn);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l);
    visit_attention(p + ".self", w.blocks[l].self, fn);
    visit_attention(p + ".cross", w.blocks[l].cross, fn);
  }
  for (std::size_t l = 0; l < w.heads.size(); ++l) {
    const std::string p = "heads." + std::to_string(l);
    visit_linear(p + ".desc", w.heads[l].desc, fn);
    visit_linear(p + ".match", w.heads[l].match, fn);
  }
}

template <typename T>
Linear<T> zero_linear(int in, int out) {
  return {Tensor<T>::Zero(in, out), Tensor<T>::Zero(1, out)};
}

template <typename T>
LayerNormParams<T> zero_norm(int d) {
  return {Tensor<T>::Zero(1, d), Tensor<T>::Zero(1, d)};
}

template <typename T>
AttentionLayer<T> zero_attention(int d, int hidden) {
  AttentionLayer<T> a;
  a.norm1 = zero_norm<T>(d);
  a.q = zero_linear<T>(d, d);
  a.k = zero_linear<T>(d, d);
  a.v = zero_linear<T>(d, d);
  a.out = zero_linear<T>(d, d);
  a.norm2 = zero_norm<T>(d);
  a.ff1 = zero_linear<T>(d, hidden);
  a.ff2 = zero_linear<T>(hidden, d);
  return a;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> MatcherWeights<T>::tensors() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  visit_all(*this, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> MatcherWeights<T>::tensors() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  visit_all(const_cast<MatcherWeights<T>&>(*this),
            [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename T>
MatcherWeights<T> MatcherWeights<T>::zeros(const MatcherConfig& cfg) {
  cfg.validate();
  MatcherWeights<T> w;
  const int d = cfg.d_emb;
  if (cfg.has_input_projection()) w.input_proj = zero_linear<T>(cfg.d_desc, d);
  for (int l = 0; l < cfg.num_blocks; ++l) {
    w.blocks.push_back({zero_attention<T>(d, d * cfg.ff_expansion), zero_attention<T>(d, d * cfg.ff_expansion)});
    w.heads.push_back({zero_linear<T>(d, cfg.d_desc), zero_linear<T>(d, 1)});
  }
  return w;
}

template <typename T>
MatcherWeights<T> MatcherWeights<T>::random(const MatcherConfig& cfg, std::uint64_t seed) {
  MatcherWeights<T> w = zeros(cfg);
  std::mt19937_64 rng(seed);
  auto uniform = [&]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  for (auto& [name, t] : w.tensors()) {
    if (name.ends_with(".gain")) t->setOnes();
    if (!name.ends_with(".weight")) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(t->rows()));
    for (Eigen::Index k = 0; k < t->size(); ++k) t->data()[k] = static_cast<T>((2.0 * uniform() - 1.0) * bound);
  }
  return w;
}

template <typename T>
NamedTensors<T> MatcherWeights<T>::to_named() const {
  NamedTensors<T> out;
  for (const auto& [name, t] : tensors()) out.emplace(name, *t);
  return out;
}

template <typename T>
MatcherWeights<T> MatcherWeights<T>::from_named(const MatcherConfig& cfg, const NamedTensors<T>& named) {
  MatcherWeights<T> w = zeros(cfg);
  for (auto& [name, t] : w.tensors()) {
    auto it = named.find(name);
    if (it == named.end()) throw Error(ErrorCode::ShapeMismatch, "missing tensor " + name);
    if (it->second.rows() != t->rows() || it->second.cols() != t->cols()) {
      throw Error(ErrorCode::ShapeMismatch, "tensor " + name + " has the wrong shape");
    }
    *t = it->second;
  }
  return w;
}

template <typename T>
template <typename U>
MatcherWeights<U> MatcherWeights<T>::cast() const {
  MatcherWeights<U> out;
  auto cl = [](const Linear<T>& l) { return Linear<U>{l.weight.template cast<U>(), l.bias.template cast<U>()}; };
  auto cn = [](const LayerNormParams<T>& n) {
    return LayerNormParams<U>{n.gain.template cast<U>(), n.bias.template cast<U>()};
  };
  auto ca = [&](const AttentionLayer<T>& a) {
    return AttentionLayer<U>{cn(a.norm1), cl(a.q), cl(a.k), cl(a.v), cl(a.out), cn(a.norm2), cl(a.ff1), cl(a.ff2)};
  };
  if (input_proj) out.input_proj = cl(*input_proj);
  for (const auto& b : blocks) out.blocks.push_back({ca(b.self), ca(b.cross)});
  for (const auto& h : heads) out.heads.push_back({cl(h.desc), cl(h.match)});
  return out;
}

template <typename T>
void MatcherWeights<T>::check_shapes(const MatcherConfig& cfg) const {
  const auto expected = zeros(cfg);
  const auto ref = expected.tensors();
  const auto mine = tensors();
  if (ref.size() != mine.size()) throw Error(ErrorCode::ShapeMismatch, "weights do not match the configuration");
  for (std::size_t k = 0; k < ref.size(); ++k) {
    if (ref[k].first != mine[k].first || ref[k].second->rows() != mine[k].second->rows() ||
        ref[k].second->cols() != mine[k].second->cols()) {
      throw Error(ErrorCode::ShapeMismatch, "tensor " + ref[k].first + " has the wrong shape");
    }
  }
}

template <typename T>
bool MatcherWeights<T>::all_finite() const {
  for (const auto& [name, t] : tensors()) {
    if (!t->allFinite()) return false;
  }
  return true;
}

Eigen::MatrixX2d normalize_keypoints(const KeypointSet& kps) {
  const double w = kps.width;
  const double h = kps.height;
  const double s = std::max(w, h);
  Eigen::MatrixX2d out(kps.size(), 2);
  for (int i = 0; i < kps.size(); ++i) {
    out(i, 0) = (2.0 * kps.points(i, 0) - w) / s;
    out(i, 1) = (2.0 * kps.points(i, 1) - h) / s;
  }
  return out;
}

template <typename T>
MatcherInputs<T> make_inputs(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a,
                             const Matrix& desc_b) {
  if (desc_a.rows() != kps_a.size() || desc_b.rows() != kps_b.size()) {
    throw Error(ErrorCode::ShapeMismatch, "descriptor count does not match keypoint count");
  }
  MatcherInputs<T> in;
  in.pos_a = normalize_keypoints(kps_a).cast<T>();
  in.pos_b = normalize_keypoints(kps_b).cast<T>();
  in.desc_a = desc_a.cast<T>();
  in.desc_b = desc_b.cast<T>();
  return in;
}

// ---------------------------------------------------------------------------
// Layer primitives

namespace {

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Linear<T>& l) {
  Tensor<T> y(x.rows(), l.weight.cols());
  y.noalias() = x * l.weight;
  y.rowwise() += l.bias.row(0);
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& dy, const Linear<T>& l, Linear<T>& g) {
  g.weight.noalias() += x.transpose() * dy;
  g.bias += dy.colwise().sum();
  Tensor<T> dx(dy.rows(), l.weight.rows());
  dx.noalias() = dy * l.weight.transpose();
  return dx;
}

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const LayerNormParams<T>& p, T eps, NormCache<T>* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Tensor<T> y(n, d);
  Tensor<T> xhat(n, d);
  ColVec<T> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    T var = 0;
    for (Eigen::Index c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std(r) = inv;
    for (Eigen::Index c = 0; c < d; ++c) {
      xhat(r, c) = (x(r, c) - mean) * inv;
      y(r, c) = xhat(r, c) * p.gain(0, c) + p.bias(0, c);
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& dy, const NormCache<T>& cache, const LayerNormParams<T>& p,
                        LayerNormParams<T>& g) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  Tensor<T> dx(n, d);
  const T inv_d = T(1) / static_cast<T>(d);
  for (Eigen::Index r = 0; r < n; ++r) {
    T sum_dxhat = 0;
    T sum_dxhat_xhat = 0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const T dxhat = dy(r, c) * p.gain(0, c);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * cache.xhat(r, c);
      g.gain(0, c) += dy(r, c) * cache.xhat(r, c);
      g.bias(0, c) += dy(r, c);
    }
    const T m1 = sum_dxhat * inv_d;
    const T m2 = sum_dxhat_xhat * inv_d;
    for (Eigen::Index c = 0; c < d; ++c) {
      dx(r, c) = cache.inv_std(r) * (dy(r, c) * p.gain(0, c) - m1 - cache.xhat(r, c) * m2);
    }
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>((std::numbers::sqrt2 / 2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>((std::numbers::sqrt2 / 2))));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const AttentionLayer<T>& w, T eps, FeedForwardCache<T>* cache) {
  NormCache<T> nc;
  Tensor<T> normed = norm_forward(x, w.norm2, eps, cache ? &nc : nullptr);
  Tensor<T> pre = linear_forward(normed, w.ff1);
  Tensor<T> hidden = pre.unaryExpr([](T v) { return gelu(v); });
  Tensor<T> out = x + linear_forward(hidden, w.ff2);
  if (cache) {
    cache->norm2 = std::move(nc);
    cache->normed = std::move(normed);
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

// Gradient w.r.t. the feed-forward input, residual path included.
template <typename T>
Tensor<T> feed_forward_backward(const Tensor<T>& dout, const FeedForwardCache<T>& c, const AttentionLayer<T>& w,
                                AttentionLayer<T>& g) {
  Tensor<T> dhidden = linear_backward(c.hidden, dout, w.ff2, g.ff2);
  Tensor<T> dpre = dhidden.cwiseProduct(c.hidden_pre.unaryExpr([](T v) { return gelu_grad(v); }));
  Tensor<T> dnormed = linear_backward(c.normed, dpre, w.ff1, g.ff1);
  return dout + norm_backward(dnormed, c.norm2, w.norm2, g.norm2);
}

template <typename T>
void rope_tables(const Tensor<T>& pos, const MatcherConfig& cfg, Tensor<T>& cos_t, Tensor<T>& sin_t) {
  const int pairs = cfg.head_dim / 2;
  const int freqs = cfg.head_dim / 4;
  cos_t.resize(pos.rows(), pairs);
  sin_t.resize(pos.rows(), pairs);
  for (int p = 0; p < pairs; ++p) {
    const int axis = p < freqs ? 0 : 1;
    const int k = p % freqs;
    const double omega = cfg.rope_scale * std::pow(cfg.rope_base, -static_cast<double>(k) / freqs);
    for (Eigen::Index r = 0; r < pos.rows(); ++r) {
      const double angle = omega * static_cast<double>(pos(r, axis));
      cos_t(r, p) = static_cast<T>(std::cos(angle));
      sin_t(r, p) = static_cast<T>(std::sin(angle));
    }
  }
}

// Rotates consecutive column pairs of every head; `inverse` applies the
// transpose rotation (used for gradients).
template <typename T>
void rope_apply(Tensor<T>& x, const Tensor<T>& cos_t, const Tensor<T>& sin_t, int head_dim, bool inverse) {
  const Eigen::Index pairs = cos_t.cols();
  const Eigen::Index heads = x.cols() / head_dim;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      T* row = x.data() + r * x.cols() + h * head_dim;
      for (Eigen::Index p = 0; p < pairs; ++p) {
        const T c = cos_t(r, p);
        const T s = inverse ? -sin_t(r, p) : sin_t(r, p);
        const T x1 = row[2 * p];
        const T x2 = row[2 * p + 1];
        row[2 * p] = x1 * c - x2 * s;
        row[2 * p + 1] = x1 * s + x2 * c;
      }
    }
  }
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int head_dim,
                            DirectionCache<T>* cache) {
  const Eigen::Index nq = q.rows();
  const Eigen::Index nk = k.rows();
  const Eigen::Index heads = q.cols() / head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  Tensor<T> context = Tensor<T>::Zero(nq, q.cols());
  if (cache) cache->probs.assign(heads, Tensor<T>());
  if (nk == 0 || nq == 0) {
    if (cache) cache->context = context;
    return context;
  }
  Tensor<T> probs(nq, nk);
  for (Eigen::Index h = 0; h < heads; ++h) {
    probs.noalias() = q.middleCols(h * head_dim, head_dim) * k.middleCols(h * head_dim, head_dim).transpose();
    for (Eigen::Index r = 0; r < nq; ++r) {
      auto row = probs.row(r);
      const T mx = row.maxCoeff();
      row = ((row.array() - mx) * scale).exp();
      row /= row.sum();
    }
    context.middleCols(h * head_dim, head_dim).noalias() = probs * v.middleCols(h * head_dim, head_dim);
    if (cache) cache->probs[h] = probs;
  }
  if (cache) cache->context = context;
  return context;
}

template <typename T>
void attention_backward(const Tensor<T>& dcontext, const DirectionCache<T>& c, const Tensor<T>& q,
                        const Tensor<T>& k, const Tensor<T>& v, int head_dim, Tensor<T>& dq, Tensor<T>& dk,
                        Tensor<T>& dv) {
  const Eigen::Index heads = q.cols() / head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  if (k.rows() == 0 || q.rows() == 0) return;
  Tensor<T> dprobs(q.rows(), k.rows());
  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto& p = c.probs[h];
    const auto dctx = dcontext.middleCols(h * head_dim, head_dim);
    dv.middleCols(h * head_dim, head_dim).noalias() += p.transpose() * dctx;
    dprobs.noalias() = dctx * v.middleCols(h * head_dim, head_dim).transpose();
    for (Eigen::Index r = 0; r < dprobs.rows(); ++r) {
      const T dot = dprobs.row(r).dot(p.row(r));
      dprobs.row(r) = (p.row(r).array() * (dprobs.row(r).array() - dot) * scale).matrix();
    }
    dq.middleCols(h * head_dim, head_dim).noalias() += dprobs * k.middleCols(h * head_dim, head_dim);
    dk.middleCols(h * head_dim, head_dim).noalias() += dprobs.transpose() * q.middleCols(h * head_dim, head_dim);
  }
}

template <typename T>
void project_side(const Tensor<T>& x, const AttentionLayer<T>& w, T eps, AttentionSideCache<T>& side) {
  side.normed = norm_forward(x, w.norm1, eps, &side.norm1);
  side.q = linear_forward(side.normed, w.q);
  side.k = linear_forward(side.normed, w.k);
  side.v = linear_forward(side.normed, w.v);
}

template <typename T>
Tensor<T> project_side_backward(const AttentionSideCache<T>& side, const Tensor<T>& dq, const Tensor<T>& dk,
                                const Tensor<T>& dv, const AttentionLayer<T>& w, AttentionLayer<T>& g) {
  Tensor<T> dnormed = linear_backward(side.normed, dq, w.q, g.q);
  dnormed += linear_backward(side.normed, dk, w.k, g.k);
  dnormed += linear_backward(side.normed, dv, w.v, g.v);
  return norm_backward(dnormed, side.norm1, w.norm1, g.norm1);
}

template <typename T>
Tensor<T> self_layer_forward(const Tensor<T>& x, const Tensor<T>& pos, const AttentionLayer<T>& w,
                             const MatcherConfig& cfg, SelfLayerCache<T>& c, bool keep) {
  const T eps = static_cast<T>(cfg.norm_eps);
  project_side(x, w, eps, c.side);
  rope_tables(pos, cfg, c.rope_cos, c.rope_sin);
  rope_apply(c.side.q, c.rope_cos, c.rope_sin, cfg.head_dim, false);
  rope_apply(c.side.k, c.rope_cos, c.rope_sin, cfg.head_dim, false);
  const Tensor<T> context = attention_forward(c.side.q, c.side.k, c.side.v, cfg.head_dim, keep ? &c.dir : nullptr);
  const Tensor<T> mid = x + linear_forward(context, w.out);
  return feed_forward(mid, w, eps, keep ? &c.ff : nullptr);
}

template <typename T>
Tensor<T> self_layer_backward(const Tensor<T>& dout, const SelfLayerCache<T>& c, const AttentionLayer<T>& w,
                              const MatcherConfig& cfg, AttentionLayer<T>& g) {
  const Tensor<T> dmid = feed_forward_backward(dout, c.ff, w, g);
  const Tensor<T> dcontext = linear_backward(c.dir.context, dmid, w.out, g.out);
  Tensor<T> dq = Tensor<T>::Zero(c.side.q.rows(), c.side.q.cols());
  Tensor<T> dk = Tensor<T>::Zero(c.side.k.rows(), c.side.k.cols());
  Tensor<T> dv = Tensor<T>::Zero(c.side.v.rows(), c.side.v.cols());
  attention_backward(dcontext, c.dir, c.side.q, c.side.k, c.side.v, cfg.head_dim, dq, dk, dv);
  rope_apply(dq, c.rope_cos, c.rope_sin, cfg.head_dim, true);
  rope_apply(dk, c.rope_cos, c.rope_sin, cfg.head_dim, true);
  return dmid + project_side_backward(c.side, dq, dk, dv, w, g);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_layer_forward(const Tensor<T>& a, const Tensor<T>& b,
                                                    const AttentionLayer<T>& w, const MatcherConfig& cfg,
                                                    CrossLayerCache<T>& c, bool keep) {
  const T eps = static_cast<T>(cfg.norm_eps);
  project_side(a, w, eps, c.side_a);
  project_side(b, w, eps, c.side_b);
  const Tensor<T> ctx_a =
      attention_forward(c.side_a.q, c.side_b.k, c.side_b.v, cfg.head_dim, keep ? &c.a_to_b : nullptr);
  const Tensor<T> ctx_b =
      attention_forward(c.side_b.q, c.side_a.k, c.side_a.v, cfg.head_dim, keep ? &c.b_to_a : nullptr);
  const Tensor<T> mid_a = a + linear_forward(ctx_a, w.out);
  const Tensor<T> mid_b = b + linear_forward(ctx_b, w.out);
  return {feed_forward(mid_a, w, eps, keep ? &c.ff_a : nullptr), feed_forward(mid_b, w, eps, keep ? &c.ff_b : nullptr)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_layer_backward(const Tensor<T>& da_out, const Tensor<T>& db_out,
                                                     const CrossLayerCache<T>& c, const AttentionLayer<T>& w,
                                                     const MatcherConfig& cfg, AttentionLayer<T>& g) {
  const Tensor<T> dmid_a = feed_forward_backward(da_out, c.ff_a, w, g);
  const Tensor<T> dmid_b = feed_forward_backward(db_out, c.ff_b, w, g);
  const Tensor<T> dctx_a = linear_backward(c.a_to_b.context, dmid_a, w.out, g.out);
  const Tensor<T> dctx_b = linear_backward(c.b_to_a.context, dmid_b, w.out, g.out);
  auto zeros_like = [](const Tensor<T>& t) { return Tensor<T>::Zero(t.rows(), t.cols()); };
  Tensor<T> dqa = zeros_like(c.side_a.q), dka = zeros_like(c.side_a.k), dva = zeros_like(c.side_a.v);
  Tensor<T> dqb = zeros_like(c.side_b.q), dkb = zeros_like(c.side_b.k), dvb = zeros_like(c.side_b.v);
  attention_backward(dctx_a, c.a_to_b, c.side_a.q, c.side_b.k, c.side_b.v, cfg.head_dim, dqa, dkb, dvb);
  attention_backward(dctx_b, c.b_to_a, c.side_b.q, c.side_a.k, c.side_a.v, cfg.head_dim, dqb, dka, dva);
  return {dmid_a + project_side_backward(c.side_a, dqa, dka, dva, w, g),
          dmid_b + project_side_backward(c.side_b, dqb, dkb, dvb, w, g)};
}

template <typename T>
Tensor<T> unit_rows(const Tensor<T>& raw) {
  Tensor<T> out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const T n = std::max(raw.row(r).norm(), static_cast<T>(1e-12));
    out.row(r) = raw.row(r) / n;
  }
  return out;
}

template <typename T>
Tensor<T> unit_rows_backward(const Tensor<T>& dunit, const Tensor<T>& raw, const Tensor<T>& unit) {
  Tensor<T> out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const T n = std::max(raw.row(r).norm(), static_cast<T>(1e-12));
    out.row(r) = (dunit.row(r) - unit.row(r) * unit.row(r).dot(dunit.row(r))) / n;
  }
  return out;
}

template <typename T>
void check_finite(const Tensor<T>& t, int layer) {
  if (!t.allFinite()) {
    throw Error(ErrorCode::NonFiniteActivation, "non-finite activation at layer " + std::to_string(layer));
  }
}

}  // namespace

template <typename T>
LayerOutputs<T> forward(const MatcherInputs<T>& in, const MatcherWeights<T>& w, const MatcherConfig& cfg,
                        ForwardState<T>* state) {
  cfg.validate();
  if (in.desc_a.cols() != cfg.d_desc || in.desc_b.cols() != cfg.d_desc) {
    throw Error(ErrorCode::ShapeMismatch, "descriptor dimension differs from d_desc");
  }
  if (in.pos_a.rows() != in.desc_a.rows() || in.pos_b.rows() != in.desc_b.rows() || in.pos_a.cols() != 2 ||
      in.pos_b.cols() != 2) {
    throw Error(ErrorCode::ShapeMismatch, "positions and descriptors disagree in count");
  }
  if (static_cast<int>(w.blocks.size()) < cfg.stop_layer || static_cast<int>(w.heads.size()) < cfg.stop_layer ||
      w.input_proj.has_value() != cfg.has_input_projection()) {
    throw Error(ErrorCode::ShapeMismatch, "weights do not match the configuration");
  }
  const bool keep = state != nullptr;
  ForwardState<T> scratch;
  ForwardState<T>& st = keep ? *state : scratch;
  st = ForwardState<T>{};
  st.weights = &w;
  st.cfg = cfg;
  st.retained = keep;
  const auto layers = static_cast<std::size_t>(cfg.stop_layer);
  st.self_a.resize(layers);
  st.self_b.resize(layers);
  st.cross.resize(layers);
  st.heads.resize(layers);
  if (keep) {
    st.desc_a = in.desc_a;
    st.desc_b = in.desc_b;
  }

  Tensor<T> a = w.input_proj ? linear_forward(in.desc_a, *w.input_proj) : in.desc_a;
  Tensor<T> b = w.input_proj ? linear_forward(in.desc_b, *w.input_proj) : in.desc_b;

  LayerOutputs<T> out;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& block = w.blocks[l];
    // Without retention each layer reuses a single cache slot.
    const std::size_t slot = keep ? l : 0;
    a = self_layer_forward(a, in.pos_a, block.self, cfg, st.self_a[slot], keep);
    b = self_layer_forward(b, in.pos_b, block.self, cfg, st.self_b[slot], keep);
    std::tie(a, b) = cross_layer_forward(a, b, block.cross, cfg, st.cross[slot], keep);
    check_finite(a, static_cast<int>(l));
    check_finite(b, static_cast<int>(l));

    const auto& head = w.heads[l];
    LayerOutput<T> lo;
    lo.refined_a = a;
    lo.refined_b = b;
    Tensor<T> raw_a = linear_forward(a, head.desc);
    Tensor<T> raw_b = linear_forward(b, head.desc);
    lo.desc_a = unit_rows(raw_a);
    lo.desc_b = unit_rows(raw_b);
    lo.logits_a = linear_forward(a, head.match).col(0);
    lo.logits_b = linear_forward(b, head.match).col(0);
    if (keep) {
      auto& hc = st.heads[l];
      hc.input_a = a;
      hc.input_b = b;
      hc.raw_a = std::move(raw_a);
      hc.raw_b = std::move(raw_b);
      hc.unit_a = lo.desc_a;
      hc.unit_b = lo.desc_b;
    }
    out.layers.push_back(std::move(lo));
  }
  return out;
}

template <typename T>
MatcherWeights<T> backward(const ForwardState<T>& st, const std::vector<LayerGrad<T>>& grads) {
  if (!st.retained || st.weights == nullptr) {
    throw Error(ErrorCode::StateMissing, "forward pass ran without state retention");
  }
  const auto& w = *st.weights;
  const auto& cfg = st.cfg;
  const std::size_t layers = st.cross.size();
  if (grads.size() != layers) {
    throw Error(ErrorCode::ShapeMismatch, "expected one loss gradient per forward layer");
  }
  MatcherWeights<T> g = MatcherWeights<T>::zeros(cfg);
  const Eigen::Index na = st.desc_a.rows();
  const Eigen::Index nb = st.desc_b.rows();
  Tensor<T> da = Tensor<T>::Zero(na, cfg.d_emb);
  Tensor<T> db = Tensor<T>::Zero(nb, cfg.d_emb);

  for (std::size_t li = layers; li-- > 0;) {
    const auto& hc = st.heads[li];
    const auto& head = w.heads[li];
    auto& gh = g.heads[li];
    const auto& lg = grads[li];
    if (lg.desc_a.size() > 0) {
      da += linear_backward(hc.input_a, unit_rows_backward(lg.desc_a, hc.raw_a, hc.unit_a), head.desc, gh.desc);
    }
    if (lg.desc_b.size() > 0) {
      db += linear_backward(hc.input_b, unit_rows_backward(lg.desc_b, hc.raw_b, hc.unit_b), head.desc, gh.desc);
    }
    if (lg.logits_a.size() > 0) {
      da += linear_backward(hc.input_a, Tensor<T>(lg.logits_a), head.match, gh.match);
    }
    if (lg.logits_b.size() > 0) {
      db += linear_backward(hc.input_b, Tensor<T>(lg.logits_b), head.match, gh.match);
    }
    const auto& block = w.blocks[li];
    auto& gb = g.blocks[li];
    std::tie(da, db) = cross_layer_backward(da, db, st.cross[li], block.cross, cfg, gb.cross);
    da = self_layer_backward(da, st.self_a[li], block.self, cfg, gb.self);
    db = self_layer_backward(db, st.self_b[li], block.self, cfg, gb.self);
  }
  if (w.input_proj) {
    linear_backward(st.desc_a, da, *w.input_proj, *g.input_proj);
    linear_backward(st.desc_b, db, *w.input_proj, *g.input_proj);
  }
  return g;
}

template <typename T>
NamedTensors<T> backward_named(const ForwardState<T>& state, const std::vector<LayerGrad<T>>& grads,
                               const std::set<std::string>& frozen) {
  const MatcherWeights<T> g = backward(state, grads);
  NamedTensors<T> out;
  for (const auto& [name, t] : g.tensors()) {
    if (!frozen.contains(name)) out.emplace(name, *t);
  }
  return out;
}

template <typename T>
double pair_loss(const MatcherInputs<T>& in, const GtMatches& gt, const MatcherWeights<T>& w,
                 const MatcherConfig& cfg, const LayerwiseLossConfig& loss_cfg, MatcherWeights<T>* grad) {
  ForwardState<T> state;
  const LayerOutputs<T> outs = forward(in, w, cfg, grad ? &state : nullptr);
  std::vector<LayerTerm> terms;
  std::vector<Matrix> fa(outs.layers.size());
  std::vector<Matrix> fb(outs.layers.size());
  for (std::size_t l = 0; l < outs.layers.size(); ++l) {
    const auto& lo = outs.layers[l];
    fa[l] = lo.desc_a.template cast<double>();
    fb[l] = lo.desc_b.template cast<double>();
    terms.push_back({fa[l] * fb[l].transpose(), lo.logits_a.template cast<double>(), lo.logits_b.template cast<double>()});
  }
  std::vector<LayerTermGrad> term_grads;
  const double loss = layerwise_loss(terms, gt, loss_cfg, grad ? &term_grads : nullptr);
  if (grad) {
    std::vector<LayerGrad<T>> lg(outs.layers.size());
    for (std::size_t l = 0; l < lg.size(); ++l) {
      const Matrix& ds = term_grads[l].similarity;
      lg[l].desc_a = (ds * fb[l]).template cast<T>();
      lg[l].desc_b = (ds.transpose() * fa[l]).template cast<T>();
      lg[l].logits_a = term_grads[l].logits_a.template cast<T>();
      lg[l].logits_b = term_grads[l].logits_b.template cast<T>();
    }
    *grad = backward(state, lg);
  }
  return loss;
}

template <typename T>
MatchSet match_pair(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a,
                    const Matrix& desc_b, const MatcherWeights<T>& w, const MatcherConfig& cfg) {
  cfg.validate();
  if (kps_a.size() == 0 || kps_b.size() == 0) return {};
  const auto in = make_inputs<T>(kps_a, kps_b, desc_a, desc_b);
  const auto outs = forward(in, w, cfg);
  const auto& last = outs.layers.back();
  const Matrix s = similarity(last.desc_a.template cast<double>(), last.desc_b.template cast<double>());
  return mutual_matches(dual_softmax(s, cfg.match.inv_temperature), cfg.match.match_threshold);
}

double forward_flops(const MatcherConfig& cfg, int n_a, int n_b, int stop_layer) {
  const double d = cfg.d_emb;
  const double hidden = d * cfg.ff_expansion;
  const double na = n_a;
  const double nb = n_b;
  double flops = 0.0;
  if (cfg.has_input_projection()) flops += 2.0 * (na + nb) * cfg.d_desc * d;
  auto projections = [&](double n) { return 2.0 * n * d * d * 4.0 + 2.0 * n * d * hidden * 2.0; };
  for (int l = 0; l < stop_layer; ++l) {
    flops += projections(na) + projections(nb) + 4.0 * (na * na + nb * nb) * d;  // self
    flops += projections(na) + projections(nb) + 8.0 * na * nb * d;             // cross, both directions
    flops += 2.0 * (na + nb) * d * (cfg.d_desc + 1.0);                          // heads
  }
  return flops;
}

#define SPARSEMATCH_INSTANTIATE(T)                                                                              \
  template struct MatcherWeights<T>;                                                                            \
  template MatcherInputs<T> make_inputs<T>(const KeypointSet&, const KeypointSet&, const Matrix&, const Matrix&); \
  template LayerOutputs<T> forward<T>(const MatcherInputs<T>&, const MatcherWeights<T>&, const MatcherConfig&,   \
                                      ForwardState<T>*);                                                        \
  template MatcherWeights<T> backward<T>(const ForwardState<T>&, const std::vector<LayerGrad<T>>&);             \
  template NamedTensors<T> backward_named<T>(const ForwardState<T>&, const std::vector<LayerGrad<T>>&,          \
                                             const std::set<std::string>&);                                     \
  template double pair_loss<T>(const MatcherInputs<T>&, const GtMatches&, const MatcherWeights<T>&,             \
                               const MatcherConfig&, const LayerwiseLossConfig&, MatcherWeights<T>*);           \
  template MatchSet match_pair<T>(const KeypointSet&, const KeypointSet&, const Matrix&, const Matrix&,          \
                                  const MatcherWeights<T>&, const MatcherConfig&);

SPARSEMATCH_INSTANTIATE(float)
SPARSEMATCH_INSTANTIATE(double)
#undef SPARSEMATCH_INSTANTIATE

template MatcherWeights<double> MatcherWeights<float>::cast<double>() const;
template MatcherWeights<float> MatcherWeights<double>::cast<float>() const;
template MatcherWeights<float> MatcherWeights<float>::cast<float>() const;
template MatcherWeights<double> MatcherWeights<double>::cast<double>() const;

}  // namespace sparsematch

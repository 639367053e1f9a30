#include "tpseg/decoder.hpp"

#include <cmath>

#include "tpseg/ops.hpp"

namespace tpseg {

namespace {

template <typename S>
Var<S> flatten_pixels(const Var<S>& f) {
  if (f.value().rank() != 4) throw ShapeError("expected a (N, C, H, W) feature map, got " + to_string(f.shape()));
  const Index H = f.shape()[2], W = f.shape()[3];
  if (f.shape()[0] == 0 || H * W == 0) throw ShapeError("empty feature map " + to_string(f.shape()));
  if (H != W) throw ShapeError("prototype attention needs a square map, got " + to_string(f.shape()));
  return to_tokens(f, H);
}

template <typename S>
void check_prototype(const Var<S>& p, Index channels) {
  if (p.size() != channels) {
    throw ShapeError("prototype " + to_string(p.shape()) + " does not match " + std::to_string(channels) + " channels");
  }
  if (p.requires_grad()) throw Error("prototypes are gradient-free state and must not require grad");
}

template <typename S>
Var<S> repeat_query(const Var<S>& p, Index batch, Index channels) {
  check_prototype(p, channels);
  const Var<S> row = reshape(p, Shape{1, 1, channels});
  return batch == 1 ? row : concat<S>(std::vector<Var<S>>(static_cast<std::size_t>(batch), row), 0);
}

}  // namespace

template <typename S>
Var<S> prototype_attend(const Var<S>& p, const Var<S>& f) {
  const Var<S> kv = flatten_pixels(f);
  const Index N = f.shape()[0], C = f.shape()[1];
  return reshape(attention(repeat_query(p, N, C), kv, kv), Shape{N, C});
}

template <typename S>
Var<S> prototype_attend(const Var<S>& p, const Var<S>& f, const Var<S>& wk, const Var<S>& wv) {
  const Var<S> tokens = flatten_pixels(f);
  const Index N = f.shape()[0], C = f.shape()[1];
  return reshape(attention(repeat_query(p, N, C), linear(tokens, wk, Var<S>()), linear(tokens, wv, Var<S>())),
                 Shape{N, C});
}

template <typename S>
Var<S> similarity_map(const Var<S>& f, const Var<S>& p_fg, const Var<S>& p_bg) {
  check_prototype(p_fg, f.shape()[1]);
  check_prototype(p_bg, f.shape()[1]);
  return sigmoid(cosine_map(f, p_fg.value()) - cosine_map(f, p_bg.value()));
}

template <typename S>
Var<S> modulate(const Var<S>& f, const Var<S>& sim, double alpha) {
  return mul_spatial(f, sim * static_cast<S>(alpha) + S(1));
}

template <typename S>
Var<S> expert_apply(const Var<S>& f, const ExpertSet<S>& experts) {
  const Index N = f.shape()[0], C = f.shape()[1];
  const Index M = experts.weights.shape().back();
  if (experts.kernels.shape() != Shape{N, M, C * 9}) {
    throw ShapeError("expert kernels " + to_string(experts.kernels.shape()) + " do not match features " +
                     to_string(f.shape()));
  }
  const Var<S> mixed = bmm(reshape(experts.weights, Shape{N, 1, M}), experts.kernels);
  return depthwise_conv2d(f, reshape(mixed, Shape{N, C, 3, 3}), 1);
}

// ---- PgtdLevel ------------------------------------------------------------------

template <typename S>
PgtdLevel<S>::PgtdLevel(const Initializer& init, const std::string& name, Index low_channels, Index high_channels,
                        Index mid, const ModelConfig& c)
    : alpha(c.alpha), lambda_p(c.lambda_p), temp_r(c.temp_r), mid_(mid), groups_(c.decoder_groups),
      experts_(c.experts), learned_kv_(c.learned_kv) {
  const Index cf = 2 * mid, D = c.descriptor_dim, M = c.experts;
  auto param = [](Tensor<S> t) { return Var<S>::parameter(std::move(t)); };
  low_w_ = param(init.fan_in<S>(name + ".low.w", {mid, low_channels, 1, 1}, low_channels));
  low_b_ = param(Tensor<S>::zeros({mid}));
  low_gamma_ = param(Tensor<S>::full({mid}, S(1)));
  low_beta_ = param(Tensor<S>::zeros({mid}));
  high_w_ = param(init.fan_in<S>(name + ".high.w", {mid, high_channels, 1, 1}, high_channels));
  high_b_ = param(Tensor<S>::zeros({mid}));
  high_gamma_ = param(Tensor<S>::full({mid}, S(1)));
  high_beta_ = param(Tensor<S>::zeros({mid}));
  if (learned_kv_) {
    wk_ = param(init.fan_in<S>(name + ".wk", {cf, cf}, cf));
    wv_ = param(init.fan_in<S>(name + ".wv", {cf, cf}, cf));
  }
  desc_w1_ = param(init.fan_in<S>(name + ".desc.w1", {D, 3 * cf}, 3 * cf));
  desc_b1_ = param(Tensor<S>::zeros({D}));
  desc_w2_ = param(init.fan_in<S>(name + ".desc.w2", {D, D}, D));
  desc_b2_ = param(Tensor<S>::zeros({D}));
  kern_w_ = param(init.fan_in<S>(name + ".kernel.w", {M * cf * 9, D}, D, 0.1));
  // centre tap 1 plus noise: experts start near the identity
  Tensor<S> kb = init.normal<S>(name + ".kernel.b", {M * cf * 9}, 0.05);
  for (Index k = 0; k < M * cf; ++k) kb[k * 9 + 4] += S(1);
  kern_b_ = param(std::move(kb));
  route_w_ = param(init.fan_in<S>(name + ".route.w", {M, D}, D));
  route_b_ = param(Tensor<S>::zeros({M}));
  head_w_ = param(init.fan_in<S>(name + ".head.w", {1, cf, 1, 1}, cf));
  // cancels the reinforcement term at S = 0.5, rho = 1
  head_b_ = param(Tensor<S>::full({1}, static_cast<S>(-c.lambda_p * c.rho_init * std::tanh(0.5 / c.temp_r))));
}

template <typename S>
Var<S> PgtdLevel<S>::fuse_features(const Var<S>& f_low, const Var<S>& f_high) const {
  if (f_low.value().rank() != 4 || f_high.value().rank() != 4 || f_low.shape()[0] != f_high.shape()[0]) {
    throw ShapeError("fuse_features: incompatible inputs " + to_string(f_low.shape()) + " and " +
                     to_string(f_high.shape()));
  }
  const Index H = f_low.shape()[2], W = f_low.shape()[3];
  if (f_high.shape()[2] > H || f_high.shape()[3] > W) {
    throw ShapeError("fuse_features: high-level map " + to_string(f_high.shape()) + " larger than low-level " +
                     to_string(f_low.shape()));
  }
  Var<S> high = f_high;
  if (f_high.shape()[2] != H || f_high.shape()[3] != W) high = upsample_nearest(f_high, H, W);
  const Var<S> a = gelu(group_norm(conv2d(f_low, low_w_, low_b_, 1, 0), groups_, low_gamma_, low_beta_, S(1e-5)));
  const Var<S> b = gelu(group_norm(conv2d(high, high_w_, high_b_, 1, 0), groups_, high_gamma_, high_beta_, S(1e-5)));
  return concat<S>({a, b}, 1);
}

template <typename S>
Var<S> PgtdLevel<S>::attend(const Var<S>& p, const Var<S>& f) const {
  return learned_kv_ ? prototype_attend(p, f, wk_, wv_) : prototype_attend(p, f);
}

template <typename S>
Var<S> PgtdLevel<S>::semantic_descriptor(const Var<S>& a_fg, const Var<S>& a_bg) const {
  if (a_fg.shape() != a_bg.shape()) {
    throw ShapeError("descriptor inputs differ: " + to_string(a_fg.shape()) + " vs " + to_string(a_bg.shape()));
  }
  const Var<S> joint = concat<S>({a_fg, a_bg, a_fg - a_bg}, 1);
  return linear(gelu(linear(joint, desc_w1_, desc_b1_)), desc_w2_, desc_b2_);
}

template <typename S>
ExpertSet<S> PgtdLevel<S>::generate_experts(const Var<S>& z) const {
  const Index N = z.shape()[0];
  ExpertSet<S> e;
  e.kernels = reshape(linear(z, kern_w_, kern_b_), Shape{N, experts_, fused_channels() * 9});
  e.weights = softmax(linear(z, route_w_, route_b_));
  return e;
}

template <typename S>
Var<S> PgtdLevel<S>::head(const Var<S>& y) const {
  return conv2d(y, head_w_, head_b_, 1, 0);
}

template <typename S>
Var<S> PgtdLevel<S>::reinforce_predict(const Var<S>& y, const Var<S>& sim, const Var<S>& rho) const {
  if (!(temp_r > 0)) throw ConfigError("temp_r must be positive");
  const Var<S> base = head(y);
  const Var<S> boost = scale(tanh(sim * static_cast<S>(1.0 / temp_r)), rho) * static_cast<S>(lambda_p);
  return base + reshape(boost, base.shape());
}

template <typename S>
LevelOutput<S> PgtdLevel<S>::forward(const Var<S>& f_low, const Var<S>& f_high, const Var<S>& p_fg,
                                     const Var<S>& p_bg, const Var<S>& rho) const {
  LevelOutput<S> out;
  out.fused = fuse_features(f_low, f_high);
  out.a_fg = attend(p_fg, out.fused);
  out.a_bg = attend(p_bg, out.fused);
  const Var<S> z = semantic_descriptor(out.a_fg, out.a_bg);
  const ExpertSet<S> experts = generate_experts(z);
  out.routing = experts.weights;
  out.sim = similarity_map(out.fused, p_fg, p_bg);
  out.y = expert_apply(modulate(out.fused, out.sim, alpha), experts);
  out.logits = reinforce_predict(out.y, out.sim, rho);
  return out;
}

template <typename S>
void PgtdLevel<S>::collect(ParamList<S>& out, const std::string& name) const {
  auto add = [&](const char* suffix, const Var<S>& v) {
    if (v.defined()) out.push_back({name + suffix, v, ParamRole::Decoder, -1});
  };
  add(".low.w", low_w_);
  add(".low.b", low_b_);
  add(".low.gn.gamma", low_gamma_);
  add(".low.gn.beta", low_beta_);
  add(".high.w", high_w_);
  add(".high.b", high_b_);
  add(".high.gn.gamma", high_gamma_);
  add(".high.gn.beta", high_beta_);
  add(".wk", wk_);
  add(".wv", wv_);
  add(".desc.w1", desc_w1_);
  add(".desc.b1", desc_b1_);
  add(".desc.w2", desc_w2_);
  add(".desc.b2", desc_b2_);
  add(".kernel.w", kern_w_);
  add(".kernel.b", kern_b_);
  add(".route.w", route_w_);
  add(".route.b", route_b_);
  add(".head.w", head_w_);
  add(".head.b", head_b_);
}

// ---- Decoder -----------------------------------------------------------------------

template <typename S>
Decoder<S>::Decoder(const ModelConfig& c, const Initializer& init) {
  c.validate();
  const Index lows[3] = {c.stem_channels, c.stage1_channels, c.stage2_channels};
  for (int k = 0; k < c.levels; ++k) {
    const Index high = k == c.levels - 1 ? c.stage2_channels : c.fused_channels(k + 1);
    levels_.emplace_back(init, "dec.pgtd" + std::to_string(k + 1), lows[k], high,
                         c.fuse_channels[static_cast<std::size_t>(k)], c);
  }
}

template <typename S>
std::vector<LevelOutput<S>> Decoder<S>::forward(const EncoderTaps<S>& taps,
                                                const std::vector<LevelCondition<S>>& cond) const {
  if (cond.size() != levels_.size()) {
    throw ShapeError("decoder needs " + std::to_string(levels_.size()) + " level conditions, got " +
                     std::to_string(cond.size()));
  }
  const Var<S> lows[3] = {taps.f0, taps.e1, taps.e2a};
  std::vector<LevelOutput<S>> outs(levels_.size());
  for (int k = levels() - 1; k >= 0; --k) {
    const auto i = static_cast<std::size_t>(k);
    const Var<S> high = k == levels() - 1 ? taps.e2b : outs[i + 1].y;
    outs[i] = levels_[i].forward(lows[k], high, cond[i].p_fg, cond[i].p_bg, cond[i].rho);
  }
  return outs;
}

template <typename S>
void Decoder<S>::collect(ParamList<S>& out) const {
  for (int k = 0; k < levels(); ++k) levels_[static_cast<std::size_t>(k)].collect(out, "dec.pgtd" + std::to_string(k + 1));
}

#define TPSEG_INSTANTIATE_DECODER(S)                                                                \
  template Var<S> prototype_attend(const Var<S>&, const Var<S>&);                                   \
  template Var<S> prototype_attend(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&);     \
  template Var<S> similarity_map(const Var<S>&, const Var<S>&, const Var<S>&);                      \
  template Var<S> modulate(const Var<S>&, const Var<S>&, double);                                   \
  template Var<S> expert_apply(const Var<S>&, const ExpertSet<S>&);                                 \
  template class PgtdLevel<S>;                                                                      \
  template class Decoder<S>;

TPSEG_INSTANTIATE_DECODER(float)
TPSEG_INSTANTIATE_DECODER(double)

}  // namespace tpseg

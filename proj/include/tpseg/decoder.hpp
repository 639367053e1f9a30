#pragma once

#include <string>
#include <vector>

#include "tpseg/autograd.hpp"
#include "tpseg/config.hpp"
#include "tpseg/encoder.hpp"
#include "tpseg/params.hpp"

namespace tpseg {

/// M depthwise 3x3 kernel stacks per sample, (N, M, C*9), and their softmax
/// routing weights (N, M).
template <typename S>
struct ExpertSet {
  Var<S> kernels;
  Var<S> weights;
};

/// Cross-attention of the unit query p (C) over the pixels of f (N, C, H, W),
/// keys = values = flattened features. Returns (N, C). Prototypes enter the
/// graph as constants; one that requires grad is rejected.
template <typename S>
Var<S> prototype_attend(const Var<S>& p, const Var<S>& f);
/// Learned key/value projections (C, C) applied to the flattened features.
template <typename S>
Var<S> prototype_attend(const Var<S>& p, const Var<S>& f, const Var<S>& wk, const Var<S>& wv);
template <typename S>
Var<S> prototype_attend(const Tensor<S>& p, const Var<S>& f) {
  return prototype_attend(Var<S>(p), f);
}

/// sigmoid(cos(f, p_fg) - cos(f, p_bg)) per pixel, (N, H, W).
template <typename S>
Var<S> similarity_map(const Var<S>& f, const Var<S>& p_fg, const Var<S>& p_bg);
template <typename S>
Var<S> similarity_map(const Var<S>& f, const Tensor<S>& p_fg, const Tensor<S>& p_bg) {
  return similarity_map(f, Var<S>(p_fg), Var<S>(p_bg));
}
/// f * (1 + alpha * S) broadcast over channels.
template <typename S>
Var<S> modulate(const Var<S>& f, const Var<S>& sim, double alpha);
/// sum_m w_m * depthwise_conv(f, W_m), padding 1.
template <typename S>
Var<S> expert_apply(const Var<S>& f, const ExpertSet<S>& experts);

template <typename S>
struct LevelOutput {
  Var<S> logits;  // (N, 1, h, w) at the level's resolution
  Var<S> fused;   // f, input of the EMA update
  Var<S> y;       // expert output, next level's high input
  Var<S> a_fg, a_bg;
  Var<S> sim;
  Var<S> routing;
};

template <typename S>
class PgtdLevel {
 public:
  PgtdLevel(const Initializer& init, const std::string& name, Index low_channels, Index high_channels, Index mid,
            const ModelConfig& config);

  Index fused_channels() const noexcept { return 2 * mid_; }
  Index experts() const noexcept { return experts_; }

  Var<S> fuse_features(const Var<S>& f_low, const Var<S>& f_high) const;
  Var<S> attend(const Var<S>& p, const Var<S>& f) const;
  Var<S> semantic_descriptor(const Var<S>& a_fg, const Var<S>& a_bg) const;
  ExpertSet<S> generate_experts(const Var<S>& z) const;
  Var<S> head(const Var<S>& y) const;
  /// Head(y) + lambda_p * rho * tanh(S / temp_r)
  Var<S> reinforce_predict(const Var<S>& y, const Var<S>& sim, const Var<S>& rho) const;
  LevelOutput<S> forward(const Var<S>& f_low, const Var<S>& f_high, const Var<S>& p_fg, const Var<S>& p_bg,
                         const Var<S>& rho) const;

  void collect(ParamList<S>& out, const std::string& name) const;

  double alpha = 0.5;
  double lambda_p = 5.0;
  double temp_r = 1.0;

 private:
  Index mid_, groups_, experts_;
  bool learned_kv_;
  Var<S> low_w_, low_b_, low_gamma_, low_beta_;
  Var<S> high_w_, high_b_, high_gamma_, high_beta_;
  Var<S> wk_, wv_;
  Var<S> desc_w1_, desc_b1_, desc_w2_, desc_b2_;
  Var<S> kern_w_, kern_b_, route_w_, route_b_;
  Var<S> head_w_, head_b_;
};

/// Per-level prototype pair and amplifier handed to the decoder.
template <typename S>
struct LevelCondition {
  Var<S> p_fg, p_bg;
  Var<S> rho;
};

/// PGTD levels, index 0 = PGTD1 (full resolution). Level k fuses the k-th
/// encoder tap with the deeper level's output (the deepest level fuses the
/// two stage-2 taps).
template <typename S>
class Decoder {
 public:
  Decoder(const ModelConfig& config, const Initializer& init);

  int levels() const noexcept { return static_cast<int>(levels_.size()); }
  PgtdLevel<S>& level(int k) { return levels_.at(static_cast<std::size_t>(k)); }
  const PgtdLevel<S>& level(int k) const { return levels_.at(static_cast<std::size_t>(k)); }

  std::vector<LevelOutput<S>> forward(const EncoderTaps<S>& taps, const std::vector<LevelCondition<S>>& cond) const;
  void collect(ParamList<S>& out) const;

 private:
  std::vector<PgtdLevel<S>> levels_;
};

}  // namespace tpseg

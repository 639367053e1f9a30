#pragma once

#include <string>
#include <vector>

#include "tpseg/autograd.hpp"
#include "tpseg/config.hpp"
#include "tpseg/params.hpp"

namespace tpseg {

/// Linear decay from `start` to `end` over `total_steps`, held at `end` after.
struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.3;
  long total_steps = 1;

  double operator()(long step) const;
};

double temperature(long step, const TemperatureSchedule& schedule);

/// Routing weights of one task for gated blocks 2..B-1 from the raw gate
/// vector: w_b = sigmoid(cumsum(softplus(raw))[b-2] / tem).
std::vector<double> routing_weights(const std::vector<double>& raw_gate, double tem);
/// Single entry of routing_weights; block b must lie in [2, B-1].
double routing_weight(const std::vector<double>& raw_gate, Index block, double tem);
/// First gated block whose weight exceeds 0.5. When every weight sits at
/// exactly 0.5 the tie resolves to block 2; with no gated blocks, B.
Index split_position(const std::vector<double>& raw_gate, double tem);

/// GN -> conv3x3 (C -> C / reduction) -> GELU -> conv1x1 (back to C).
template <typename S>
struct Router {
  Var<S> gamma, beta, w1, b1, w2, b2;
  Index groups = 1;

  static Router make(const Initializer& init, const std::string& name, Index channels, Index hidden, Index groups);
  Var<S> operator()(const Var<S>& h) const;
  void collect(ParamList<S>& out, const std::string& name, ParamRole role, int task) const;
};

/// Pre-norm window attention + MLP with residuals. Weights are constants.
template <typename S>
struct FrozenBlock {
  Var<S> wq, wk, wv, wo, bo, w1, b1, w2, b2;
  Index window = 1;

  static FrozenBlock make(const Initializer& init, const std::string& name, Index channels, Index window,
                          Index mlp_ratio);
  Var<S> operator()(const Var<S>& h) const;
  void collect(ParamList<S>& out, const std::string& name) const;
};

/// Multi-scale encoder outputs: stem (full res), end of stage 1 (1/2),
/// middle and end of stage 2 (1/4).
template <typename S>
struct EncoderTaps {
  Var<S> f0, e1, e2a, e2b;
};

template <typename S>
class Encoder {
 public:
  Encoder(const ModelConfig& config, const Initializer& init);

  int tasks() const noexcept { return tasks_; }
  Index blocks() const noexcept { return static_cast<Index>(frozen_.size()); }
  Index width(Index block) const;
  RouteMode route_mode() const noexcept { return mode_; }
  void set_route_mode(RouteMode mode) noexcept { mode_ = mode; }

  Var<S> shared_increment(const Var<S>& h, Index block) const;
  Var<S> task_increment(const Var<S>& h, int task, Index block) const;

  /// Differentiable routing weights for gated blocks, shape (B-2).
  Var<S> gate_weights(int task, double tem) const;
  double routing_weight(int task, Index block, double tem) const;
  Index split_position(int task, double tem) const;

  /// h + (1 - w) dh_s + w dh_t, then frozen block `block`. An undefined `w`
  /// means the pure shared path.
  Var<S> tcrb_forward(const Var<S>& h, int task, Index block, const Var<S>& w) const;
  EncoderTaps<S> forward(const Var<S>& image, int task, double tem) const;

  const FrozenBlock<S>& frozen_block(Index block) const { return frozen_.at(static_cast<std::size_t>(block)); }
  Var<S>& gate(int task);
  const Var<S>& gate(int task) const;
  std::vector<double> raw_gate(int task) const;

  void collect(ParamList<S>& out) const;
  /// FNV-1a over the bytes of every frozen tensor.
  std::uint64_t frozen_checksum() const;
  /// Per task: block, raw L, effective l, cumulative sum, w at `tem`, b*.
  std::string gate_json(double tem) const;

 private:
  void check_task(int task) const;
  void check_block(Index block) const;

  int tasks_;
  Index stage1_blocks_;
  RouteMode mode_;
  Var<S> stem_w_, stem_b_, patch_w_, patch_b_, down_w_, down_b_;
  std::vector<FrozenBlock<S>> frozen_;
  std::vector<Router<S>> shared_;
  // task_[t][b - 2]
  std::vector<std::vector<Router<S>>> task_;
  std::vector<Var<S>> gates_;
};

}  // namespace tpseg

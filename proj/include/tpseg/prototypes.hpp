#pragma once

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

#include "tpseg/autograd.hpp"
#include "tpseg/params.hpp"

namespace tpseg {

/// Unit-norm foreground/background prototypes of one task at one level.
/// Plain tensors: never part of an autograd graph.
struct PrototypePair {
  Tensor<double> fg, bg;
  long update_count = 0;
};

/// normalize(sum_ij M_ij f_ij / (sum_ij M_ij + eps)) over every pixel of the
/// batch. f is (N, C, H, W); mask is (N, 1, H, W) or (N, H, W) at the same
/// resolution. Empty when the mask covers less than half a pixel.
template <typename S>
std::optional<Tensor<double>> masked_mean_feature(const Tensor<S>& f, const Tensor<S>& mask, double eps = 1e-6);

/// m * p + (1 - m) * f_hat, before renormalization.
Tensor<double> ema_blend(const Tensor<double>& p, const Tensor<double>& f_hat, double m);
/// normalize(ema_blend(p, f_hat, m)).
Tensor<double> ema_update(const Tensor<double>& p, const Tensor<double>& f_hat, double m);

/// 1 - cos(a, b), in [0, 2].
double separation_score(const Tensor<double>& a, const Tensor<double>& b);

/// Unit vector of dimension `dim` drawn from `seed`.
Tensor<double> random_unit(Index dim, std::uint64_t seed);

/// Two-layer MLP embedding -> 2C split into the initial (fg, bg) pair.
template <typename S>
struct PrototypeInitMlp {
  Var<S> w1, b1, w2, b2;

  static PrototypeInitMlp make(const Initializer& init, const std::string& name, Index embedding_dim, Index hidden,
                               Index channels);
  void collect(ParamList<S>& out, const std::string& name) const;
};

/// Runs the init MLP without recording, splits and normalizes. A zero-norm
/// half falls back to random_unit(C, derive_seed(fallback_seed, half)).
template <typename S>
PrototypePair init_prototypes(const Tensor<S>& embedding, const PrototypeInitMlp<S>& mlp, std::uint64_t fallback_seed);

class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(int tasks, std::vector<Index> dims, double momentum = 0.9, double eps = 1e-6);

  int tasks() const noexcept { return tasks_; }
  int levels() const noexcept { return static_cast<int>(dims_.size()); }
  Index dim(int level) const { return dims_.at(static_cast<std::size_t>(level)); }
  double momentum() const noexcept { return momentum_; }

  PrototypePair& pair(int task, int level);
  const PrototypePair& pair(int task, int level) const;

  struct Update {
    bool fg = false;
    bool bg = false;
  };
  /// EMA of the fg slot over `mask` and the bg slot over 1 - mask. Absent
  /// regions leave their slot untouched.
  template <typename S>
  Update update_from_batch(int task, int level, const Tensor<S>& f, const Tensor<S>& mask);

  /// T x T cosines between foreground prototypes.
  Eigen::MatrixXd similarity_matrix(int level) const;
  std::vector<double> separation_scores(int level) const;
  /// Largest | ||P|| - 1 | over every stored prototype.
  double max_norm_error() const;
  /// FNV-1a over one task's prototype bytes.
  std::uint64_t checksum(int task) const;

 private:
  void check(int task, int level) const;

  int tasks_ = 0;
  std::vector<Index> dims_;
  double momentum_ = 0.9;
  double eps_ = 1e-6;
  std::vector<PrototypePair> pairs_;  // task-major
};

}  // namespace tpseg

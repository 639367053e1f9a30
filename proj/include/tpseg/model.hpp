#pragma once

#include <string>
#include <vector>

#include "tpseg/decoder.hpp"
#include "tpseg/encoder.hpp"
#include "tpseg/prototypes.hpp"

namespace tpseg {

template <typename S>
struct ModelOutput {
  EncoderTaps<S> taps;
  std::vector<LevelOutput<S>> levels;
  std::vector<Var<S>> logits;              // per level, upsampled to the input size
  std::vector<LevelCondition<S>> prototypes;  // the constants the decoder saw
};

/// Parameter counts by role. Per-task entries are indexed by task.
struct Census {
  Index frozen = 0, shared_adapter = 0, decoder = 0, prototype_init = 0;
  std::vector<Index> router, gate, embedding, prototypes, rho;

  Index task_total(int task) const;
  Index shared_total() const { return frozen + shared_adapter + decoder + prototype_init; }
  Index total() const;
  std::string to_csv() const;
};

template <typename S>
class TpSeg {
 public:
  explicit TpSeg(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  int tasks() const noexcept { return config_.tasks; }
  Encoder<S>& encoder() noexcept { return encoder_; }
  const Encoder<S>& encoder() const noexcept { return encoder_; }
  Decoder<S>& decoder() noexcept { return decoder_; }
  const Decoder<S>& decoder() const noexcept { return decoder_; }
  PrototypeBank& bank() noexcept { return bank_; }
  const PrototypeBank& bank() const noexcept { return bank_; }
  Var<S>& rho(int task, int level);
  Var<S>& embedding(int task);
  const PrototypeInitMlp<S>& init_mlp(int level) const { return init_mlps_.at(static_cast<std::size_t>(level)); }

  /// Re-derives every prototype pair from the task embeddings.
  void reset_prototypes();

  /// images (N, 1, H, W) of one task.
  ModelOutput<S> forward(const Tensor<S>& images, int task, double tem) const;

  /// EMA refresh of one task's prototypes from the fused features of a
  /// forward pass, masks (N, 1, H, W) at input resolution.
  void update_prototypes(int task, const ModelOutput<S>& out, const Tensor<S>& masks);

  ParamList<S> parameters() const;
  Census census() const;

 private:
  void check_task(int task) const;

  ModelConfig config_;
  Encoder<S> encoder_;
  Decoder<S> decoder_;
  PrototypeBank bank_;
  std::vector<PrototypeInitMlp<S>> init_mlps_;
  std::vector<Var<S>> embeddings_;
  std::vector<std::vector<Var<S>>> rho_;  // [task][level]
};

/// Mean over levels of dice_weight * soft Dice + bce_weight * BCE, each
/// level's logits compared at input resolution.
template <typename S>
Var<S> seg_loss(const std::vector<Var<S>>& level_logits, const Tensor<S>& masks, double dice_weight = 0.5,
                double bce_weight = 0.5);

/// Per-level terms of seg_loss, values only.
template <typename S>
std::vector<double> level_losses(const std::vector<Var<S>>& level_logits, const Tensor<S>& masks,
                                 double dice_weight = 0.5, double bce_weight = 0.5);

}  // namespace tpseg

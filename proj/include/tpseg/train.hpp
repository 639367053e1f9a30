#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tpseg/config.hpp"
#include "tpseg/data.hpp"
#include "tpseg/metrics.hpp"
#include "tpseg/model.hpp"
#include "tpseg/sampler.hpp"

namespace tpseg {

struct AdamOptions {
  double lr = 3e-5, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
};

/// Adaptive-moment optimizer over named leaves. A parameter without a
/// gradient in a step is left alone, its moment count included.
template <typename S>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Var<S>>> params, AdamOptions options);

  void zero_grad();
  void step();
  AdamOptions& options() noexcept { return options_; }

  struct Slot {
    Tensor<double> m, v;
    long t = 0;
  };
  const std::map<std::string, Slot>& state() const noexcept { return slots_; }
  std::map<std::string, Slot>& state() noexcept { return slots_; }

 private:
  std::vector<std::pair<std::string, Var<S>>> params_;
  std::map<std::string, Slot> slots_;
  AdamOptions options_;
};

/// Stacks samples into (N, 1, H, W) images and masks.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> stack_batch(const std::vector<const SegmentationSample*>& batch);

/// Dice and mIoU of PGTD1's prediction, averaged over samples, with routing
/// and prototypes of `task`. No prototype updates. Empty `samples` throws.
template <typename S>
TaskMetrics evaluate(const TpSeg<S>& model, const std::vector<SegmentationSample>& samples, int task, double tem,
                     int batch_size = 16);

template <typename S>
class Trainer {
 public:
  Trainer(const ModelConfig& model, const TrainConfig& train, const MultiTaskData& data);

  TpSeg<S>& model() noexcept { return model_; }
  const TpSeg<S>& model() const noexcept { return model_; }
  Adam<S>& optimizer() noexcept { return adam_; }
  const TrainConfig& train_config() const noexcept { return train_; }
  TaskSampler& sampler() noexcept { return sampler_; }

  long step() const noexcept { return step_; }
  int epoch() const noexcept { return epoch_; }
  int steps_per_epoch() const noexcept { return steps_per_epoch_; }
  double temperature() const;
  const std::vector<MetricsRecord>& history() const noexcept { return history_; }

  /// One optimizer step; returns the batch loss and per-level terms.
  double train_step(std::vector<double>* level_loss = nullptr);
  /// steps_per_epoch steps followed by a validation pass.
  MetricsRecord train_epoch();
  MetricsRecord validate() const;
  /// Runs up to train.epochs; `on_epoch` sees each record as it lands.
  void fit(const std::function<void(const MetricsRecord&)>& on_epoch = {});

  /// Where a non-finite loss dumps its diagnostics; empty disables the dump.
  std::string diagnostics_dir;

  void save(const std::string& path, const RunConfig& run) const;
  /// Restores model, bank, optimizer, sampler, step, epoch and history.
  void load_state(const std::string& path);

 private:
  void dump_diagnostics(int task, const std::vector<double>& terms) const;

  TrainConfig train_;
  const MultiTaskData* data_;
  TpSeg<S> model_;
  Adam<S> adam_;
  TaskSampler sampler_;
  int steps_per_epoch_;
  TemperatureSchedule schedule_;
  long step_ = 0;
  int epoch_ = 0;
  std::vector<MetricsRecord> history_;
};

/// Header and named tensor records of a checkpoint file.
struct Checkpoint {
  RunConfig config;
  std::uint64_t config_hash = 0;
  long step = 0;
  int epoch = 0;
  double temperature = 1.0;
  std::uint64_t sampler_state = 0;
  std::vector<MetricsRecord> history;
  std::map<std::string, long> counters;
  std::map<std::string, Tensor<double>> tensors;

  static Checkpoint read(const std::string& path);
  void write(const std::string& path) const;
};

/// Model weights and prototypes from a checkpoint.
template <typename S>
TpSeg<S> load_model(const Checkpoint& ck);

/// Copies named records onto the model; unknown or missing names throw.
template <typename S>
void restore_model(TpSeg<S>& model, const Checkpoint& ck);

template <typename S>
void store_model(const TpSeg<S>& model, Checkpoint& ck);

}  // namespace tpseg

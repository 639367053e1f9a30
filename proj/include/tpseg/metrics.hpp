#pragma once

#include <string>
#include <vector>

#include "tpseg/tensor.hpp"

namespace tpseg {

/// Pixel counts of a binary prediction against a binary target (> 0.5 is on).
struct Confusion {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const Tensor<double>& pred, const Tensor<double>& gt);

/// 2|A n B| / (|A| + |B|), 1 when both are empty.
double dice(const Confusion& c);
/// Mean of foreground and background IoU; an empty class scores 1.
double miou(const Confusion& c);
double dice(const Tensor<double>& pred, const Tensor<double>& gt);
double miou(const Tensor<double>& pred, const Tensor<double>& gt);

/// 1 where sigmoid(logit) > 0.5.
template <typename S>
Tensor<double> binarize_logits(const Tensor<S>& logits) {
  Tensor<double> out(logits.shape());
  for (Index i = 0; i < logits.size(); ++i) out[i] = logits[i] > S(0) ? 1.0 : 0.0;
  return out;
}

struct TaskMetrics {
  double dice = 0, miou = 0;
  long samples = 0;
};

struct MetricsRecord {
  int epoch = 0;
  std::vector<TaskMetrics> tasks;
  double train_loss = 0;
  std::vector<double> level_loss;  // deep-supervision terms, PGTD1 first
  double temperature = 1.0;
  long step = 0;

  double mean_dice() const;
  double mean_miou() const;
};

/// epoch,task,dice,miou
std::string metrics_csv(const std::vector<MetricsRecord>& history);
std::string metrics_json(const std::vector<MetricsRecord>& history);

}  // namespace tpseg

#pragma once

#include <vector>

#include "tpseg/data.hpp"
#include "tpseg/rng.hpp"

namespace tpseg {

/// (1 / N_i) / sum_j (1 / N_j). ConfigError on an empty or non-positive count.
std::vector<double> sampler_probs(const std::vector<long>& counts);

struct SampleRef {
  int task;
  Index index;
};

/// Tasks i.i.d. from the inverse-frequency distribution, then a uniform
/// sample of that task with replacement.
class TaskSampler {
 public:
  TaskSampler(std::vector<long> counts, std::uint64_t seed);

  const std::vector<double>& probs() const noexcept { return probs_; }
  const std::vector<long>& counts() const noexcept { return counts_; }

  int draw_task();
  std::vector<SampleRef> draw(int batch_size);

  std::uint64_t state() const noexcept { return rng_.state(); }
  void set_state(std::uint64_t s) noexcept { rng_.set_state(s); }

 private:
  std::vector<long> counts_;
  std::vector<double> probs_, cdf_;
  SplitMix64 rng_;
};

/// Pointers into `datasets` (indexed by task), valid while it lives.
std::vector<const SegmentationSample*> draw_batch(TaskSampler& sampler,
                                                  const std::vector<std::vector<SegmentationSample>>& datasets,
                                                  int batch_size);

}  // namespace tpseg

#include "tpseg/sampler.hpp"

#include <numeric>
#include <string>

#include "tpseg/error.hpp"

namespace tpseg {

std::vector<double> sampler_probs(const std::vector<long>& counts) {
  if (counts.empty()) throw ConfigError("sampler needs at least one task");
  std::vector<double> w;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] <= 0) {
      throw ConfigError("task " + std::to_string(i) + " has " + std::to_string(counts[i]) + " training samples");
    }
    w.push_back(1.0 / static_cast<double>(counts[i]));
  }
  const double z = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= z;
  return w;
}

TaskSampler::TaskSampler(std::vector<long> counts, std::uint64_t seed)
    : counts_(std::move(counts)), probs_(sampler_probs(counts_)), rng_(seed) {
  double acc = 0;
  for (double p : probs_) cdf_.push_back(acc += p);
  cdf_.back() = 1.0;
}

int TaskSampler::draw_task() {
  const double u = rng_.uniform();
  for (std::size_t i = 0; i < cdf_.size(); ++i)
    if (u < cdf_[i]) return static_cast<int>(i);
  return static_cast<int>(cdf_.size()) - 1;
}

std::vector<SampleRef> TaskSampler::draw(int batch_size) {
  if (batch_size <= 0) throw ConfigError("batch size must be positive, got " + std::to_string(batch_size));
  std::vector<SampleRef> out;
  for (int i = 0; i < batch_size; ++i) {
    const int t = draw_task();
    out.push_back({t, static_cast<Index>(rng_.below(static_cast<std::uint64_t>(counts_[static_cast<std::size_t>(t)])))});
  }
  return out;
}

std::vector<const SegmentationSample*> draw_batch(TaskSampler& sampler,
                                                  const std::vector<std::vector<SegmentationSample>>& datasets,
                                                  int batch_size) {
  if (datasets.size() != sampler.counts().size()) {
    throw ConfigError("sampler covers " + std::to_string(sampler.counts().size()) + " tasks, data has " +
                      std::to_string(datasets.size()));
  }
  std::vector<const SegmentationSample*> out;
  for (const auto& r : sampler.draw(batch_size)) {
    const auto& set = datasets[static_cast<std::size_t>(r.task)];
    if (static_cast<std::size_t>(r.index) >= set.size()) throw ConfigError("sampler counts do not match the data");
    out.push_back(&set[static_cast<std::size_t>(r.index)]);
  }
  return out;
}

}  // namespace tpseg

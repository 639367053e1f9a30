#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpseg/config.hpp"
#include "tpseg/tensor.hpp"

namespace tpseg {

enum class GeneratorKind { BrightEllipse = 0, DarkBlob = 1, Ring = 2, MultiDot = 3 };

std::string to_string(GeneratorKind kind);
GeneratorKind parse_generator_kind(const std::string& text);

struct TaskSpec {
  int task_id = 0;
  GeneratorKind kind = GeneratorKind::BrightEllipse;
  double noise = 0.10;
  int count = 250;
};

/// image (H, W) in [0, 1], mask (H, W) in {0, 1}.
struct SegmentationSample {
  Tensor<double> image;
  Tensor<double> mask;
  int task_id = 0;
  std::string sample_id;
};

/// Task k uses kind k mod 4. Kinds 0 and 1 draw the same scene (a bright
/// ellipse and a dark blob on gray) and differ only in which one is the target.
std::vector<TaskSpec> default_task_specs(int tasks, int count, double noise);

/// One sample. Geometry scales with size / 64; deterministic in (spec, size, seed).
SegmentationSample generate_sample(const TaskSpec& spec, Index size, std::uint64_t seed);
/// spec.count samples, sample i seeded with derive_seed(derive_seed(seed, task_id), i).
std::vector<SegmentationSample> gen_task_dataset(const TaskSpec& spec, Index size, std::uint64_t seed,
                                                 int threads = 1);

struct MultiTaskData {
  Index size = 64;
  std::vector<TaskSpec> specs;
  std::vector<std::vector<SegmentationSample>> train, val;  // indexed by task

  int tasks() const noexcept { return static_cast<int>(specs.size()); }
  std::vector<long> train_counts() const;
};

/// The first `train` samples of each task form the train split, the rest val.
MultiTaskData generate_data(const DataConfig& config, int threads = 1);

/// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, const Tensor<double>& image);
Tensor<double> read_pgm(const std::string& path);

/// Writes <root>/manifest.json and <root>/data/task<k>/<split>/<id>.{img,mask}.pgm.
void save_dataset(const std::string& root, const MultiTaskData& data);
MultiTaskData load_dataset(const std::string& root);

enum class MaskResample { Nearest, AreaThreshold };

/// Resamples the last two axes of a binary mask to (height, width). Nearest
/// takes source pixel floor(i * in / out), the top-left corner of each cell
/// for integer factors. AreaThreshold sets a pixel when at least half of its
/// source cell is foreground.
Tensor<double> downsample_mask(const Tensor<double>& mask, Index height, Index width,
                               MaskResample mode = MaskResample::Nearest);

/// Threads allowed by TPSEG_THREADS (default: hardware concurrency, min 1).
int thread_budget();

}  // namespace tpseg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpseg/tensor.hpp"

namespace tpseg {

enum class RouteMode { Full, SharedOnly, TaskOnly };

std::string to_string(RouteMode mode);
RouteMode parse_route_mode(const std::string& text);

struct ModelConfig {
  int tasks = 4;
  Index image_size = 64;
  Index stem_channels = 8;
  Index stage1_channels = 16;
  Index stage2_channels = 32;
  Index blocks = 8;
  Index stage1_blocks = 2;
  Index stage1_window = 8;
  Index stage2_window = 16;
  Index mlp_ratio = 2;
  Index adapter_reduction = 4;
  Index adapter_groups = 4;
  double gate_init = -2.0;
  RouteMode route_mode = RouteMode::Full;

  int levels = 3;
  // fused width is twice the per-branch width; index 0 is PGTD1
  std::vector<Index> fuse_channels{8, 16, 16};
  Index decoder_groups = 4;
  Index descriptor_dim = 32;
  Index experts = 6;
  double alpha = 0.5;
  double lambda_p = 5.0;
  double temp_r = 1.0;
  bool learned_kv = false;
  double rho_init = 1.0;

  Index embedding_dim = 32;
  Index init_hidden = 64;
  double momentum = 0.9;
  double proto_eps = 1e-6;

  std::uint64_t seed = 0;

  /// Throws ConfigError on inconsistent extents.
  void validate() const;
  Index fused_channels(int level) const { return 2 * fuse_channels.at(static_cast<std::size_t>(level)); }
  Index gated_blocks() const { return blocks > 2 ? blocks - 2 : 0; }
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double dice_weight = 0.5;
  double bce_weight = 0.5;
  // 0 means train samples / batch size
  int steps_per_epoch = 0;
  // 0 means epochs * steps_per_epoch
  long temperature_steps = 0;
  std::string precision = "float";
  std::uint64_t seed = 0;
  bool update_prototypes = true;
  bool verbose = true;
};

struct DataConfig {
  int tasks = 4;
  Index size = 64;
  int train = 200;
  int val = 50;
  double noise = 0.10;
  std::uint64_t seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out = "run";
  std::string data_dir;  // empty: generated in memory from `data`

  std::string to_json() const;
  /// Every key is optional; unknown keys throw ConfigError.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  std::uint64_t hash() const;
};

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace tpseg

#pragma once

#include <string>
#include <vector>

#include "tpseg/autograd.hpp"
#include "tpseg/config.hpp"
#include "tpseg/rng.hpp"

namespace tpseg {

enum class ParamRole { Frozen, SharedAdapter, TaskRouter, Gate, Decoder, Rho, Embedding, PrototypeInit };

const char* to_string(ParamRole role);

template <typename S>
struct ParamEntry {
  std::string name;
  Var<S> var;
  ParamRole role;
  int task = -1;  // owning task for task-indexed roles
};

template <typename S>
using ParamList = std::vector<ParamEntry<S>>;

/// Seeded initial values. Each tensor's stream is keyed by its name, so the
/// draw for one parameter does not depend on which others exist.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : seed_(seed) {}

  template <typename S>
  Tensor<S> normal(const std::string& name, Shape shape, double stddev) const {
    SplitMix64 rng(derive_seed(seed_, fnv1a64(name)));
    Tensor<S> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  /// N(0, 1 / fan_in) scaled by `gain`.
  template <typename S>
  Tensor<S> fan_in(const std::string& name, Shape shape, Index fan_in, double gain = 1.0) const {
    return normal<S>(name, std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)));
  }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
};

}  // namespace tpseg

#pragma once

#include <string>
#include <vector>

namespace tpseg {

struct GradcheckEntry {
  std::string name;
  double max_error = 0.0;
  int trials = 0;
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  std::vector<GradcheckEntry> entries;

  bool all_passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return !entries.empty();
  }
};

/// Central-difference check (h = 1e-5, double precision) of every
/// differentiable op over `seeds` random draws each.
GradcheckReport run_op_gradchecks(int seeds = 20, double tolerance = 1e-4);

/// End-to-end micro models: the 2-task / 2-block / 1-level / 8x8 model, plus a
/// 4-block variant whose gated blocks exercise the split gate and task routers.
/// Every parameter coordinate is checked.
GradcheckReport run_model_gradchecks(double tolerance = 1e-4);

/// An op with a deliberately wrong derivative; must fail the check.
GradcheckEntry run_broken_fixture(double tolerance = 1e-4);

}  // namespace tpseg

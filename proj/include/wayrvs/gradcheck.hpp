#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wayrvs/autodiff.hpp"

namespace wayrvs {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  std::size_t coords_per_block = 100;
  std::uint64_t seed = 0;
  Mode mode = Mode::kEval;
  std::uint64_t dropout_seed = 0;
};

struct GradCheckBlock {
  std::string name;
  std::size_t checked = 0;
  // Coordinates whose +/- step moved a ReLU input across zero.
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double tolerance = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

// Builds a scalar loss on a fresh graph each call.
using LossBuilder = std::function<Var(Graph&)>;

// Compares analytic gradients with central differences over a random subset
// of coordinates of every parameter block (all coordinates when the block is
// smaller than coords_per_block). Parameter values are restored afterwards.
GradCheckReport finite_diff_check(const LossBuilder& loss, const std::vector<NamedParam>& params,
                                  const GradCheckOptions& options = {});

}  // namespace wayrvs

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metafo/autodiff.hpp"

namespace metafo {

/// Builds a scalar loss on `tape` from the current parameter values.
using LossBuilder = std::function<Var(Tape& tape, const ParamSet& params)>;

struct GradCheckOptions {
  /// Base step; the actual step for coordinate w is step * max(1, |w|).
  double step = 1e-5;
  /// Five-point stencil instead of the two-point rule. Truncation drops to
  /// h^4, so a larger step (about 1e-3) keeps round-off down as well.
  bool fourth_order = false;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error. Below it, central differences
  /// are dominated by round-off (about eps * |loss| / step), so tiny
  /// gradients are effectively compared in absolute terms.
  double floor = 1e-6;
  /// Check every coordinate when the set has at most this many, otherwise a
  /// seeded sample of this size.
  std::size_t max_coordinates = 400;
  std::uint64_t seed = 0;
  std::size_t report_worst = 10;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double autodiff = 0.0;
  double finite_difference = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_relative_error = 0.0;
  /// Largest relative errors first.
  std::vector<GradCheckEntry> worst;

  bool passed() const noexcept { return failures == 0; }
};

/// Compares reverse-mode gradients against central finite differences.
/// Coordinates are perturbed in place and restored; `params` grads are
/// overwritten with the autodiff gradient.
GradCheckReport finite_diff_check(const LossBuilder& loss, ParamSet& params,
                                  const GradCheckOptions& options = {});

}  // namespace metafo

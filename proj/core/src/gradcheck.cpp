#include "metafo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metafo/random.hpp"

namespace metafo {

namespace {

double evaluate(const LossBuilder& loss, const ParamSet& params) {
  Tape tape(false);
  return tape.value(loss(tape, params))[0];
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, ParamSet& params,
                                  const GradCheckOptions& options) {
  params.zero_grad();
  {
    Tape tape;
    Var l = loss(tape, params);
    tape.backward(l);
    tape.accumulate_grads(params);
  }

  // Flat (leaf, offset) addressing over every coordinate.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].value.size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > options.max_coordinates) {
    Rng rng(options.seed);
    shuffle(coords, rng);
    coords.resize(options.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  std::vector<GradCheckEntry> entries;
  entries.reserve(coords.size());
  for (auto [p, i] : coords) {
    ParamLeaf& leaf = params[p];
    const double original = leaf.value[i];
    const double h = options.step * std::max(1.0, std::abs(original));
    auto at = [&](double offset) {
      leaf.value[i] = original + offset;
      return evaluate(loss, params);
    };
    const double fd = options.fourth_order
                          ? (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
                          : (at(h) - at(-h)) / (2.0 * h);
    leaf.value[i] = original;

    GradCheckEntry e;
    e.name = leaf.name;
    e.index = i;
    e.autodiff = leaf.grad[i];
    e.finite_difference = fd;
    e.relative_error = std::abs(e.autodiff - e.finite_difference) /
                       std::max(options.floor, std::abs(e.autodiff) + std::abs(e.finite_difference));
    if (e.relative_error > options.tolerance) ++report.failures;
    report.max_relative_error = std::max(report.max_relative_error, e.relative_error);
    entries.push_back(std::move(e));
  }
  report.checked = entries.size();
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return a.relative_error > b.relative_error;
  });
  entries.resize(std::min(entries.size(), options.report_worst));
  report.worst = std::move(entries);
  return report;
}

}  // namespace metafo

#pragma once

#include <functional>
#include <vector>

#include "ssrseg/tensor.hpp"

namespace ssrseg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;  // index into the params list
  std::size_t worst_index = 0;  // flat coordinate inside that parameter
  std::size_t coordinates = 0;
  double analytic = 0.0;  // values at the worst coordinate
  double numeric = 0.0;
};

// Compares reverse-mode gradients of `f` with central differences
// (f(p+h) - f(p-h)) / 2h over every coordinate of `params`. The error of a
// coordinate is |a - n| / max(|a|, |n|, 1e-8). `f` must rebuild its graph
// from the current parameter values on each call. Parameter values are
// restored before returning. Throws OracleError if two evaluations at the
// same point disagree.
GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double step);

}  // namespace ssrseg

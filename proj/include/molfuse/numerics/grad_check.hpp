#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "molfuse/numerics/tape.hpp"

namespace molfuse::numerics {

// Builds a one-element output on `tape` from one leaf per input tensor.
using MultiScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;
using ScalarFn = std::function<Var(Tape& tape, Var x)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients against central differences
//   (f(x + h e_i) - f(x - h e_i)) / 2h
// coordinate by coordinate and reports
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// h must lie in [1e-7, 1e-3]. A non-finite f anywhere throws NonFiniteError.
GradCheckReport grad_check(const MultiScalarFn& f, std::vector<Tensor> inputs, double h);

double grad_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace molfuse::numerics

#include "molfuse/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "molfuse/error.hpp"

namespace molfuse::numerics {
namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
  const Var out = f(tape, leaves);
  if (out.value().size() != 1) {
    throw DimensionError("grad_check: function output has shape " +
                         shape_string(out.value().shape()));
  }
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const MultiScalarFn& f, std::vector<Tensor> inputs, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw PreconditionError("grad_check: step " + std::to_string(h) +
                            " outside [1e-7, 1e-3]");
  }
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.variable(t));
    const Var out = f(tape, leaves);
    if (out.value().size() != 1) {
      throw DimensionError("grad_check: function output has shape " +
                           shape_string(out.value().shape()));
    }
    if (!std::isfinite(out.value()[0])) {
      throw NonFiniteError("grad_check: non-finite function value");
    }
    tape.backward(out);
    for (const Var& leaf : leaves) analytic.push_back(leaf.grad());
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = evaluate(f, inputs);
      inputs[k][i] = saved - h;
      const double down = evaluate(f, inputs);
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates;
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  const MultiScalarFn wrapped = [&f](Tape& tape, std::span<const Var> in) {
    return f(tape, in[0]);
  };
  return grad_check(wrapped, std::vector<Tensor>{x}, h).max_rel_err;
}

}  // namespace molfuse::numerics

#pragma once

#include <cstddef>
#include <span>

#include "molfuse/numerics/tape.hpp"

namespace molfuse::numerics {

// Every op below records itself on the tape of its first argument, checks
// shapes (DimensionError carries both shapes) and rejects non-finite results
// with NonFiniteError. Matrices are rank-2; a rank-1 operand of a matrix op
// is read as a single row.

// a[m x k] * b[k x p]
Var matmul(Var a, Var b);
// a[m x k] * b[p x k]^T, for weights stored output-major.
Var matmul_bt(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
// Hadamard product.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a[m x n] + bias[n] added to every row.
Var add_row(Var a, Var bias);

Var sigmoid(Var x);
// ln(0.5 e^x + 0.5); zero at the origin, slope 1/2 there.
Var shifted_softplus(Var x);

// Normalises each row of x over its last axis with the biased variance,
// then applies gamma * x_hat + beta. Rows shorter than 2 are rejected.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// out[t] = sum of message rows whose target is t. Each output cell is
// reduced over its contributions in ascending value order, so the result is
// independent of the order in which messages arrive.
Var scatter_sum(Var messages, std::span<const std::size_t> targets, std::size_t n_rows);

// out[e] = x[index[e]]
Var gather_rows(Var x, std::span<const std::size_t> index);

// [a | b] column-wise concatenation of two matrices with equal row counts.
Var concat_cols(Var a, Var b);

// Same elements under new extents.
Var reshape(Var x, Shape shape);

// Sum of all elements, as a one-element tensor.
Var sum(Var x);

// mean(|pred - target|) over all elements, as a one-element tensor. The
// subgradient at zero residual is taken as 0.
Var mean_abs_error(Var pred, const Tensor& target);

// gate * a + (1 - gate) * b, element-wise. Rounding can push the combination
// one ulp past the segment [min(a,b), max(a,b)]; the result is clamped back
// into it. Gradients are those of the unclamped expression.
Var gated_interpolate(Var gate, Var a, Var b);

}  // namespace molfuse::numerics

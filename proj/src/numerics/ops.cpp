#include "molfuse/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "molfuse/error.hpp"

namespace molfuse::numerics {
namespace {

struct MatDims {
  std::size_t rows;
  std::size_t cols;
};

MatDims mat_dims(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                       shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

Var finish(Tape& tape, Tensor out, std::vector<std::size_t> inputs, Tape::BackwardFn fn,
           const char* op) {
  require_finite(out, op);
  return tape.record(std::move(out), std::move(inputs), std::move(fn));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary_elementwise(Var x, const char* op, F forward_and_slope) {
  Tape& tape = x.tape();
  const Tensor& in = x.value();
  Tensor out(in.shape());
  std::vector<double> slope(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const auto [y, dy] = forward_and_slope(in[i]);
    out[i] = y;
    slope[i] = dy;
  }
  const std::size_t xid = x.id();
  return finish(
      tape, std::move(out), {xid},
      [xid, slope = std::move(slope)](Tape& t, std::size_t self) {
        if (!t.requires_grad(xid)) return;
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * slope[i];
      },
      op);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto [m, k] = mat_dims(av, "matmul");
  const auto [k2, p] = mat_dims(bv, "matmul");
  if (k != k2 || bv.rank() != 2) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()));
  }
  Tensor out({m, p}, 0.0);
  const double* A = av.data().data();
  const double* B = bv.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = A[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = B + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      tape, std::move(out), {aid, bid},
      [aid, bid, m, k, p](Tape& t, std::size_t self) {
        const double* G = t.grad(self).data().data();
        const double* A = t.value(aid).data().data();
        const double* B = t.value(bid).data().data();
        if (t.requires_grad(aid)) {
          double* GA = t.grad_buffer(aid).data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * p;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double* brow = B + kk * p;
              double acc = 0.0;
              for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
              GA[i * k + kk] += acc;
            }
          }
        }
        if (t.requires_grad(bid)) {
          double* GB = t.grad_buffer(bid).data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * p;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double aik = A[i * k + kk];
              if (aik == 0.0) continue;
              double* gbrow = GB + kk * p;
              for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
            }
          }
        }
      },
      "matmul");
}

Var matmul_bt(Var a, Var b) {
  Tape& tape = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto [m, k] = mat_dims(av, "matmul_bt");
  const auto [p, k2] = mat_dims(bv, "matmul_bt");
  if (k != k2 || bv.rank() != 2) {
    throw DimensionError("matmul_bt: inner dimensions differ, " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()) + "^T");
  }
  Tensor out({m, p}, 0.0);
  const double* A = av.data().data();
  const double* B = bv.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += A[i * k + kk] * B[j * k + kk];
      out.data()[i * p + j] = acc;
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      tape, std::move(out), {aid, bid},
      [aid, bid, m, k, p](Tape& t, std::size_t self) {
        const double* G = t.grad(self).data().data();
        const double* A = t.value(aid).data().data();
        const double* B = t.value(bid).data().data();
        const bool need_a = t.requires_grad(aid);
        const bool need_b = t.requires_grad(bid);
        double* GA = need_a ? t.grad_buffer(aid).data().data() : nullptr;
        double* GB = need_b ? t.grad_buffer(bid).data().data() : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            const double g = G[i * p + j];
            if (g == 0.0) continue;
            if (need_a)
              for (std::size_t kk = 0; kk < k; ++kk) GA[i * k + kk] += g * B[j * k + kk];
            if (need_b)
              for (std::size_t kk = 0; kk < k; ++kk) GB[j * k + kk] += g * A[i * k + kk];
          }
        }
      },
      "matmul_bt");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      a.tape(), std::move(out), {aid, bid},
      [aid, bid](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t id : {aid, bid}) {
          if (!t.requires_grad(id)) continue;
          Tensor& gi = t.grad_buffer(id);
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      a.tape(), std::move(out), {aid, bid},
      [aid, bid](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad_buffer(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      a.tape(), std::move(out), {aid, bid},
      [aid, bid](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(aid)) {
          const Tensor& bv = t.value(bid);
          Tensor& ga = t.grad_buffer(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(bid)) {
          const Tensor& av = t.value(aid);
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var scale(Var a, double factor) {
  return unary_elementwise(a, "scale", [factor](double x) {
    return std::pair{x * factor, factor};
  });
}

Var add_row(Var a, Var bias) {
  const auto [m, n] = mat_dims(a.value(), "add_row");
  if (bias.value().size() != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.value().shape()) +
                         " does not match rows of " + shape_string(a.value().shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.value()[j];
  const std::size_t aid = a.id(), bid = bias.id();
  return finish(
      a.tape(), std::move(out), {aid, bid},
      [aid, bid, m, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad_buffer(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      },
      "add_row");
}

Var sigmoid(Var x) {
  return unary_elementwise(x, "sigmoid", [](double v) {
    const double y = stable_sigmoid(v);
    return std::pair{y, y * (1.0 - y)};
  });
}

Var shifted_softplus(Var x) {
  static const double kLn2 = std::log(2.0);
  return unary_elementwise(x, "shifted_softplus", [](double v) {
    const double softplus = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    return std::pair{softplus - kLn2, stable_sigmoid(v)};
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("layer_norm: eps must be positive");
  const auto [m, n] = mat_dims(x.value(), "layer_norm");
  if (n < 2) {
    throw DegenerateInputError("layer_norm: needs at least 2 features per row, got " +
                               std::to_string(n));
  }
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: affine parameters " +
                         shape_string(gamma.value().shape()) + "/" +
                         shape_string(beta.value().shape()) + " do not match " +
                         shape_string(x.value().shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[r * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[r * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xv[r * n + j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
  return finish(
      x.tape(), std::move(out), {xid, gid, bid},
      [xid, gid, bid, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gid);
        if (t.requires_grad(gid)) {
          Tensor& gg = t.grad_buffer(gid);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (t.requires_grad(xid)) {
          Tensor& gx = t.grad_buffer(xid);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * gv[j];
              mean_d += d;
              mean_dh += d * xhat[r * n + j];
            }
            mean_d *= inv_n;
            mean_dh *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dh);
            }
          }
        }
      },
      "layer_norm");
}

Var scatter_sum(Var messages, std::span<const std::size_t> targets, std::size_t n_rows) {
  const Tensor& mv = messages.value();
  const auto [e, c] = mat_dims(mv, "scatter_sum");
  if (targets.size() != e) {
    throw DimensionError("scatter_sum: " + std::to_string(targets.size()) +
                         " targets for messages " + shape_string(mv.shape()));
  }
  // Bucket message ids by target (counting sort keeps arrival order stable).
  std::vector<std::size_t> offsets(n_rows + 1, 0);
  for (std::size_t i = 0; i < e; ++i) {
    if (targets[i] >= n_rows) {
      throw IndexError("scatter_sum: target " + std::to_string(targets[i]) +
                       " out of range for " + std::to_string(n_rows) + " rows");
    }
    ++offsets[targets[i] + 1];
  }
  for (std::size_t r = 0; r < n_rows; ++r) offsets[r + 1] += offsets[r];
  std::vector<std::size_t> order(e);
  {
    std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
    for (std::size_t i = 0; i < e; ++i) order[cursor[targets[i]]++] = i;
  }
  Tensor out({n_rows, c}, 0.0);
  std::vector<double> scratch;
  for (std::size_t r = 0; r < n_rows; ++r) {
    const std::size_t begin = offsets[r], end = offsets[r + 1];
    if (begin == end) continue;
    for (std::size_t col = 0; col < c; ++col) {
      scratch.clear();
      for (std::size_t k = begin; k < end; ++k) scratch.push_back(mv[order[k] * c + col]);
      std::sort(scratch.begin(), scratch.end());
      double acc = 0.0;
      for (double v : scratch) acc += v;
      out[r * c + col] = acc;
    }
  }
  const std::size_t mid = messages.id();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return finish(
      messages.tape(), std::move(out), {mid},
      [mid, c, tgt = std::move(tgt)](Tape& t, std::size_t self) {
        if (!t.requires_grad(mid)) return;
        const Tensor& g = t.grad(self);
        Tensor& gm = t.grad_buffer(mid);
        for (std::size_t i = 0; i < tgt.size(); ++i)
          for (std::size_t col = 0; col < c; ++col) gm[i * c + col] += g[tgt[i] * c + col];
      },
      "scatter_sum");
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  const Tensor& xv = x.value();
  const auto [n, c] = mat_dims(xv, "gather_rows");
  Tensor out({index.size(), c});
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= n) {
      throw IndexError("gather_rows: index " + std::to_string(index[e]) +
                       " out of range for " + std::to_string(n) + " rows");
    }
    std::copy_n(xv.data().data() + index[e] * c, c, out.data().data() + e * c);
  }
  const std::size_t xid = x.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish(
      x.tape(), std::move(out), {xid},
      [xid, c, idx = std::move(idx)](Tape& t, std::size_t self) {
        if (!t.requires_grad(xid)) return;
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t e = 0; e < idx.size(); ++e)
          for (std::size_t col = 0; col < c; ++col) gx[idx[e] * c + col] += g[e * c + col];
      },
      "gather_rows");
}

Var concat_cols(Var a, Var b) {
  const auto [m, p] = mat_dims(a.value(), "concat_cols");
  const auto [m2, q] = mat_dims(b.value(), "concat_cols");
  if (m != m2) {
    throw DimensionError("concat_cols: row counts differ, " +
                         shape_string(a.value().shape()) + " vs " +
                         shape_string(b.value().shape()));
  }
  Tensor out({m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.value().data().data() + i * p, p, out.data().data() + i * (p + q));
    std::copy_n(b.value().data().data() + i * q, q, out.data().data() + i * (p + q) + p);
  }
  const std::size_t aid = a.id(), bid = b.id();
  return finish(
      a.tape(), std::move(out), {aid, bid},
      [aid, bid, m, p, q](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad_buffer(aid);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
        }
      },
      "concat_cols");
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return finish(
      x.tape(), std::move(out), {xid},
      [xid](Tape& t, std::size_t self) {
        if (!t.requires_grad(xid)) return;
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const std::size_t xid = x.id();
  return finish(
      x.tape(), Tensor::scalar(acc), {xid},
      [xid](Tape& t, std::size_t self) {
        if (!t.requires_grad(xid)) return;
        const double g = t.grad(self)[0];
        for (double& v : t.grad_buffer(xid).data()) v += g;
      },
      "sum");
}

Var mean_abs_error(Var pred, const Tensor& target) {
  const Tensor& pv = pred.value();
  if (pv.size() != target.size()) {
    throw DimensionError("mean_abs_error: prediction " + shape_string(pv.shape()) +
                         " vs target " + shape_string(target.shape()));
  }
  if (pv.size() == 0) throw DimensionError("mean_abs_error: empty batch");
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  double acc = 0.0;
  std::vector<double> sign(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double r = pv[i] - target[i];
    acc += std::abs(r);
    sign[i] = r > 0.0 ? inv_n : (r < 0.0 ? -inv_n : 0.0);
  }
  const std::size_t pid = pred.id();
  return finish(
      pred.tape(), Tensor::scalar(acc * inv_n), {pid},
      [pid, sign = std::move(sign)](Tape& t, std::size_t self) {
        if (!t.requires_grad(pid)) return;
        const double g = t.grad(self)[0];
        Tensor& gp = t.grad_buffer(pid);
        for (std::size_t i = 0; i < sign.size(); ++i) gp[i] += g * sign[i];
      },
      "mean_abs_error");
}

Var gated_interpolate(Var gate, Var a, Var b) {
  require_same_shape(gate.value(), a.value(), "gated_interpolate");
  require_same_shape(a.value(), b.value(), "gated_interpolate");
  const Tensor& gv = gate.value();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double f = gv[i] * av[i] + (1.0 - gv[i]) * bv[i];
    out[i] = std::clamp(f, std::min(av[i], bv[i]), std::max(av[i], bv[i]));
  }
  const std::size_t gid = gate.id(), aid = a.id(), bid = b.id();
  return finish(
      gate.tape(), std::move(out), {gid, aid, bid},
      [gid, aid, bid](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gid);
        if (t.requires_grad(gid)) {
          const Tensor& av = t.value(aid);
          const Tensor& bv = t.value(bid);
          Tensor& gg = t.grad_buffer(gid);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i] += g[i] * (av[i] - bv[i]);
        }
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad_buffer(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gv[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (1.0 - gv[i]);
        }
      },
      "gated_interpolate");
}

}  // namespace molfuse::numerics
